//! The three attention modes over encoder annotations.
//!
//! - [`att`]: additive-scoring attention, `e_i = v_aᵀ tanh(W_a·q + U_a·h_i
//!   (+ b_a))`, softmax weights, context = weighted row sum.
//! - [`gate`]: a one-step GRU applied per annotation row with the previous
//!   decoder state as input, producing query-dependent annotations.
//! - [`gatt`]: attention over the gate-refined annotations (context width
//!   `2d_h`).
//! - [`gatt_inv`]: the operand-swapped variant — the decoder state is the
//!   GRU history and each annotation row the input, so the refined rows and
//!   the context have width `d_h`.
//!
//! Cost note: the per-sentence constants (`U_z·h_i`, `U_r·h_i` for the
//! gate, `U_a·h_i` for vanilla scoring, the `W·h_i` products for the
//! inverted gate) are hoisted via [`GruCache`]/`hu` by the decoder; the
//! `U(r⊙h)` product depends on the step and is what makes the gated modes
//! inherently more expensive per step.

use alloc::vec::Vec;

use crate::error::Result;
use crate::layers::{gru_apply_with, GateActivations, GruCache, GruNodes, GruParams};
use crate::layers::EncoderAnnotations;
use crate::tape::{NodeId, Tape};
use crate::tensor::{shape_err, Shape, Tensor};

/// Alignment-model weights: `v_a` (`d_a`), `W_a` (`d_a×d_h`) applied to the
/// query, `U_a` (`d_a×d_ann`) applied to the attended rows, optional score
/// bias `b_a`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub v_a: Tensor,
    pub w_a: Tensor,
    pub u_a: Tensor,
    pub b_a: Option<Tensor>,
}

impl AttentionParams {
    pub fn check(&self, d_query: usize, d_ann: usize) -> Result<()> {
        let d_a = self.v_a.shape().numel();
        if self.w_a.shape() != Shape::Matrix(d_a, d_query) {
            return Err(shape_err("attention W_a", self.w_a.shape(), Shape::Matrix(d_a, d_query)));
        }
        if self.u_a.shape() != Shape::Matrix(d_a, d_ann) {
            return Err(shape_err("attention U_a", self.u_a.shape(), Shape::Matrix(d_a, d_ann)));
        }
        if let Some(b) = &self.b_a {
            if b.shape() != Shape::Vector(d_a) {
                return Err(shape_err("attention b_a", b.shape(), Shape::Vector(d_a)));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionNodes {
        AttentionNodes {
            v_a: tape.leaf(self.v_a.clone()),
            w_a: tape.leaf(self.w_a.clone()),
            u_a: tape.leaf(self.u_a.clone()),
            b_a: self.b_a.as_ref().map(|b| tape.leaf(b.clone())),
        }
    }
}

#[derive(Clone, Copy)]
pub struct AttentionNodes {
    pub v_a: NodeId,
    pub w_a: NodeId,
    pub u_a: NodeId,
    pub b_a: Option<NodeId>,
}

/// One attention application: context vector, weights, raw scores, and the
/// gating-layer intermediates when a gated mode produced it.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub context: Tensor,
    pub weights: Tensor,
    pub scores: Tensor,
    pub gates: Option<GateActivations>,
}

pub(crate) struct AttStep {
    pub context: NodeId,
    pub weights: NodeId,
    pub scores: NodeId,
}

impl AttStep {
    fn output(&self, tape: &Tape, gates: Option<GateActivations>) -> AttentionOutput {
        AttentionOutput {
            context: tape.value(self.context).clone(),
            weights: tape.value(self.weights).clone(),
            scores: tape.value(self.scores).clone(),
            gates,
        }
    }
}

/// Attention on the tape. `hu` may carry a precomputed `H_eff·U_aᵀ` (valid
/// only while `h_eff` is unchanged, i.e. for the vanilla mode).
pub(crate) fn att_graph(
    tape: &mut Tape,
    p: &AttentionNodes,
    h_eff: NodeId,
    hu: Option<NodeId>,
    query: NodeId,
    mask: &[bool],
) -> Result<AttStep> {
    let hu = match hu {
        Some(node) => node,
        None => tape.matmul_nt(h_eff, p.u_a)?,
    };
    let mut wq = tape.matmul(p.w_a, query)?;
    if let Some(b) = p.b_a {
        wq = tape.add(wq, b)?;
    }
    let pre = tape.add(hu, wq)?;
    let t = tape.tanh(pre);
    let scores = tape.matmul(t, p.v_a)?;
    let weights = tape.masked_softmax(scores, mask)?;
    let context = tape.vecmat(weights, h_eff)?;
    Ok(AttStep { context, weights, scores })
}

/// Vanilla attention over (possibly refined) annotation rows.
pub fn att(
    h_eff: &Tensor,
    query: &Tensor,
    mask: &[bool],
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let nodes = p.bind(&mut tape);
    let h = tape.leaf(h_eff.clone());
    let q = tape.leaf(query.clone());
    let step = att_graph(&mut tape, &nodes, h, None, q, mask)?;
    Ok(step.output(&tape, None))
}

/// Zeroes the rows of `m` whose mask entry is false. No-op when all are
/// active.
fn mask_rows(tape: &mut Tape, m: NodeId, mask: &[bool]) -> Result<NodeId> {
    if mask.iter().all(|&x| x) {
        return Ok(m);
    }
    let cols = tape.value(m).cols();
    let mut keep = Tensor::zeros(tape.value(m).shape());
    for (i, &active) in mask.iter().enumerate() {
        if active {
            for x in keep.row_mut(i) {
                *x = 1.0;
            }
        }
    }
    let _ = cols;
    let keep = tape.leaf(keep);
    tape.mul(m, keep)
}

/// Gating layer on the tape: one GRU step per annotation row with the rows
/// as history and the query as input. Padded rows are zeroed.
pub(crate) fn gate_graph(
    tape: &mut Tape,
    p: &GruNodes,
    h: NodeId,
    s_prev: NodeId,
    mask: &[bool],
    cache: Option<&GruCache>,
) -> Result<(NodeId, crate::layers::GruStep)> {
    let step = gru_apply_with(tape, p, h, s_prev, cache)?;
    let refined = mask_rows(tape, step.h, mask)?;
    Ok((refined, step))
}

/// Refines annotations with the gating layer: row i becomes
/// `gru(history=h_i, input=s_prev)`.
pub fn gate(h: &EncoderAnnotations, s_prev: &Tensor, p: &GruParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = p.bind(&mut tape);
    let hn = tape.leaf(h.h.clone());
    let sn = tape.leaf(s_prev.clone());
    let (refined, _) = gate_graph(&mut tape, &nodes, hn, sn, &h.mask, None)?;
    Ok(tape.value(refined).clone())
}

pub(crate) struct GattStep {
    pub att: AttStep,
    pub gru: crate::layers::GruStep,
}

/// GAtt on the tape: attention over the gate-refined annotations.
pub(crate) fn gatt_graph(
    tape: &mut Tape,
    gate_p: &GruNodes,
    att_p: &AttentionNodes,
    h: NodeId,
    s_prev: NodeId,
    mask: &[bool],
    cache: Option<&GruCache>,
) -> Result<GattStep> {
    let (refined, gru) = gate_graph(tape, gate_p, h, s_prev, mask, cache)?;
    let att = att_graph(tape, att_p, refined, None, s_prev, mask)?;
    Ok(GattStep { att, gru })
}

/// GRU-gated attention: `att(gate(H, s_prev), s_prev)`. Context width is
/// the annotation width `2d_h`.
pub fn gatt(
    h: &EncoderAnnotations,
    s_prev: &Tensor,
    gate_p: &GruParams,
    att_p: &AttentionParams,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let gate_nodes = gate_p.bind(&mut tape);
    let att_nodes = att_p.bind(&mut tape);
    let hn = tape.leaf(h.h.clone());
    let sn = tape.leaf(s_prev.clone());
    let step = gatt_graph(&mut tape, &gate_nodes, &att_nodes, hn, sn, &h.mask, None)?;
    let gates = step.gru.activations(&tape);
    Ok(step.att.output(&tape, Some(gates)))
}

/// Inverted gating on the tape: the decoder state is the history and each
/// annotation row the input, refined rows have the state width `d_h`.
pub(crate) fn gatt_inv_graph(
    tape: &mut Tape,
    gate_p: &GruNodes,
    att_p: &AttentionNodes,
    h: NodeId,
    s_prev: NodeId,
    mask: &[bool],
    cache: Option<&GruCache>,
) -> Result<GattStep> {
    let step = gru_apply_with(tape, gate_p, s_prev, h, cache)?;
    let refined = mask_rows(tape, step.h, mask)?;
    let att = att_graph(tape, att_p, refined, None, s_prev, mask)?;
    Ok(GattStep { att, gru: step })
}

/// Operand-swapped gated attention: row i of the refined matrix is
/// `gru(history=s_prev, input=h_i)`; context width is `d_h`.
pub fn gatt_inv(
    h: &EncoderAnnotations,
    s_prev: &Tensor,
    gate_p: &GruParams,
    att_p: &AttentionParams,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let gate_nodes = gate_p.bind(&mut tape);
    let att_nodes = att_p.bind(&mut tape);
    let hn = tape.leaf(h.h.clone());
    let sn = tape.leaf(s_prev.clone());
    let step = gatt_inv_graph(&mut tape, &gate_nodes, &att_nodes, hn, sn, &h.mask, None)?;
    let gates = step.gru.activations(&tape);
    Ok(step.att.output(&tape, Some(gates)))
}

/// Forces a GRU's update gate shut so the step returns its history
/// unchanged (up to σ(−30) ≈ 1e−13). Used by tests and the reduction
/// oracle.
pub fn force_update_gate(p: &mut GruParams, open: bool) {
    let d_state = p.d_state();
    let d_in = p.d_in();
    p.w_z = Tensor::zeros(Shape::Matrix(d_state, d_in));
    p.u_z = Tensor::zeros(Shape::Matrix(d_state, d_state));
    p.b_z = Tensor::full(Shape::Vector(d_state), if open { 30.0 } else { -30.0 });
}
