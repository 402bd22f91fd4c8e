//! GRU cell, embeddings, bidirectional encoder, and the output readout.
//!
//! One GRU formulation serves three call sites — the recurrent
//! encoder/decoder cells and the attention gating layer. [`gru_apply`]
//! accepts vector operands (a plain recurrent step) as well as one matrix
//! operand (the gating layer applies the same step to every annotation row
//! at once; the vector operand broadcasts over rows).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{shape_err, Shape, Tensor};

/// The nine learned tensors of one GRU:
/// gates `z = σ(W_z·x + U_z·h + b_z)`, `r = σ(W_r·x + U_r·h + b_r)`,
/// candidate `h̄ = tanh(W·x + U(r⊙h) + b)`,
/// state `h' = (1−z)⊙h + z⊙h̄`.
///
/// `W_*` are `d_state×d_in` and apply to the input operand, `U_*` are
/// `d_state×d_state` and apply to the history operand, biases are `d_state`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl GruParams {
    /// All-zero parameters of the given geometry.
    pub fn zeros(d_in: usize, d_state: usize) -> GruParams {
        let w = || Tensor::zeros(Shape::Matrix(d_state, d_in));
        let u = || Tensor::zeros(Shape::Matrix(d_state, d_state));
        let b = || Tensor::zeros(Shape::Vector(d_state));
        GruParams {
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w: w(),
            u: u(),
            b: b(),
        }
    }

    pub fn d_state(&self) -> usize {
        self.b.shape().numel()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn check(&self, d_in: usize, d_state: usize) -> Result<()> {
        let want_w = Shape::Matrix(d_state, d_in);
        let want_u = Shape::Matrix(d_state, d_state);
        let want_b = Shape::Vector(d_state);
        for (t, want) in [
            (&self.w_z, want_w),
            (&self.w_r, want_w),
            (&self.w, want_w),
            (&self.u_z, want_u),
            (&self.u_r, want_u),
            (&self.u, want_u),
            (&self.b_z, want_b),
            (&self.b_r, want_b),
            (&self.b, want_b),
        ] {
            if t.shape() != want {
                return Err(shape_err("gru params", t.shape(), want));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> GruNodes {
        GruNodes {
            w_z: tape.leaf(self.w_z.clone()),
            u_z: tape.leaf(self.u_z.clone()),
            b_z: tape.leaf(self.b_z.clone()),
            w_r: tape.leaf(self.w_r.clone()),
            u_r: tape.leaf(self.u_r.clone()),
            b_r: tape.leaf(self.b_r.clone()),
            w: tape.leaf(self.w.clone()),
            u: tape.leaf(self.u.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

/// Tape bindings of [`GruParams`].
#[derive(Clone, Copy)]
pub struct GruNodes {
    pub w_z: NodeId,
    pub u_z: NodeId,
    pub b_z: NodeId,
    pub w_r: NodeId,
    pub u_r: NodeId,
    pub b_r: NodeId,
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
}

/// The gate intermediates of one GRU application. For a recurrent cell
/// they are vectors; for the gating layer they are `n×d_state` matrices
/// with one row per source position.
#[derive(Clone, Debug)]
pub struct GateActivations {
    /// Update gate, componentwise in (0,1).
    pub z: Tensor,
    /// Reset gate, componentwise in (0,1).
    pub r: Tensor,
    /// Candidate state, componentwise in (−1,1).
    pub hbar: Tensor,
    /// New state `(1−z)⊙h + z⊙h̄`.
    pub refined: Tensor,
}

pub(crate) struct GruStep {
    pub h: NodeId,
    pub z: NodeId,
    pub r: NodeId,
    pub hbar: NodeId,
}

impl GruStep {
    pub(crate) fn activations(&self, tape: &Tape) -> GateActivations {
        GateActivations {
            z: tape.value(self.z).clone(),
            r: tape.value(self.r).clone(),
            hbar: tape.value(self.hbar).clone(),
            refined: tape.value(self.h).clone(),
        }
    }
}

/// `weight · operand` for a vector operand, or row-wise (`operand · Wᵀ`)
/// for a matrix operand holding one vector per row.
fn lin(tape: &mut Tape, weight: NodeId, operand: NodeId) -> Result<NodeId> {
    match tape.value(operand).shape() {
        Shape::Vector(_) => tape.matmul(weight, operand),
        Shape::Matrix(_, _) => tape.matmul_nt(operand, weight),
        s => Err(shape_err("lin", s, s)),
    }
}

/// Sum that tolerates one vector operand against a matrix (row broadcast).
fn add_any(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    match (sa, sb) {
        (Shape::Vector(_), Shape::Matrix(_, _)) => tape.add(b, a),
        _ => tape.add(a, b),
    }
}

/// One GRU application on the tape. `history` and `input` may each be a
/// vector, or one of them an `n`-row matrix (then the step runs on every
/// row with the vector operand broadcast).
pub(crate) fn gru_apply(
    tape: &mut Tape,
    p: &GruNodes,
    history: NodeId,
    input: NodeId,
) -> Result<GruStep> {
    let wz_x = lin(tape, p.w_z, input)?;
    let uz_h = lin(tape, p.u_z, history)?;
    let z_pre = add_any(tape, wz_x, uz_h)?;
    let z_pre = add_any(tape, z_pre, p.b_z)?;
    let z = tape.sigmoid(z_pre);

    let wr_x = lin(tape, p.w_r, input)?;
    let ur_h = lin(tape, p.u_r, history)?;
    let r_pre = add_any(tape, wr_x, ur_h)?;
    let r_pre = add_any(tape, r_pre, p.b_r)?;
    let r = tape.sigmoid(r_pre);

    let rh = tape.mul(r, history)?;
    let w_x = lin(tape, p.w, input)?;
    let u_rh = lin(tape, p.u, rh)?;
    let hbar_pre = add_any(tape, w_x, u_rh)?;
    let hbar_pre = add_any(tape, hbar_pre, p.b)?;
    let hbar = tape.tanh(hbar_pre);

    let h = tape.convex_combine(z, history, hbar)?;
    Ok(GruStep { h, z, r, hbar })
}

/// One recurrent GRU step: new state plus the gate intermediates.
pub fn gru_cell(h_prev: &Tensor, x: &Tensor, p: &GruParams) -> Result<(Tensor, GateActivations)> {
    let mut tape = Tape::new();
    let nodes = p.bind(&mut tape);
    let h = tape.leaf(h_prev.clone());
    let xn = tape.leaf(x.clone());
    let step = gru_apply(&mut tape, &nodes, h, xn)?;
    let acts = step.activations(&tape);
    Ok((tape.value(step.h).clone(), acts))
}

/// Embedding table, one `d_w` row per vocabulary id.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub table: Tensor,
}

impl EmbeddingParams {
    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

/// Bidirectional-encoder output: `n × 2d_h` annotation matrix (forward ‖
/// backward halves) and the validity mask. Padded rows are all-zero.
#[derive(Clone, Debug)]
pub struct EncoderAnnotations {
    pub h: Tensor,
    pub mask: Vec<bool>,
}

impl EncoderAnnotations {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn active_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Builds the annotation matrix on a tape: forward GRU left to right from a
/// zero state, backward GRU right to left, per-position concatenation.
/// Only the unpadded prefix is processed; padded rows are zero.
pub(crate) fn encode_graph(
    tape: &mut Tape,
    emb: NodeId,
    fwd: &GruNodes,
    bwd: &GruNodes,
    src_ids: &[u32],
    mask: &[bool],
) -> Result<NodeId> {
    if src_ids.is_empty() {
        return Err(Error::Empty("source sentence"));
    }
    if src_ids.len() != mask.len() {
        return Err(Error::LengthMismatch { left: src_ids.len(), right: mask.len() });
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::Empty("active source positions"));
    }
    debug_assert!(mask[..active].iter().all(|&m| m), "mask must be prefix-shaped");

    let d_state = tape.value(fwd.b).shape().numel();
    let embedded: Vec<NodeId> =
        src_ids[..active].iter().map(|&id| tape.embed(emb, id)).collect::<Result<_>>()?;

    let zero = tape.leaf(Tensor::zeros(Shape::Vector(d_state)));
    let mut forward = Vec::with_capacity(active);
    let mut state = zero;
    for &x in &embedded {
        state = gru_apply(tape, fwd, state, x)?.h;
        forward.push(state);
    }
    let mut backward = vec![zero; active];
    let mut state = zero;
    for (i, &x) in embedded.iter().enumerate().rev() {
        state = gru_apply(tape, bwd, state, x)?.h;
        backward[i] = state;
    }

    let zero_row = tape.leaf(Tensor::zeros(Shape::Vector(2 * d_state)));
    let mut rows = Vec::with_capacity(src_ids.len());
    for i in 0..src_ids.len() {
        if i < active {
            rows.push(tape.concat(forward[i], backward[i])?);
        } else {
            rows.push(zero_row);
        }
    }
    tape.stack_rows(&rows)
}

/// Runs the bidirectional encoder over one sentence.
pub fn encode(
    src_ids: &[u32],
    mask: &[bool],
    emb: &EmbeddingParams,
    fwd: &GruParams,
    bwd: &GruParams,
) -> Result<EncoderAnnotations> {
    let mut tape = Tape::new();
    let emb_node = tape.leaf(emb.table.clone());
    let fwd_nodes = fwd.bind(&mut tape);
    let bwd_nodes = bwd.bind(&mut tape);
    let h = encode_graph(&mut tape, emb_node, &fwd_nodes, &bwd_nodes, src_ids, mask)?;
    Ok(EncoderAnnotations { h: tape.value(h).clone(), mask: mask.to_vec() })
}

/// Readout weights: logits = `W_o · tanh(W_e·e + W_s·s + W_c·c + b_t) + b_o`.
#[derive(Clone, Debug)]
pub struct ReadoutParams {
    pub w_e: Tensor,
    pub w_s: Tensor,
    pub w_c: Tensor,
    pub b_t: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Clone, Copy)]
pub struct ReadoutNodes {
    pub w_e: NodeId,
    pub w_s: NodeId,
    pub w_c: NodeId,
    pub b_t: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
}

impl ReadoutParams {
    pub fn bind(&self, tape: &mut Tape) -> ReadoutNodes {
        ReadoutNodes {
            w_e: tape.leaf(self.w_e.clone()),
            w_s: tape.leaf(self.w_s.clone()),
            w_c: tape.leaf(self.w_c.clone()),
            b_t: tape.leaf(self.b_t.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            b_o: tape.leaf(self.b_o.clone()),
        }
    }
}

pub(crate) fn readout_graph(
    tape: &mut Tape,
    p: &ReadoutNodes,
    e_prev: NodeId,
    s: NodeId,
    c: NodeId,
) -> Result<NodeId> {
    let we_e = tape.matmul(p.w_e, e_prev)?;
    let ws_s = tape.matmul(p.w_s, s)?;
    let wc_c = tape.matmul(p.w_c, c)?;
    let sum = tape.add(we_e, ws_s)?;
    let sum = tape.add(sum, wc_c)?;
    let sum = tape.add(sum, p.b_t)?;
    let t = tape.tanh(sum);
    let logits = tape.matmul(p.w_o, t)?;
    tape.add(logits, p.b_o)
}

/// Target-word logits from the previous embedding, decoder state and
/// context vector.
pub fn readout(e_prev: &Tensor, s: &Tensor, c: &Tensor, p: &ReadoutParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = p.bind(&mut tape);
    let e = tape.leaf(e_prev.clone());
    let sn = tape.leaf(s.clone());
    let cn = tape.leaf(c.clone());
    let logits = readout_graph(&mut tape, &nodes, e, sn, cn)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::masked_softmax;

    fn scalar_gru(w: f64, u: f64, b: f64) -> GruParams {
        let mut p = GruParams::zeros(1, 1);
        for t in [&mut p.w_z, &mut p.w_r, &mut p.w] {
            t.data_mut()[0] = w;
        }
        for t in [&mut p.u_z, &mut p.u_r, &mut p.u] {
            t.data_mut()[0] = u;
        }
        for t in [&mut p.b_z, &mut p.b_r, &mut p.b] {
            t.data_mut()[0] = b;
        }
        p
    }

    pub(crate) fn rand_gru(d_in: usize, d_state: usize, rng: &mut Rng) -> GruParams {
        let mut p = GruParams::zeros(d_in, d_state);
        for t in [
            &mut p.w_z,
            &mut p.u_z,
            &mut p.b_z,
            &mut p.w_r,
            &mut p.u_r,
            &mut p.b_r,
            &mut p.w,
            &mut p.u,
            &mut p.b,
        ] {
            for x in t.data_mut() {
                *x = rng.normal() * 0.5;
            }
        }
        p
    }

    fn rand_vec(n: usize, rng: &mut Rng) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.normal() * 0.5).collect())
    }

    #[test]
    fn update_gate_closed_keeps_previous_state() {
        let mut rng = Rng::seed_from_u64(2);
        let mut p = rand_gru(3, 4, &mut rng);
        p.w_z = Tensor::zeros(Shape::Matrix(4, 3));
        p.u_z = Tensor::zeros(Shape::Matrix(4, 4));
        p.b_z = Tensor::full(Shape::Vector(4), -30.0);
        let h_prev = rand_vec(4, &mut rng);
        let x = rand_vec(3, &mut rng);
        let (h_new, _) = gru_cell(&h_prev, &x, &p).unwrap();
        assert!(h_new.max_abs_diff(&h_prev) < 1e-8);
    }

    #[test]
    fn update_gate_open_returns_candidate() {
        let mut rng = Rng::seed_from_u64(3);
        let mut p = rand_gru(3, 4, &mut rng);
        p.w_z = Tensor::zeros(Shape::Matrix(4, 3));
        p.u_z = Tensor::zeros(Shape::Matrix(4, 4));
        p.b_z = Tensor::full(Shape::Vector(4), 30.0);
        let h_prev = rand_vec(4, &mut rng);
        let x = rand_vec(3, &mut rng);
        let (h_new, acts) = gru_cell(&h_prev, &x, &p).unwrap();
        assert!(h_new.max_abs_diff(&acts.hbar) < 1e-8);
    }

    // d_state = d_in = 1, weights 1, biases 0, h_prev = 0.5, x = 0.2.
    // Frozen from the scalar formulas: z = r = σ(0.7),
    // h̄ = tanh(0.2 + σ(0.7)·0.5), h' = (1−z)·0.5 + z·h̄.
    #[test]
    fn scalar_calculator_case() {
        let p = scalar_gru(1.0, 1.0, 0.0);
        let h_prev = Tensor::vector(alloc::vec![0.5]);
        let x = Tensor::vector(alloc::vec![0.2]);
        let (h_new, acts) = gru_cell(&h_prev, &x, &p).unwrap();
        assert!((acts.z.data()[0] - 0.66818777216816616).abs() < 1e-15);
        assert!((acts.r.data()[0] - 0.66818777216816616).abs() < 1e-15);
        assert!((acts.hbar.data()[0] - 0.48850425493165223).abs() < 1e-15);
        assert!((h_new.data()[0] - 0.49231868371336751).abs() < 1e-15);
    }

    #[test]
    fn gru_state_is_a_convex_combination() {
        let mut rng = Rng::seed_from_u64(4);
        for _ in 0..25 {
            let p = rand_gru(2, 3, &mut rng);
            let h_prev = rand_vec(3, &mut rng);
            let x = rand_vec(2, &mut rng);
            let (h_new, _) = gru_cell(&h_prev, &x, &p).unwrap();
            for (h, hp) in h_new.data().iter().zip(h_prev.data()) {
                assert!(h.abs() <= f64::max(hp.abs(), 1.0) + 1e-12);
            }
        }
    }

    fn toy_embedding(vocab: usize, dim: usize, rng: &mut Rng) -> EmbeddingParams {
        let mut table = Tensor::zeros(Shape::Matrix(vocab, dim));
        for x in table.data_mut() {
            *x = rng.normal();
        }
        EmbeddingParams { table }
    }

    #[test]
    fn encoder_rows_are_bounded_and_padding_is_zero() {
        let mut rng = Rng::seed_from_u64(5);
        let emb = toy_embedding(6, 3, &mut rng);
        let fwd = rand_gru(3, 4, &mut rng);
        let bwd = rand_gru(3, 4, &mut rng);
        let ids = [1u32, 4, 2, 0, 0];
        let mask = [true, true, true, false, false];
        let enc = encode(&ids, &mask, &emb, &fwd, &bwd).unwrap();
        assert_eq!(enc.h.shape(), Shape::Matrix(5, 8));
        for i in 0..3 {
            for &v in enc.h.row(i) {
                assert!(v > -1.0 && v < 1.0);
            }
        }
        for i in 3..5 {
            assert!(enc.h.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_single_token_is_one_step_each_way() {
        let mut rng = Rng::seed_from_u64(6);
        let emb = toy_embedding(5, 3, &mut rng);
        let fwd = rand_gru(3, 4, &mut rng);
        let bwd = rand_gru(3, 4, &mut rng);
        let enc = encode(&[2], &[true], &emb, &fwd, &bwd).unwrap();
        let x = Tensor::vector(emb.table.row(2).to_vec());
        let zero = Tensor::zeros(Shape::Vector(4));
        let (hf, _) = gru_cell(&zero, &x, &fwd).unwrap();
        let (hb, _) = gru_cell(&zero, &x, &bwd).unwrap();
        let mut want = hf.data().to_vec();
        want.extend_from_slice(hb.data());
        assert!(Tensor::vector(want).max_abs_diff(&Tensor::vector(enc.h.row(0).to_vec())) < 1e-15);
    }

    // Reversing the tokens and swapping the direction parameters must give
    // the row-reversed annotation matrix with halves swapped.
    #[test]
    fn encoder_reversal_symmetry() {
        let mut rng = Rng::seed_from_u64(7);
        let emb = toy_embedding(8, 3, &mut rng);
        let fwd = rand_gru(3, 4, &mut rng);
        let bwd = rand_gru(3, 4, &mut rng);
        let ids = [3u32, 1, 7, 5];
        let mask = [true; 4];
        let enc = encode(&ids, &mask, &emb, &fwd, &bwd).unwrap();
        let rev_ids: Vec<u32> = ids.iter().rev().copied().collect();
        let enc_rev = encode(&rev_ids, &mask, &emb, &bwd, &fwd).unwrap();
        for i in 0..4 {
            let row = enc.h.row(i);
            let other = enc_rev.h.row(3 - i);
            let (f, b) = row.split_at(4);
            let (rf, rb) = other.split_at(4);
            for (x, y) in f.iter().zip(rb) {
                assert!((x - y).abs() < 1e-14);
            }
            for (x, y) in b.iter().zip(rf) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn encoder_ignores_padding_ids() {
        let mut rng = Rng::seed_from_u64(8);
        let emb = toy_embedding(6, 3, &mut rng);
        let fwd = rand_gru(3, 4, &mut rng);
        let bwd = rand_gru(3, 4, &mut rng);
        let mask = [true, true, false, false];
        let a = encode(&[1, 2, 0, 0], &mask, &emb, &fwd, &bwd).unwrap();
        let b = encode(&[1, 2, 5, 3], &mask, &emb, &fwd, &bwd).unwrap();
        assert!(a.h.max_abs_diff(&b.h) == 0.0);
    }

    #[test]
    fn encoder_rejects_out_of_vocabulary_ids() {
        let mut rng = Rng::seed_from_u64(9);
        let emb = toy_embedding(4, 3, &mut rng);
        let fwd = rand_gru(3, 4, &mut rng);
        let bwd = rand_gru(3, 4, &mut rng);
        let err = encode(&[9], &[true], &emb, &fwd, &bwd).unwrap_err();
        assert_eq!(err, Error::TokenOutOfRange { id: 9, vocab: 4 });
    }

    #[test]
    fn readout_all_zero_weights_returns_output_bias() {
        let p = ReadoutParams {
            w_e: Tensor::zeros(Shape::Matrix(2, 3)),
            w_s: Tensor::zeros(Shape::Matrix(2, 2)),
            w_c: Tensor::zeros(Shape::Matrix(2, 4)),
            b_t: Tensor::zeros(Shape::Vector(2)),
            w_o: Tensor::zeros(Shape::Matrix(5, 2)),
            b_o: Tensor::vector(alloc::vec![0.1, -0.2, 0.3, 0.0, 2.0]),
        };
        let logits = readout(
            &Tensor::vector(alloc::vec![1.0, 2.0, 3.0]),
            &Tensor::vector(alloc::vec![-1.0, 1.0]),
            &Tensor::vector(alloc::vec![0.5; 4]),
            &p,
        )
        .unwrap();
        assert_eq!(logits, p.b_o);
    }

    // 2-word vocabulary, 1-dim weights; frozen from the closed form
    // t = tanh(0.15 + 0.21 + 0.5 + 0.1), logits = [t + 0.05, −2t − 0.4].
    #[test]
    fn readout_scalar_case() {
        let p = ReadoutParams {
            w_e: Tensor::matrix(1, 1, alloc::vec![0.5]).unwrap(),
            w_s: Tensor::matrix(1, 1, alloc::vec![-0.3]).unwrap(),
            w_c: Tensor::matrix(1, 1, alloc::vec![2.0]).unwrap(),
            b_t: Tensor::vector(alloc::vec![0.1]),
            w_o: Tensor::matrix(2, 1, alloc::vec![1.0, -2.0]).unwrap(),
            b_o: Tensor::vector(alloc::vec![0.05, -0.4]),
        };
        let logits = readout(
            &Tensor::vector(alloc::vec![0.3]),
            &Tensor::vector(alloc::vec![-0.7]),
            &Tensor::vector(alloc::vec![0.25]),
            &p,
        )
        .unwrap();
        assert!((logits.data()[0] - 0.79427686736183722).abs() < 1e-15);
        assert!((logits.data()[1] - -1.8885537347236743).abs() < 1e-15);
    }

    #[test]
    fn softmax_argmax_is_shift_invariant() {
        let mut rng = Rng::seed_from_u64(10);
        for _ in 0..20 {
            let logits = rand_vec(6, &mut rng);
            let mut shifted = logits.clone();
            for x in shifted.data_mut() {
                *x += 3.75;
            }
            let mask = [true; 6];
            let p = masked_softmax(&logits, &mask).unwrap();
            let q = masked_softmax(&shifted, &mask).unwrap();
            let argmax = |t: &Tensor| {
                t.data()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&p), argmax(&q));
        }
    }
}
