//! Named parameter storage with gradient accumulators and the Adadelta
//! update, plus parameter initialization.
//!
//! Iteration order is insertion order everywhere, so checkpoints and the
//! global gradient norm are deterministic.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    // Adadelta running averages: squared gradients, squared updates.
    sq_grad: Tensor,
    sq_delta: Tensor,
}

/// Ordered map of named parameters with per-parameter optimizer state.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(self.lookup(name).is_none(), "duplicate parameter name {name}");
        let shape = value.shape();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(shape),
            sq_grad: Tensor::zeros(shape),
            sq_delta: Tensor::zeros(shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Replaces a parameter value; shape must match. Used by checkpoint load.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                detail: alloc::format!(
                    "{}: {:?} vs {:?}",
                    self.params[id.0].name,
                    self.params[id.0].value.shape(),
                    value.shape()
                ),
            });
        }
        self.params[id.0].value = value;
        Ok(())
    }

    /// In insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if g.shape() != p.grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                detail: alloc::format!("{:?} vs {:?}", p.grad.shape(), g.shape()),
            });
        }
        for (slot, x) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *slot += x;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for x in p.grad.data_mut() {
                *x = 0.0;
            }
        }
    }

    /// L2 norm over every gradient entry of every parameter.
    pub fn global_grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for p in &self.params {
            for &g in p.grad.data() {
                sq += g * g;
            }
        }
        libm::sqrt(sq)
    }

    /// Scales all gradients by `max_norm / norm` when the global L2 norm
    /// exceeds `max_norm`; otherwise leaves them untouched. Returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        assert!(max_norm > 0.0, "max_norm must be positive");
        let norm = self.global_grad_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for p in &mut self.params {
                for g in p.grad.data_mut() {
                    *g *= scale;
                }
            }
        }
        norm
    }

    /// One Adadelta update (Zeiler 2012) on every parameter:
    ///
    /// ```text
    /// E[g²]  ← ρ·E[g²]  + (1−ρ)·g²
    /// Δ       = −( √(E[Δ²]+ε) / √(E[g²]+ε) ) · g
    /// E[Δ²] ← ρ·E[Δ²] + (1−ρ)·Δ²
    /// x       ← x + Δ
    /// ```
    ///
    /// Gradients are zeroed afterwards.
    pub fn adadelta_step(&mut self, rho: f64, eps: f64) {
        for p in &mut self.params {
            for k in 0..p.grad.data().len() {
                let g = p.grad.data()[k];
                let sq_g = rho * p.sq_grad.data()[k] + (1.0 - rho) * g * g;
                p.sq_grad.data_mut()[k] = sq_g;
                let delta = -(libm::sqrt(p.sq_delta.data()[k] + eps) / libm::sqrt(sq_g + eps)) * g;
                p.sq_delta.data_mut()[k] = rho * p.sq_delta.data()[k] + (1.0 - rho) * delta * delta;
                p.value.data_mut()[k] += delta;
            }
        }
        self.zero_grads();
    }

    /// Finiteness check across all parameter values.
    pub fn check_finite(&self) -> Result<()> {
        for p in &self.params {
            p.value.check_finite("parameter")?;
        }
        Ok(())
    }
}

/// Initialization family for [`init_param`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// i.i.d. N(0, 0.01²).
    Gaussian,
    /// Random orthogonal matrix (square shapes only), from the Householder
    /// QR of a standard Gaussian matrix with the R diagonal sign-fixed.
    Orthogonal,
}

/// Draws a fresh parameter tensor. Deterministic given the generator state.
pub fn init_param(shape: Shape, kind: InitKind, rng: &mut Rng) -> Result<Tensor> {
    match kind {
        InitKind::Gaussian => {
            let mut t = Tensor::zeros(shape);
            for x in t.data_mut() {
                *x = 0.01 * rng.normal();
            }
            Ok(t)
        }
        InitKind::Orthogonal => match shape {
            Shape::Matrix(n, m) if n == m => Ok(random_orthogonal(n, rng)),
            Shape::Matrix(n, m) => Err(Error::OrthogonalNonSquare { rows: n, cols: m }),
            Shape::Vector(n) => Err(Error::OrthogonalNonSquare { rows: n, cols: 1 }),
            Shape::Scalar => Err(Error::OrthogonalNonSquare { rows: 1, cols: 1 }),
        },
    }
}

/// Q from the Householder QR of a standard Gaussian n×n matrix, with each
/// column scaled so the corresponding R diagonal entry is positive.
fn random_orthogonal(n: usize, rng: &mut Rng) -> Tensor {
    let mut r = Tensor::zeros(Shape::Matrix(n, n));
    for x in r.data_mut() {
        *x = rng.normal();
    }

    // Householder vectors, one per column.
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..n).map(|i| r.get(i, k)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if vnorm > 0.0 {
            for x in &mut v {
                *x /= vnorm;
            }
            // Apply I − 2vvᵀ to the trailing block of R.
            for j in k..n {
                let proj: f64 = (k..n).map(|i| v[i - k] * r.get(i, j)).sum();
                for i in k..n {
                    let updated = r.get(i, j) - 2.0 * v[i - k] * proj;
                    r.row_mut(i)[j] = updated;
                }
            }
        } else {
            for x in &mut v {
                *x = 0.0;
            }
        }
        reflectors.push(v);
    }

    // Q = H_0 · H_1 ⋯ H_{n−1} · I, applied right to left.
    let mut q = Tensor::eye(n);
    for k in (0..n).rev() {
        let v = &reflectors[k];
        for j in 0..n {
            let proj: f64 = (k..n).map(|i| v[i - k] * q.get(i, j)).sum();
            if proj != 0.0 {
                for i in k..n {
                    let updated = q.get(i, j) - 2.0 * v[i - k] * proj;
                    q.row_mut(i)[j] = updated;
                }
            }
        }
    }

    // Sign fix: make diag(R) positive so Q is unique given the input.
    for j in 0..n {
        if r.get(j, j) < 0.0 {
            for i in 0..n {
                q.row_mut(i)[j] = -q.get(i, j);
            }
        }
    }
    q
}
