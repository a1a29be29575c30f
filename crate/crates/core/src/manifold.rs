//! Latent block matrices and the Stiefel-manifold machinery that acts on
//! them.
//!
//! A latent code is a `d × k` matrix `Z` whose column `i` is the code vector
//! for attribute `i`. The model wants `ZᵀZ = I`: every block on the unit
//! sphere and all blocks mutually orthogonal. Two tools push toward that:
//!
//! * the soft penalty `‖ZᵀZ − I‖²_F` and its gradient `4·Z·(ZᵀZ − I)`;
//! * the Cayley retraction
//!   `Z_new = (I + τ/2·A)⁻¹ (I − τ/2·A) Z` with `A = J Zᵀ − Z Jᵀ`.
//!
//! The Cayley factor is orthogonal whenever `A` is skew, so the step
//! preserves the Gram matrix `ZᵀZ` exactly. It moves `Z` along the manifold
//! but never repairs a non-orthonormal `Z` by itself.

use thiserror::Error;

use crate::linalg::{self, LinalgError, Lu, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("latent blocks need d >= k, got d = {d}, k = {k}")]
    Infeasible { d: usize, k: usize },
    #[error("latent blocks contain non-finite entries")]
    NonFinite,
    #[error("cayley step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("cayley solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    Residual { residual: f64, tolerance: f64 },
}

pub type Result<T> = std::result::Result<T, ManifoldError>;

/// A `d × k` latent code matrix. Column `i` is block `zⁱ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlocks {
    z: Matrix,
}

impl LatentBlocks {
    pub fn new(z: Matrix) -> Result<Self> {
        let (d, k) = z.shape();
        if d < k || k == 0 {
            return Err(ManifoldError::Infeasible { d, k });
        }
        if !z.is_finite() {
            return Err(ManifoldError::NonFinite);
        }
        Ok(Self { z })
    }

    /// Reads a flat code of length `d·k` laid out block after block
    /// (`flat[i·d + r]` is row `r` of block `i`).
    pub fn from_flat(flat: &[f64], d: usize, k: usize) -> Result<Self> {
        if flat.len() != d * k {
            return Err(LinalgError::Length {
                rows: d,
                cols: k,
                len: flat.len(),
            }
            .into());
        }
        Self::new(Matrix::from_fn(d, k, |r, c| flat[c * d + r]))
    }

    /// Inverse of [`LatentBlocks::from_flat`].
    pub fn write_flat(&self, out: &mut [f64]) {
        let d = self.d();
        for c in 0..self.k() {
            for r in 0..d {
                out[c * d + r] = self.z.get(r, c);
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d() * self.k()];
        self.write_flat(&mut out);
        out
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.z.rows()
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.z.cols()
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix {
        &self.z
    }

    pub fn into_matrix(self) -> Matrix {
        self.z
    }

    pub fn block(&self, i: usize) -> Vec<f64> {
        self.z.column(i)
    }

    pub fn gram(&self) -> Matrix {
        linalg::gram(&self.z)
    }

    /// `‖ZᵀZ − I‖_F` (not squared).
    pub fn orth_deviation(&self) -> f64 {
        linalg::orthonormality_error(&self.z)
    }
}

/// Matrix-to-flat helpers for gradients that share the block layout.
pub fn flat_to_matrix(flat: &[f64], d: usize, k: usize) -> Matrix {
    debug_assert_eq!(flat.len(), d * k);
    Matrix::from_fn(d, k, |r, c| flat[c * d + r])
}

pub fn matrix_to_flat(m: &Matrix, out: &mut [f64]) {
    let d = m.rows();
    for c in 0..m.cols() {
        for r in 0..d {
            out[c * d + r] = m.get(r, c);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CayleyConfig {
    pub tau: f64,
    /// Bound on `‖(I + τ/2 A) Z_new − (I − τ/2 A) Z‖_F` before the step is
    /// rejected.
    pub solve_tolerance: f64,
}

impl Default for CayleyConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            solve_tolerance: 1e-10,
        }
    }
}

impl CayleyConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ManifoldError::BadStep(self.tau));
        }
        Ok(())
    }
}

fn gram_minus_identity(z: &Matrix) -> Matrix {
    let mut s = linalg::gram(z);
    for i in 0..s.rows() {
        let v = s.get(i, i);
        s.set(i, i, v - 1.0);
    }
    s
}

/// `‖ZᵀZ − I‖²_F`.
pub fn orth_penalty(z: &LatentBlocks) -> f64 {
    gram_minus_identity(&z.z).data().iter().map(|v| v * v).sum()
}

/// `∂/∂Z ‖ZᵀZ − I‖²_F = 4·Z·(ZᵀZ − I)`.
pub fn orth_penalty_grad(z: &LatentBlocks) -> Matrix {
    let s = gram_minus_identity(&z.z);
    mul_small(&z.z, &s).scale(4.0)
}

/// Vector-Jacobian product of [`orth_penalty_grad`] viewed as a map
/// `Z ↦ 4Z(ZᵀZ − I)`: returns `4·(G·S + Z·Gᵀ·Z + Z·Zᵀ·G)` with `S = ZᵀZ − I`.
/// Used to chain gradients through a Cayley step whose `J` depends on `Z`.
pub fn orth_penalty_grad_vjp(z: &LatentBlocks, upstream: &Matrix) -> Result<Matrix> {
    let zm = &z.z;
    if upstream.shape() != zm.shape() {
        return Err(LinalgError::Shape {
            op: "orth_penalty_grad_vjp",
            left: zm.shape(),
            right: upstream.shape(),
        }
        .into());
    }
    let s = gram_minus_identity(zm);
    let gs = mul_small(upstream, &s);
    // Gᵀ Z and Zᵀ G are k × k
    let gtz = linalg::matmul_tn(upstream, zm)?;
    let ztg = gtz.transpose();
    let z_gtz = mul_small(zm, &gtz);
    let z_ztg = mul_small(zm, &ztg);
    let mut out = gs;
    out.axpy(1.0, &z_gtz)?;
    out.axpy(1.0, &z_ztg)?;
    Ok(out.scale(4.0))
}

/// Plain triple loop for the tiny products on this path; avoids GEMM
/// packing overhead on k × k operands.
fn mul_small(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for m in 0..a.cols() {
            let av = a.get(i, m);
            if av == 0.0 {
                continue;
            }
            for j in 0..b.cols() {
                let cur = out.get(i, j);
                out.set(i, j, cur + av * b.get(m, j));
            }
        }
    }
    out
}

/// `A = J Zᵀ − Z Jᵀ`. The product `M = J Zᵀ` is formed once and `A` is
/// filled as `M − Mᵀ`, so `A + Aᵀ = 0` holds bitwise.
pub fn skew_from_jacobian(j: &Matrix, z: &LatentBlocks) -> Result<Matrix> {
    if j.shape() != z.z.shape() {
        return Err(LinalgError::Shape {
            op: "skew_from_jacobian",
            left: j.shape(),
            right: z.z.shape(),
        }
        .into());
    }
    let m = linalg::matmul_nt(j, &z.z)?;
    let d = m.rows();
    let mut a = Matrix::zeros(d, d);
    for r in 0..d {
        for c in r + 1..d {
            let v = m.get(r, c) - m.get(c, r);
            a.set(r, c, v);
            a.set(c, r, -v);
        }
    }
    Ok(a)
}

/// `I + s·A`.
fn shifted_identity(a: &Matrix, s: f64) -> Matrix {
    let mut out = a.scale(s);
    for i in 0..out.rows() {
        let v = out.get(i, i);
        out.set(i, i, v + 1.0);
    }
    out
}

/// Everything a Cayley step computes, kept so the reverse pass can reuse it.
#[derive(Debug, Clone)]
pub struct CayleyTrace {
    pub skew: Matrix,
    pub z_new: LatentBlocks,
    pub residual: f64,
}

/// Cayley retraction `Z_new = (I + τ/2 A)⁻¹ (I − τ/2 A) Z`, applied as an LU
/// solve.
pub fn cayley_step(z: &LatentBlocks, j: &Matrix, cfg: &CayleyConfig) -> Result<LatentBlocks> {
    Ok(cayley_step_traced(z, j, cfg)?.z_new)
}

pub fn cayley_step_traced(z: &LatentBlocks, j: &Matrix, cfg: &CayleyConfig) -> Result<CayleyTrace> {
    cfg.validate()?;
    let a = skew_from_jacobian(j, z)?;
    let half = cfg.tau / 2.0;
    let lhs = shifted_identity(&a, half);
    let rhs_op = shifted_identity(&a, -half);
    let rhs = linalg::matmul(&rhs_op, &z.z)?;
    let z_new = linalg::solve_linear(&lhs, &rhs)?;
    let residual = linalg::matmul(&lhs, &z_new)?.sub(&rhs)?.frobenius_norm();
    if !(residual <= cfg.solve_tolerance) {
        return Err(ManifoldError::Residual {
            residual,
            tolerance: cfg.solve_tolerance,
        });
    }
    Ok(CayleyTrace {
        skew: a,
        z_new: LatentBlocks::new(z_new)?,
        residual,
    })
}

/// Reverse-mode derivative of [`cayley_step`].
///
/// With `P = I + τ/2·A`, `W = Z + Z_new`, `Λ = P⁻ᵀ·G` and `K = ΛWᵀ − WΛᵀ`,
/// differentiating `P·Z_new = (I − τ/2·A)·Z` gives
///
/// ```text
/// ∂L/∂Z = P·Λ + τ/2 · K·J
/// ∂L/∂J = −τ/2 · K·Z
/// ```
///
/// (`Pᵀ = I − τ/2·A` because `A` is skew.)
pub fn cayley_vjp(
    z: &LatentBlocks,
    j: &Matrix,
    cfg: &CayleyConfig,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let trace = cayley_step_traced(z, j, cfg)?;
    cayley_vjp_traced(z, j, cfg, &trace, upstream)
}

pub fn cayley_vjp_traced(
    z: &LatentBlocks,
    j: &Matrix,
    cfg: &CayleyConfig,
    trace: &CayleyTrace,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if upstream.shape() != z.z.shape() {
        return Err(LinalgError::Shape {
            op: "cayley_vjp",
            left: z.z.shape(),
            right: upstream.shape(),
        }
        .into());
    }
    let half = cfg.tau / 2.0;
    let p = shifted_identity(&trace.skew, half);
    let pt = shifted_identity(&trace.skew, -half);
    let lambda = Lu::factor(&pt)?.solve(upstream)?;
    let w = z.z.add(trace.z_new.matrix())?;
    let m = linalg::matmul_nt(&lambda, &w)?;
    let d = m.rows();
    let mut skew_k = Matrix::zeros(d, d);
    for r in 0..d {
        for c in r + 1..d {
            let v = m.get(r, c) - m.get(c, r);
            skew_k.set(r, c, v);
            skew_k.set(c, r, -v);
        }
    }
    let mut grad_z = linalg::matmul(&p, &lambda)?;
    grad_z.axpy(half, &linalg::matmul(&skew_k, j)?)?;
    let grad_j = linalg::matmul(&skew_k, &z.z)?.scale(-half);
    Ok((grad_z, grad_j))
}

/// Projects onto the Stiefel manifold by QR orthonormalization.
pub fn stiefel_project(m: &Matrix) -> Result<LatentBlocks> {
    let q = linalg::qr_orthonormalize(m)?;
    LatentBlocks::new(q)
}
