//! Base kernels evaluated on raw covariates or deep features.
//!
//! Hyperparameters live in log space so the optimizer is unconstrained:
//! the ARD squared-exponential kernel is
//!
//! `k(x, z) = sigma^2 * exp(-1/2 * sum_d (x_d - z_d)^2 / ell_d^2)`
//!
//! and the linear kernel is `k(x, z) = sigma^2 * <x, z>` (lengthscales carried
//! but unused). Analytic gradients are provided with respect to every log
//! hyperparameter and to the inputs themselves, the latter for chaining into
//! a feature extractor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    Rbf,
    Linear,
}

/// Log-space base-kernel hyperparameters: one lengthscale per input dimension
/// (ARD) plus a signal variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseKernelParams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
}

impl BaseKernelParams {
    /// Unit lengthscales and unit signal variance, the right default after
    /// input standardization.
    pub fn unit(dim: usize) -> Self {
        BaseKernelParams { log_lengthscales: vec![0.0; dim], log_signal_variance: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|v| v.exp()).collect()
    }

    fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<(), KernelError> {
    if expected == got {
        Ok(())
    } else {
        Err(KernelError::DimensionMismatch { expected, got })
    }
}

/// Evaluates the kernel between two points.
pub fn kernel_eval(
    kind: KernelKind,
    params: &BaseKernelParams,
    x: &[f64],
    z: &[f64],
) -> Result<f64, KernelError> {
    check_dim(params.dim(), x.len())?;
    check_dim(params.dim(), z.len())?;
    let sig = params.signal_variance();
    match kind {
        KernelKind::Rbf => {
            let mut q = 0.0;
            for (d, (xv, zv)) in x.iter().zip(z).enumerate() {
                let ell = params.log_lengthscales[d].exp();
                let r = (xv - zv) / ell;
                q += r * r;
            }
            Ok(sig * (-0.5 * q).exp())
        }
        KernelKind::Linear => Ok(sig * crate::linalg::dot(x, z)),
    }
}

/// Kernel matrix between two sets of points (rows). When `x1` and `x2` are
/// the same set the result is symmetric PSD.
pub fn kernel_matrix(
    kind: KernelKind,
    params: &BaseKernelParams,
    x1: &Matrix,
    x2: &Matrix,
) -> Result<Matrix, KernelError> {
    check_dim(params.dim(), x1.cols())?;
    check_dim(params.dim(), x2.cols())?;
    match kind {
        KernelKind::Rbf => {
            // scale inputs once, then use the squared-distance expansion
            let sig = params.signal_variance();
            let ls = params.lengthscales();
            let scale = |x: &Matrix| {
                Matrix::from_fn(x.rows(), x.cols(), |i, d| x[(i, d)] / ls[d])
            };
            let a = scale(x1);
            let b = scale(x2);
            let sqn = |m: &Matrix| -> Vec<f64> {
                (0..m.rows()).map(|i| crate::linalg::dot(m.row(i), m.row(i))).collect()
            };
            let na = sqn(&a);
            let nb = sqn(&b);
            let mut k = a.matmul_transb(&b);
            for i in 0..k.rows() {
                let row = k.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    let d2 = (na[i] + nb[j] - 2.0 * *v).max(0.0);
                    *v = sig * (-0.5 * d2).exp();
                }
            }
            Ok(k)
        }
        KernelKind::Linear => {
            let mut k = x1.matmul_transb(x2);
            let sig = params.signal_variance();
            for i in 0..k.rows() {
                for v in k.row_mut(i) {
                    *v *= sig;
                }
            }
            Ok(k)
        }
    }
}

/// All analytic kernel gradients on one set of points, in log-parameter space.
///
/// `wrt_inputs[d][(i, j)]` is the derivative of `K[(i, j)]` with respect to
/// coordinate `d` of the *first* argument `x_i`; by symmetry the derivative
/// with respect to the second argument is obtained by transposition.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub wrt_log_lengthscales: Vec<Matrix>,
    pub wrt_log_signal_variance: Matrix,
    pub wrt_inputs: Vec<Matrix>,
}

pub fn kernel_grads(
    kind: KernelKind,
    params: &BaseKernelParams,
    x: &Matrix,
) -> Result<KernelGrads, KernelError> {
    let k = kernel_matrix(kind, params, x, x)?;
    let n = x.rows();
    let d = params.dim();
    let sig = params.signal_variance();
    match kind {
        KernelKind::Rbf => {
            let ls = params.lengthscales();
            let mut wrt_ls = Vec::with_capacity(d);
            let mut wrt_in = Vec::with_capacity(d);
            for dd in 0..d {
                let inv2 = 1.0 / (ls[dd] * ls[dd]);
                let mut gl = Matrix::zeros(n, n);
                let mut gi = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let diff = x[(i, dd)] - x[(j, dd)];
                        // d k / d log(ell_d) = k * diff^2 / ell_d^2
                        gl[(i, j)] = k[(i, j)] * diff * diff * inv2;
                        // d k / d x_{i,d}   = -k * diff / ell_d^2
                        gi[(i, j)] = -k[(i, j)] * diff * inv2;
                    }
                }
                wrt_ls.push(gl);
                wrt_in.push(gi);
            }
            Ok(KernelGrads {
                wrt_log_lengthscales: wrt_ls,
                wrt_log_signal_variance: k,
                wrt_inputs: wrt_in,
            })
        }
        KernelKind::Linear => {
            // lengthscales are unused: zero gradient
            let wrt_ls = (0..d).map(|_| Matrix::zeros(n, n)).collect();
            let wrt_in = (0..d)
                .map(|dd| Matrix::from_fn(n, n, |_, j| sig * x[(j, dd)]))
                .collect();
            Ok(KernelGrads {
                wrt_log_lengthscales: wrt_ls,
                wrt_log_signal_variance: k,
                wrt_inputs: wrt_in,
            })
        }
    }
}

/// Fused contraction used by the training loop: given a weight matrix `e`
/// (already elementwise-multiplied with whatever task structure applies),
/// returns `sum_ij e_ij * dK_ij/d(log ell_d)` for every `d` and
/// `sum_ij e_ij * dK_ij/d(log sigma^2)` without materializing the per-entry
/// gradient matrices. `kmat` must be `kernel_matrix(kind, params, x, x)`.
pub fn weighted_hyper_grads(
    kind: KernelKind,
    params: &BaseKernelParams,
    x: &Matrix,
    kmat: &Matrix,
    e: &Matrix,
) -> (Vec<f64>, f64) {
    let n = x.rows();
    let d = params.dim();
    let mut g_sig = 0.0;
    for i in 0..n {
        g_sig += crate::linalg::dot(kmat.row(i), e.row(i));
    }
    match kind {
        KernelKind::Rbf => {
            let ls = params.lengthscales();
            let mut g_ls = vec![0.0; d];
            for i in 0..n {
                let ki = kmat.row(i);
                let ei = e.row(i);
                let xi = x.row(i);
                for j in 0..n {
                    let w = ki[j] * ei[j];
                    if w == 0.0 {
                        continue;
                    }
                    let xj = x.row(j);
                    for dd in 0..d {
                        let diff = (xi[dd] - xj[dd]) / ls[dd];
                        g_ls[dd] += w * diff * diff;
                    }
                }
            }
            (g_ls, g_sig)
        }
        KernelKind::Linear => (vec![0.0; d], g_sig),
    }
}

/// Fused input-gradient contraction: returns the `n x d` matrix with entries
/// `sum_j 2 * e_ij * dK_ij/dx_{i,d}`, which is the total derivative of
/// `sum_ij e_ij K_ij` with respect to `x_{i,d}` for symmetric `e`.
pub fn weighted_input_grads(
    kind: KernelKind,
    params: &BaseKernelParams,
    x: &Matrix,
    kmat: &Matrix,
    e: &Matrix,
) -> Matrix {
    let n = x.rows();
    let d = params.dim();
    let sig = params.signal_variance();
    match kind {
        KernelKind::Rbf => {
            let ls = params.lengthscales();
            // w = e .* k ; grad_i,d = -2/ell_d^2 * (x_id * rowsum(w)_i - (w x)_id)
            let mut w = Matrix::zeros(n, n);
            let mut rowsum = vec![0.0; n];
            for i in 0..n {
                let ki = kmat.row(i);
                let ei = e.row(i);
                let wi = w.row_mut(i);
                let mut s = 0.0;
                for j in 0..n {
                    let v = ki[j] * ei[j];
                    wi[j] = v;
                    s += v;
                }
                rowsum[i] = s;
            }
            let wx = w.matmul(x);
            Matrix::from_fn(n, d, |i, dd| {
                let inv2 = 1.0 / (ls[dd] * ls[dd]);
                -2.0 * inv2 * (x[(i, dd)] * rowsum[i] - wx[(i, dd)])
            })
        }
        KernelKind::Linear => {
            // grad_i,d = 2 * sigma^2 * (e x)_id
            let ex = e.matmul(x);
            Matrix::from_fn(n, d, |i, dd| 2.0 * sig * ex[(i, dd)])
        }
    }
}
