//! Fully-connected feedforward feature extractor for deep kernels.
//!
//! Maps the raw covariates to a low-dimensional representation
//! `h = g_l(W_l g_{l-1}(...) + b_l)` with the activation applied at every
//! layer, including the last: a bounded final layer (tanh by default) keeps
//! the feature space compact, which stabilizes lengthscale learning in the
//! kernel sitting on top. Reverse-mode gradients are exact and hand-rolled;
//! the upstream gradient comes from the kernel's input derivatives.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{gemm, Matrix};

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward trace does not match the network or batch shape")]
    TraceMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Network parameters. `layer_sizes = [P, h_1, ..., d_z]`; weight `k` has
/// shape `layer_sizes[k+1] x layer_sizes[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

impl MlpParams {
    /// Glorot-uniform weights (`+-sqrt(6 / (fan_in + fan_out))`), zero biases.
    pub fn init(layer_sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (layer_sizes[k], layer_sizes[k + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)));
            biases.push(vec![0.0; fan_out]);
        }
        MlpParams { layer_sizes: layer_sizes.to_vec(), weights, biases, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }
}

/// Cached pre-activations and activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `post[0]` is the input batch; `post[k]` the activation of layer `k`.
    post: Vec<Matrix>,
    pre: Vec<Matrix>,
}

/// Forward pass over a batch (rows are inputs). Returns the final
/// representation and the trace needed for the backward pass.
pub fn forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, ForwardTrace), MlpError> {
    if x.cols() != params.input_dim() {
        return Err(MlpError::DimensionMismatch { expected: params.input_dim(), got: x.cols() });
    }
    let n = x.rows();
    let mut post = vec![x.clone()];
    let mut pre = Vec::with_capacity(params.num_layers());
    for (w, b) in params.weights.iter().zip(&params.biases) {
        let mut z = Matrix::zeros(n, w.rows());
        gemm(1.0, post.last().unwrap(), false, w, true, 0.0, &mut z);
        for i in 0..n {
            let row = z.row_mut(i);
            for (v, bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
        let h = Matrix::from_fn(n, w.rows(), |i, j| params.activation.apply(z[(i, j)]));
        pre.push(z);
        post.push(h);
    }
    Ok((post.last().unwrap().clone(), ForwardTrace { post, pre }))
}

/// Gradients of `sum_ij G[i][j] * H[i][j]` with respect to every weight,
/// bias, and the input batch.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub input: Matrix,
}

/// Reverse-mode pass. `g` is the upstream gradient with respect to the final
/// representation, shaped like the forward output.
pub fn backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    g: &Matrix,
) -> Result<MlpGrads, MlpError> {
    let layers = params.num_layers();
    if trace.pre.len() != layers || trace.post.len() != layers + 1 {
        return Err(MlpError::TraceMismatch);
    }
    let n = trace.post[0].rows();
    if g.rows() != n || g.cols() != params.output_dim() {
        return Err(MlpError::TraceMismatch);
    }
    for (k, w) in params.weights.iter().enumerate() {
        if trace.pre[k].rows() != n || trace.pre[k].cols() != w.rows() {
            return Err(MlpError::TraceMismatch);
        }
    }

    let mut w_grads = vec![Matrix::zeros(0, 0); layers];
    let mut b_grads = vec![Vec::new(); layers];
    let mut upstream = g.clone();
    for k in (0..layers).rev() {
        let pre = &trace.pre[k];
        // delta = upstream .* act'(pre)
        let delta = Matrix::from_fn(n, pre.cols(), |i, j| {
            upstream[(i, j)] * params.activation.derivative(pre[(i, j)])
        });
        // dW_k = delta^T * post_{k-1} ; db_k = column sums of delta
        w_grads[k] = delta.matmul_transa(&trace.post[k]);
        let mut bg = vec![0.0; pre.cols()];
        for i in 0..n {
            for (j, v) in delta.row(i).iter().enumerate() {
                bg[j] += v;
            }
        }
        b_grads[k] = bg;
        // propagate: upstream = delta * W_k
        upstream = delta.matmul(&params.weights[k]);
    }
    Ok(MlpGrads { weights: w_grads, biases: b_grads, input: upstream })
}
