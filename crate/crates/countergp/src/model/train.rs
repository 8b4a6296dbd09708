//! Marginal-likelihood evaluation, analytic gradients, and the Adam loop.
//!
//! For one sub-model with covariance `K = sum_q T_q[t_i, t_j] * k_q(x_i, x_j)
//! + diag(noise)` the negative log marginal likelihood is
//!
//! `NLL = 1/2 y^T H y + 1/2 log det(K) + n/2 log 2pi`,  `H = K^-1`
//!
//! and its derivative with respect to any parameter contracts the matrix
//! `S = 1/2 (H - H y y^T H)` against `dK/dtheta`. The per-parameter
//! structure of `dK` lets every contraction run in O(n^2): elementwise
//! weights for the base-kernel hyperparameters, a task-pair contraction for
//! the coregionalization factors, and the kernel input gradients chained
//! through the feature extractor for the deep-kernel variants.

use crate::coregion::{CoregionFactor, KernelComponent, MultitaskKernelSpec};
use crate::data::Dataset;
use crate::kernel::{
    kernel_matrix, weighted_hyper_grads, weighted_input_grads, BaseKernelParams,
};
use crate::linalg::{cholesky, dot, Matrix};
use crate::mlp::{backward, forward, ForwardTrace, MlpParams};
use crate::rng::{streams, substream};

use super::{
    standardize, submodel_layout, FitConfig, ModelError, ModelVariant, SubModel, ThetaParams,
    TrainedModel,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Gradient collection mirroring [`ThetaParams`] and its flattening order.
#[derive(Debug, Clone)]
pub(crate) struct ThetaGrads {
    mlp_weights: Vec<Matrix>,
    mlp_biases: Vec<Vec<f64>>,
    components: Vec<ComponentGrads>,
    log_noise: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ComponentGrads {
    log_lengthscales: Vec<f64>,
    log_signal_variance: f64,
    action_l: Option<Matrix>,
    action_log_diag: Option<Vec<f64>>,
    outcome_l: Option<Matrix>,
    outcome_log_diag: Option<Vec<f64>>,
}

impl ThetaGrads {
    pub(crate) fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.mlp_weights.iter().zip(&self.mlp_biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        for c in &self.components {
            out.extend_from_slice(&c.log_lengthscales);
            out.push(c.log_signal_variance);
            if let (Some(l), Some(d)) = (&c.action_l, &c.action_log_diag) {
                out.extend_from_slice(l.data());
                out.extend_from_slice(d);
            }
            if let (Some(l), Some(d)) = (&c.outcome_l, &c.outcome_log_diag) {
                out.extend_from_slice(l.data());
                out.extend_from_slice(d);
            }
        }
        out.extend_from_slice(&self.log_noise);
    }
}

struct Assembled {
    trace: Option<ForwardTrace>,
    num_units: usize,
    row_features: Matrix,
    /// Per-component base kernel matrices over the rows.
    kbases: Vec<Matrix>,
    /// Per-component task-covariance lookup tables.
    tables: Vec<Matrix>,
    cov: crate::linalg::SymMatrix,
}

fn assemble(sub: &SubModel) -> Result<Assembled, ModelError> {
    let (unit_feats, trace) = match &sub.theta.mlp {
        Some(mlp) => {
            let (h, t) = forward(mlp, &sub.unit_x)?;
            (h, Some(t))
        }
        None => (sub.unit_x.clone(), None),
    };
    let row_features = sub.expand_rows(&unit_feats);
    let n = sub.n_rows();
    let spec = &sub.theta.kernel;
    let tables = spec.task_cov_tables();
    let mut kbases = Vec::with_capacity(spec.components.len());
    let mut total = Matrix::zeros(n, n);
    let flat: Vec<usize> = sub.row_task.iter().map(|t| t.flat(spec.num_actions)).collect();
    for (c, table) in spec.components.iter().zip(&tables) {
        let kbase = kernel_matrix(c.kind, &c.base, &row_features, &row_features)?;
        for i in 0..n {
            let krow = kbase.row(i);
            let trow = table.row(flat[i]);
            let out = total.row_mut(i);
            for j in 0..n {
                out[j] += trow[flat[j]] * krow[j];
            }
        }
        kbases.push(kbase);
    }
    let noise = sub.theta.log_noise.iter().map(|v| v.exp()).collect::<Vec<_>>();
    for i in 0..n {
        total[(i, i)] += noise[flat[i]];
    }
    let cov = crate::linalg::SymMatrix::symmetrize(total)?;
    Ok(Assembled { trace, num_units: unit_feats.rows(), row_features, kbases, tables, cov })
}

pub(crate) fn submodel_nll(sub: &SubModel) -> Result<f64, ModelError> {
    if sub.n_rows() == 0 {
        return Ok(0.0);
    }
    let asm = assemble(sub)?;
    let chol = cholesky(&asm.cov, 0.0)?;
    let alpha = chol.solve(&sub.y)?;
    Ok(0.5 * dot(&sub.y, &alpha) + 0.5 * chol.logdet() + 0.5 * sub.n_rows() as f64 * LN_2PI)
}

fn zero_grads(theta: &ThetaParams) -> ThetaGrads {
    let (mlp_weights, mlp_biases) = match &theta.mlp {
        Some(mlp) => (
            mlp.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    let components = theta
        .kernel
        .components
        .iter()
        .map(|c| ComponentGrads {
            log_lengthscales: vec![0.0; c.base.dim()],
            log_signal_variance: 0.0,
            action_l: c.action_factor.as_ref().map(|f| Matrix::zeros(f.num_tasks(), f.rank())),
            action_log_diag: c.action_factor.as_ref().map(|f| vec![0.0; f.num_tasks()]),
            outcome_l: c.outcome_factor.as_ref().map(|f| Matrix::zeros(f.num_tasks(), f.rank())),
            outcome_log_diag: c.outcome_factor.as_ref().map(|f| vec![0.0; f.num_tasks()]),
        })
        .collect();
    ThetaGrads { mlp_weights, mlp_biases, components, log_noise: vec![0.0; theta.log_noise.len()] }
}

pub(crate) fn submodel_nll_grad(sub: &SubModel) -> Result<(f64, ThetaGrads), ModelError> {
    let n = sub.n_rows();
    if n == 0 {
        return Ok((0.0, zero_grads(&sub.theta)));
    }
    let asm = assemble(sub)?;
    let chol = cholesky(&asm.cov, 0.0)?;
    let alpha = chol.solve(&sub.y)?;
    let nll = 0.5 * dot(&sub.y, &alpha) + 0.5 * chol.logdet() + 0.5 * n as f64 * LN_2PI;

    let h = chol.inverse();
    // S = 1/2 (H - alpha alpha^T), symmetrized against solver round-off
    let s = Matrix::from_fn(n, n, |i, j| {
        0.25 * (h[(i, j)] + h[(j, i)]) - 0.5 * alpha[i] * alpha[j]
    });

    let spec = &sub.theta.kernel;
    let flat: Vec<usize> = sub.row_task.iter().map(|t| t.flat(spec.num_actions)).collect();
    let num_tasks = spec.num_tasks();

    let mut grads = zero_grads(&sub.theta);
    for (t, g) in grads.log_noise.iter_mut().enumerate() {
        let mut acc = 0.0;
        for r in 0..n {
            if flat[r] == t {
                acc += s[(r, r)];
            }
        }
        *g = acc * sub.theta.log_noise[t].exp();
    }

    let d_feat = asm.row_features.cols();
    let mut feat_grad_rows = sub.theta.mlp.as_ref().map(|_| Matrix::zeros(n, d_feat));

    for (q, comp) in spec.components.iter().enumerate() {
        let kbase = &asm.kbases[q];
        let table = &asm.tables[q];
        // elementwise weights for the base-kernel contractions
        let e = Matrix::from_fn(n, n, |i, j| s[(i, j)] * table[(flat[i], flat[j])]);
        let (g_ls, g_sig) =
            weighted_hyper_grads(comp.kind, &comp.base, &asm.row_features, kbase, &e);
        grads.components[q].log_lengthscales = g_ls;
        grads.components[q].log_signal_variance = g_sig;

        // task-pair contraction C[t][u] = sum_{rows} S .* Kbase
        let has_factor = comp.action_factor.is_some() || comp.outcome_factor.is_some();
        if has_factor {
            let mut c_mat = Matrix::zeros(num_tasks, num_tasks);
            for i in 0..n {
                let srow = s.row(i);
                let krow = kbase.row(i);
                let ti = flat[i];
                for j in 0..n {
                    c_mat[(ti, flat[j])] += srow[j] * krow[j];
                }
            }
            let d_local = spec.num_actions;
            let m_local = spec.num_outcomes;
            if let Some(f) = &comp.action_factor {
                let by = comp.outcome_factor.as_ref().map(|f| f.build_b());
                let mut ga = Matrix::zeros(d_local, d_local);
                for a in 0..d_local {
                    for a2 in 0..d_local {
                        let mut acc = 0.0;
                        for m in 0..m_local {
                            for m2 in 0..m_local {
                                let w = by.as_ref().map_or(1.0, |b| b[(m, m2)]);
                                acc += c_mat[(m * d_local + a, m2 * d_local + a2)] * w;
                            }
                        }
                        ga[(a, a2)] = acc;
                    }
                }
                let (gl, gd) = factor_grads(f, &ga);
                grads.components[q].action_l = Some(gl);
                grads.components[q].action_log_diag = Some(gd);
            }
            if let Some(f) = &comp.outcome_factor {
                let ba = comp.action_factor.as_ref().map(|f| f.build_b());
                let mut gy = Matrix::zeros(m_local, m_local);
                for m in 0..m_local {
                    for m2 in 0..m_local {
                        let mut acc = 0.0;
                        for a in 0..d_local {
                            for a2 in 0..d_local {
                                let w = ba.as_ref().map_or(1.0, |b| b[(a, a2)]);
                                acc += c_mat[(m * d_local + a, m2 * d_local + a2)] * w;
                            }
                        }
                        gy[(m, m2)] = acc;
                    }
                }
                let (gl, gd) = factor_grads(f, &gy);
                grads.components[q].outcome_l = Some(gl);
                grads.components[q].outcome_log_diag = Some(gd);
            }
        }

        if let Some(acc) = &mut feat_grad_rows {
            let gi = weighted_input_grads(comp.kind, &comp.base, &asm.row_features, kbase, &e);
            for r in 0..n {
                let dst = acc.row_mut(r);
                for (d, v) in gi.row(r).iter().enumerate() {
                    dst[d] += v;
                }
            }
        }
    }

    if let (Some(mlp), Some(rows), Some(trace)) =
        (&sub.theta.mlp, feat_grad_rows, asm.trace.as_ref())
    {
        // block design duplicates units across outcomes: sum row gradients
        // back onto their unit before the reverse pass
        let mut g_units = Matrix::zeros(asm.num_units, d_feat);
        for r in 0..n {
            let dst = g_units.row_mut(sub.row_unit[r]);
            for (d, v) in rows.row(r).iter().enumerate() {
                dst[d] += v;
            }
        }
        let mg = backward(mlp, trace, &g_units)?;
        grads.mlp_weights = mg.weights;
        grads.mlp_biases = mg.biases;
    }

    Ok((nll, grads))
}

/// Chain rule through `B = L L^T + diag(exp(log_diag))`: given the raw
/// gradient `g` with respect to the entries of `B`, returns the gradients
/// with respect to `L` and `log_diag`.
fn factor_grads(f: &CoregionFactor, g: &Matrix) -> (Matrix, Vec<f64>) {
    let t = f.num_tasks();
    let r = f.rank();
    let mut gl = Matrix::zeros(t, r);
    for a in 0..t {
        for rr in 0..r {
            let mut acc = 0.0;
            for a2 in 0..t {
                acc += (g[(a, a2)] + g[(a2, a)]) * f.l[(a2, rr)];
            }
            gl[(a, rr)] = acc;
        }
    }
    let gd = (0..t).map(|a| g[(a, a)] * f.log_diag[a].exp()).collect();
    (gl, gd)
}

fn init_theta(
    variant: ModelVariant,
    d_local: usize,
    m_local: usize,
    input_dim: usize,
    cfg: &FitConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> ThetaParams {
    let mlp = if variant.uses_mlp() {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&cfg.hidden);
        Some(MlpParams::init(&sizes, cfg.activation, rng))
    } else {
        None
    };
    let feat_dim = mlp.as_ref().map_or(input_dim, MlpParams::output_dim);
    let components = (0..cfg.num_components.max(1))
        .map(|q| {
            let mut base = BaseKernelParams::unit(feat_dim);
            if q > 0 {
                // extra components start long and quiet: a near-constant
                // term that can absorb task-specific levels, with small
                // perturbations so identical gradients do not lock
                // components together
                use rand::Rng;
                for v in &mut base.log_lengthscales {
                    *v = 2.0 + rng.random_range(-0.2..0.2);
                }
                base.log_signal_variance = -1.0 + rng.random_range(-0.2..0.2);
            }
            KernelComponent {
                kind: cfg.kernel,
                base,
                action_factor: (d_local > 1)
                    .then(|| CoregionFactor::init_identity_like(d_local, d_local, rng)),
                outcome_factor: (m_local > 1)
                    .then(|| CoregionFactor::init_identity_like(m_local, m_local, rng)),
            }
        })
        .collect();
    ThetaParams {
        mlp,
        kernel: MultitaskKernelSpec { num_actions: d_local, num_outcomes: m_local, components },
        log_noise: vec![0.25f64.ln(); d_local * m_local],
    }
}

/// Adam moment estimates with bias correction.
pub(crate) struct AdamState {
    m1: Vec<f64>,
    m2: Vec<f64>,
    step: usize,
}

impl AdamState {
    pub(crate) fn new(n: usize) -> Self {
        AdamState { m1: vec![0.0; n], m2: vec![0.0; n], step: 0 }
    }

    pub(crate) fn update(&mut self, cfg: &FitConfig, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - cfg.adam_beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.adam_beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m1[i] = cfg.adam_beta1 * self.m1[i] + (1.0 - cfg.adam_beta1) * g;
            self.m2[i] = cfg.adam_beta2 * self.m2[i] + (1.0 - cfg.adam_beta2) * g * g;
            let mhat = self.m1[i] / bc1;
            let vhat = self.m2[i] / bc2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
            if cfg.weight_decay > 0.0 {
                params[i] -= cfg.learning_rate * cfg.weight_decay * params[i];
            }
        }
    }
}

/// Fits a variant by full-batch Adam on the negative log marginal
/// likelihood, deterministically per seed. Records the NLL at every visited
/// iterate and returns the parameters achieving the lowest observed NLL.
pub fn fit(
    variant: ModelVariant,
    data: &Dataset,
    cfg: &FitConfig,
) -> Result<TrainedModel, ModelError> {
    data.validate()?;
    let (std_data, record) = standardize(data)?;
    let d = std_data.meta.num_actions;
    let m = std_data.meta.num_outcomes;
    let p = std_data.num_covariates();
    let mut rng = substream(cfg.seed, streams::MODEL_INIT, 0);
    let thetas: Vec<ThetaParams> = submodel_layout(variant, d, m)
        .iter()
        .map(|(acts, outs)| init_theta(variant, acts.len(), outs.len(), p, cfg, &mut rng))
        .collect();
    let mut model = TrainedModel::assemble(variant, &std_data, record, thetas)?;

    let mut params = model.params_flat();
    let mut adam = AdamState::new(params.len());
    let mut best_nll = f64::INFINITY;
    let mut best = params.clone();
    let mut trajectory = Vec::with_capacity(cfg.iterations + 1);

    for step in 0..=cfg.iterations {
        model.set_params_flat(&params)?;
        let last = step == cfg.iterations;
        let (nll, grad) =
            if last { (model.nll()?, Vec::new()) } else { model.nll_grad()? };
        if !nll.is_finite() {
            return Err(ModelError::Divergence { iteration: step, nll });
        }
        trajectory.push(nll);
        if nll < best_nll {
            best_nll = nll;
            best.copy_from_slice(&params);
        }
        if last {
            break;
        }
        adam.update(cfg, &mut params, &grad);
    }

    model.set_params_flat(&best)?;
    model.nll_trajectory = trajectory;
    model.best_nll = best_nll;
    model.finalize()?;
    Ok(model)
}
