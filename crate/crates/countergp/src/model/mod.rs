//! The six regression variants behind one interface.
//!
//! Independent variants (`Gp`, `Dkl`) fit one single-task model per
//! (action, outcome) cell. Counterfactual variants (`CounterGp`,
//! `CounterDkl`) coregionalize over actions, one model per outcome.
//! Multioutput variants (`MoGp`, `MoDkl`) coregionalize over actions and
//! outcomes in a single model. The `Dkl`-family routes covariates through a
//! feedforward feature extractor before the kernel; everything is trained
//! jointly by gradient descent on the negative log marginal likelihood.
//!
//! Training rows follow the block design: each unit contributes one row per
//! outcome, labelled with its observed action. Counterfactual tasks have no
//! training rows and appear only as prediction targets.

mod train;

pub use train::fit;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coregion::{
    assemble_cross_cov, CoregionError, KernelComponent, MultitaskKernelSpec,
    TaskIndex,
};
use crate::data::{DataError, Dataset};
use crate::kernel::{kernel_eval, KernelError, KernelKind};
use crate::linalg::{cholesky, CholFactor, LinalgError, Matrix, SymMatrix};
use crate::mlp::{forward, Activation, MlpError, MlpParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dataset error: {0}")]
    Data(#[from] DataError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Coregion(#[from] CoregionError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("task ({action}, {outcome}) out of range")]
    TaskOutOfRange { action: usize, outcome: usize },
    #[error("optimization diverged at iteration {iteration} (nll = {nll})")]
    Divergence { iteration: usize, nll: f64 },
    #[error("parameter vector length mismatch: expected {expected}, got {got}")]
    ParamLength { expected: usize, got: usize },
    #[error("theta does not match the variant layout: {0}")]
    ThetaShape(String),
    #[error("model has not been finalized; call finalize() first")]
    NotFinalized,
    #[error("serialization error: {0}")]
    Serialization(String),
}

/// The six model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Gp,
    CounterGp,
    MoGp,
    Dkl,
    CounterDkl,
    MoDkl,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Gp,
        ModelVariant::CounterGp,
        ModelVariant::MoGp,
        ModelVariant::Dkl,
        ModelVariant::CounterDkl,
        ModelVariant::MoDkl,
    ];

    /// Routes covariates through the feature extractor first.
    pub fn uses_mlp(self) -> bool {
        matches!(self, ModelVariant::Dkl | ModelVariant::CounterDkl | ModelVariant::MoDkl)
    }

    /// Coregionalizes over actions.
    pub fn shares_actions(self) -> bool {
        !matches!(self, ModelVariant::Gp | ModelVariant::Dkl)
    }

    /// Coregionalizes over outcomes.
    pub fn shares_outcomes(self) -> bool {
        matches!(self, ModelVariant::MoGp | ModelVariant::MoDkl)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Gp => "gp",
            ModelVariant::CounterGp => "countergp",
            ModelVariant::MoGp => "mogp",
            ModelVariant::Dkl => "dkl",
            ModelVariant::CounterDkl => "counterdkl",
            ModelVariant::MoDkl => "modkl",
        }
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gp" => Ok(ModelVariant::Gp),
            "countergp" => Ok(ModelVariant::CounterGp),
            "mogp" => Ok(ModelVariant::MoGp),
            "dkl" => Ok(ModelVariant::Dkl),
            "counterdkl" => Ok(ModelVariant::CounterDkl),
            "modkl" => Ok(ModelVariant::MoDkl),
            other => Err(format!("unknown model variant '{other}'")),
        }
    }
}

/// Optimizer and architecture settings for [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Decoupled weight decay, off by default.
    pub weight_decay: f64,
    /// Hidden layer widths for the deep-kernel variants; the last entry is
    /// the feature dimension the kernel sees.
    pub hidden: Vec<usize>,
    pub kernel: KernelKind,
    pub activation: Activation,
    /// Number of separable kernel components (1 = intrinsic
    /// coregionalization model).
    pub num_components: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            learning_rate: 0.05,
            iterations: 500,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weight_decay: 0.0,
            hidden: vec![50, 50, 2],
            kernel: KernelKind::Rbf,
            activation: Activation::Tanh,
            num_components: 1,
        }
    }
}

/// Full trainable parameter collection of one sub-model: the optional
/// feature extractor, the per-component base kernels with their
/// coregionalization factors, and the per-task log noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub mlp: Option<MlpParams>,
    pub kernel: MultitaskKernelSpec,
    /// Log noise variance per local task, [`TaskIndex::flat`] order.
    pub log_noise: Vec<f64>,
}

impl ThetaParams {
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        if let Some(mlp) = &self.mlp {
            for (w, b) in mlp.weights.iter().zip(&mlp.biases) {
                n += w.rows() * w.cols() + b.len();
            }
        }
        for c in &self.kernel.components {
            n += c.base.log_lengthscales.len() + 1;
            if let Some(f) = &c.action_factor {
                n += f.num_tasks() * f.rank() + f.num_tasks();
            }
            if let Some(f) = &c.outcome_factor {
                n += f.num_tasks() * f.rank() + f.num_tasks();
            }
        }
        n + self.log_noise.len()
    }

    /// Appends all parameters in a frozen order (extractor, then per
    /// component the base kernel and factors, then noise).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        if let Some(mlp) = &self.mlp {
            for (w, b) in mlp.weights.iter().zip(&mlp.biases) {
                out.extend_from_slice(w.data());
                out.extend_from_slice(b);
            }
        }
        for c in &self.kernel.components {
            out.extend_from_slice(&c.base.log_lengthscales);
            out.push(c.base.log_signal_variance);
            for f in [&c.action_factor, &c.outcome_factor].into_iter().flatten() {
                out.extend_from_slice(f.l.data());
                out.extend_from_slice(&f.log_diag);
            }
        }
        out.extend_from_slice(&self.log_noise);
    }

    /// Reads parameters back in [`Self::flatten_into`] order; returns the
    /// number of values consumed. Coregionalization log-diagonals are
    /// re-floored on assignment.
    pub fn unflatten_from(&mut self, src: &[f64]) -> usize {
        fn take<'a>(src: &'a [f64], n: usize, pos: &mut usize) -> &'a [f64] {
            let s = &src[*pos..*pos + n];
            *pos += n;
            s
        }
        let mut pos = 0;
        if let Some(mlp) = &mut self.mlp {
            for (w, b) in mlp.weights.iter_mut().zip(&mut mlp.biases) {
                let (r, c) = (w.rows(), w.cols());
                let vals = take(src, r * c, &mut pos).to_vec();
                *w = Matrix::from_rows(r, c, vals);
                let n = b.len();
                b.copy_from_slice(take(src, n, &mut pos));
            }
        }
        for c in &mut self.kernel.components {
            let d = c.base.log_lengthscales.len();
            c.base.log_lengthscales.copy_from_slice(take(src, d, &mut pos));
            c.base.log_signal_variance = take(src, 1, &mut pos)[0];
            for f in [&mut c.action_factor, &mut c.outcome_factor].into_iter().flatten() {
                let (t, r) = (f.num_tasks(), f.rank());
                let vals = take(src, t * r, &mut pos).to_vec();
                f.l = Matrix::from_rows(t, r, vals);
                for (dst, v) in f.log_diag.iter_mut().zip(take(src, t, &mut pos)) {
                    *dst = v.max(crate::coregion::LOG_DIAG_FLOOR);
                }
            }
        }
        let n = self.log_noise.len();
        self.log_noise.copy_from_slice(take(src, n, &mut pos));
        pos
    }
}

/// Column-wise shift/scale learned on the training data; inverts predictions
/// exactly. Constant columns pass through untouched and are flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub x_constant: Vec<bool>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
    pub y_constant: Vec<bool>,
}

impl StandardizationRecord {
    /// Identity transform (used when the caller supplies data already on the
    /// model scale).
    pub fn identity(p: usize, m: usize) -> Self {
        StandardizationRecord {
            x_mean: vec![0.0; p],
            x_scale: vec![1.0; p],
            x_constant: vec![false; p],
            y_mean: vec![0.0; m],
            y_scale: vec![1.0; m],
            y_constant: vec![false; m],
        }
    }

    pub fn standardize_x_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.x_mean[j]) / self.x_scale[j])
            .collect()
    }

    /// Maps a standardized outcome mean/variance back to original units.
    pub fn outcome_to_original(&self, m: usize, mean: f64, var: f64) -> (f64, f64) {
        let s = self.y_scale[m];
        (self.y_mean[m] + s * mean, s * s * var)
    }

    /// Maps an original-units outcome to the standardized scale.
    pub fn outcome_to_standardized(&self, m: usize, y: f64) -> f64 {
        (y - self.y_mean[m]) / self.y_scale[m]
    }
}

fn column_stats(col: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64, bool) {
    let mean = col.clone().sum::<f64>() / n as f64;
    let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    if sd < 1e-12 {
        (0.0, 1.0, true)
    } else {
        (mean, sd, false)
    }
}

/// Shifts and scales covariates and outcomes to zero mean, unit variance
/// using the training statistics.
pub fn standardize(data: &Dataset) -> Result<(Dataset, StandardizationRecord), ModelError> {
    data.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let p = data.num_covariates();
    let m = data.meta.num_outcomes;
    let mut rec = StandardizationRecord::identity(p, m);
    for j in 0..p {
        let (mean, sd, constant) = column_stats((0..n).map(|i| data.x[(i, j)]), n);
        rec.x_mean[j] = mean;
        rec.x_scale[j] = sd;
        rec.x_constant[j] = constant;
    }
    for j in 0..m {
        let (mean, sd, constant) = column_stats((0..n).map(|i| data.y[(i, j)]), n);
        rec.y_mean[j] = mean;
        rec.y_scale[j] = sd;
        rec.y_constant[j] = constant;
    }
    let x = Matrix::from_fn(n, p, |i, j| (data.x[(i, j)] - rec.x_mean[j]) / rec.x_scale[j]);
    let y = Matrix::from_fn(n, m, |i, j| (data.y[(i, j)] - rec.y_mean[j]) / rec.y_scale[j]);
    let std_data = Dataset { x, actions: data.actions.clone(), y, meta: data.meta.clone() };
    Ok((std_data, rec))
}

/// Posterior mean and variance with 95% credible bands. The variance is the
/// latent-function (noise-free) variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub variance: f64,
    pub lower95: f64,
    pub upper95: f64,
}

impl PosteriorPrediction {
    pub fn from_mean_var(mean: f64, variance: f64) -> Self {
        let variance = variance.max(0.0);
        let half = 1.96 * variance.sqrt();
        PosteriorPrediction { mean, variance, lower95: mean - half, upper95: mean + half }
    }
}

/// One GP over a subset of the tasks, with its training design rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubModel {
    /// Global action indices this sub-model covers.
    pub actions: Vec<usize>,
    /// Global outcome indices this sub-model covers.
    pub outcomes: Vec<usize>,
    pub theta: ThetaParams,
    /// Standardized covariates of the covered units.
    pub unit_x: Matrix,
    /// Row-to-unit map (block design duplicates units across outcomes).
    pub row_unit: Vec<usize>,
    /// Local task per row.
    pub row_task: Vec<TaskIndex>,
    /// Standardized outcomes per row.
    pub y: Vec<f64>,
    #[serde(skip)]
    pub(crate) cache: Option<SubModelCache>,
}

#[derive(Debug, Clone)]
pub(crate) struct SubModelCache {
    pub row_features: Matrix,
    pub chol: CholFactor,
    pub alpha: Vec<f64>,
}

impl SubModel {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    fn local_task(&self, task: TaskIndex) -> Option<TaskIndex> {
        let a = self.actions.iter().position(|&v| v == task.action)?;
        let m = self.outcomes.iter().position(|&v| v == task.outcome)?;
        Some(TaskIndex::new(a, m))
    }

    /// Unit-level features: the extractor output for deep kernels, the raw
    /// (standardized) covariates otherwise.
    pub(crate) fn unit_features(&self) -> Result<Matrix, ModelError> {
        match &self.theta.mlp {
            Some(mlp) => Ok(forward(mlp, &self.unit_x)?.0),
            None => Ok(self.unit_x.clone()),
        }
    }

    pub(crate) fn expand_rows(&self, unit_feats: &Matrix) -> Matrix {
        Matrix::from_fn(self.row_unit.len(), unit_feats.cols(), |r, j| {
            unit_feats[(self.row_unit[r], j)]
        })
    }

    fn noise_vars(&self) -> Vec<f64> {
        self.theta.log_noise.iter().map(|v| v.exp()).collect()
    }

    /// Recomputes the feature/Cholesky/alpha cache for prediction.
    pub fn finalize(&mut self) -> Result<(), ModelError> {
        let unit_feats = self.unit_features()?;
        let row_features = self.expand_rows(&unit_feats);
        let cov = crate::coregion::assemble_train_cov(
            &self.theta.kernel,
            &row_features,
            &self.row_task,
            &self.noise_vars(),
        )?;
        let chol = cholesky(&cov, 0.0)?;
        let alpha = chol.solve(&self.y)?;
        self.cache = Some(SubModelCache { row_features, chol, alpha });
        Ok(())
    }

    fn cache(&self) -> Result<&SubModelCache, ModelError> {
        self.cache.as_ref().ok_or(ModelError::NotFinalized)
    }

    /// Prior variance of the latent function at a query feature vector for a
    /// local task.
    fn prior_var(&self, feat: &[f64], local: TaskIndex) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for c in &self.theta.kernel.components {
            let tc = component_task_cov(c, local, local);
            total += tc * kernel_eval(c.kind, &c.base, feat, feat)?;
        }
        Ok(total)
    }

    /// Posterior at query features (standardized scale) for a batch of
    /// queries sharing one local task. Returns (mean, variance) pairs.
    fn posterior_batch(
        &self,
        query_feats: &Matrix,
        local: TaskIndex,
    ) -> Result<Vec<(f64, f64)>, ModelError> {
        let cache = self.cache()?;
        let nq = query_feats.rows();
        let tasks_q = vec![local; nq];
        let cross = assemble_cross_cov(
            &self.theta.kernel,
            &cache.row_features,
            &self.row_task,
            query_feats,
            &tasks_q,
        )?;
        let mut out = Vec::with_capacity(nq);
        if self.n_rows() == 0 {
            for i in 0..nq {
                out.push((0.0, self.prior_var(query_feats.row(i), local)?));
            }
            return Ok(out);
        }
        let v = cache.chol.solve_matrix(&cross.transpose())?;
        for i in 0..nq {
            let krow = cross.row(i);
            let mean = crate::linalg::dot(krow, &cache.alpha);
            let mut quad = 0.0;
            for j in 0..self.n_rows() {
                quad += krow[j] * v[(j, i)];
            }
            let var = self.prior_var(query_feats.row(i), local)? - quad;
            out.push((mean, var));
        }
        Ok(out)
    }
}

fn component_task_cov(c: &KernelComponent, t: TaskIndex, u: TaskIndex) -> f64 {
    let a = c.action_factor.as_ref().map_or(1.0, |f| f.build_b()[(t.action, u.action)]);
    let y = c.outcome_factor.as_ref().map_or(1.0, |f| f.build_b()[(t.outcome, u.outcome)]);
    a * y
}

/// Sub-model layout of a variant over `d` actions and `m` outcomes: which
/// (actions, outcomes) sets each sub-model covers.
pub fn submodel_layout(
    variant: ModelVariant,
    d: usize,
    m: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    match (variant.shares_actions(), variant.shares_outcomes()) {
        (true, true) => out.push(((0..d).collect(), (0..m).collect())),
        (true, false) => {
            for mm in 0..m {
                out.push(((0..d).collect(), vec![mm]));
            }
        }
        (false, false) => {
            for mm in 0..m {
                for a in 0..d {
                    out.push((vec![a], vec![mm]));
                }
            }
        }
        (false, true) => unreachable!("no variant shares outcomes without sharing actions"),
    }
    out
}

/// A fitted (or directly assembled) model: routing, parameters, training
/// design, standardization record, and the optimization trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub variant: ModelVariant,
    pub num_actions: usize,
    pub num_outcomes: usize,
    pub submodels: Vec<SubModel>,
    pub standardization: StandardizationRecord,
    /// NLL at every visited iterate, starting with the initialization.
    pub nll_trajectory: Vec<f64>,
    /// Lowest observed NLL; the returned parameters attain it.
    pub best_nll: f64,
}

fn build_design(
    std_data: &Dataset,
    actions: &[usize],
    outcomes: &[usize],
) -> (Matrix, Vec<usize>, Vec<TaskIndex>, Vec<f64>) {
    let units: Vec<usize> = (0..std_data.len())
        .filter(|&i| actions.contains(&std_data.actions[i]))
        .collect();
    let unit_x =
        Matrix::from_fn(units.len(), std_data.num_covariates(), |i, j| std_data.x[(units[i], j)]);
    let local_action = |a: usize| actions.iter().position(|&v| v == a).unwrap();
    let mut row_unit = Vec::new();
    let mut row_task = Vec::new();
    let mut y = Vec::new();
    for (ml, &m) in outcomes.iter().enumerate() {
        for (ui, &unit) in units.iter().enumerate() {
            row_unit.push(ui);
            row_task.push(TaskIndex::new(local_action(std_data.actions[unit]), ml));
            y.push(std_data.y[(unit, m)]);
        }
    }
    (unit_x, row_unit, row_task, y)
}

fn validate_theta(
    variant: ModelVariant,
    theta: &ThetaParams,
    d_local: usize,
    m_local: usize,
    input_dim: usize,
) -> Result<(), ModelError> {
    let fail = |msg: String| Err(ModelError::ThetaShape(msg));
    if variant.uses_mlp() != theta.mlp.is_some() {
        return fail(format!("variant {variant} mlp presence mismatch"));
    }
    let feat_dim = match &theta.mlp {
        Some(mlp) => {
            if mlp.input_dim() != input_dim {
                return fail(format!(
                    "mlp input dim {} does not match covariate dim {input_dim}",
                    mlp.input_dim()
                ));
            }
            mlp.output_dim()
        }
        None => input_dim,
    };
    if theta.kernel.num_actions != d_local || theta.kernel.num_outcomes != m_local {
        return fail("kernel spec task counts do not match the sub-model".into());
    }
    if theta.kernel.components.is_empty() {
        return fail("kernel spec needs at least one component".into());
    }
    for c in &theta.kernel.components {
        if c.base.dim() != feat_dim {
            return fail(format!(
                "base kernel dim {} does not match feature dim {feat_dim}",
                c.base.dim()
            ));
        }
        match &c.action_factor {
            Some(f) if f.num_tasks() != d_local => {
                return fail("action factor task count mismatch".into())
            }
            None if d_local != 1 => return fail("missing action factor for multi-action".into()),
            _ => {}
        }
        match &c.outcome_factor {
            Some(f) if f.num_tasks() != m_local => {
                return fail("outcome factor task count mismatch".into())
            }
            None if m_local != 1 => {
                return fail("missing outcome factor for multi-outcome".into())
            }
            _ => {}
        }
    }
    if theta.log_noise.len() != d_local * m_local {
        return fail("log_noise length mismatch".into());
    }
    Ok(())
}

impl TrainedModel {
    /// Assembles a model directly from parameters; data is standardized
    /// first, exactly as [`fit`] would.
    pub fn from_params(
        variant: ModelVariant,
        data: &Dataset,
        thetas: Vec<ThetaParams>,
    ) -> Result<Self, ModelError> {
        let (std_data, record) = standardize(data)?;
        Self::assemble(variant, &std_data, record, thetas)
    }

    /// Assembles a model from parameters without standardizing: the data is
    /// taken to be on the model scale already.
    pub fn from_params_raw(
        variant: ModelVariant,
        data: &Dataset,
        thetas: Vec<ThetaParams>,
    ) -> Result<Self, ModelError> {
        data.validate()?;
        let record =
            StandardizationRecord::identity(data.num_covariates(), data.meta.num_outcomes);
        Self::assemble(variant, data, record, thetas)
    }

    pub(crate) fn assemble(
        variant: ModelVariant,
        std_data: &Dataset,
        record: StandardizationRecord,
        thetas: Vec<ThetaParams>,
    ) -> Result<Self, ModelError> {
        let d = std_data.meta.num_actions;
        let m = std_data.meta.num_outcomes;
        let layout = submodel_layout(variant, d, m);
        if thetas.len() != layout.len() {
            return Err(ModelError::ThetaShape(format!(
                "expected {} sub-model parameter sets, got {}",
                layout.len(),
                thetas.len()
            )));
        }
        let mut submodels = Vec::with_capacity(layout.len());
        for ((actions, outcomes), theta) in layout.into_iter().zip(thetas) {
            validate_theta(
                variant,
                &theta,
                actions.len(),
                outcomes.len(),
                std_data.num_covariates(),
            )?;
            let (unit_x, row_unit, row_task, y) = build_design(std_data, &actions, &outcomes);
            submodels.push(SubModel {
                actions,
                outcomes,
                theta,
                unit_x,
                row_unit,
                row_task,
                y,
                cache: None,
            });
        }
        let mut model = TrainedModel {
            variant,
            num_actions: d,
            num_outcomes: m,
            submodels,
            standardization: record,
            nll_trajectory: Vec::new(),
            best_nll: f64::NAN,
        };
        model.finalize()?;
        Ok(model)
    }

    /// Rebuilds the per-sub-model prediction caches.
    pub fn finalize(&mut self) -> Result<(), ModelError> {
        for sub in &mut self.submodels {
            sub.finalize()?;
        }
        Ok(())
    }

    /// Negative log marginal likelihood over the block design, summed over
    /// sub-models.
    pub fn nll(&self) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for sub in &self.submodels {
            total += train::submodel_nll(sub)?;
        }
        Ok(total)
    }

    /// NLL and its analytic gradient, aligned with the sub-model parameter
    /// flattening.
    pub fn nll_grad(&self) -> Result<(f64, Vec<f64>), ModelError> {
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(self.num_params());
        for sub in &self.submodels {
            let (nll, g) = train::submodel_nll_grad(sub)?;
            total += nll;
            g.flatten_into(&mut grad);
        }
        Ok((total, grad))
    }

    pub fn num_params(&self) -> usize {
        self.submodels.iter().map(|s| s.theta.num_params()).sum()
    }

    /// All trainable parameters as one flat vector (sub-models in order).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for sub in &self.submodels {
            sub.theta.flatten_into(&mut out);
        }
        out
    }

    /// Writes a flat parameter vector back. Invalidates prediction caches;
    /// call [`Self::finalize`] before predicting again.
    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<(), ModelError> {
        let expected = self.num_params();
        if params.len() != expected {
            return Err(ModelError::ParamLength { expected, got: params.len() });
        }
        let mut pos = 0;
        for sub in &mut self.submodels {
            pos += sub.theta.unflatten_from(&params[pos..]);
            sub.cache = None;
        }
        Ok(())
    }

    fn submodel_for(&self, task: TaskIndex) -> Result<(&SubModel, TaskIndex), ModelError> {
        if task.action >= self.num_actions || task.outcome >= self.num_outcomes {
            return Err(ModelError::TaskOutOfRange {
                action: task.action,
                outcome: task.outcome,
            });
        }
        for sub in &self.submodels {
            if let Some(local) = sub.local_task(task) {
                return Ok((sub, local));
            }
        }
        unreachable!("layout covers every task")
    }

    fn query_features(&self, sub: &SubModel, xs: &Matrix) -> Result<Matrix, ModelError> {
        let std_x = Matrix::from_fn(xs.rows(), xs.cols(), |i, j| {
            (xs[(i, j)] - self.standardization.x_mean[j]) / self.standardization.x_scale[j]
        });
        match &sub.theta.mlp {
            Some(mlp) => Ok(forward(mlp, &std_x)?.0),
            None => Ok(std_x),
        }
    }

    /// Exact posterior predictive at one query point for one task, in
    /// original outcome units. The variance excludes observation noise.
    pub fn predict(&self, x_star: &[f64], task: TaskIndex) -> Result<PosteriorPrediction, ModelError> {
        let xs = Matrix::from_rows(1, x_star.len(), x_star.to_vec());
        Ok(self.predict_many(&xs, task)?.pop().unwrap())
    }

    /// Batched posterior predictive over the rows of `xs` for one task.
    pub fn predict_many(
        &self,
        xs: &Matrix,
        task: TaskIndex,
    ) -> Result<Vec<PosteriorPrediction>, ModelError> {
        let (sub, local) = self.submodel_for(task)?;
        let feats = self.query_features(sub, xs)?;
        let posterior = sub.posterior_batch(&feats, local)?;
        Ok(posterior
            .into_iter()
            .map(|(mean, var)| {
                let (mean, var) =
                    self.standardization.outcome_to_original(task.outcome, mean, var);
                PosteriorPrediction::from_mean_var(mean, var)
            })
            .collect())
    }

    /// Posterior of the contrast `f_a(x) - f_b(x)` for outcome `m`, using
    /// the joint posterior covariance of the two tasks when they live in the
    /// same sub-model and posterior independence otherwise.
    pub fn predict_contrast(
        &self,
        x_star: &[f64],
        a: usize,
        b: usize,
        m: usize,
    ) -> Result<PosteriorPrediction, ModelError> {
        let task_a = TaskIndex::new(a, m);
        let task_b = TaskIndex::new(b, m);
        let (sub_a, local_a) = self.submodel_for(task_a)?;
        let (sub_b, local_b) = self.submodel_for(task_b)?;
        let same = std::ptr::eq(sub_a, sub_b);
        if !same {
            let pa = self.predict(x_star, task_a)?;
            let pb = self.predict(x_star, task_b)?;
            return Ok(PosteriorPrediction::from_mean_var(
                pa.mean - pb.mean,
                pa.variance + pb.variance,
            ));
        }
        let sub = sub_a;
        let cache = sub.cache()?;
        let xs = Matrix::from_rows(1, x_star.len(), x_star.to_vec());
        let feats = self.query_features(sub, &xs)?;
        let cross_a = assemble_cross_cov(
            &sub.theta.kernel,
            &cache.row_features,
            &sub.row_task,
            &feats,
            &[local_a],
        )?;
        let cross_b = assemble_cross_cov(
            &sub.theta.kernel,
            &cache.row_features,
            &sub.row_task,
            &feats,
            &[local_b],
        )?;
        let diff: Vec<f64> =
            cross_a.row(0).iter().zip(cross_b.row(0)).map(|(x, y)| x - y).collect();
        let mut prior = 0.0;
        for c in &sub.theta.kernel.components {
            let taa = component_task_cov(c, local_a, local_a);
            let tbb = component_task_cov(c, local_b, local_b);
            let tab = component_task_cov(c, local_a, local_b);
            prior += (taa + tbb - 2.0 * tab) * kernel_eval(c.kind, &c.base, feats.row(0), feats.row(0))?;
        }
        let (mean_std, var_std) = if sub.n_rows() == 0 {
            (0.0, prior)
        } else {
            let sol = cache.chol.solve(&diff)?;
            (crate::linalg::dot(&diff, &cache.alpha), prior - crate::linalg::dot(&diff, &sol))
        };
        // the outcome means cancel in the contrast; only the scale applies
        let s = self.standardization.y_scale[m];
        Ok(PosteriorPrediction::from_mean_var(s * mean_std, s * s * var_std))
    }

    /// Versioned, self-describing JSON dump. Finite `f64` values round-trip
    /// bit-exactly.
    pub fn save_json<W: std::io::Write>(&self, w: W) -> Result<(), ModelError> {
        let file = ModelFile { format: FORMAT_NAME.to_string(), version: FORMAT_VERSION, model: self };
        serde_json::to_writer(w, &file).map_err(|e| ModelError::Serialization(e.to_string()))
    }

    pub fn load_json<R: std::io::Read>(r: R) -> Result<Self, ModelError> {
        let file: ModelFileOwned =
            serde_json::from_reader(r).map_err(|e| ModelError::Serialization(e.to_string()))?;
        if file.format != FORMAT_NAME {
            return Err(ModelError::Serialization(format!("unknown format '{}'", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(ModelError::Serialization(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let mut model = file.model;
        model.finalize()?;
        Ok(model)
    }
}

const FORMAT_NAME: &str = "countergp-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct ModelFile<'a> {
    format: String,
    version: u32,
    model: &'a TrainedModel,
}

#[derive(Deserialize)]
struct ModelFileOwned {
    format: String,
    version: u32,
    model: TrainedModel,
}

/// Builds the covariance a brute-force way for small cases; test support for
/// the posterior-equation oracle.
pub fn dense_train_cov(sub: &SubModel) -> Result<SymMatrix, ModelError> {
    let unit_feats = sub.unit_features()?;
    let row_features = sub.expand_rows(&unit_feats);
    Ok(crate::coregion::assemble_train_cov(
        &sub.theta.kernel,
        &row_features,
        &sub.row_task,
        &sub.noise_vars(),
    )?)
}
