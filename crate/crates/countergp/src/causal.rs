//! Causal estimands and evaluation metrics.
//!
//! Everything here consumes a source of interventional outcome means
//! `E(Y | do(A = a), X = x)` — either a fitted model (the plug-in direct
//! method) or a simulator's ground-truth oracle, so every metric can be
//! scored against the truth on simulated data.

use thiserror::Error;

use crate::coregion::TaskIndex;
use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::model::{ModelError, PosteriorPrediction, TrainedModel};

#[derive(Debug, Error)]
pub enum CausalError {
    #[error("contrast requires two distinct actions")]
    SameAction,
    #[error("no units observed under action {action}")]
    NoTreatedUnits { action: usize },
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("policy risk requires a binary action space, got {got} actions")]
    NotBinaryActions { got: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid outcome weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A source of interventional outcome means.
pub trait OutcomeSource {
    fn num_actions(&self) -> usize;
    fn num_outcomes(&self) -> usize;
    fn mean_outcome(&self, x: &[f64], action: usize, outcome: usize) -> Result<f64, CausalError>;

    /// Batched evaluation over the rows of `x`; override when a faster path
    /// exists.
    fn mean_outcomes(
        &self,
        x: &Matrix,
        action: usize,
        outcome: usize,
    ) -> Result<Vec<f64>, CausalError> {
        (0..x.rows()).map(|i| self.mean_outcome(x.row(i), action, outcome)).collect()
    }
}

impl OutcomeSource for TrainedModel {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn num_outcomes(&self) -> usize {
        self.num_outcomes
    }

    fn mean_outcome(&self, x: &[f64], action: usize, outcome: usize) -> Result<f64, CausalError> {
        Ok(self.predict(x, TaskIndex::new(action, outcome))?.mean)
    }

    fn mean_outcomes(
        &self,
        x: &Matrix,
        action: usize,
        outcome: usize,
    ) -> Result<Vec<f64>, CausalError> {
        let preds = self.predict_many(x, TaskIndex::new(action, outcome))?;
        Ok(preds.into_iter().map(|p| p.mean).collect())
    }
}

/// An action-allocation policy.
pub enum PolicySpec {
    UniformRandom,
    Deterministic(Box<dyn Fn(&[f64]) -> usize + Send + Sync>),
    Stochastic(Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl PolicySpec {
    /// Action probabilities at `x` over `d` actions, validated.
    pub fn probs(&self, x: &[f64], d: usize) -> Result<Vec<f64>, CausalError> {
        match self {
            PolicySpec::UniformRandom => Ok(vec![1.0 / d as f64; d]),
            PolicySpec::Deterministic(f) => {
                let a = f(x);
                if a >= d {
                    return Err(CausalError::InvalidPolicy(format!(
                        "deterministic policy chose action {a} of {d}"
                    )));
                }
                let mut p = vec![0.0; d];
                p[a] = 1.0;
                Ok(p)
            }
            PolicySpec::Stochastic(f) => {
                let p = f(x);
                if p.len() != d {
                    return Err(CausalError::InvalidPolicy(format!(
                        "probability vector has {} entries for {d} actions",
                        p.len()
                    )));
                }
                if p.iter().any(|v| *v < 0.0) {
                    return Err(CausalError::InvalidPolicy("negative probability".into()));
                }
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(CausalError::InvalidPolicy(format!(
                        "probabilities sum to {sum}"
                    )));
                }
                Ok(p)
            }
        }
    }
}

/// Individual causal effect `E(Y | do(A = a), X = x)` with credible bands:
/// the posterior predictive for task (a, m).
pub fn ice(
    model: &TrainedModel,
    x: &[f64],
    action: usize,
    outcome: usize,
) -> Result<PosteriorPrediction, CausalError> {
    Ok(model.predict(x, TaskIndex::new(action, outcome))?)
}

/// Treatment-effect contrast `f_a(x) - f_b(x)` between two actions.
pub fn cate(
    source: &dyn OutcomeSource,
    x: &[f64],
    a: usize,
    b: usize,
    outcome: usize,
) -> Result<f64, CausalError> {
    if a == b {
        return Err(CausalError::SameAction);
    }
    Ok(source.mean_outcome(x, a, outcome)? - source.mean_outcome(x, b, outcome)?)
}

/// The contrast with credible bands from the joint posterior of the two
/// action surfaces.
pub fn cate_prediction(
    model: &TrainedModel,
    x: &[f64],
    a: usize,
    b: usize,
    outcome: usize,
) -> Result<PosteriorPrediction, CausalError> {
    if a == b {
        return Err(CausalError::SameAction);
    }
    Ok(model.predict_contrast(x, a, b, outcome)?)
}

/// Average treatment effect over the units observed under `treated_action`.
pub fn att(
    source: &dyn OutcomeSource,
    data: &Dataset,
    treated_action: usize,
    control_action: usize,
    outcome: usize,
) -> Result<f64, CausalError> {
    if treated_action == control_action {
        return Err(CausalError::SameAction);
    }
    let idx: Vec<usize> =
        (0..data.len()).filter(|&i| data.actions[i] == treated_action).collect();
    if idx.is_empty() {
        return Err(CausalError::NoTreatedUnits { action: treated_action });
    }
    let treated = data.select(&idx);
    let va = source.mean_outcomes(&treated.x, treated_action, outcome)?;
    let vb = source.mean_outcomes(&treated.x, control_action, outcome)?;
    Ok(va.iter().zip(&vb).map(|(p, q)| p - q).sum::<f64>() / idx.len() as f64)
}

/// Plug-in policy value: the per-unit mean of
/// `sum_a pi(a | x_i) * E(Y | do(A = a), X = x_i)`.
pub fn policy_value(
    source: &dyn OutcomeSource,
    policy: &PolicySpec,
    x: &Matrix,
    outcome: usize,
) -> Result<f64, CausalError> {
    let n = x.rows();
    if n == 0 {
        return Err(CausalError::LengthMismatch { a: 0, b: 0 });
    }
    let d = source.num_actions();
    let mut values = Matrix::zeros(n, d);
    for a in 0..d {
        let col = source.mean_outcomes(x, a, outcome)?;
        for (i, v) in col.into_iter().enumerate() {
            values[(i, a)] = v;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let probs = policy.probs(x.row(i), d)?;
        total += crate::linalg::dot(&probs, values.row(i));
    }
    Ok(total / n as f64)
}

/// Per-unit value-maximizing action under outcome weights (nonnegative,
/// summing to one). Ties break to the smallest action index.
pub fn optimal_policy(
    source: &dyn OutcomeSource,
    x: &Matrix,
    weights: &[f64],
) -> Result<Vec<usize>, CausalError> {
    let m = source.num_outcomes();
    if weights.len() != m {
        return Err(CausalError::InvalidWeights(format!(
            "expected {m} weights, got {}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(CausalError::InvalidWeights("negative weight".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(CausalError::InvalidWeights(format!("weights sum to {sum}")));
    }
    let n = x.rows();
    let d = source.num_actions();
    let mut score = Matrix::zeros(n, d);
    for a in 0..d {
        for (mm, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let col = source.mean_outcomes(x, a, mm)?;
            for (i, v) in col.into_iter().enumerate() {
                score[(i, a)] += w * v;
            }
        }
    }
    Ok((0..n)
        .map(|i| {
            let row = score.row(i);
            let mut best = 0;
            for a in 1..d {
                if row[a] > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect())
}

/// Optimal allocation rate: the fraction of units assigned their true best
/// action.
pub fn oar(predicted: &[usize], true_best: &[usize]) -> Result<f64, CausalError> {
    if predicted.len() != true_best.len() {
        return Err(CausalError::LengthMismatch { a: predicted.len(), b: true_best.len() });
    }
    if predicted.is_empty() {
        return Err(CausalError::LengthMismatch { a: 0, b: 0 });
    }
    let hits = predicted.iter().zip(true_best).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

fn coverage_fraction(bands: &[(f64, f64)], truths: &[f64]) -> f64 {
    let hits = bands
        .iter()
        .zip(truths)
        .filter(|((lo, hi), t)| *lo <= **t && **t <= *hi)
        .count();
    hits as f64 / bands.len() as f64
}

/// Fraction of (unit, task) pairs whose true latent value falls inside the
/// model's 95% credible band, averaged over all requested tasks.
/// `truth(unit, task)` supplies the true surface value.
pub fn coverage95<F: Fn(usize, TaskIndex) -> f64>(
    model: &TrainedModel,
    truth: F,
    x: &Matrix,
    tasks: &[TaskIndex],
) -> Result<f64, CausalError> {
    if x.rows() == 0 || tasks.is_empty() {
        return Err(CausalError::LengthMismatch { a: x.rows(), b: tasks.len() });
    }
    let mut bands = Vec::with_capacity(x.rows() * tasks.len());
    let mut truths = Vec::with_capacity(bands.capacity());
    for &task in tasks {
        let preds = model.predict_many(x, task)?;
        for (i, p) in preds.into_iter().enumerate() {
            bands.push((p.lower95, p.upper95));
            truths.push(truth(i, task));
        }
    }
    Ok(coverage_fraction(&bands, &truths))
}

/// The treatment rule induced by the sign of the model's binary-action
/// effect estimate: action 1 wherever `E(Y|do(1), x) - E(Y|do(0), x) > 0`.
pub fn ice_sign_policy(
    source: &dyn OutcomeSource,
    x: &Matrix,
    outcome: usize,
) -> Result<Vec<usize>, CausalError> {
    if source.num_actions() != 2 {
        return Err(CausalError::NotBinaryActions { got: source.num_actions() });
    }
    let v1 = source.mean_outcomes(x, 1, outcome)?;
    let v0 = source.mean_outcomes(x, 0, outcome)?;
    Ok(v1.iter().zip(&v0).map(|(a, b)| usize::from(a - b > 0.0)).collect())
}

/// Policy risk of a binary treatment rule, evaluated with oracle outcome
/// means over the sample partition the rule induces:
/// `1 - [E(Y|do(1), pi=1) p(pi=1) + E(Y|do(0), pi=0) p(pi=0)]`.
/// An empty partition contributes zero.
pub fn policy_risk(
    oracle: &dyn OutcomeSource,
    policy: &[usize],
    x: &Matrix,
    outcome: usize,
) -> Result<f64, CausalError> {
    if oracle.num_actions() != 2 {
        return Err(CausalError::NotBinaryActions { got: oracle.num_actions() });
    }
    if policy.len() != x.rows() {
        return Err(CausalError::LengthMismatch { a: policy.len(), b: x.rows() });
    }
    if policy.iter().any(|&a| a > 1) {
        return Err(CausalError::InvalidPolicy("treatment rule must be 0/1".into()));
    }
    let n = x.rows();
    let mut value = 0.0;
    for arm in 0..2usize {
        let idx: Vec<usize> = (0..n).filter(|&i| policy[i] == arm).collect();
        if idx.is_empty() {
            continue;
        }
        let sel = Matrix::from_fn(idx.len(), x.cols(), |i, j| x[(idx[i], j)]);
        let means = oracle.mean_outcomes(&sel, arm, outcome)?;
        let avg = means.iter().sum::<f64>() / idx.len() as f64;
        value += avg * idx.len() as f64 / n as f64;
    }
    Ok(1.0 - value)
}

/// Absolute regret of an off-policy value estimate.
pub fn ope_regret(estimated: f64, oracle: f64) -> f64 {
    (estimated - oracle).abs()
}

/// Root mean squared error between paired vectors.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, CausalError> {
    if pred.len() != truth.len() {
        return Err(CausalError::LengthMismatch { a: pred.len(), b: truth.len() });
    }
    if pred.is_empty() {
        return Err(CausalError::LengthMismatch { a: 0, b: 0 });
    }
    let mse =
        pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}
