//! Seeded simulated environments with closed-form ground truth.
//!
//! Each generator draws an observational dataset and returns alongside it a
//! [`GroundTruthOracle`] exposing the noiseless counterfactual surfaces, the
//! behavior policy, and the noise levels, so estimators can be scored
//! against the truth. Draws come from per-purpose substreams (covariates,
//! actions, noise) of the given seed: regenerating any piece from the
//! recorded seed reproduces it exactly.

use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{CausalError, OutcomeSource};
use crate::data::{Dataset, DatasetMeta};
use crate::linalg::Matrix;
use crate::rng::{streams, substream};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("labels are not contiguous: action {missing} never appears")]
    LabelGap { missing: usize },
    #[error("split would leave an empty partition")]
    DegenerateSplit,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Closed-form ground truth of one simulated environment: true surfaces,
/// behavior policy, noise levels. Stored as the generator tag, seed, and
/// parameters (surfaces are closed-form, never tabulated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthOracle {
    pub dgp: String,
    pub seed: u64,
    kind: OracleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum OracleKind {
    /// One covariate, two actions, one outcome; probit selection.
    OneCovariate,
    /// Four actions, two outcomes; softmax selection with a confounding
    /// shift of `gamma` on the two highest-index actions.
    MultiAction { betas: Vec<Vec<f64>>, gamma: f64 },
    /// Classification-to-bandit transformation: `exp(x . beta_a)` surfaces.
    OpeSynth { betas: Vec<Vec<f64>> },
}

impl GroundTruthOracle {
    pub fn num_actions(&self) -> usize {
        match &self.kind {
            OracleKind::OneCovariate => 2,
            OracleKind::MultiAction { betas, .. } => betas.len(),
            OracleKind::OpeSynth { betas } => betas.len(),
        }
    }

    pub fn num_outcomes(&self) -> usize {
        match &self.kind {
            OracleKind::OneCovariate => 1,
            OracleKind::MultiAction { .. } => 2,
            OracleKind::OpeSynth { .. } => 1,
        }
    }

    /// Noiseless counterfactual surface `f_{a,m}(x)`.
    pub fn true_surface(&self, x: &[f64], action: usize, outcome: usize) -> f64 {
        match &self.kind {
            OracleKind::OneCovariate => {
                let f0 = 2.0 + 0.3 * x[0].exp();
                if action == 0 {
                    f0
                } else {
                    3.0 + f0
                }
            }
            OracleKind::MultiAction { .. } => multi_action_surface(x, action, outcome),
            OracleKind::OpeSynth { betas } => {
                crate::linalg::dot(x, &betas[action]).exp()
            }
        }
    }

    /// Behavior-policy probabilities at `x`; `None` when the actions came
    /// from external labels rather than a generative policy.
    pub fn behavior_probs(&self, x: &[f64]) -> Option<Vec<f64>> {
        match &self.kind {
            OracleKind::OneCovariate => {
                let p1 = normal_cdf(0.2 + x[0]);
                Some(vec![1.0 - p1, p1])
            }
            OracleKind::MultiAction { betas, gamma } => {
                Some(softmax(&behavior_logits(x, betas, *gamma)))
            }
            OracleKind::OpeSynth { .. } => None,
        }
    }

    /// Noise standard deviation of task `(action, outcome)`.
    pub fn noise_std(&self, _action: usize, _outcome: usize) -> f64 {
        match &self.kind {
            OracleKind::OneCovariate => 0.75,
            OracleKind::MultiAction { .. } => 0.5,
            OracleKind::OpeSynth { .. } => 0.5f64.sqrt(),
        }
    }

    /// Exact value of the uniformly-at-random policy on a sample: the mean
    /// over units and actions of the true surface.
    pub fn uniform_policy_value(&self, x: &Matrix, outcome: usize) -> f64 {
        let d = self.num_actions();
        let mut total = 0.0;
        for i in 0..x.rows() {
            for a in 0..d {
                total += self.true_surface(x.row(i), a, outcome);
            }
        }
        total / (x.rows() * d) as f64
    }

    pub fn save_json<W: Write>(&self, w: W) -> Result<(), SimError> {
        let file = OracleFile { format: ORACLE_FORMAT.into(), version: 1, oracle: self.clone() };
        serde_json::to_writer_pretty(w, &file).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn load_json<R: Read>(r: R) -> Result<Self, SimError> {
        let file: OracleFile =
            serde_json::from_reader(r).map_err(|e| SimError::Parse(e.to_string()))?;
        if file.format != ORACLE_FORMAT {
            return Err(SimError::Parse(format!("unknown oracle format '{}'", file.format)));
        }
        Ok(file.oracle)
    }
}

const ORACLE_FORMAT: &str = "countergp-oracle";

#[derive(Serialize, Deserialize)]
struct OracleFile {
    format: String,
    version: u32,
    oracle: GroundTruthOracle,
}

impl OutcomeSource for GroundTruthOracle {
    fn num_actions(&self) -> usize {
        self.num_actions()
    }

    fn num_outcomes(&self) -> usize {
        self.num_outcomes()
    }

    fn mean_outcome(&self, x: &[f64], action: usize, outcome: usize) -> Result<f64, CausalError> {
        Ok(self.true_surface(x, action, outcome))
    }
}

/// Action-assignment coefficient vectors of the multi-action environment,
/// zero-padded to `p` covariates (only the first few are relevant).
fn multi_action_betas(p: usize) -> Vec<Vec<f64>> {
    let heads: [&[f64]; 4] = [
        &[-1.0, -0.8, -0.1, -0.1],
        &[0.0, 0.0, 1.0, 0.8, 0.2],
        &[1.5, -0.8, -0.1, -0.1],
        // the fourth vector repeats the first, as specified
        &[-1.0, -0.8, -0.1, -0.1],
    ];
    heads
        .iter()
        .map(|h| {
            let mut b = vec![0.0; p];
            b[..h.len()].copy_from_slice(h);
            b
        })
        .collect()
}

fn behavior_logits(x: &[f64], betas: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let d = betas.len();
    betas
        .iter()
        .enumerate()
        .map(|(a, b)| {
            let boost = if a >= d - 2 { gamma } else { 0.0 };
            crate::linalg::dot(x, b) + boost
        })
        .collect()
}

/// The eight outcome surfaces of the multi-action environment (two outcomes
/// by four actions); covariates are used up to index 6.
fn multi_action_surface(x: &[f64], action: usize, outcome: usize) -> f64 {
    match outcome {
        0 => {
            let base = 3.0 + 0.4 * x[0] * x[1] - 0.3 * x[2] * x[2]
                + 0.2 * x[3].exp()
                + 0.6 * x[4].sin();
            match action {
                0 => base,
                1 => -1.0 + base + 0.1 * x[5],
                2 => 1.0 + base + 0.3 * x[5],
                _ => 0.5 + base + 0.5 * x[6],
            }
        }
        _ => {
            let base = 1.0 + 0.2 * x[0] * x[1] - 0.2 * x[2] * x[2] + 0.1 * x[3].exp();
            match action {
                0 => base,
                1 => -2.0 + base + 0.2 * x[5],
                2 => 2.0 + base + 0.4 * x[5],
                _ => 1.0 + base + 0.5 * x[6],
            }
        }
    }
}

fn draw_uniform_covariates(n: usize, p: usize, seed: u64) -> Matrix {
    let mut rng = substream(seed, streams::DATA_COVARIATES, 0);
    Matrix::from_fn(n, p, |_, _| rng.random_range(-3.0..3.0))
}

fn draw_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// One-covariate environment: `X ~ U(-3, 3)`, probit selection
/// `p(A=1|x) = Phi(0.2 + x)`, surfaces `f_0 = 2 + 0.3 exp(x)`,
/// `f_1 = 3 + f_0`, noise sd 0.75.
pub fn gen_b1(n: usize, seed: u64) -> Result<(Dataset, GroundTruthOracle), SimError> {
    if n < 2 {
        return Err(SimError::InvalidDims("need at least 2 units".into()));
    }
    let oracle =
        GroundTruthOracle { dgp: "b1".into(), seed, kind: OracleKind::OneCovariate };
    let x = draw_uniform_covariates(n, 1, seed);
    let mut a_rng = substream(seed, streams::DATA_ACTIONS, 0);
    let actions: Vec<usize> = (0..n)
        .map(|i| {
            let p1 = normal_cdf(0.2 + x[(i, 0)]);
            usize::from(a_rng.random_range(0.0..1.0) < p1)
        })
        .collect();
    let mut noise = substream(seed, streams::DATA_NOISE, 0);
    let y = Matrix::from_fn(n, 1, |i, _| {
        let z: f64 = noise.sample(rand_distr::StandardNormal);
        oracle.true_surface(x.row(i), actions[i], 0) + oracle.noise_std(actions[i], 0) * z
    });
    let meta = DatasetMeta { num_actions: 2, num_outcomes: 1, seed, dgp: "b1".into() };
    Ok((Dataset::new(x, actions, y, meta)?, oracle))
}

/// Multi-action, multi-outcome environment with softmax selection; the
/// special case `gamma = 0` of [`gen_confounded`].
pub fn gen_b2(n: usize, p: usize, seed: u64) -> Result<(Dataset, GroundTruthOracle), SimError> {
    gen_confounded(n, p, 0.0, seed)
}

/// Same environment with the softmax logits of the two highest-index
/// actions shifted by `gamma`, increasing arm imbalance; `gamma = 0`
/// reduces bitwise to [`gen_b2`].
pub fn gen_confounded(
    n: usize,
    p: usize,
    gamma: f64,
    seed: u64,
) -> Result<(Dataset, GroundTruthOracle), SimError> {
    if p < 7 {
        return Err(SimError::InvalidDims(format!(
            "surfaces use covariates 0..=6, got p = {p}"
        )));
    }
    if n < 4 {
        return Err(SimError::InvalidDims("need at least as many units as actions".into()));
    }
    let betas = multi_action_betas(p);
    let tag = if gamma == 0.0 { "b2".to_string() } else { "confounded".to_string() };
    let oracle = GroundTruthOracle {
        dgp: tag.clone(),
        seed,
        kind: OracleKind::MultiAction { betas: betas.clone(), gamma },
    };
    let x = draw_uniform_covariates(n, p, seed);
    let mut a_rng = substream(seed, streams::DATA_ACTIONS, 0);
    let actions: Vec<usize> = (0..n)
        .map(|i| {
            let probs = softmax(&behavior_logits(x.row(i), &betas, gamma));
            draw_categorical(&probs, a_rng.random_range(0.0..1.0))
        })
        .collect();
    let mut noise = substream(seed, streams::DATA_NOISE, 0);
    let mut y = Matrix::zeros(n, 2);
    for i in 0..n {
        for m in 0..2 {
            let z: f64 = noise.sample(rand_distr::StandardNormal);
            y[(i, m)] =
                oracle.true_surface(x.row(i), actions[i], m) + oracle.noise_std(actions[i], m) * z;
        }
    }
    let meta = DatasetMeta { num_actions: 4, num_outcomes: 2, seed, dgp: tag };
    Ok((Dataset::new(x, actions, y, meta)?, oracle))
}

/// Classification-to-bandit transformation: labels become actions, and the
/// action-specific outcome is `exp(x . beta_a)` plus Gaussian noise, with
/// the coefficient entries drawn from {0.4, 0.2, 0.0} with probabilities
/// (0.6, 0.25, 0.15).
pub fn gen_ope_synth(
    x_source: &Matrix,
    labels: &[usize],
    seed: u64,
) -> Result<(Dataset, GroundTruthOracle), SimError> {
    let n = x_source.rows();
    let p = x_source.cols();
    if n != labels.len() {
        return Err(SimError::InvalidDims(format!(
            "{n} covariate rows vs {} labels",
            labels.len()
        )));
    }
    if n == 0 || p == 0 {
        return Err(SimError::InvalidDims("empty covariate matrix".into()));
    }
    let d = labels.iter().max().unwrap() + 1;
    for a in 0..d {
        if !labels.contains(&a) {
            return Err(SimError::LabelGap { missing: a });
        }
    }
    let mut beta_rng = substream(seed, streams::DATA_SURFACE, 0);
    let betas: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            (0..p)
                .map(|_| {
                    let u: f64 = beta_rng.random_range(0.0..1.0);
                    if u < 0.6 {
                        0.4
                    } else if u < 0.85 {
                        0.2
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let oracle = GroundTruthOracle {
        dgp: "ope-synth".into(),
        seed,
        kind: OracleKind::OpeSynth { betas },
    };
    let mut noise = substream(seed, streams::DATA_NOISE, 0);
    let y = Matrix::from_fn(n, 1, |i, _| {
        let z: f64 = noise.sample(rand_distr::StandardNormal);
        oracle.true_surface(x_source.row(i), labels[i], 0)
            + oracle.noise_std(labels[i], 0) * z
    });
    let meta = DatasetMeta { num_actions: d, num_outcomes: 1, seed, dgp: "ope-synth".into() };
    Ok((Dataset::new(x_source.clone(), labels.to_vec(), y, meta)?, oracle))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Seeded uniform shuffle, then a disjoint, exhaustive partition.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), SimError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(SimError::InvalidDims(format!(
            "train fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let n = data.len();
    if n < 2 {
        return Err(SimError::DegenerateSplit);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut substream(spec.seed, streams::SPLIT, 0));
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train = data.select(&idx[..n_train]);
    let test = data.select(&idx[n_train..]);
    Ok((train, test))
}

/// Formats with 17 significant digits, enough for exact f64 round-trips.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `x0,...,x{P-1},a,y0,...,y{M-1}` rows in UTF-8.
pub fn write_csv<W: Write>(data: &Dataset, mut w: W) -> Result<(), SimError> {
    let p = data.num_covariates();
    let m = data.meta.num_outcomes;
    let mut header: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    header.push("a".into());
    header.extend((0..m).map(|j| format!("y{j}")));
    writeln!(w, "{}", header.join(","))?;
    for i in 0..data.len() {
        let mut fields: Vec<String> = data.x.row(i).iter().map(|v| fmt_f64(*v)).collect();
        fields.push(data.actions[i].to_string());
        fields.extend(data.y.row(i).iter().map(|v| fmt_f64(*v)));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn write_csv_path(data: &Dataset, path: &std::path::Path) -> Result<(), SimError> {
    let file = std::fs::File::create(path)?;
    write_csv(data, std::io::BufWriter::new(file))
}

/// Reads a dataset back. The action count is inferred from the data; the
/// seed and generator tag are not recoverable from a bare CSV.
pub fn read_csv<R: Read>(r: R) -> Result<Dataset, SimError> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| SimError::Parse("empty file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let a_pos = cols
        .iter()
        .position(|c| *c == "a")
        .ok_or_else(|| SimError::Parse("missing action column 'a'".into()))?;
    let p = a_pos;
    let m = cols.len() - a_pos - 1;
    if m == 0 {
        return Err(SimError::Parse("no outcome columns".into()));
    }
    let mut xs = Vec::new();
    let mut actions = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(SimError::Parse(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        for f in &fields[..p] {
            xs.push(
                f.parse::<f64>()
                    .map_err(|e| SimError::Parse(format!("row {}: {e}", lineno + 2)))?,
            );
        }
        actions.push(
            fields[p]
                .parse::<usize>()
                .map_err(|e| SimError::Parse(format!("row {}: {e}", lineno + 2)))?,
        );
        for f in &fields[p + 1..] {
            ys.push(
                f.parse::<f64>()
                    .map_err(|e| SimError::Parse(format!("row {}: {e}", lineno + 2)))?,
            );
        }
    }
    let n = actions.len();
    if n == 0 {
        return Err(SimError::Parse("no data rows".into()));
    }
    let num_actions = actions.iter().max().unwrap() + 1;
    let meta = DatasetMeta { num_actions, num_outcomes: m, seed: 0, dgp: "csv".into() };
    Ok(Dataset::new(
        Matrix::from_rows(n, p, xs),
        actions,
        Matrix::from_rows(n, m, ys),
        meta,
    )?)
}

pub fn read_csv_path(path: &std::path::Path) -> Result<Dataset, SimError> {
    read_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn b1_oracle_surfaces_and_behavior() {
        let (_, oracle) = gen_b1(10, 1).unwrap();
        for x in [-2.0, 0.0, 1.5] {
            let gap = oracle.true_surface(&[x], 1, 0) - oracle.true_surface(&[x], 0, 0);
            assert!((gap - 3.0).abs() < 1e-12);
        }
        assert!((oracle.true_surface(&[0.0], 0, 0) - 2.3).abs() < 1e-12);
        let probs = oracle.behavior_probs(&[-0.2]).unwrap();
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn b2_oracle_hand_values() {
        let (_, oracle) = gen_b2(10, 7, 2).unwrap();
        let zero = vec![0.0; 7];
        let probs = oracle.behavior_probs(&zero).unwrap();
        for p in &probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert!((oracle.true_surface(&zero, 0, 0) - 3.2).abs() < 1e-12);
        // second-outcome contrast between actions 1 and 0: -2 + 0.2 x5
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
            let diff = oracle.true_surface(&x, 1, 1) - oracle.true_surface(&x, 0, 1);
            assert!((diff - (-2.0 + 0.2 * x[5])).abs() < 1e-10);
        }
    }

    #[test]
    fn confounded_zero_gamma_reduces_to_b2() {
        let (a, _) = gen_b2(50, 8, 7).unwrap();
        let (b, _) = gen_confounded(50, 8, 0.0, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn confounded_gamma_one_probabilities() {
        let (_, oracle) = gen_confounded(10, 7, 1.0, 4).unwrap();
        let probs = oracle.behavior_probs(&vec![0.0; 7]).unwrap();
        let e = std::f64::consts::E;
        let z = 2.0 + 2.0 * e;
        assert!((probs[0] - 1.0 / z).abs() < 1e-12);
        assert!((probs[1] - 1.0 / z).abs() < 1e-12);
        assert!((probs[2] - e / z).abs() < 1e-12);
        assert!((probs[3] - e / z).abs() < 1e-12);
    }

    #[test]
    fn confounded_large_gamma_concentrates_boosted_arms() {
        let (data, _) = gen_confounded(2000, 7, 50.0, 5).unwrap();
        let boosted = data.actions.iter().filter(|&&a| a >= 2).count();
        assert!(boosted as f64 / 2000.0 > 0.999);
    }

    #[test]
    fn generators_are_deterministic() {
        let (a1, o1) = gen_b2(30, 7, 11).unwrap();
        let (a2, o2) = gen_b2(30, 7, 11).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(o1, o2);
        let (b1_, _) = gen_b1(30, 11).unwrap();
        let (b2_, _) = gen_b1(30, 11).unwrap();
        assert_eq!(b1_, b2_);
    }

    #[test]
    fn overlap_holds_strictly() {
        let (data, oracle) = gen_b1(300, 9).unwrap();
        for i in 0..data.len() {
            for p in oracle.behavior_probs(data.x.row(i)).unwrap() {
                assert!(p > 0.0 && p < 1.0);
            }
        }
        let (data, oracle) = gen_confounded(300, 7, 2.0, 9).unwrap();
        for i in 0..data.len() {
            for p in oracle.behavior_probs(data.x.row(i)).unwrap() {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn outcomes_regenerate_from_oracle_and_noise_stream() {
        let (data, oracle) = gen_b2(40, 7, 13).unwrap();
        let mut noise = substream(13, streams::DATA_NOISE, 0);
        for i in 0..40 {
            for m in 0..2 {
                let z: f64 = noise.sample(rand_distr::StandardNormal);
                let want = oracle.true_surface(data.x.row(i), data.actions[i], m)
                    + oracle.noise_std(data.actions[i], m) * z;
                assert_eq!(want.to_bits(), data.y[(i, m)].to_bits());
            }
        }
    }

    #[test]
    fn b2_arm_frequencies_match_softmax_integral() {
        let n = 100_000;
        let (data, oracle) = gen_b2(n, 7, 17).unwrap();
        let mut freq = [0.0; 4];
        for &a in &data.actions {
            freq[a] += 1.0 / n as f64;
        }
        // Monte Carlo integration of the softmax over the covariate law,
        // with an independent stream
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        let mc = 100_000;
        let mut expect = [0.0; 4];
        for _ in 0..mc {
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
            for (a, p) in oracle.behavior_probs(&x).unwrap().into_iter().enumerate() {
                expect[a] += p / mc as f64;
            }
        }
        for a in 0..4 {
            assert!(
                (freq[a] - expect[a]).abs() < 0.01,
                "arm {a}: {} vs {}",
                freq[a],
                expect[a]
            );
        }
    }

    #[test]
    fn ope_synth_surfaces_and_uniform_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 50;
        let x = Matrix::from_fn(n, 3, |_, _| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let (data, oracle) = gen_ope_synth(&x, &labels, 23).unwrap();
        assert_eq!(data.meta.num_actions, 3);
        // zero covariates give surface exp(0) = 1 for every action
        let zeros = vec![0.0; 3];
        for a in 0..3 {
            assert_eq!(oracle.true_surface(&zeros, a, 0), 1.0);
        }
        // the closed-form uniform value equals the definition plug-in
        let v = oracle.uniform_policy_value(&x, 0);
        let mut want = 0.0;
        for i in 0..n {
            for a in 0..3 {
                want += oracle.true_surface(x.row(i), a, 0) / 3.0;
            }
        }
        want /= n as f64;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn ope_synth_rejects_label_gaps() {
        let x = Matrix::zeros(4, 2);
        let labels = vec![0, 0, 2, 2];
        assert!(matches!(
            gen_ope_synth(&x, &labels, 1),
            Err(SimError::LabelGap { missing: 1 })
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (data, _) = gen_b1(10, 31).unwrap();
        let spec = SplitSpec { train_fraction: 0.8, seed: 5 };
        let (train, test) = split(&data, &spec).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        let (train2, test2) = split(&data, &spec).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }

    #[test]
    fn split_partitions_exactly() {
        let (data, _) = gen_b2(37, 7, 33).unwrap();
        let (train, test) = split(&data, &SplitSpec { train_fraction: 0.8, seed: 6 }).unwrap();
        assert_eq!(train.len() + test.len(), 37);
        // multiset equality via sorted row signatures
        let sig = |d: &Dataset| {
            let mut rows: Vec<String> = (0..d.len())
                .map(|i| {
                    format!(
                        "{:?}|{}|{:?}",
                        d.x.row(i),
                        d.actions[i],
                        d.y.row(i)
                    )
                })
                .collect();
            rows.sort();
            rows
        };
        let mut combined = sig(&train);
        combined.extend(sig(&test));
        combined.sort();
        assert_eq!(combined, sig(&data));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let (data, _) = gen_b2(25, 7, 41).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.meta.num_actions, 4);
        assert_eq!(back.meta.num_outcomes, 2);
        for i in 0..data.len() {
            assert_eq!(data.actions[i], back.actions[i]);
            for j in 0..7 {
                assert_eq!(data.x[(i, j)].to_bits(), back.x[(i, j)].to_bits());
            }
            for m in 0..2 {
                assert_eq!(data.y[(i, m)].to_bits(), back.y[(i, m)].to_bits());
            }
        }
    }

    #[test]
    fn oracle_sidecar_round_trips() {
        let (_, oracle) = gen_confounded(10, 7, 1.5, 55).unwrap();
        let mut buf = Vec::new();
        oracle.save_json(&mut buf).unwrap();
        let back = GroundTruthOracle::load_json(buf.as_slice()).unwrap();
        assert_eq!(oracle, back);
    }
}
