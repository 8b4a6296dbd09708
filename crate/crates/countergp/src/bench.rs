//! Experiment orchestration: replication loops over seeds, the model
//! variants, metric aggregation with Monte Carlo means and 95% confidence
//! intervals, and structured result emission.
//!
//! Each replication derives its own seed, generates data, splits it, fits
//! every requested variant on the training split, and scores the requested
//! metrics: regression metrics (ICE error, coverage) on the held-out test
//! split, policy metrics (value error, allocation, risk) on the full
//! sample. Failed fits are recorded, excluded from aggregates, and counted
//! rather than aborting the run. Runs are deterministic: identical configs
//! produce byte-identical results files (fit wall-clock times go to a
//! separate timings file, outside the determinism guarantee).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{
    coverage95, ice_sign_policy, optimal_policy, policy_risk, policy_value, rmse, CausalError,
    OutcomeSource, PolicySpec,
};
use crate::coregion::TaskIndex;
use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::model::{fit, FitConfig, ModelError, ModelVariant, TrainedModel};
use crate::rng::{derive_seed, streams, substream};
use crate::sim::{
    gen_b1, gen_b2, gen_confounded, gen_ope_synth, split, GroundTruthOracle, SimError, SplitSpec,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Causal(#[from] CausalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialization(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    B1,
    B2,
    Confounded,
    OpeSynth,
}

impl DgpKind {
    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s {
            "b1" => Ok(DgpKind::B1),
            "b2" => Ok(DgpKind::B2),
            "confounded" => Ok(DgpKind::Confounded),
            "ope-synth" => Ok(DgpKind::OpeSynth),
            other => Err(BenchError::ConfigInvalid(format!("unknown dgp '{other}'"))),
        }
    }
}

fn default_actions() -> usize {
    2
}

/// Which simulated environment to draw, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub kind: DgpKind,
    pub n: usize,
    #[serde(default)]
    pub p: usize,
    #[serde(default)]
    pub gamma: f64,
    /// Number of actions for the synthetic classification-to-bandit
    /// environment (the other environments fix their own).
    #[serde(default = "default_actions")]
    pub actions: usize,
}

impl DgpConfig {
    fn tag(&self) -> String {
        match self.kind {
            DgpKind::B1 => format!("b1[n={}]", self.n),
            DgpKind::B2 => format!("b2[n={},p={}]", self.n, self.p),
            DgpKind::Confounded => {
                format!("confounded[n={},p={},gamma={}]", self.n, self.p, self.gamma)
            }
            DgpKind::OpeSynth => {
                format!("ope-synth[n={},p={},d={}]", self.n, self.p, self.actions)
            }
        }
    }

    pub fn num_actions(&self) -> usize {
        match self.kind {
            DgpKind::B1 => 2,
            DgpKind::B2 | DgpKind::Confounded => 4,
            DgpKind::OpeSynth => self.actions,
        }
    }

    /// Draws one dataset and its oracle on the replication seed.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, GroundTruthOracle), SimError> {
        match self.kind {
            DgpKind::B1 => gen_b1(self.n, seed),
            DgpKind::B2 => gen_b2(self.n, self.p, seed),
            DgpKind::Confounded => gen_confounded(self.n, self.p, self.gamma, seed),
            DgpKind::OpeSynth => {
                // synthetic stand-in for an external classification dataset:
                // uniform covariates and softmax labels from a random
                // projection, with the first d units forced to distinct
                // labels so the label set is contiguous
                use rand::Rng;
                let d = self.actions;
                let mut xr = substream(seed, streams::DATA_COVARIATES, 0);
                let x = Matrix::from_fn(self.n, self.p, |_, _| xr.random_range(-3.0..3.0));
                let mut ar = substream(seed, streams::DATA_ACTIONS, 0);
                let proj =
                    Matrix::from_fn(d, self.p, |_, _| ar.random_range(-0.5..0.5));
                let labels: Vec<usize> = (0..self.n)
                    .map(|i| {
                        if i < d {
                            return i;
                        }
                        let logits: Vec<f64> =
                            (0..d).map(|a| crate::linalg::dot(proj.row(a), x.row(i))).collect();
                        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let weights: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                        let total: f64 = weights.iter().sum();
                        let u: f64 = ar.random_range(0.0..total);
                        let mut acc = 0.0;
                        for (a, w) in weights.iter().enumerate() {
                            acc += w;
                            if u < acc {
                                return a;
                            }
                        }
                        d - 1
                    })
                    .collect();
                gen_ope_synth(&x, &labels, seed)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricTask {
    Ice,
    Ope,
    Opl,
    Coverage,
    PolicyRisk,
    OpeRegret,
}

impl MetricTask {
    pub fn name(self) -> &'static str {
        match self {
            MetricTask::Ice => "ice",
            MetricTask::Ope => "ope",
            MetricTask::Opl => "opl",
            MetricTask::Coverage => "coverage",
            MetricTask::PolicyRisk => "policy_risk",
            MetricTask::OpeRegret => "ope_regret",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    N,
    P,
    Gamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Full experiment description; mirrors the benchmark config file
/// field-for-field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub variants: Vec<ModelVariant>,
    pub replications: usize,
    pub fit: FitConfig,
    pub split: SplitSpec,
    pub tasks: Vec<MetricTask>,
    pub base_seed: u64,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.replications == 0 {
            return Err(BenchError::ConfigInvalid("replications must be >= 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(BenchError::ConfigInvalid("tasks must be nonempty".into()));
        }
        if self.variants.is_empty() {
            return Err(BenchError::ConfigInvalid("variants must be nonempty".into()));
        }
        if self.tasks.contains(&MetricTask::PolicyRisk) && self.dgp.num_actions() != 2 {
            return Err(BenchError::ConfigInvalid(
                "policy_risk requires a binary action space".into(),
            ));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(BenchError::ConfigInvalid("train_fraction must be in (0, 1)".into()));
        }
        if self.dgp.gamma < 0.0 {
            return Err(BenchError::ConfigInvalid("gamma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| BenchError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, BenchError> {
        toml::to_string_pretty(self).map_err(|e| BenchError::Serialization(e.to_string()))
    }
}

/// Per-replication metric values for one task: one value per outcome plus
/// the equal-weight aggregate across outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub task: MetricTask,
    pub per_outcome: Vec<f64>,
    pub aggregate: f64,
}

impl MetricReport {
    pub fn new(task: MetricTask, per_outcome: Vec<f64>) -> Self {
        let aggregate = per_outcome.iter().sum::<f64>() / per_outcome.len() as f64;
        MetricReport { task, per_outcome, aggregate }
    }
}

/// One metric observation: a (dgp, variant, task, outcome, replication)
/// cell. `outcome = None` is the equal-weight aggregate across outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dgp: String,
    pub variant: ModelVariant,
    pub task: MetricTask,
    pub outcome: Option<usize>,
    pub seed: u64,
    pub value: f64,
    pub failed: bool,
    /// Fit wall-clock seconds; reported in the timings file only.
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dgp: String,
    pub variant: ModelVariant,
    pub task: MetricTask,
    pub outcome: Option<usize>,
    pub mean: f64,
    /// Half-width of the 95% confidence interval, `1.96 * sd / sqrt(B)`.
    pub ci95_half: f64,
    pub reps_used: usize,
    pub reps_failed: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
    /// Replication seeds actually used, in order (sweeps concatenate).
    pub seeds: Vec<u64>,
}

fn all_tasks_for_outcome(d: usize, m: usize) -> Vec<TaskIndex> {
    (0..d).map(|a| TaskIndex::new(a, m)).collect()
}

fn one_hot(m: usize, len: usize) -> Vec<f64> {
    let mut w = vec![0.0; len];
    w[m] = 1.0;
    w
}

/// Scores one fitted model on the requested tasks.
fn compute_metrics(
    model: &TrainedModel,
    oracle: &GroundTruthOracle,
    full: &Dataset,
    test: &Dataset,
    tasks: &[MetricTask],
) -> Result<Vec<MetricReport>, BenchError> {
    let d = full.meta.num_actions;
    let m_out = full.meta.num_outcomes;
    let mut reports = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let mut per_outcome = Vec::with_capacity(m_out);
        for m in 0..m_out {
            let value = match task {
                MetricTask::Ice => {
                    // RMSE of the predicted do-response surfaces against the
                    // truth over test units and all actions
                    let mut pred = Vec::with_capacity(test.len() * d);
                    let mut truth = Vec::with_capacity(test.len() * d);
                    for a in 0..d {
                        let means = model.mean_outcomes(&test.x, a, m)?;
                        for (i, v) in means.into_iter().enumerate() {
                            pred.push(v);
                            truth.push(oracle.true_surface(test.x.row(i), a, m));
                        }
                    }
                    rmse(&pred, &truth)?
                }
                MetricTask::Ope | MetricTask::OpeRegret => {
                    let est =
                        policy_value(model, &PolicySpec::UniformRandom, &full.x, m)?;
                    let truth =
                        policy_value(oracle, &PolicySpec::UniformRandom, &full.x, m)?;
                    crate::causal::ope_regret(est, truth)
                }
                MetricTask::Opl => {
                    let w = one_hot(m, m_out);
                    let chosen = optimal_policy(model, &full.x, &w)?;
                    let best = optimal_policy(oracle, &full.x, &w)?;
                    crate::causal::oar(&chosen, &best)?
                }
                MetricTask::Coverage => {
                    let tasks95 = all_tasks_for_outcome(d, m);
                    coverage95(
                        model,
                        |i, t| oracle.true_surface(test.x.row(i), t.action, t.outcome),
                        &test.x,
                        &tasks95,
                    )?
                }
                MetricTask::PolicyRisk => {
                    let rule = ice_sign_policy(model, &full.x, m)?;
                    policy_risk(oracle, &rule, &full.x, m)?
                }
            };
            per_outcome.push(value);
        }
        reports.push(MetricReport::new(task, per_outcome));
    }
    Ok(reports)
}

fn rows_from_reports(
    dgp: &str,
    variant: ModelVariant,
    seed: u64,
    wall_secs: f64,
    reports: &[MetricReport],
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for r in reports {
        for (m, v) in r.per_outcome.iter().enumerate() {
            rows.push(ResultRow {
                dgp: dgp.to_string(),
                variant,
                task: r.task,
                outcome: Some(m),
                seed,
                value: *v,
                failed: false,
                wall_secs,
            });
        }
        rows.push(ResultRow {
            dgp: dgp.to_string(),
            variant,
            task: r.task,
            outcome: None,
            seed,
            value: r.aggregate,
            failed: false,
            wall_secs,
        });
    }
    rows
}

fn failed_rows(
    dgp: &str,
    variant: ModelVariant,
    seed: u64,
    wall_secs: f64,
    tasks: &[MetricTask],
    m_out: usize,
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for &task in tasks {
        for outcome in (0..m_out).map(Some).chain([None]) {
            rows.push(ResultRow {
                dgp: dgp.to_string(),
                variant,
                task,
                outcome,
                seed,
                value: f64::NAN,
                failed: true,
                wall_secs,
            });
        }
    }
    rows
}

/// Runs every replication of one experiment point. Replications run in
/// parallel; the output order is deterministic.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, BenchError> {
    config.validate()?;
    let tag = config.dgp.tag();
    let seeds: Vec<u64> = (0..config.replications)
        .map(|b| derive_seed(config.base_seed, streams::REPLICATION, b as u64))
        .collect();

    let per_rep: Vec<Result<Vec<ResultRow>, BenchError>> = seeds
        .par_iter()
        .map(|&rep_seed| {
            let (data, oracle) = config.dgp.generate(rep_seed)?;
            let (train, test) = split(
                &data,
                &SplitSpec { train_fraction: config.split.train_fraction, seed: rep_seed },
            )?;
            let mut rows = Vec::new();
            for &variant in &config.variants {
                let fit_cfg = FitConfig { seed: rep_seed, ..config.fit.clone() };
                let start = std::time::Instant::now();
                match fit(variant, &train, &fit_cfg) {
                    Ok(model) => {
                        let wall = start.elapsed().as_secs_f64();
                        let reports =
                            compute_metrics(&model, &oracle, &data, &test, &config.tasks)?;
                        rows.extend(rows_from_reports(&tag, variant, rep_seed, wall, &reports));
                    }
                    Err(_) => {
                        let wall = start.elapsed().as_secs_f64();
                        rows.extend(failed_rows(
                            &tag,
                            variant,
                            rep_seed,
                            wall,
                            &config.tasks,
                            data.meta.num_outcomes,
                        ));
                    }
                }
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in per_rep {
        rows.extend(r?);
    }
    let aggregates = aggregate_rows(&rows);
    Ok(ExperimentOutput { rows, aggregates, seeds })
}

/// Applies a sweep axis value to a config point.
fn apply_axis(config: &ExperimentConfig, axis: SweepAxis, value: f64) -> ExperimentConfig {
    let mut point = config.clone();
    point.sweep = None;
    match axis {
        SweepAxis::N => point.dgp.n = value as usize,
        SweepAxis::P => point.dgp.p = value as usize,
        SweepAxis::Gamma => point.dgp.gamma = value,
    }
    point
}

/// Runs the experiment at every grid point of the sweep axis with
/// deterministic sub-seeding, emitting one combined table.
pub fn sweep(config: &ExperimentConfig) -> Result<ExperimentOutput, BenchError> {
    let spec = config
        .sweep
        .as_ref()
        .ok_or_else(|| BenchError::ConfigInvalid("sweep axis missing".into()))?;
    if spec.values.is_empty() {
        return Err(BenchError::ConfigInvalid("sweep values must be nonempty".into()));
    }
    let mut out = ExperimentOutput::default();
    for (k, &v) in spec.values.iter().enumerate() {
        let mut point = apply_axis(config, spec.axis, v);
        point.base_seed = derive_seed(config.base_seed, streams::SWEEP_POINT, k as u64);
        let part = run_experiment(&point)?;
        out.rows.extend(part.rows);
        out.aggregates.extend(part.aggregates);
        out.seeds.extend(part.seeds);
    }
    Ok(out)
}

/// Recomputes Monte Carlo means and confidence intervals from raw rows.
pub fn aggregate_rows(rows: &[ResultRow]) -> Vec<AggregateRow> {
    type Key = (String, String, MetricTask, Option<usize>);
    let mut groups: BTreeMap<Key, (ModelVariant, Vec<f64>, usize)> = BTreeMap::new();
    for row in rows {
        let key = (row.dgp.clone(), row.variant.name().to_string(), row.task, row.outcome);
        let entry = groups.entry(key).or_insert((row.variant, Vec::new(), 0));
        if row.failed {
            entry.2 += 1;
        } else {
            entry.1.push(row.value);
        }
    }
    groups
        .into_iter()
        .map(|((dgp, _, task, outcome), (variant, values, failed))| {
            let n = values.len();
            let mean = if n > 0 { values.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let sd = if n > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            let ci95_half = if n > 0 { 1.96 * sd / (n as f64).sqrt() } else { f64::NAN };
            AggregateRow {
                dgp,
                variant,
                task,
                outcome,
                mean,
                ci95_half,
                reps_used: n,
                reps_failed: failed,
            }
        })
        .collect()
}

fn fmt_value(v: f64, failed: bool) -> String {
    if failed || v.is_nan() {
        String::new()
    } else {
        format!("{v:.16e}")
    }
}

fn outcome_label(outcome: Option<usize>) -> String {
    match outcome {
        Some(m) => m.to_string(),
        None => "agg".to_string(),
    }
}

/// Writes `results.csv`, `aggregates.csv`, `timings.csv`, and
/// `manifest.json` into a directory.
pub fn write_outputs(
    out: &ExperimentOutput,
    config: &ExperimentConfig,
    dir: &Path,
) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir)?;

    let mut results = std::io::BufWriter::new(std::fs::File::create(dir.join("results.csv"))?);
    writeln!(results, "dgp,variant,task,outcome,seed,value,failed")?;
    for r in &out.rows {
        writeln!(
            results,
            "{},{},{},{},{},{},{}",
            r.dgp,
            r.variant.name(),
            r.task.name(),
            outcome_label(r.outcome),
            r.seed,
            fmt_value(r.value, r.failed),
            r.failed
        )?;
    }
    results.flush()?;

    let mut aggs = std::io::BufWriter::new(std::fs::File::create(dir.join("aggregates.csv"))?);
    writeln!(aggs, "dgp,variant,task,outcome,mean,ci95_half,reps_used,reps_failed")?;
    for a in &out.aggregates {
        writeln!(
            aggs,
            "{},{},{},{},{},{},{},{}",
            a.dgp,
            a.variant.name(),
            a.task.name(),
            outcome_label(a.outcome),
            fmt_value(a.mean, a.mean.is_nan()),
            fmt_value(a.ci95_half, a.ci95_half.is_nan()),
            a.reps_used,
            a.reps_failed
        )?;
    }
    aggs.flush()?;

    // wall-clock timings vary run to run: kept out of results.csv so that
    // identical configs produce byte-identical result files
    let mut timings = std::io::BufWriter::new(std::fs::File::create(dir.join("timings.csv"))?);
    writeln!(timings, "dgp,variant,seed,fit_wall_secs")?;
    let mut seen = std::collections::BTreeSet::new();
    for r in &out.rows {
        let key = (r.dgp.clone(), r.variant.name().to_string(), r.seed);
        if seen.insert(key) {
            writeln!(timings, "{},{},{},{:.6}", r.dgp, r.variant.name(), r.seed, r.wall_secs)?;
        }
    }
    timings.flush()?;

    let manifest = serde_json::json!({
        "format": "countergp-run-manifest",
        "version": 1,
        "library_version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "replication_seeds": out.seeds,
        "notes": {
            "fit_data": "models fit on the training split",
            "ice_coverage_eval": "held-out test split",
            "policy_eval": "full sample",
        },
    });
    let mut mf = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut mf, &manifest)
        .map_err(|e| BenchError::Serialization(e.to_string()))?;
    mf.flush()?;
    Ok(())
}
