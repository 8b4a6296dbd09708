//! Coregionalization over actions and outcomes, and assembly of the full
//! multitask covariance.
//!
//! A task is an (action, outcome) pair. Task relatedness enters the kernel
//! through PSD coregionalization matrices `B = L L^T + diag(exp(log_diag))`;
//! the low-rank factor carries the correlation structure and the positive
//! diagonal keeps `B` strictly positive definite even when the rank is less
//! than the number of tasks. The full covariance between two observations is
//!
//! `K[(i, j)] = sum_q B_Y_q[m_i, m_j] * B_A_q[a_i, a_j] * k_q(x_i, x_j)`
//!
//! summed over `Q` separable components (`Q = 1` is the intrinsic
//! coregionalization model), with per-task noise added on the diagonal.
//! Training rows follow the block design: each unit contributes one row per
//! outcome, labelled with its observed action, so counterfactual tasks appear
//! only at prediction time.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{kernel_matrix, BaseKernelParams, KernelError, KernelKind};
use crate::linalg::{Matrix, SymMatrix};

/// Coordinates of one task in the multitask kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskIndex {
    pub action: usize,
    pub outcome: usize,
}

impl TaskIndex {
    pub fn new(action: usize, outcome: usize) -> Self {
        TaskIndex { action, outcome }
    }

    /// Flat encoding with the outcome as the outer (slowest) index.
    pub fn flat(&self, num_actions: usize) -> usize {
        self.outcome * num_actions + self.action
    }

    pub fn from_flat(flat: usize, num_actions: usize) -> Self {
        TaskIndex { action: flat % num_actions, outcome: flat / num_actions }
    }
}

#[derive(Debug, Error)]
pub enum CoregionError {
    #[error("task ({action}, {outcome}) out of range for {num_actions} actions x {num_outcomes} outcomes")]
    TaskOutOfRange { action: usize, outcome: usize, num_actions: usize, num_outcomes: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Diagonal entries of `B` are floored at `exp(LOG_DIAG_FLOOR)` so the matrix
/// always admits a jitter-free Cholesky.
pub const LOG_DIAG_FLOOR: f64 = -13.815510557964274; // ln(1e-6)

/// Low-rank-plus-diagonal factor of one coregionalization matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoregionFactor {
    num_tasks: usize,
    rank: usize,
    /// `num_tasks x rank` factor; row `a` holds the latent loadings of task `a`.
    pub l: Matrix,
    /// Log of the additional positive diagonal, floored at [`LOG_DIAG_FLOOR`].
    pub log_diag: Vec<f64>,
}

impl CoregionFactor {
    pub fn new(l: Matrix, log_diag: Vec<f64>) -> Self {
        let num_tasks = l.rows();
        let rank = l.cols();
        assert!(rank >= 1 && rank <= num_tasks, "rank must be in 1..=num_tasks");
        assert_eq!(log_diag.len(), num_tasks, "log_diag length mismatch");
        let log_diag = log_diag.into_iter().map(|v| v.max(LOG_DIAG_FLOOR)).collect();
        CoregionFactor { num_tasks, rank, l, log_diag }
    }

    /// Identity-like start: unit loading on the own latent function, tiny
    /// random off-diagonal entries so the optimizer can break symmetry, and a
    /// small positive diagonal.
    pub fn init_identity_like(num_tasks: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let l = Matrix::from_fn(num_tasks, rank, |a, r| {
            if a == r {
                1.0
            } else {
                0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }
        });
        CoregionFactor::new(l, vec![0.1f64.ln(); num_tasks])
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Builds `B = L L^T + diag(exp(log_diag))`, strictly positive definite.
    pub fn build_b(&self) -> SymMatrix {
        let mut b = self.l.matmul_transb(&self.l);
        for (a, ld) in self.log_diag.iter().enumerate() {
            b[(a, a)] += ld.exp();
        }
        SymMatrix::symmetrize(b).expect("coregionalization factor produced non-finite B")
    }
}

/// One separable component: a base kernel scaled across task pairs by the
/// action factor and (when present) the outcome factor. A missing factor
/// means the corresponding axis has a single level and multiplies by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelComponent {
    pub kind: KernelKind,
    pub base: BaseKernelParams,
    pub action_factor: Option<CoregionFactor>,
    pub outcome_factor: Option<CoregionFactor>,
}

/// Sum-of-separable multitask kernel over `num_actions x num_outcomes` tasks.
/// One component is the intrinsic coregionalization model; more components
/// give the general linear model of coregionalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskKernelSpec {
    pub num_actions: usize,
    pub num_outcomes: usize,
    pub components: Vec<KernelComponent>,
}

impl MultitaskKernelSpec {
    pub fn num_tasks(&self) -> usize {
        self.num_actions * self.num_outcomes
    }

    fn check_task(&self, t: TaskIndex) -> Result<(), CoregionError> {
        if t.action >= self.num_actions || t.outcome >= self.num_outcomes {
            return Err(CoregionError::TaskOutOfRange {
                action: t.action,
                outcome: t.outcome,
                num_actions: self.num_actions,
                num_outcomes: self.num_outcomes,
            });
        }
        Ok(())
    }

    /// Builds the per-component task-covariance lookup tables, flattened over
    /// `num_tasks x num_tasks` with [`TaskIndex::flat`] ordering.
    pub fn task_cov_tables(&self) -> Vec<Matrix> {
        let d = self.num_actions;
        let m = self.num_outcomes;
        self.components
            .iter()
            .map(|c| {
                let ba = c.action_factor.as_ref().map(|f| f.build_b());
                let by = c.outcome_factor.as_ref().map(|f| f.build_b());
                Matrix::from_fn(d * m, d * m, |t, u| {
                    let ti = TaskIndex::from_flat(t, d);
                    let ui = TaskIndex::from_flat(u, d);
                    let a = ba.as_ref().map_or(1.0, |b| b[(ti.action, ui.action)]);
                    let y = by.as_ref().map_or(1.0, |b| b[(ti.outcome, ui.outcome)]);
                    a * y
                })
            })
            .collect()
    }

    /// Scalar multiplier applied to the base kernel between two tasks,
    /// summed over components.
    pub fn task_cov(&self, t: TaskIndex, u: TaskIndex) -> Result<f64, CoregionError> {
        self.check_task(t)?;
        self.check_task(u)?;
        let mut total = 0.0;
        for c in &self.components {
            let a = match &c.action_factor {
                Some(f) => f.build_b()[(t.action, u.action)],
                None => 1.0,
            };
            let y = match &c.outcome_factor {
                Some(f) => f.build_b()[(t.outcome, u.outcome)],
                None => 1.0,
            };
            total += a * y;
        }
        Ok(total)
    }
}

fn check_alignment(
    spec: &MultitaskKernelSpec,
    x: &Matrix,
    tasks: &[TaskIndex],
) -> Result<(), CoregionError> {
    if x.rows() != tasks.len() {
        return Err(CoregionError::DimensionMismatch { expected: x.rows(), got: tasks.len() });
    }
    for t in tasks {
        spec.check_task(*t)?;
    }
    Ok(())
}

/// Training covariance over the block design: entry `(i, j)` couples rows
/// through the task covariance times the base kernel, and each row gets its
/// task's noise variance on the diagonal.
pub fn assemble_train_cov(
    spec: &MultitaskKernelSpec,
    x: &Matrix,
    tasks: &[TaskIndex],
    noise_var: &[f64],
) -> Result<SymMatrix, CoregionError> {
    check_alignment(spec, x, tasks)?;
    if noise_var.len() != spec.num_tasks() {
        return Err(CoregionError::DimensionMismatch {
            expected: spec.num_tasks(),
            got: noise_var.len(),
        });
    }
    let n = x.rows();
    let tables = spec.task_cov_tables();
    let mut total = Matrix::zeros(n, n);
    for (c, table) in spec.components.iter().zip(&tables) {
        let kbase = kernel_matrix(c.kind, &c.base, x, x)?;
        for i in 0..n {
            let ti = tasks[i].flat(spec.num_actions);
            let krow = kbase.row(i);
            let trow = table.row(ti);
            let out = total.row_mut(i);
            for j in 0..n {
                out[j] += trow[tasks[j].flat(spec.num_actions)] * krow[j];
            }
        }
    }
    for i in 0..n {
        total[(i, i)] += noise_var[tasks[i].flat(spec.num_actions)];
    }
    SymMatrix::symmetrize(total).map_err(|_| CoregionError::DimensionMismatch {
        expected: n,
        got: n,
    })
}

/// Cross covariance between query rows and training rows; no noise term.
pub fn assemble_cross_cov(
    spec: &MultitaskKernelSpec,
    x_train: &Matrix,
    tasks_train: &[TaskIndex],
    x_query: &Matrix,
    tasks_query: &[TaskIndex],
) -> Result<Matrix, CoregionError> {
    check_alignment(spec, x_train, tasks_train)?;
    check_alignment(spec, x_query, tasks_query)?;
    let tables = spec.task_cov_tables();
    let mut total = Matrix::zeros(x_query.rows(), x_train.rows());
    for (c, table) in spec.components.iter().zip(&tables) {
        let kbase = kernel_matrix(c.kind, &c.base, x_query, x_train)?;
        for i in 0..x_query.rows() {
            let ti = tasks_query[i].flat(spec.num_actions);
            let krow = kbase.row(i);
            let trow = table.row(ti);
            let out = total.row_mut(i);
            for j in 0..x_train.rows() {
                out[j] += trow[tasks_train[j].flat(spec.num_actions)] * krow[j];
            }
        }
    }
    Ok(total)
}

/// Gradients of the assembled (noise-free) covariance with respect to every
/// coregionalization parameter, as per-parameter matrices for the trace-form
/// marginal-likelihood gradient. One entry per component, in order.
#[derive(Debug, Clone)]
pub struct CoregionGrads {
    pub components: Vec<ComponentCoregionGrads>,
}

#[derive(Debug, Clone)]
pub struct ComponentCoregionGrads {
    /// `d K / d L_A[a][r]`, indexed `[a * rank + r]`; empty when the
    /// component has no action factor.
    pub action_l: Vec<Matrix>,
    /// `d K / d log_diag_A[a]`; empty when the component has no action factor.
    pub action_log_diag: Vec<Matrix>,
    pub outcome_l: Vec<Matrix>,
    pub outcome_log_diag: Vec<Matrix>,
}

pub fn coregion_grads(
    spec: &MultitaskKernelSpec,
    x: &Matrix,
    tasks: &[TaskIndex],
) -> Result<CoregionGrads, CoregionError> {
    check_alignment(spec, x, tasks)?;
    let n = x.rows();
    let mut out = Vec::with_capacity(spec.components.len());
    for c in &spec.components {
        let kbase = kernel_matrix(c.kind, &c.base, x, x)?;
        let ba = c.action_factor.as_ref().map(|f| f.build_b());
        let by = c.outcome_factor.as_ref().map(|f| f.build_b());
        let other_action = |i: usize, j: usize| {
            by.as_ref().map_or(1.0, |b| b[(tasks[i].outcome, tasks[j].outcome)])
        };
        let other_outcome = |i: usize, j: usize| {
            ba.as_ref().map_or(1.0, |b| b[(tasks[i].action, tasks[j].action)])
        };

        let mut grads = ComponentCoregionGrads {
            action_l: Vec::new(),
            action_log_diag: Vec::new(),
            outcome_l: Vec::new(),
            outcome_log_diag: Vec::new(),
        };
        if let Some(f) = &c.action_factor {
            for a in 0..f.num_tasks() {
                for r in 0..f.rank() {
                    // d B[a][a'] / d L[a][r] = delta(a) L[a'][r] + delta(a') L[a][r]
                    grads.action_l.push(Matrix::from_fn(n, n, |i, j| {
                        let (ai, aj) = (tasks[i].action, tasks[j].action);
                        let mut db = 0.0;
                        if ai == a {
                            db += f.l[(aj, r)];
                        }
                        if aj == a {
                            db += f.l[(ai, r)];
                        }
                        db * other_action(i, j) * kbase[(i, j)]
                    }));
                }
                let diag = f.log_diag[a].exp();
                grads.action_log_diag.push(Matrix::from_fn(n, n, |i, j| {
                    if tasks[i].action == a && tasks[j].action == a {
                        diag * other_action(i, j) * kbase[(i, j)]
                    } else {
                        0.0
                    }
                }));
            }
        }
        if let Some(f) = &c.outcome_factor {
            for m in 0..f.num_tasks() {
                for r in 0..f.rank() {
                    grads.outcome_l.push(Matrix::from_fn(n, n, |i, j| {
                        let (mi, mj) = (tasks[i].outcome, tasks[j].outcome);
                        let mut db = 0.0;
                        if mi == m {
                            db += f.l[(mj, r)];
                        }
                        if mj == m {
                            db += f.l[(mi, r)];
                        }
                        db * other_outcome(i, j) * kbase[(i, j)]
                    }));
                }
                let diag = f.log_diag[m].exp();
                grads.outcome_log_diag.push(Matrix::from_fn(n, n, |i, j| {
                    if tasks[i].outcome == m && tasks[j].outcome == m {
                        diag * other_outcome(i, j) * kbase[(i, j)]
                    } else {
                        0.0
                    }
                }));
            }
        }
        out.push(grads);
    }
    Ok(CoregionGrads { components: out })
}
