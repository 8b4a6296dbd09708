//! Observational datasets: a covariate matrix, one observed action per unit,
//! and one observed outcome vector per unit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("row counts disagree: x has {x}, actions has {actions}, y has {y}")]
    RowMismatch { x: usize, actions: usize, y: usize },
    #[error("action {action} at unit {unit} out of range for {num_actions} actions")]
    ActionOutOfRange { unit: usize, action: usize, num_actions: usize },
    #[error("non-finite value in dataset")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_actions: usize,
    pub num_outcomes: usize,
    pub seed: u64,
    pub dgp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub actions: Vec<usize>,
    pub y: Matrix,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        actions: Vec<usize>,
        y: Matrix,
        meta: DatasetMeta,
    ) -> Result<Self, DataError> {
        let d = Dataset { x, actions, y, meta };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.x.rows() == 0 {
            return Err(DataError::Empty);
        }
        if self.x.rows() != self.actions.len() || self.x.rows() != self.y.rows() {
            return Err(DataError::RowMismatch {
                x: self.x.rows(),
                actions: self.actions.len(),
                y: self.y.rows(),
            });
        }
        for (unit, &a) in self.actions.iter().enumerate() {
            if a >= self.meta.num_actions {
                return Err(DataError::ActionOutOfRange {
                    unit,
                    action: a,
                    num_actions: self.meta.num_actions,
                });
            }
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(DataError::NonFinite);
        }
        Ok(())
    }

    /// Number of units.
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Covariate dimension.
    pub fn num_covariates(&self) -> usize {
        self.x.cols()
    }

    /// Sub-dataset at the given unit indices, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let x = Matrix::from_fn(idx.len(), self.x.cols(), |i, j| self.x[(idx[i], j)]);
        let y = Matrix::from_fn(idx.len(), self.y.cols(), |i, j| self.y[(idx[i], j)]);
        let actions = idx.iter().map(|&i| self.actions[i]).collect();
        Dataset { x, actions, y, meta: self.meta.clone() }
    }
}
