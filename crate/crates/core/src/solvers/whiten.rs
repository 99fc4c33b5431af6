use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STD_FLOOR: f64 = 1e-12;

/// Per-column standardisation to zero mean and unit population std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Whitener {
    pub mean: Vec<f64>,
    /// Population std per column; columns below `floor` store 1.
    pub std: Vec<f64>,
    pub floor: f64,
}

impl Whitener {
    /// Fits on `rows` (samples x columns).
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        Self::fit_with_floor(rows, DEFAULT_STD_FLOOR)
    }

    pub fn fit_with_floor(rows: &[Vec<f64>], floor: f64) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "whitening needs at least 2 rows, got {}",
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::invalid("whitening needs at least one column"));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::invalid(format!(
                "row {i} has {} columns, expected {dim}",
                rows[i].len()
            )));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < floor {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Whitener { mean, std, floor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_value(&self, column: usize, value: f64) -> f64 {
        (value - self.mean[column]) / self.std[column]
    }
}
