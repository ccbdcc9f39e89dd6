use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular a_{k,j}: accuracy on task j after learning task k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    /// Row k must have k+1 entries, each in [0, 1].
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (k, row) in rows.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::domain(format!(
                    "row {k} has {} entries, expected {}",
                    row.len(),
                    k + 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::domain(format!("accuracy {v} outside [0, 1]")));
            }
        }
        Ok(Self { rows })
    }

    /// Square matrix of `tasks` rows filled with `c`.
    pub fn constant(tasks: usize, c: f64) -> Result<Self> {
        Self::new((0..tasks).map(|k| vec![c; k + 1]).collect())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.rows[k][j]
    }

    pub fn avg_accuracy(&self) -> Result<f64> {
        avg_accuracy(self)
    }

    pub fn avg_incremental_accuracy(&self) -> Result<f64> {
        avg_incremental_accuracy(self)
    }

    pub fn forgetting(&self) -> Result<f64> {
        forgetting_measure(self)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// A_T: mean of the last row.
pub fn avg_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.rows
        .last()
        .map(|r| mean(r))
        .ok_or_else(|| Error::domain("accuracy matrix is empty"))
}

/// Ā: mean over k of the mean of row k.
pub fn avg_incremental_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::domain("accuracy matrix is empty"));
    }
    let per_row: Vec<f64> = m.rows.iter().map(|r| mean(r)).collect();
    Ok(mean(&per_row))
}

/// F_T = mean over j < T of (max_{l ∈ j..T−1} a_{l,j}) − a_{T,j}.
pub fn forgetting_measure(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::domain("forgetting needs at least two tasks"));
    }
    let last = &m.rows[t - 1];
    let drops: Vec<f64> = (0..t - 1)
        .map(|j| {
            let best = (j..t - 1).map(|l| m.rows[l][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .collect();
    Ok(mean(&drops))
}
