//! Significance scores: the total attention each token receives, summed over
//! heads and queries (`s = sum_h A_h^T 1`).

use crate::error::{Error, Result};
use crate::transformer::AttentionMaps;

/// Row sums of every map must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn significance(maps: &AttentionMaps) -> Result<ScoreVector> {
    let n = maps.tokens();
    let mut s = vec![0.0; n];
    for (h, a) in maps.maps.iter().enumerate() {
        for (r, row) in a.row_iter().enumerate() {
            if let Some(c) = row.iter().position(|v| *v < 0.0) {
                return Err(Error::data(format!(
                    "head {h} row {r} column {c} is negative"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::data(format!(
                    "head {h} row {r} sums to {sum}, not 1"
                )));
            }
            for (acc, v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    Ok(ScoreVector { values: s })
}
