//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Parameters};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so coordinates whose gradient
/// is numerically zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `(tensor, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `loss_grad`'s gradient against central differences on at least
/// `samples` coordinates (all of them when there are fewer). Half of the
/// picks come from coordinates with a nonzero analytic gradient.
pub fn grad_check<P, F>(params: &P, loss_grad: F, tolerance: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&P) -> Result<(f64, Gradients)>,
{
    if params.tensors().iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("gradient check parameters"));
    }
    let (_, grad) = loss_grad(params)?;
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|m| (m.rows(), m.cols())).collect();
    if grad.0.len() != shapes.len() || grad.0.iter().zip(&shapes).any(|(g, &s)| g.shape() != s) {
        return Err(Error::invalid("gradient does not match the parameter layout"));
    }
    let coords: Vec<(usize, usize)> = shapes
        .iter()
        .enumerate()
        .flat_map(|(t, &(r, c))| (0..r * c).map(move |k| (t, k)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: BTreeSet<(usize, usize)> = if coords.len() <= samples {
        coords.iter().copied().collect()
    } else {
        let active: Vec<(usize, usize)> = coords
            .iter()
            .copied()
            .filter(|&(t, k)| grad.0[t].as_slice()[k].abs() > 1e-9)
            .collect();
        let half = (samples / 2).min(active.len());
        let mut set: BTreeSet<_> = sample(&mut rng, active.len(), half).into_iter().map(|i| active[i]).collect();
        for i in sample(&mut rng, coords.len(), samples.min(coords.len())) {
            if set.len() >= samples {
                break;
            }
            set.insert(coords[i]);
        }
        set
    };

    let loss_at = |t: usize, k: usize, delta: f64| -> Result<f64> {
        let mut p = params.clone();
        {
            let m = p.tensors_mut().swap_remove(t);
            let (i, j) = (k / m.cols(), k % m.cols());
            m.set(i, j, m.get(i, j) + delta);
        }
        Ok(loss_grad(&p)?.0)
    };
    let mut report = GradCheckReport {
        checked: picked.len(),
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        tolerance,
    };
    for &(t, k) in &picked {
        let numeric = (loss_at(t, k, FD_STEP)? - loss_at(t, k, -FD_STEP)?) / (2.0 * FD_STEP);
        let analytic = grad.0[t].as_slice()[k];
        let rel = relative_error(analytic, numeric);
        report.max_absolute_error = report.max_absolute_error.max((analytic - numeric).abs());
        if report.worst.is_none() || rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = Some((t, k));
        }
    }
    Ok(report)
}
