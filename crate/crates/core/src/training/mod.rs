//! Gaussian-likelihood training, evaluation metrics, and their CSV forms.

mod adam;
mod eval;
mod train;

pub use adam::{Adam, AdamState};
pub use eval::{evaluate, evenly_spaced, mean_baseline, predict_sequence, EvalMetrics, ModalityMetrics};
pub use train::{sequence_nll, train, train_with_observer, TrainConfig, TrainOutcome};

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `0.5·ln(2π·var) + (y−μ)²/(2·var)` for one element.
pub fn gaussian_nll(mu: f64, var: f64, y: f64, var_floor: f64) -> Result<f64> {
    if !(var >= var_floor) {
        return Err(Error::Contract(format!("variance {var} is below the floor {var_floor}")));
    }
    let r = y - mu;
    Ok(0.5 * (LN_2PI + var.ln()) + r * r / (2.0 * var))
}

/// Draws a context of 1..=min(n_max, T) distinct indices; targets are the
/// whole sequence.
pub fn sample_context_target(t: usize, n_max: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if t < 2 {
        return Err(Error::Contract(format!("sequence length {t} must be at least 2")));
    }
    if n_max == 0 {
        return Err(Error::Contract("n_max must be at least 1".into()));
    }
    let n = rng.gen_range(1..=n_max.min(t));
    let ctx = index::sample(rng, t, n).into_vec();
    Ok((ctx, (0..t).collect()))
}

/// `epoch,mean_nll` with one row per epoch.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("epoch,mean_nll\n");
    for (e, l) in curve.iter().enumerate() {
        let _ = writeln!(s, "{e},{l}");
    }
    s
}
