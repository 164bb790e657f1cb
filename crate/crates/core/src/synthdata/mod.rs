//! Synthetic bimodal reach sequences from a two-link planar arm.
//!
//! Each [`Trajectory`] pairs normalized joint angles with a 16×16 grayscale
//! rendering of the arm at the same instant. Perturbations (`permute_times`,
//! `freeze_sequence`) build the permuted and frozen test sequences; the speed
//! warp is the training-time augmentation.

mod arm;
mod io;
mod perturb;

pub use arm::{forward_kinematics, generate_trajectory, min_jerk, min_jerk_velocity, rasterize, ArmGeometry};
pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC};
pub use perturb::{augment_speed_warp, freeze_sequence, permute_times, SpeedWarp};
pub(crate) use perturb::augment_with_rng;

use crate::error::{Error, Result};

pub const FRAME_H: usize = 16;
pub const FRAME_W: usize = 16;
pub const FRAME_LEN: usize = FRAME_H * FRAME_W;
pub const JOINTS: usize = 2;

/// One grayscale frame, row-major, values in [0, 1].
pub type Frame = Vec<f64>;

/// A timestamped bimodal sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Normalized times, canonical `k/(T−1)` unless perturbed.
    pub times: Vec<f64>,
    /// Joint angles divided by π.
    pub joints: Vec<[f64; JOINTS]>,
    pub frames: Vec<Frame>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, joints: Vec<[f64; JOINTS]>, frames: Vec<Frame>) -> Result<Self> {
        let t = times.len();
        if joints.len() != t || frames.len() != t {
            return Err(Error::dim("Trajectory::new", &[t], &[joints.len(), frames.len()]));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != FRAME_LEN) {
            return Err(Error::dim("Trajectory::new", &[FRAME_LEN], &[f.len()]));
        }
        Ok(Self {
            times,
            joints,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Whether `times[k] == k/(T−1)` for every k.
    pub fn has_canonical_times(&self) -> bool {
        let canon = canonical_times(self.len());
        self.times == canon
    }
}

/// `k/(T−1)` for k in 0..T. A single-step grid is `[0]`.
pub fn canonical_times(t: usize) -> Vec<f64> {
    if t == 1 {
        return vec![0.0];
    }
    let denom = (t - 1) as f64;
    (0..t).map(|k| k as f64 / denom).collect()
}

/// Default corpus: trajectories for seeds `seed0..seed0+train_n` and the
/// following `test_n` seeds.
pub fn default_corpus(
    train_n: usize,
    test_n: usize,
    t: usize,
    seed0: u64,
    geom: &ArmGeometry,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let gen = |s: u64| generate_trajectory(s, t, geom);
    let train = (0..train_n as u64).map(|i| gen(seed0 + i)).collect::<Result<Vec<_>>>()?;
    let test = (0..test_n as u64)
        .map(|i| gen(seed0 + train_n as u64 + i))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}
