use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::{canonical_times, Trajectory};

/// Reassigns time stamps: `times[k] := times[perm[k]]`. Frames and joints
/// keep their order.
pub fn permute_times(traj: &Trajectory, perm: &[usize]) -> Result<Trajectory> {
    let t = traj.len();
    if perm.len() != t {
        return Err(Error::Contract(format!(
            "permutation of length {} for a sequence of length {t}",
            perm.len()
        )));
    }
    let mut seen = vec![false; t];
    for &p in perm {
        if p >= t || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Contract(format!("{perm:?} is not a permutation of 0..{t}")));
        }
    }
    let mut out = traj.clone();
    out.times = perm.iter().map(|&p| traj.times[p]).collect();
    Ok(out)
}

/// Holds the observation at `k` for the rest of the sequence; times are kept.
pub fn freeze_sequence(traj: &Trajectory, k: usize) -> Result<Trajectory> {
    if k >= traj.len() {
        return Err(Error::Index {
            index: k,
            len: traj.len(),
        });
    }
    let mut out = traj.clone();
    for j in k + 1..traj.len() {
        out.frames[j] = traj.frames[k].clone();
        out.joints[j] = traj.joints[k];
    }
    Ok(out)
}

/// A piecewise-linear monotone time warp plus an optional repeated-frame run.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedWarp {
    /// Relative playback speed of each equal-width output segment.
    pub slopes: Vec<f64>,
    /// `(start, len)`: frames `start..start+len` all show frame `start`.
    pub repeat: Option<(usize, usize)>,
}

impl SpeedWarp {
    pub fn identity() -> Self {
        Self {
            slopes: vec![1.0],
            repeat: None,
        }
    }

    /// 2–4 segments with slopes from U[0.5, 2.0]; with probability one half
    /// a run of 2–5 repeated frames.
    pub fn sample(rng: &mut impl Rng, t: usize) -> Result<Self> {
        if t < 4 {
            return Err(Error::Contract(format!("speed warp needs T >= 4, got {t}")));
        }
        let segments = rng.gen_range(2..=4);
        let slopes = (0..segments).map(|_| rng.gen_range(0.5..=2.0)).collect();
        let repeat = if rng.gen_bool(0.5) {
            let len = rng.gen_range(2..=5usize.min(t));
            let start = rng.gen_range(0..=t - len);
            Some((start, len))
        } else {
            None
        };
        Ok(Self { slopes, repeat })
    }

    /// Maps output phase u ∈ [0, 1] to source phase, renormalized so that
    /// 0 ↦ 0 and 1 ↦ 1.
    pub fn phase(&self, u: f64) -> f64 {
        let n = self.slopes.len();
        let width = 1.0 / n as f64;
        let total: f64 = self.slopes.iter().map(|s| s * width).sum();
        let mut acc = 0.0;
        for (i, &s) in self.slopes.iter().enumerate() {
            let lo = i as f64 * width;
            if u <= lo + width || i == n - 1 {
                acc += s * (u - lo).clamp(0.0, width);
                break;
            }
            acc += s * width;
        }
        (acc / total).clamp(0.0, 1.0)
    }

    /// Source index sampled for output index `k` (nearest-index lookup).
    pub fn source_index(&self, k: usize, t: usize) -> usize {
        let last = (t - 1) as f64;
        let u = k as f64 / last;
        ((self.phase(u) * last).round() as usize).min(t - 1)
    }

    pub fn apply(&self, traj: &Trajectory) -> Result<Trajectory> {
        let t = traj.len();
        if t < 2 || self.slopes.is_empty() || self.slopes.iter().any(|&s| s <= 0.0) {
            return Err(Error::Contract("speed warp needs T >= 2 and positive slopes".into()));
        }
        let mut frames = Vec::with_capacity(t);
        let mut joints = Vec::with_capacity(t);
        for k in 0..t {
            let src = self.source_index(k, t);
            frames.push(traj.frames[src].clone());
            joints.push(traj.joints[src]);
        }
        if let Some((start, len)) = self.repeat {
            if start + len > t {
                return Err(Error::Index {
                    index: start + len - 1,
                    len: t,
                });
            }
            for j in start + 1..start + len {
                frames[j] = frames[start].clone();
                joints[j] = joints[start];
            }
        }
        Trajectory::new(canonical_times(t), joints, frames)
    }
}

/// Random speed warp with optional local freeze, seeded.
pub fn augment_speed_warp(traj: &Trajectory, seed: u64) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    augment_with_rng(traj, &mut rng)
}

pub(crate) fn augment_with_rng(traj: &Trajectory, rng: &mut impl Rng) -> Result<Trajectory> {
    SpeedWarp::sample(rng, traj.len())?.apply(traj)
}
