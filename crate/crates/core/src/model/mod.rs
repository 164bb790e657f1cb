//! Multimodal conditional neural process with two ways of injecting time.
//!
//! In [`TimeMode::Channel`] the context time is appended as an extra input
//! channel to both modalities and the target time is appended to the
//! aggregated representation. In [`TimeMode::Pte`] a learned projection of
//! time is added to each blended context encoding (followed by a tanh layer)
//! and subtracted from the representation before decoding.

mod checkpoint;
mod net;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use net::{aggregate, blend, inject_time_channel, Dmbn, EncoderFeatures, Modality, TimeSignal};
pub(crate) use net::Objective;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::{Frame, Trajectory, FRAME_LEN, JOINTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TimeMode {
    Channel,
    Pte,
}

impl fmt::Display for TimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeMode::Channel => "channel",
            TimeMode::Pte => "pte",
        })
    }
}

impl FromStr for TimeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel" => Ok(TimeMode::Channel),
            "pte" => Ok(TimeMode::Pte),
            other => Err(Error::Config(format!("unknown time mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub time_mode: TimeMode,
    pub hidden_dim: usize,
    pub conv_widths: Vec<usize>,
    pub joint_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub blend_weight: f64,
    pub var_floor: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(time_mode: TimeMode) -> Self {
        Self {
            time_mode,
            hidden_dim: 64,
            conv_widths: vec![8, 16],
            joint_widths: vec![32, 64],
            decoder_widths: vec![64, 64],
            blend_weight: 0.5,
            var_floor: 1e-6,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim < 2 {
            return Err(Error::Config(format!("hidden_dim {} must be at least 2", self.hidden_dim)));
        }
        if !(0.0..=1.0).contains(&self.blend_weight) {
            return Err(Error::Config(format!("blend_weight {} outside [0, 1]", self.blend_weight)));
        }
        if !(self.var_floor > 0.0) {
            return Err(Error::Config(format!("var_floor {} must be positive", self.var_floor)));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Config("conv_widths must be non-empty and positive".into()));
        }
        if self.joint_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Input channels of the image encoder.
    pub fn image_channels(&self) -> usize {
        match self.time_mode {
            TimeMode::Channel => 2,
            TimeMode::Pte => 1,
        }
    }

    /// Input width of the joint encoder.
    pub fn joint_inputs(&self) -> usize {
        match self.time_mode {
            TimeMode::Channel => JOINTS + 1,
            TimeMode::Pte => JOINTS,
        }
    }

    /// Width of the conditioned vector entering each decoder.
    pub fn decoder_inputs(&self) -> usize {
        match self.time_mode {
            TimeMode::Channel => self.hidden_dim + 1,
            TimeMode::Pte => self.hidden_dim,
        }
    }
}

/// One context element.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub frame: Frame,
    pub joints: [f64; JOINTS],
}

/// A context set. Order carries no meaning; the model sorts it canonically.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    items: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(items: Vec<Observation>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("an observation set needs at least one element".into()));
        }
        for o in &items {
            if o.frame.len() != FRAME_LEN {
                return Err(Error::dim("ObservationSet", &[FRAME_LEN], &[o.frame.len()]));
            }
            if !(0.0..=1.0).contains(&o.t) {
                return Err(Error::Domain {
                    op: "ObservationSet",
                    detail: format!("time {} outside [0, 1]", o.t),
                });
            }
        }
        Ok(Self { items })
    }

    /// Observations of `traj` at `indices`.
    pub fn from_trajectory(traj: &Trajectory, indices: &[usize]) -> Result<Self> {
        let items = indices
            .iter()
            .map(|&i| {
                if i >= traj.len() {
                    return Err(Error::Index {
                        index: i,
                        len: traj.len(),
                    });
                }
                Ok(Observation {
                    t: traj.times[i],
                    frame: traj.frames[i].clone(),
                    joints: traj.joints[i],
                })
            })
            .collect::<Result<_>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Observation] {
        &self.items
    }

    /// Elements ordered by time, then by content bits. Equal keys mean
    /// identical elements, so the result does not depend on input order.
    pub fn canonical(&self) -> Vec<&Observation> {
        let mut v: Vec<&Observation> = self.items.iter().collect();
        v.sort_by(|a, b| {
            a.t.total_cmp(&b.t)
                .then_with(|| cmp_bits(&a.joints, &b.joints))
                .then_with(|| cmp_bits(&a.frame, &b.frame))
        });
        v
    }
}

fn cmp_bits(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// The aggregated context encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Representative {
    pub r: Vec<f64>,
}

/// Per-target Gaussian outputs for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub times: Vec<f64>,
    /// M×256
    pub image_mean: Tensor,
    pub image_var: Tensor,
    /// M×2
    pub joint_mean: Tensor,
    pub joint_var: Tensor,
}

impl GaussianPrediction {
    pub fn min_variance(&self) -> f64 {
        self.image_var
            .data()
            .iter()
            .chain(self.joint_var.data())
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}
