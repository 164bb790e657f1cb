use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::{canonical_times, Frame, Trajectory, FRAME_H, FRAME_LEN, FRAME_W};

/// Two-link planar arm and its camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmGeometry {
    pub link1: f64,
    pub link2: f64,
    /// Joint limit magnitude; both joints live in [−limit, limit].
    pub angle_limit: f64,
    /// Grid coordinate (row, col) of the base pixel centre.
    pub base: (f64, f64),
    /// Pixels per world unit.
    pub pixels_per_unit: f64,
    /// Distance in pixels at which stroke intensity falls to zero.
    pub stroke_radius: f64,
    /// Sampling box for reach start and end configurations, radians.
    pub theta1_range: (f64, f64),
    pub theta2_range: (f64, f64),
}

impl Default for ArmGeometry {
    fn default() -> Self {
        Self {
            link1: 0.5,
            link2: 0.5,
            angle_limit: PI,
            base: (8.0, 2.0),
            pixels_per_unit: 7.0,
            stroke_radius: 1.95,
            theta1_range: (-0.6, 0.6),
            theta2_range: (-1.0, 1.0),
        }
    }
}

impl ArmGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.link1 > 0.0 && self.link2 > 0.0 && self.link1 + self.link2 <= 1.0) {
            return Err(Error::Config(format!(
                "link lengths {} + {} must be positive and sum to at most 1",
                self.link1, self.link2
            )));
        }
        let within = |(lo, hi): (f64, f64)| lo <= hi && lo >= -self.angle_limit && hi <= self.angle_limit;
        if !within(self.theta1_range) || !within(self.theta2_range) {
            return Err(Error::Config("sampling ranges exceed the joint limits".into()));
        }
        Ok(())
    }
}

/// Minimum-jerk phase profile `10τ³ − 15τ⁴ + 6τ⁵`.
pub fn min_jerk(tau: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain {
            op: "min_jerk",
            detail: format!("tau {tau} outside [0, 1]"),
        });
    }
    let t3 = tau * tau * tau;
    Ok(t3 * (10.0 + tau * (-15.0 + 6.0 * tau)))
}

/// `30τ² − 60τ³ + 30τ⁴`.
pub fn min_jerk_velocity(tau: f64) -> f64 {
    30.0 * tau * tau * (1.0 - tau) * (1.0 - tau)
}

/// Elbow and tip positions in world units, base at the origin.
pub fn forward_kinematics(theta1: f64, theta2: f64, geom: &ArmGeometry) -> ((f64, f64), (f64, f64)) {
    let elbow = (geom.link1 * theta1.cos(), geom.link1 * theta1.sin());
    let a = theta1 + theta2;
    let tip = (elbow.0 + geom.link2 * a.cos(), elbow.1 + geom.link2 * a.sin());
    (elbow, tip)
}

fn to_grid(p: (f64, f64), geom: &ArmGeometry) -> (f64, f64) {
    (geom.base.0 - p.1 * geom.pixels_per_unit, geom.base.1 + p.0 * geom.pixels_per_unit)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + s * dx, a.1 + s * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders base→elbow→tip as two anti-aliased strokes of intensity 1 on a
/// black background. Intensity falls linearly with the distance from the
/// pixel centre to the nearest segment.
pub fn rasterize(theta1: f64, theta2: f64, geom: &ArmGeometry) -> Frame {
    let (elbow, tip) = forward_kinematics(theta1, theta2, geom);
    let base = to_grid((0.0, 0.0), geom);
    let elbow = to_grid(elbow, geom);
    let tip = to_grid(tip, geom);
    let mut frame = vec![0.0; FRAME_LEN];
    for r in 0..FRAME_H {
        for c in 0..FRAME_W {
            let p = (r as f64, c as f64);
            let d = segment_distance(p, base, elbow).min(segment_distance(p, elbow, tip));
            frame[r * FRAME_W + c] = (1.0 - d / geom.stroke_radius).clamp(0.0, 1.0);
        }
    }
    frame
}

/// A min-jerk reach between two random configurations drawn from the
/// geometry's sampling box.
pub fn generate_trajectory(seed: u64, t: usize, geom: &ArmGeometry) -> Result<Trajectory> {
    if t < 2 {
        return Err(Error::Contract(format!("trajectory length T={t} must satisfy T >= 2")));
    }
    geom.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let start = [draw(geom.theta1_range), draw(geom.theta2_range)];
    let end = [draw(geom.theta1_range), draw(geom.theta2_range)];

    let times = canonical_times(t);
    let mut joints = Vec::with_capacity(t);
    let mut frames = Vec::with_capacity(t);
    for &tau in &times {
        let s = min_jerk(tau)?;
        let th1 = start[0] + (end[0] - start[0]) * s;
        let th2 = start[1] + (end[1] - start[1]) * s;
        joints.push([th1 / PI, th2 / PI]);
        frames.push(rasterize(th1, th2, geom));
    }
    Trajectory::new(times, joints, frames)
}
