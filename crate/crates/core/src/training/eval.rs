use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Dmbn, GaussianPrediction, ObservationSet};
use crate::synthdata::{Trajectory, FRAME_LEN, JOINTS};
use crate::training::gaussian_nll;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModalityMetrics {
    /// Mean per-element NLL.
    pub nll: f64,
    /// Mean squared error of the predicted means.
    pub mse: f64,
    /// Fraction of elements with |y − μ| ≤ σ.
    pub coverage: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub image: ModalityMetrics,
    pub joint: ModalityMetrics,
}

impl EvalMetrics {
    /// `metric,modality,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,modality,value\n");
        for (name, m) in [("image", &self.image), ("joints", &self.joint)] {
            let _ = writeln!(s, "nll,{name},{}", m.nll);
            let _ = writeln!(s, "mse,{name},{}", m.mse);
            let _ = writeln!(s, "coverage,{name},{}", m.coverage);
        }
        s
    }
}

/// `n` indices spread evenly over `0..t`, always starting at 0 and, for
/// n ≥ 2, ending at t−1.
pub fn evenly_spaced(t: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > t {
        return Err(Error::Contract(format!("context size {n} must lie in 1..={t}")));
    }
    if n == 1 {
        return Ok(vec![0]);
    }
    let span = (t - 1) as f64 / (n - 1) as f64;
    Ok((0..n).map(|i| (i as f64 * span).round() as usize).collect())
}

#[derive(Default)]
struct Acc {
    nll: f64,
    se: f64,
    covered: usize,
    n: usize,
}

impl Acc {
    fn add(&mut self, mu: &[f64], var: &[f64], y: &[f64], floor: f64) -> Result<()> {
        for ((&m, &v), &y) in mu.iter().zip(var).zip(y) {
            self.nll += gaussian_nll(m, v, y, floor)?;
            let r = y - m;
            self.se += r * r;
            if r.abs() <= v.sqrt() {
                self.covered += 1;
            }
            self.n += 1;
        }
        Ok(())
    }

    fn finish(&self) -> ModalityMetrics {
        let n = self.n.max(1) as f64;
        ModalityMetrics {
            nll: self.nll / n,
            mse: self.se / n,
            coverage: self.covered as f64 / n,
        }
    }
}

/// Predictions for every index of `traj` from `n_ctx` evenly spaced
/// observations.
pub fn predict_sequence(model: &Dmbn, traj: &Trajectory, n_ctx: usize) -> Result<(Vec<usize>, GaussianPrediction)> {
    let idx = evenly_spaced(traj.len(), n_ctx)?;
    let ctx = ObservationSet::from_trajectory(traj, &idx)?;
    let pred = model.forward(&ctx, &traj.times)?;
    Ok((idx, pred))
}

pub fn evaluate(model: &Dmbn, dataset: &[Trajectory], n_ctx: usize) -> Result<EvalMetrics> {
    let floor = model.config().var_floor;
    let (mut img, mut jnt) = (Acc::default(), Acc::default());
    for traj in dataset {
        let (_, p) = predict_sequence(model, traj, n_ctx)?;
        for k in 0..traj.len() {
            img.add(p.image_mean.row(k), p.image_var.row(k), &traj.frames[k], floor)?;
            jnt.add(p.joint_mean.row(k), p.joint_var.row(k), &traj.joints[k], floor)?;
        }
    }
    Ok(EvalMetrics {
        image: img.finish(),
        joint: jnt.finish(),
    })
}

/// MSE of predicting the dataset's own per-element mean for every frame
/// pixel and joint coordinate: (image, joints).
pub fn mean_baseline(dataset: &[Trajectory]) -> Result<(f64, f64)> {
    let count: usize = dataset.iter().map(Trajectory::len).sum();
    if count == 0 {
        return Err(Error::Contract("baseline of an empty dataset".into()));
    }
    let mut img_mean = vec![0.0; FRAME_LEN];
    let mut jnt_mean = [0.0; JOINTS];
    for tr in dataset {
        for (f, j) in tr.frames.iter().zip(&tr.joints) {
            img_mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
            jnt_mean.iter_mut().zip(j).for_each(|(m, v)| *m += v);
        }
    }
    let n = count as f64;
    img_mean.iter_mut().for_each(|m| *m /= n);
    jnt_mean.iter_mut().for_each(|m| *m /= n);
    let (mut se_i, mut se_j) = (0.0, 0.0);
    for tr in dataset {
        for (f, j) in tr.frames.iter().zip(&tr.joints) {
            se_i += f.iter().zip(&img_mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
            se_j += j.iter().zip(&jnt_mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>();
        }
    }
    Ok((se_i / (n * FRAME_LEN as f64), se_j / (n * JOINTS as f64)))
}
