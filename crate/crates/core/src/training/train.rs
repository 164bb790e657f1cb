use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Dmbn, ModelConfig, Objective, ObservationSet, TimeMode};
use crate::numerics::{Graph, ParameterSet, Tensor};
use crate::synthdata::{augment_with_rng, Trajectory, FRAME_LEN, JOINTS};
use crate::training::{sample_context_target, Adam, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Largest context size drawn per training sequence.
    pub n_max: usize,
    /// Probability of speed-warping a training sequence.
    pub p_aug: f64,
    /// Speed-warp augmentation on/off; `None` enables it for pte mode only.
    pub augment: Option<bool>,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Variance exponent weighting the differentiated NLL; 0 is plain NLL.
    pub nll_beta: f64,
    /// Leading share of the epochs that fits the means only.
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            n_max: 10,
            p_aug: 0.5,
            augment: None,
            batch_size: 4,
            nll_beta: 1.0,
            warmup_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn augmentation_enabled(&self, mode: TimeMode) -> bool {
        self.augment.unwrap_or(mode == TimeMode::Pte)
    }

    fn validate(&self, t: usize) -> Result<()> {
        if self.n_max < 1 || self.n_max > t {
            return Err(Error::Config(format!("n_max {} must lie in 1..={t}", self.n_max)));
        }
        if !(self.lr >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("learning rate must be non-negative and eps positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_aug) {
            return Err(Error::Config(format!("p_aug {} outside [0, 1]", self.p_aug)));
        }
        if !(0.0..=1.0).contains(&self.nll_beta) {
            return Err(Error::Config(format!("nll_beta {} outside [0, 1]", self.nll_beta)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: Dmbn,
    /// Mean per-sequence NLL of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Target matrices (M×256 frames, M×2 joints) for all indices of `traj`.
pub(crate) fn target_tensors(traj: &Trajectory) -> Result<(Tensor, Tensor)> {
    let m = traj.len();
    let img: Vec<f64> = traj.frames.iter().flatten().copied().collect();
    let jnt: Vec<f64> = traj.joints.iter().flatten().copied().collect();
    Ok((Tensor::matrix(m, FRAME_LEN, img)?, Tensor::matrix(m, JOINTS, jnt)?))
}

/// Per-sequence NLL loss graph for the context indices given.
pub(crate) fn sequence_loss(
    model: &Dmbn,
    g: &mut Graph,
    traj: &Trajectory,
    ctx_idx: &[usize],
    objective: Objective,
) -> Result<(crate::numerics::Var, f64)> {
    let ctx = ObservationSet::from_trajectory(traj, ctx_idx)?;
    let (yi, yj) = target_tensors(traj)?;
    model.nll_vars(g, model.bind(true), &ctx, &traj.times, yi, yj, objective)
}

/// Plain per-sequence NLL of `model`'s architecture evaluated at `params`,
/// which must share the model's layout. Targets are all indices of `traj`.
pub fn sequence_nll(
    model: &Dmbn,
    params: &ParameterSet,
    g: &mut Graph,
    traj: &Trajectory,
    ctx_idx: &[usize],
) -> Result<crate::numerics::Var> {
    if params.len() != model.params().len() {
        return Err(Error::Contract("parameter set does not match the model layout".into()));
    }
    let ctx = ObservationSet::from_trajectory(traj, ctx_idx)?;
    let (yi, yj) = target_tensors(traj)?;
    let (loss, _) = model.nll_vars(g, model.bind_with(params, true), &ctx, &traj.times, yi, yj, Objective::Nll { beta: 0.0 })?;
    Ok(loss)
}

pub fn train(dataset: &[Trajectory], cfg: ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(dataset, cfg, tcfg, |_, _| {})
}

/// As [`train`], calling `observer(epoch, mean_nll)` after every epoch.
pub fn train_with_observer(
    dataset: &[Trajectory],
    cfg: ModelConfig,
    tcfg: &TrainConfig,
    mut observer: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let t = dataset
        .first()
        .map(Trajectory::len)
        .ok_or_else(|| Error::Contract("training needs a non-empty dataset".into()))?;
    if dataset.iter().any(|tr| tr.len() != t) {
        return Err(Error::Contract("training sequences must share T".into()));
    }
    tcfg.validate(t)?;
    let augment = tcfg.augmentation_enabled(cfg.time_mode) && t >= 4;
    let mut model = Dmbn::new(cfg)?;
    let adam = Adam {
        lr: tcfg.lr,
        beta1: tcfg.beta1,
        beta2: tcfg.beta2,
        eps: tcfg.eps,
    };
    let mut state = AdamState::zeros_like(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(tcfg.epochs);
    let warmup = (tcfg.warmup_fraction * tcfg.epochs as f64).round() as usize;

    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let objective = if epoch < warmup {
            Objective::MeanOnly
        } else {
            Objective::Nll { beta: tcfg.nll_beta }
        };
        let mut total = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            model.params_mut().zero_grad();
            for &i in batch {
                let warped;
                let traj = if augment && rng.gen_bool(tcfg.p_aug) {
                    warped = augment_with_rng(&dataset[i], &mut rng)?;
                    &warped
                } else {
                    &dataset[i]
                };
                let (ctx_idx, _) = sample_context_target(t, tcfg.n_max, &mut rng)?;
                let mut g = Graph::new();
                let (loss, lv) = sequence_loss(&model, &mut g, traj, &ctx_idx, objective)?;
                if !lv.is_finite() {
                    return Err(Error::Contract(format!("non-finite loss {lv} at epoch {epoch}")));
                }
                total += lv;
                let grads = g.backward(loss)?;
                model.params_mut().accumulate(&grads)?;
            }
            model.params_mut().scale_grads(1.0 / batch.len() as f64);
            adam.step(model.params_mut(), &mut state)?;
        }
        let mean = total / dataset.len() as f64;
        observer(epoch, mean);
        curve.push(mean);
    }
    Ok(TrainOutcome {
        model,
        loss_curve: curve,
    })
}
