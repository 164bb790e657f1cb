//! Frozen-encoder time regression.
//!
//! Small MLP heads are trained to recover each observation's time from a
//! frozen encoder output. Low held-out loss means the encoder keeps temporal
//! information; a loss near the variance of the time grid means it does not.

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Dmbn, ModelConfig, Observation, TimeMode, TimeSignal};
use crate::numerics::{Graph, ParamId, ParameterSet, Tensor};
use crate::synthdata::Trajectory;
use crate::training::{Adam, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub repeats: usize,
    /// Fraction of sequences used to fit the head.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            repeats: 10,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if self.repeats < 2 {
            return Err(Error::Config(format!("probe repeats {} must be at least 2", self.repeats)));
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe hidden width and batch size must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    /// Trained channel-mode encoders fed a zero time signal.
    Null,
    /// Untrained channel-mode encoders.
    Random,
    /// Trained channel-mode encoders.
    Dmbn,
    /// Trained pte-mode encoders, read after time injection.
    DmbnPte,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Null, Condition::Random, Condition::Dmbn, Condition::DmbnPte];
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Null => "Null",
            Condition::Random => "Random",
            Condition::Dmbn => "DMBN",
            Condition::DmbnPte => "DMBN-PTE",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Encoder {
    Image,
    Joint,
}

impl fmt::Display for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoder::Image => "image",
            Encoder::Joint => "joint",
        })
    }
}

/// Trained models the probe reads from.
#[derive(Clone, Debug, Default)]
pub struct ProbeSources {
    pub dmbn: Option<Dmbn>,
    pub pte: Option<Dmbn>,
}

/// Per-observation features with their true times and source sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// N×d
    pub features: Tensor,
    pub times: Vec<f64>,
    pub sequence: Vec<usize>,
}

/// Image and joint feature sets for one condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionFeatures {
    pub image: FeatureSet,
    pub joint: FeatureSet,
}

impl ConditionFeatures {
    pub fn get(&self, enc: Encoder) -> &FeatureSet {
        match enc {
            Encoder::Image => &self.image,
            Encoder::Joint => &self.joint,
        }
    }
}

fn trained<'a>(m: &'a Option<Dmbn>, what: &str, mode: TimeMode) -> Result<&'a Dmbn> {
    let m = m
        .as_ref()
        .ok_or_else(|| Error::Config(format!("the {what} condition needs a trained {mode}-mode checkpoint")))?;
    if m.config().time_mode != mode {
        return Err(Error::Config(format!(
            "the {what} condition needs a {mode}-mode checkpoint, got {}",
            m.config().time_mode
        )));
    }
    Ok(m)
}

/// One feature row per observation of every trajectory. `random_seed`
/// initializes the encoders of the Random condition.
pub fn extract_features(
    sources: &ProbeSources,
    dataset: &[Trajectory],
    condition: Condition,
    random_seed: u64,
) -> Result<ConditionFeatures> {
    let fresh;
    let (model, signal) = match condition {
        Condition::Dmbn => (trained(&sources.dmbn, "DMBN", TimeMode::Channel)?, TimeSignal::Actual),
        Condition::Null => (trained(&sources.dmbn, "Null", TimeMode::Channel)?, TimeSignal::Null),
        Condition::DmbnPte => (trained(&sources.pte, "DMBN-PTE", TimeMode::Pte)?, TimeSignal::Actual),
        Condition::Random => {
            let cfg = sources
                .dmbn
                .as_ref()
                .map_or_else(|| ModelConfig::new(TimeMode::Channel), |m| m.config().clone());
            fresh = Dmbn::new(cfg.with_seed(random_seed))?;
            (&fresh, TimeSignal::Actual)
        }
    };
    let mut img = Vec::new();
    let mut jnt = Vec::new();
    let mut times = Vec::new();
    let mut sequence = Vec::new();
    for (s, tr) in dataset.iter().enumerate() {
        let obs: Vec<Observation> = (0..tr.len())
            .map(|k| Observation {
                t: tr.times[k],
                frame: tr.frames[k].clone(),
                joints: tr.joints[k],
            })
            .collect();
        let f = model.encoder_features(&obs, signal)?;
        img.extend_from_slice(f.image.data());
        jnt.extend_from_slice(f.joint.data());
        times.extend_from_slice(&tr.times);
        sequence.extend(std::iter::repeat_n(s, tr.len()));
    }
    let n = times.len();
    if n == 0 {
        return Err(Error::Contract("no observations to probe".into()));
    }
    let d = img.len() / n;
    let dj = jnt.len() / n;
    Ok(ConditionFeatures {
        image: FeatureSet {
            features: Tensor::matrix(n, d, img)?,
            times: times.clone(),
            sequence: sequence.clone(),
        },
        joint: FeatureSet {
            features: Tensor::matrix(n, dj, jnt)?,
            times,
            sequence,
        },
    })
}

struct Head {
    params: ParameterSet,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Head {
    fn new(d: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParameterSet::new();
        let mut glorot = |i: usize, o: usize| {
            let lim = (6.0 / (i + o) as f64).sqrt();
            Tensor::matrix(i, o, (0..i * o).map(|_| rng.gen_range(-lim..lim)).collect())
        };
        let w1 = params.insert("w1", glorot(d, hidden)?)?;
        let b1 = params.insert("b1", Tensor::zeros(&[hidden]))?;
        let w2 = params.insert("w2", glorot(hidden, 1)?)?;
        let b2 = params.insert("b2", Tensor::zeros(&[1]))?;
        Ok(Self { params, w1, b1, w2, b2 })
    }

    /// Sum of squared errors on the rows given.
    fn sse(&self, g: &mut Graph, x: Tensor, y: Tensor) -> Result<crate::numerics::Var> {
        let x = g.input(x);
        let y = g.input(y);
        let (w1, b1) = (g.param(&self.params, self.w1), g.param(&self.params, self.b1));
        let (w2, b2) = (g.param(&self.params, self.w2), g.param(&self.params, self.b2));
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        let out = g.linear(h, w2, b2)?;
        let r = g.sub(out, y)?;
        let r2 = g.square(r);
        Ok(g.sum(r2))
    }
}

fn gather(fs: &FeatureSet, rows: &[usize]) -> Result<(Tensor, Tensor)> {
    let d = fs.features.cols();
    let x: Vec<f64> = rows.iter().flat_map(|&i| fs.features.row(i).iter().copied()).collect();
    let y: Vec<f64> = rows.iter().map(|&i| fs.times[i]).collect();
    Ok((Tensor::matrix(rows.len(), d, x)?, Tensor::matrix(rows.len(), 1, y)?))
}

/// Held-out result of one probe fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub test_loss: f64,
}

/// Fits a two-layer head on a sequence-level split and returns the held-out
/// mean squared error.
pub fn train_probe(fs: &FeatureSet, pcfg: &ProbeConfig, seed: u64) -> Result<ProbeFit> {
    let n = fs.times.len();
    if n < 2 {
        return Err(Error::Contract("probing needs at least two observations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_rows, test_rows) = split(fs, pcfg.train_fraction, &mut rng);
    let mut head = Head::new(fs.features.cols(), pcfg.hidden, &mut rng)?;
    let adam = Adam {
        lr: pcfg.lr,
        ..Adam::default()
    };
    let mut state = AdamState::zeros_like(&head.params);
    let mut order = train_rows.clone();
    for _ in 0..pcfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(pcfg.batch_size) {
            let (x, y) = gather(fs, batch)?;
            let mut g = Graph::new();
            let sse = head.sse(&mut g, x, y)?;
            let loss = g.scale(sse, 1.0 / batch.len() as f64);
            let grads = g.backward(loss)?;
            head.params.zero_grad();
            head.params.accumulate(&grads)?;
            adam.step(&mut head.params, &mut state)?;
        }
    }
    let (x, y) = gather(fs, &test_rows)?;
    let mut g = Graph::new();
    let sse = head.sse(&mut g, x, y)?;
    let test_loss = g.value(sse).item() / test_rows.len() as f64;
    Ok(ProbeFit {
        train_rows,
        test_rows,
        test_loss,
    })
}

/// Whole sequences go to one side; with a single sequence the split falls
/// back to observations.
fn split(fs: &FeatureSet, frac: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut seqs: Vec<usize> = fs.sequence.clone();
    seqs.sort_unstable();
    seqs.dedup();
    let (units, by_seq): (Vec<usize>, bool) = if seqs.len() >= 2 {
        (seqs, true)
    } else {
        ((0..fs.times.len()).collect(), false)
    };
    let mut units = units;
    units.shuffle(rng);
    let k = ((units.len() as f64 * frac).round() as usize).clamp(1, units.len() - 1);
    let train_units = &units[..k];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..fs.times.len() {
        let key = if by_seq { fs.sequence[i] } else { i };
        if train_units.contains(&key) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    (train, test)
}

/// Mean and normal-approximation 95% interval of repeated losses.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub condition: Condition,
    pub encoder: Encoder,
    pub losses: Vec<f64>,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ProbeRow {
    pub fn from_losses(condition: Condition, encoder: Encoder, losses: Vec<f64>) -> Self {
        let r = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / r;
        let var = if losses.len() > 1 {
            losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (r - 1.0)
        } else {
            0.0
        };
        let half = 1.96 * var.sqrt() / r.sqrt();
        Self {
            condition,
            encoder,
            losses,
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn row(&self, condition: Condition, encoder: Encoder) -> Option<&ProbeRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.encoder == encoder)
    }

    pub fn mean(&self, condition: Condition, encoder: Encoder) -> f64 {
        self.row(condition, encoder).map_or(f64::NAN, |r| r.mean)
    }

    /// `condition,encoder,mean_loss,ci_low,ci_high` in absolute units.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,encoder,mean_loss,ci_low,ci_high\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.condition, r.encoder, r.mean, r.ci_low, r.ci_high);
        }
        s
    }

    /// Aligned table with losses scaled by 1e3 and intervals in parentheses.
    pub fn to_table(&self) -> String {
        let cell = |c: Condition, e: Encoder| {
            self.row(c, e).map_or_else(
                || "n/a".to_string(),
                |r| format!("{:.2} ({:.2}, {:.2})", r.mean * 1e3, r.ci_low * 1e3, r.ci_high * 1e3),
            )
        };
        let head = ["Model", "Image Encoder Loss (1e-3)", "Joint Encoder Loss (1e-3)"];
        let body: Vec<[String; 3]> = Condition::ALL
            .iter()
            .map(|&c| [c.to_string(), cell(c, Encoder::Image), cell(c, Encoder::Joint)])
            .collect();
        let width = |k: usize| body.iter().map(|r| r[k].len()).chain([head[k].len()]).max().unwrap_or(0);
        let w = [width(0), width(1), width(2)];
        let mut s = String::new();
        let _ = writeln!(s, "{:<a$}  {:>b$}  {:>c$}", head[0], head[1], head[2], a = w[0], b = w[1], c = w[2]);
        for r in &body {
            let _ = writeln!(s, "{:<a$}  {:>b$}  {:>c$}", r[0], r[1], r[2], a = w[0], b = w[1], c = w[2]);
        }
        s
    }
}

/// Runs `repeats` probe fits per condition and encoder. Repeat `k` uses seed
/// `pcfg.seed + k` for the split and head, and for the Random encoders.
pub fn probe_report(sources: &ProbeSources, dataset: &[Trajectory], pcfg: &ProbeConfig) -> Result<ProbeReport> {
    probe_conditions(sources, dataset, pcfg, &Condition::ALL)
}

pub fn probe_conditions(
    sources: &ProbeSources,
    dataset: &[Trajectory],
    pcfg: &ProbeConfig,
    conditions: &[Condition],
) -> Result<ProbeReport> {
    pcfg.validate()?;
    let mut rows = Vec::new();
    for &c in conditions {
        let mut losses = [Vec::new(), Vec::new()];
        let fixed = match c {
            Condition::Random => None,
            _ => Some(extract_features(sources, dataset, c, 0)?),
        };
        for k in 0..pcfg.repeats as u64 {
            let seed = pcfg.seed.wrapping_add(k);
            let fresh;
            let feats = match &fixed {
                Some(f) => f,
                None => {
                    fresh = extract_features(sources, dataset, c, seed)?;
                    &fresh
                }
            };
            for (slot, enc) in [Encoder::Image, Encoder::Joint].into_iter().enumerate() {
                losses[slot].push(train_probe(feats.get(enc), pcfg, seed)?.test_loss);
            }
        }
        let [li, lj] = losses;
        rows.push(ProbeRow::from_losses(c, Encoder::Image, li));
        rows.push(ProbeRow::from_losses(c, Encoder::Joint, lj));
    }
    Ok(ProbeReport { rows })
}
