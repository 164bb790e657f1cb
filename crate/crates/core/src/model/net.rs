use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{GaussianPrediction, ModelConfig, Observation, ObservationSet, Representative, TimeMode};
use crate::numerics::{Graph, ParamId, ParameterSet, Tensor, Var};
use crate::synthdata::{FRAME_H, FRAME_LEN, FRAME_W, JOINTS};

const CONV_STRIDE: usize = 2;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn kernel_size(layer: usize) -> usize {
    if layer == 0 {
        4
    } else {
        3
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    k: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Decoder {
    trunk: Vec<Dense>,
    mean: Dense,
    var: Dense,
}

#[derive(Clone, Copy, Debug)]
struct PteLayers {
    proj: Dense,
    nl: Dense,
}

#[derive(Clone, Debug)]
struct Layout {
    img_conv: Vec<Conv>,
    img_fc: Dense,
    joint: Vec<Dense>,
    pte: Option<PteLayers>,
    dec_img: Decoder,
    dec_joint: Decoder,
    conv_out: usize,
}

/// Parameter declaration: name, shape, fan-in, fan-out. Biases have fan-in 0.
type Decl = (String, Vec<usize>, usize, usize);

fn declare(cfg: &ModelConfig) -> Result<(Vec<Decl>, usize)> {
    cfg.validate()?;
    let d = cfg.hidden_dim;
    let mut decls: Vec<Decl> = Vec::new();
    let dense = |decls: &mut Vec<Decl>, name: &str, i: usize, o: usize| {
        decls.push((format!("{name}.w"), vec![i, o], i, o));
        decls.push((format!("{name}.b"), vec![o], 0, o));
    };

    let (mut ch, mut side) = (cfg.image_channels(), FRAME_H);
    for (l, &f) in cfg.conv_widths.iter().enumerate() {
        let k = kernel_size(l);
        if k > side {
            return Err(Error::Config(format!(
                "conv layer {l} kernel {k} exceeds spatial extent {side}"
            )));
        }
        decls.push((format!("img_enc.conv{l}.k"), vec![f, ch, k, k], ch * k * k, f * k * k));
        decls.push((format!("img_enc.conv{l}.b"), vec![f], 0, f));
        side = (side - k) / CONV_STRIDE + 1;
        ch = f;
    }
    let conv_out = ch * side * side;
    dense(&mut decls, "img_enc.fc", conv_out, d);

    let mut w_in = cfg.joint_inputs();
    for (l, &w) in cfg.joint_widths.iter().enumerate() {
        dense(&mut decls, &format!("joint_enc.fc{l}"), w_in, w);
        w_in = w;
    }
    dense(&mut decls, "joint_enc.out", w_in, d);

    if cfg.time_mode == TimeMode::Pte {
        dense(&mut decls, "pte.proj", 1, d);
        dense(&mut decls, "pte.nl", d, d);
    }

    for (name, out) in [("dec_img", FRAME_LEN), ("dec_joint", JOINTS)] {
        let mut w_in = cfg.decoder_inputs();
        for (l, &w) in cfg.decoder_widths.iter().enumerate() {
            dense(&mut decls, &format!("{name}.trunk{l}"), w_in, w);
            w_in = w;
        }
        dense(&mut decls, &format!("{name}.mean"), w_in, out);
        dense(&mut decls, &format!("{name}.var"), w_in, out);
    }
    Ok((decls, conv_out))
}

impl Layout {
    fn resolve(cfg: &ModelConfig, params: &ParameterSet, conv_out: usize) -> Result<Self> {
        let id = |n: String| {
            params
                .id(&n)
                .ok_or_else(|| Error::Config(format!("missing parameter {n}")))
        };
        let dense = |n: &str| -> Result<Dense> {
            Ok(Dense {
                w: id(format!("{n}.w"))?,
                b: id(format!("{n}.b"))?,
            })
        };
        let decoder = |n: &str| -> Result<Decoder> {
            Ok(Decoder {
                trunk: (0..cfg.decoder_widths.len())
                    .map(|l| dense(&format!("{n}.trunk{l}")))
                    .collect::<Result<_>>()?,
                mean: dense(&format!("{n}.mean"))?,
                var: dense(&format!("{n}.var"))?,
            })
        };
        let mut joint: Vec<Dense> = (0..cfg.joint_widths.len())
            .map(|l| dense(&format!("joint_enc.fc{l}")))
            .collect::<Result<_>>()?;
        joint.push(dense("joint_enc.out")?);
        Ok(Self {
            img_conv: (0..cfg.conv_widths.len())
                .map(|l| {
                    Ok(Conv {
                        k: id(format!("img_enc.conv{l}.k"))?,
                        b: id(format!("img_enc.conv{l}.b"))?,
                    })
                })
                .collect::<Result<_>>()?,
            img_fc: dense("img_enc.fc")?,
            joint,
            pte: match cfg.time_mode {
                TimeMode::Pte => Some(PteLayers {
                    proj: dense("pte.proj")?,
                    nl: dense("pte.nl")?,
                }),
                TimeMode::Channel => None,
            },
            dec_img: decoder("dec_img")?,
            dec_joint: decoder("dec_joint")?,
            conv_out,
        })
    }
}

/// Whether parameters enter a graph as trainable leaves or as constants.
#[derive(Clone, Copy)]
pub(crate) struct Bind<'a> {
    params: &'a ParameterSet,
    trainable: bool,
}

impl Bind<'_> {
    fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.params, id)
        } else {
            g.frozen(self.params, id)
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, layer: Dense) -> Result<Var> {
        let w = self.var(g, layer.w);
        let b = self.var(g, layer.b);
        g.linear(x, w, b)
    }
}

/// Time value fed to the encoders when extracting probe features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeSignal {
    /// The observation's own time stamp.
    Actual,
    /// Zero in place of every time stamp.
    Null,
}

/// Per-observation encoder outputs, one row per observation, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures {
    pub image: Tensor,
    pub joint: Tensor,
}

/// Graph handles for one forward pass.
pub(crate) struct PredictionVars {
    pub image_mean: Var,
    pub image_var: Var,
    pub joint_mean: Var,
    pub joint_var: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Joints,
}

/// Appends a constant time plane to the frame and a time coordinate to the
/// joint vector.
pub fn inject_time_channel(frame: &[f64], joints: &[f64; JOINTS], t: f64) -> (Vec<f64>, [f64; JOINTS + 1]) {
    let mut img = Vec::with_capacity(2 * FRAME_LEN);
    img.extend_from_slice(frame);
    img.extend(std::iter::repeat_n(t, FRAME_LEN));
    (img, [joints[0], joints[1], t])
}

fn blend_vars(g: &mut Graph, h_img: Var, h_joint: Var, w: f64) -> Result<Var> {
    let a = g.scale(h_img, w);
    let b = g.scale(h_joint, 1.0 - w);
    g.add(a, b)
}

/// `w·h_img + (1−w)·h_joint`.
pub fn blend(h_img: &[f64], h_joint: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain {
            op: "blend",
            detail: format!("weight {w} outside [0, 1]"),
        });
    }
    let mut g = Graph::new();
    let a = g.input(Tensor::vector(h_img.to_vec()));
    let b = g.input(Tensor::vector(h_joint.to_vec()));
    let out = blend_vars(&mut g, a, b, w)?;
    Ok(g.value(out).data().to_vec())
}

/// Mean of `(time, encoding)` pairs, summed after a canonical sort by time.
pub fn aggregate(blended: &[(f64, Vec<f64>)]) -> Result<Representative> {
    if blended.is_empty() {
        return Err(Error::Contract("cannot aggregate an empty set".into()));
    }
    let mut sorted: Vec<&(f64, Vec<f64>)> = blended.iter().collect();
    sorted.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let d = sorted[0].1.len();
    if sorted.iter().any(|(_, v)| v.len() != d) {
        return Err(Error::dim("aggregate", &[d], &[]));
    }
    let rows: Vec<f64> = sorted.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(sorted.len(), d, rows)?);
    let m = g.mean_rows(x)?;
    Ok(Representative {
        r: g.value(m).data().to_vec(),
    })
}

fn column(values: &[f64]) -> Result<Tensor> {
    Tensor::matrix(values.len(), 1, values.to_vec())
}

/// The multimodal network: parameters plus the layout that names them.
#[derive(Clone, Debug)]
pub struct Dmbn {
    cfg: ModelConfig,
    params: ParameterSet,
    layout: Layout,
}

impl Dmbn {
    /// Fresh parameters: Glorot-uniform weights and zero biases drawn from
    /// `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let (decls, conv_out) = declare(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParameterSet::new();
        for (name, shape, fan_in, fan_out) in decls {
            let n: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        let layout = Layout::resolve(&cfg, &params, conv_out)?;
        Ok(Self { cfg, params, layout })
    }

    /// Rebuilds a model from stored parameters; names, order, and shapes must
    /// match what `cfg` declares.
    pub fn from_parts(cfg: ModelConfig, params: ParameterSet) -> Result<Self> {
        let (decls, conv_out) = declare(&cfg)?;
        if decls.len() != params.len() {
            return Err(Error::Config(format!(
                "configuration declares {} parameters, found {}",
                decls.len(),
                params.len()
            )));
        }
        for ((name, shape, _, _), (_, pname, t)) in decls.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {pname} {:?} does not match declared {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let layout = Layout::resolve(&cfg, &params, conv_out)?;
        Ok(Self { cfg, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Parameters of the image and joint encoders (plus the time projection
    /// layers in pte mode).
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with("img_enc") || n.starts_with("joint_enc") || n.starts_with("pte"))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub(crate) fn bind(&self, trainable: bool) -> Bind<'_> {
        self.bind_with(&self.params, trainable)
    }

    /// Binds a parameter set with this model's layout, such as a perturbed
    /// copy of [`Dmbn::params`].
    pub(crate) fn bind_with<'a>(&self, params: &'a ParameterSet, trainable: bool) -> Bind<'a> {
        Bind { params, trainable }
    }

    fn encode_image_vars(&self, g: &mut Graph, p: Bind, x: Var) -> Result<Var> {
        let n = g.value(x).shape()[0];
        let mut h = x;
        for conv in &self.layout.img_conv {
            let k = p.var(g, conv.k);
            let b = p.var(g, conv.b);
            let y = g.conv2d(h, k, CONV_STRIDE)?;
            let y = g.channel_bias(y, b)?;
            h = g.relu(y);
        }
        let flat = g.reshape(h, &[n, self.layout.conv_out])?;
        p.linear(g, flat, self.layout.img_fc)
    }

    fn encode_joints_vars(&self, g: &mut Graph, p: Bind, x: Var) -> Result<Var> {
        let (last, hidden) = self.layout.joint.split_last().expect("joint encoder has an output layer");
        let mut h = x;
        for &layer in hidden {
            let y = p.linear(g, h, layer)?;
            h = g.relu(y);
        }
        p.linear(g, h, *last)
    }

    fn time_projection(&self, g: &mut Graph, p: Bind, t: Var) -> Result<Var> {
        let pte = self.layout.pte.ok_or(Error::Mode("time projection"))?;
        p.linear(g, t, pte.proj)
    }

    fn pte_inject_vars(&self, g: &mut Graph, p: Bind, h: Var, t: Var) -> Result<Var> {
        let pte = self.layout.pte.ok_or(Error::Mode("pte_inject"))?;
        let proj = self.time_projection(g, p, t)?;
        let z = g.add(h, proj)?;
        let y = p.linear(g, z, pte.nl)?;
        Ok(g.tanh(y))
    }

    fn condition_vars(&self, g: &mut Graph, p: Bind, r: Var, targets: Var) -> Result<Var> {
        let m = g.value(targets).rows();
        let rep = g.repeat_rows(r, m)?;
        match self.cfg.time_mode {
            TimeMode::Channel => g.concat_cols(rep, targets),
            TimeMode::Pte => {
                let proj = self.time_projection(g, p, targets)?;
                g.sub(rep, proj)
            }
        }
    }

    fn decode_vars(&self, g: &mut Graph, p: Bind, modality: Modality, c: Var) -> Result<(Var, Var)> {
        let dec = match modality {
            Modality::Image => &self.layout.dec_img,
            Modality::Joints => &self.layout.dec_joint,
        };
        let mut h = c;
        for &layer in &dec.trunk {
            let y = p.linear(g, h, layer)?;
            h = g.relu(y);
        }
        let mean = p.linear(g, h, dec.mean)?;
        let raw = p.linear(g, h, dec.var)?;
        let sp = g.softplus(raw);
        let var = g.add_scalar(sp, self.cfg.var_floor);
        Ok((mean, var))
    }

    /// Encoder inputs for observations in the given order.
    fn encoder_inputs(&self, obs: &[&Observation], signal: TimeSignal) -> Result<(Tensor, Tensor, Tensor)> {
        let n = obs.len();
        let time = |o: &Observation| match signal {
            TimeSignal::Actual => o.t,
            TimeSignal::Null => 0.0,
        };
        let ch = self.cfg.image_channels();
        let mut img = Vec::with_capacity(n * ch * FRAME_LEN);
        let mut jnt = Vec::with_capacity(n * self.cfg.joint_inputs());
        for o in obs {
            match self.cfg.time_mode {
                TimeMode::Channel => {
                    let (fi, ji) = inject_time_channel(&o.frame, &o.joints, time(o));
                    img.extend_from_slice(&fi);
                    jnt.extend_from_slice(&ji);
                }
                TimeMode::Pte => {
                    img.extend_from_slice(&o.frame);
                    jnt.extend_from_slice(&o.joints);
                }
            }
        }
        let times: Vec<f64> = obs.iter().map(|o| time(o)).collect();
        Ok((
            Tensor::new(vec![n, ch, FRAME_H, FRAME_W], img)?,
            Tensor::matrix(n, self.cfg.joint_inputs(), jnt)?,
            column(&times)?,
        ))
    }

    /// Blended, time-bearing context encodings (rows in canonical order) and
    /// their mean.
    fn context_vars(&self, g: &mut Graph, p: Bind, ctx: &ObservationSet) -> Result<Var> {
        let obs = ctx.canonical();
        let (img, jnt, times) = self.encoder_inputs(&obs, TimeSignal::Actual)?;
        let img = g.input(img);
        let jnt = g.input(jnt);
        let h_img = self.encode_image_vars(g, p, img)?;
        let h_joint = self.encode_joints_vars(g, p, jnt)?;
        let mut blended = blend_vars(g, h_img, h_joint, self.cfg.blend_weight)?;
        if self.cfg.time_mode == TimeMode::Pte {
            let t = g.input(times);
            blended = self.pte_inject_vars(g, p, blended, t)?;
        }
        g.mean_rows(blended)
    }

    pub(crate) fn forward_vars(
        &self,
        g: &mut Graph,
        p: Bind,
        ctx: &ObservationSet,
        targets: &[f64],
    ) -> Result<PredictionVars> {
        if targets.is_empty() {
            return Err(Error::Contract("at least one target time is required".into()));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain {
                op: "forward",
                detail: format!("target time {t} outside [0, 1]"),
            });
        }
        let r = self.context_vars(g, p, ctx)?;
        let tt = g.input(column(targets)?);
        let c = self.condition_vars(g, p, r, tt)?;
        let (image_mean, image_var) = self.decode_vars(g, p, Modality::Image, c)?;
        let (joint_mean, joint_var) = self.decode_vars(g, p, Modality::Joints, c)?;
        Ok(PredictionVars {
            image_mean,
            image_var,
            joint_mean,
            joint_var,
        })
    }

    /// Predictive Gaussians at every target time given the context set.
    pub fn forward(&self, ctx: &ObservationSet, targets: &[f64]) -> Result<GaussianPrediction> {
        let mut g = Graph::new();
        let v = self.forward_vars(&mut g, self.bind(false), ctx, targets)?;
        Ok(GaussianPrediction {
            times: targets.to_vec(),
            image_mean: g.value(v.image_mean).clone(),
            image_var: g.value(v.image_var).clone(),
            joint_mean: g.value(v.joint_mean).clone(),
            joint_var: g.value(v.joint_var).clone(),
        })
    }

    /// Summed per-element Gaussian NLL of both modalities, averaged over
    /// targets. `y_image` is M×256 and `y_joint` is M×2.
    ///
    /// The returned value is always the plain NLL. The differentiated
    /// objective follows `objective`.
    pub(crate) fn nll_vars(
        &self,
        g: &mut Graph,
        p: Bind,
        ctx: &ObservationSet,
        targets: &[f64],
        y_image: Tensor,
        y_joint: Tensor,
        objective: Objective,
    ) -> Result<(Var, f64)> {
        let v = self.forward_vars(g, p, ctx, targets)?;
        let yi = g.input(y_image);
        let yj = g.input(y_joint);
        let scale = 1.0 / targets.len() as f64;
        let mut plain = 0.0;
        let mut parts = Vec::with_capacity(2);
        for (mean, var, y) in [(v.image_mean, v.image_var, yi), (v.joint_mean, v.joint_var, yj)] {
            let per = gaussian_nll_vars(g, mean, var, y)?;
            let total = g.sum(per);
            plain += g.value(total).item();
            parts.push(match objective {
                Objective::Nll { beta: 0.0 } => total,
                Objective::Nll { beta } => {
                    let w = g.value(var).map(|s| s.powf(beta));
                    let w = g.input(w);
                    let weighted = g.mul(per, w)?;
                    g.sum(weighted)
                }
                Objective::MeanOnly => {
                    let r = g.sub(y, mean)?;
                    let r2 = g.square(r);
                    let se = g.sum(r2);
                    g.scale(se, 0.5)
                }
            });
        }
        let total = g.add(parts[0], parts[1])?;
        Ok((g.scale(total, scale), plain * scale))
    }

    /// Context representation r.
    pub fn representative(&self, ctx: &ObservationSet) -> Result<Representative> {
        let mut g = Graph::new();
        let r = self.context_vars(&mut g, self.bind(false), ctx)?;
        Ok(Representative {
            r: g.value(r).data().to_vec(),
        })
    }

    /// Image encoder on a single C×16×16 input.
    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        let expect = [self.cfg.image_channels(), FRAME_H, FRAME_W];
        if x.shape() != expect {
            return Err(Error::dim("encode_image", x.shape(), &expect));
        }
        let mut g = Graph::new();
        let xin = g.input(x.reshape(&[1, expect[0], FRAME_H, FRAME_W])?);
        let h = self.encode_image_vars(&mut g, self.bind(false), xin)?;
        Ok(Tensor::vector(g.value(h).data().to_vec()))
    }

    /// Joint encoder on a single 2- or 3-vector.
    pub fn encode_joints(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.cfg.joint_inputs() {
            return Err(Error::dim("encode_joints", &[x.len()], &[self.cfg.joint_inputs()]));
        }
        let mut g = Graph::new();
        let xin = g.input(Tensor::matrix(1, x.len(), x.to_vec())?);
        let h = self.encode_joints_vars(&mut g, self.bind(false), xin)?;
        Ok(Tensor::vector(g.value(h).data().to_vec()))
    }

    /// `tanh(W·(h + P(t)) + b)`; pte mode only.
    pub fn pte_inject(&self, h: &[f64], t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let hv = g.input(Tensor::matrix(1, h.len(), h.to_vec())?);
        let tv = g.input(Tensor::matrix(1, 1, vec![t])?);
        let out = self.pte_inject_vars(&mut g, self.bind(false), hv, tv)?;
        Ok(Tensor::vector(g.value(out).data().to_vec()))
    }

    /// The learned time projection P(t); pte mode only.
    pub fn project_time(&self, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let tv = g.input(Tensor::matrix(1, 1, vec![t])?);
        let out = self.time_projection(&mut g, self.bind(false), tv)?;
        Ok(Tensor::vector(g.value(out).data().to_vec()))
    }

    /// `[r; t]` in channel mode, `r − P(t)` in pte mode.
    pub fn condition_target(&self, r: &Representative, t: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                op: "condition_target",
                detail: format!("time {t} outside [0, 1]"),
            });
        }
        let mut g = Graph::new();
        let rv = g.input(Tensor::matrix(1, r.r.len(), r.r.clone())?);
        let tv = g.input(Tensor::matrix(1, 1, vec![t])?);
        let c = self.condition_vars(&mut g, self.bind(false), rv, tv)?;
        Ok(Tensor::vector(g.value(c).data().to_vec()))
    }

    /// Mean and variance heads of one decoder for a single conditioned vector.
    pub fn decode(&self, modality: Modality, c: &[f64]) -> Result<(Tensor, Tensor)> {
        if c.len() != self.cfg.decoder_inputs() {
            return Err(Error::dim("decode", &[c.len()], &[self.cfg.decoder_inputs()]));
        }
        let mut g = Graph::new();
        let cv = g.input(Tensor::matrix(1, c.len(), c.to_vec())?);
        let (m, v) = self.decode_vars(&mut g, self.bind(false), modality, cv)?;
        Ok((g.value(m).clone(), g.value(v).clone()))
    }

    /// Frozen per-observation encodings for the time-regression probe. In pte
    /// mode each encoder output is passed through the time injection, so the
    /// features are the time-bearing vectors that enter aggregation.
    pub fn encoder_features(&self, obs: &[Observation], signal: TimeSignal) -> Result<EncoderFeatures> {
        if obs.is_empty() {
            return Err(Error::Contract("no observations to encode".into()));
        }
        let refs: Vec<&Observation> = obs.iter().collect();
        let (img, jnt, times) = self.encoder_inputs(&refs, signal)?;
        let mut g = Graph::new();
        let p = self.bind(false);
        let img = g.input(img);
        let jnt = g.input(jnt);
        let mut hi = self.encode_image_vars(&mut g, p, img)?;
        let mut hj = self.encode_joints_vars(&mut g, p, jnt)?;
        if self.cfg.time_mode == TimeMode::Pte {
            let t = g.input(times);
            hi = self.pte_inject_vars(&mut g, p, hi, t)?;
            hj = self.pte_inject_vars(&mut g, p, hj, t)?;
        }
        Ok(EncoderFeatures {
            image: g.value(hi).clone(),
            joint: g.value(hj).clone(),
        })
    }
}

/// What the training gradient is taken of.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Objective {
    /// Gaussian NLL with each element weighted by its detached variance
    /// raised to `beta`.
    Nll { beta: f64 },
    /// Half squared error of the means; variance heads get no gradient.
    MeanOnly,
}

/// Elementwise 0.5·ln(2π·var) + (y−μ)²/(2·var).
pub(crate) fn gaussian_nll_vars(g: &mut Graph, mean: Var, var: Var, y: Var) -> Result<Var> {
    let lv = g.log(var)?;
    let half_log = g.scale(lv, 0.5);
    let log_term = g.add_scalar(half_log, 0.5 * LN_2PI);
    let r = g.sub(y, mean)?;
    let r2 = g.square(r);
    let q = g.div(r2, var)?;
    let q = g.scale(q, 0.5);
    g.add(log_term, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_trajectory, ArmGeometry};

    fn ctx(n: usize) -> ObservationSet {
        let tr = generate_trajectory(1, 30, &ArmGeometry::default()).unwrap();
        let idx: Vec<usize> = (0..n).map(|i| i * 3).collect();
        ObservationSet::from_trajectory(&tr, &idx).unwrap()
    }

    #[test]
    fn time_channel_injection() {
        let frame = vec![0.3; FRAME_LEN];
        let (img, j) = inject_time_channel(&frame, &[0.1, -0.2], 0.25);
        assert!(img[FRAME_LEN..].iter().all(|&v| v == 0.25));
        assert_eq!(&img[..FRAME_LEN], &frame[..]);
        assert_eq!(j, [0.1, -0.2, 0.25]);
        let (img, j) = inject_time_channel(&frame, &[0.1, -0.2], 0.5);
        assert_eq!(j, [0.1, -0.2, 0.5]);
        assert!(img[FRAME_LEN..].iter().all(|&v| v == 0.5));
        let (img, j) = inject_time_channel(&frame, &[0.1, -0.2], 0.0);
        assert!(img[FRAME_LEN..].iter().all(|&v| v == 0.0));
        assert_eq!(j[2], 0.0);
    }

    #[test]
    fn blend_cases() {
        assert_eq!(blend(&[1.0, 3.0], &[3.0, 1.0], 0.5).unwrap(), vec![2.0, 2.0]);
        assert_eq!(blend(&[1.5, -3.0], &[9.0, 9.0], 1.0).unwrap(), vec![1.5, -3.0]);
        assert_eq!(blend(&[4.0, 0.0], &[0.0, 4.0], 0.25).unwrap(), vec![1.0, 3.0]);
        assert!(blend(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let r = aggregate(&[(0.0, vec![1.0, 2.0]), (0.5, vec![3.0, 4.0])]).unwrap();
        assert_eq!(r.r, vec![2.0, 3.0]);
        let r = aggregate(&[(0.3, vec![7.0, -1.0])]).unwrap();
        assert_eq!(r.r, vec![7.0, -1.0]);
        assert!(aggregate(&[]).is_err());
        let a = vec![(0.1, vec![0.1, 0.7]), (0.9, vec![1e-3, 3.3]), (0.4, vec![-2.2, 0.35])];
        let mut b = a.clone();
        b.rotate_left(1);
        assert_eq!(aggregate(&a).unwrap().r, aggregate(&b).unwrap().r);
    }

    #[test]
    fn output_shapes() {
        for mode in [TimeMode::Channel, TimeMode::Pte] {
            let m = Dmbn::new(ModelConfig::new(mode)).unwrap();
            let ch = m.config().image_channels();
            let h = m.encode_image(&Tensor::zeros(&[ch, 16, 16])).unwrap();
            assert_eq!(h.len(), 64);
            let h = m.encode_joints(&vec![0.0; m.config().joint_inputs()]).unwrap();
            assert_eq!(h.len(), 64);
            let p = m.forward(&ctx(4), &[0.0, 0.5, 1.0]).unwrap();
            assert_eq!(p.image_mean.shape(), &[3, 256]);
            assert_eq!(p.joint_mean.shape(), &[3, 2]);
            assert!(p.min_variance() >= 1e-6);
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let m = Dmbn::new(ModelConfig::new(TimeMode::Pte)).unwrap();
        assert!(matches!(m.encode_image(&Tensor::zeros(&[2, 16, 16])), Err(Error::Dimension { .. })));
        assert!(matches!(m.encode_joints(&[0.0; 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_parameters_give_zero_encodings() {
        let mut m = Dmbn::new(ModelConfig::new(TimeMode::Channel)).unwrap();
        let ids: Vec<_> = m.params().ids().collect();
        for id in ids {
            m.params_mut().get_mut(id).fill(0.0);
        }
        let x = Tensor::new(vec![2, 16, 16], (0..512).map(|v| (v % 7) as f64 / 7.0).collect()).unwrap();
        assert!(m.encode_image(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(m.encode_joints(&[0.3, -0.4, 0.5]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pte_only_in_pte_mode() {
        let m = Dmbn::new(ModelConfig::new(TimeMode::Channel)).unwrap();
        assert!(matches!(m.pte_inject(&[0.0; 64], 0.5), Err(Error::Mode(_))));
        assert!(m.params().iter().all(|(_, n, _)| !n.starts_with("pte")));
    }

    #[test]
    fn condition_target_modes() {
        let m = Dmbn::new(ModelConfig::new(TimeMode::Channel)).unwrap();
        let r = Representative { r: vec![1.0; 64] };
        let c = m.condition_target(&r, 0.5).unwrap();
        assert_eq!(c.len(), 65);
        assert_eq!(c.data()[64], 0.5);

        let m = Dmbn::new(ModelConfig::new(TimeMode::Pte).with_seed(4)).unwrap();
        let r = Representative {
            r: (0..64).map(|i| (i as f64 * 0.1).sin()).collect(),
        };
        for t in [0.0, 0.3, 1.0] {
            let c = m.condition_target(&r, t).unwrap();
            let p = m.project_time(t).unwrap();
            for k in 0..64 {
                assert!((c.data()[k] + p.data()[k] - r.r[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decoder_zero_weights_return_biases() {
        let mut m = Dmbn::new(ModelConfig::new(TimeMode::Channel)).unwrap();
        let names: Vec<(ParamId, String)> = m
            .params()
            .iter()
            .filter(|(_, n, _)| n.starts_with("dec_joint"))
            .map(|(id, n, _)| (id, n.to_string()))
            .collect();
        for (id, n) in names {
            let t = m.params_mut().get_mut(id);
            if n.ends_with(".w") {
                t.fill(0.0);
            } else {
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.1 * (k as f64 + 1.0);
                }
            }
        }
        let (mu, var) = m.decode(Modality::Joints, &[0.7; 65]).unwrap();
        assert_eq!(mu.data(), &[0.1, 0.2]);
        let expect = [crate::numerics::softplus(0.1) + 1e-6, crate::numerics::softplus(0.2) + 1e-6];
        assert_eq!(var.data(), &expect);
    }
}
