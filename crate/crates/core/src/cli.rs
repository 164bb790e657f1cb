//! `npx` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime or I/O failure, 2 on bad usage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::model::{decode_checkpoint, encode_checkpoint, Dmbn, ModelConfig, TimeMode};
use crate::probe::{probe_report, ProbeConfig, ProbeSources};
use crate::synthdata::{
    decode_dataset, default_corpus, encode_dataset, freeze_sequence, permute_times, ArmGeometry, Trajectory,
    FRAME_H, FRAME_W,
};
use crate::training::{evaluate, loss_curve_csv, predict_sequence, train, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "npx", version, about = "Multimodal neural process experiments on a synthetic arm corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and test datasets.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Permute or freeze one sequence of a dataset.
    Perturb(PerturbArgs),
    /// Score a checkpoint and render prediction strips.
    Eval(EvalArgs),
    /// Regress time from frozen encoder outputs.
    Probe(ProbeArgs),
    /// Run gen-data, both trainings, probe and eval in one go.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    train_n: usize,
    #[arg(long, default_value_t = 8)]
    test_n: usize,
    /// Sequence length.
    #[arg(long = "T", default_value_t = 30)]
    t: usize,
    #[arg(long, env = "NPX_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Channel,
    Pte,
}

impl From<ModeArg> for TimeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Channel => TimeMode::Channel,
            ModeArg::Pte => TimeMode::Pte,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Output directory for model.ckpt, loss.csv and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    p_aug: Option<f64>,
    /// Speed-warp augmentation; defaults to on for pte and off for channel.
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    nll_beta: Option<f64>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long, env = "NPX_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum PerturbKind {
    Permute,
    Freeze,
}

#[derive(Args, Debug, Clone, Serialize)]
struct PerturbArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: PerturbKind,
    /// Sequence index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// First frozen index; defaults to T/2.
    #[arg(long)]
    freeze_at: Option<usize>,
    #[arg(long, env = "NPX_SEED", default_value_t = 0)]
    seed: u64,
    /// Output dataset file; the manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    n_ctx: usize,
    /// Output directory for metrics.csv, strip PGMs and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ProbeArgs {
    #[arg(long)]
    ckpt_dmbn: PathBuf,
    #[arg(long)]
    ckpt_pte: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, env = "NPX_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory for probe.csv, probe.txt and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ReproduceArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    train_n: usize,
    #[arg(long, default_value_t = 8)]
    test_n: usize,
    #[arg(long = "T", default_value_t = 30)]
    t: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 10)]
    probe_repeats: usize,
    #[arg(long, env = "NPX_SEED", default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            e => Failure::Runtime(e),
        }
    }
}

type CmdResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let res = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Perturb(a) => perturb(&a),
        Command::Eval(a) => eval(&a),
        Command::Probe(a) => probe(&a),
        Command::Reproduce(a) => reproduce(&a),
    };
    match res {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a, F: Serialize> {
    command: &'a str,
    flags: &'a F,
    seeds: BTreeMap<&'a str, u64>,
    inputs: &'a [Artifact],
    outputs: &'a [Artifact],
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<&'a str, Value>,
    duration_secs: f64,
}

/// Tracks the files a command reads and writes.
struct Run {
    started: Instant,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> crate::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Run {
    fn start() -> Self {
        Self {
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn read(&mut self, path: &Path) -> crate::Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn dataset(&mut self, path: &Path) -> crate::Result<Vec<Trajectory>> {
        let bytes = self.read(path)?;
        decode_dataset(&bytes, path)
    }

    fn checkpoint(&mut self, path: &Path) -> crate::Result<Dmbn> {
        let bytes = self.read(path)?;
        decode_checkpoint(&bytes, path)
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> crate::Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn finish<F: Serialize>(
        self,
        manifest: &Path,
        command: &str,
        flags: &F,
        seeds: &[(&str, u64)],
        extra: BTreeMap<&str, Value>,
    ) -> crate::Result<()> {
        let m = Manifest {
            command,
            flags,
            seeds: seeds.iter().copied().collect(),
            inputs: &self.inputs,
            outputs: &self.outputs,
            extra,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| Error::Contract(e.to_string()))?;
        text.push('\n');
        write_atomic(manifest, text.as_bytes())
    }
}

fn gen_data(a: &GenDataArgs) -> CmdResult {
    if a.t < 2 {
        return Err(Failure::Usage(format!("--T {} is invalid: sequence length must satisfy T ≥ 2", a.t)));
    }
    if a.train_n == 0 {
        return Err(Failure::Usage("--train-n must be at least 1".into()));
    }
    let mut run = Run::start();
    let (train_set, test_set) = default_corpus(a.train_n, a.test_n, a.t, a.seed, &ArmGeometry::default())?;
    run.write(&a.out.join("train.npx"), &encode_dataset(&train_set)?)?;
    run.write(&a.out.join("test.npx"), &encode_dataset(&test_set)?)?;
    run.finish(&a.out.join("manifest.json"), "gen-data", a, &[("seed", a.seed)], BTreeMap::new())?;
    println!(
        "wrote {} train and {} test trajectories (T={}) to {}",
        a.train_n,
        a.test_n,
        a.t,
        a.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        n_max: a.n_max.unwrap_or(d.n_max),
        p_aug: a.p_aug.unwrap_or(d.p_aug),
        augment: a.augment.or(d.augment),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        nll_beta: a.nll_beta.unwrap_or(d.nll_beta),
        warmup_fraction: a.warmup_fraction.unwrap_or(d.warmup_fraction),
        seed: a.seed,
        ..d
    }
}

fn train_cmd(a: &TrainArgs) -> CmdResult {
    let mut run = Run::start();
    let data = run.dataset(&a.data)?;
    let mode = TimeMode::from(a.mode);
    let mut cfg = ModelConfig::new(mode).with_seed(a.seed);
    if let Some(d) = a.hidden_dim {
        cfg.hidden_dim = d;
    }
    let tcfg = train_config(a);
    let out = train(&data, cfg, &tcfg)?;
    run.write(&a.out.join("model.ckpt"), &encode_checkpoint(&out.model))?;
    run.write(&a.out.join("loss.csv"), loss_curve_csv(&out.loss_curve).as_bytes())?;
    let mut extra = BTreeMap::new();
    extra.insert("augmentation", Value::Bool(tcfg.augmentation_enabled(mode)));
    run.finish(&a.out.join("manifest.json"), "train", a, &[("seed", a.seed)], extra)?;
    println!(
        "trained {mode} model for {} epochs, final mean NLL {:.4}, wrote {}",
        tcfg.epochs,
        out.loss_curve.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn perturb(a: &PerturbArgs) -> CmdResult {
    let mut run = Run::start();
    let data = run.dataset(&a.data)?;
    let traj = data.get(a.index).ok_or_else(|| {
        Failure::Usage(format!("--index {} is out of range for {} sequences", a.index, data.len()))
    })?;
    let t = traj.len();
    let mut extra = BTreeMap::new();
    let out = match a.kind {
        PerturbKind::Permute => {
            let mut perm: Vec<usize> = (0..t).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(a.seed));
            let p = permute_times(traj, &perm)?;
            extra.insert("permutation", serde_json::json!(perm));
            p
        }
        PerturbKind::Freeze => {
            let k = a.freeze_at.unwrap_or(t / 2);
            if k >= t {
                return Err(Failure::Usage(format!("--freeze-at {k} must be below T = {t}")));
            }
            extra.insert("freeze_at", serde_json::json!(k));
            freeze_sequence(traj, k)?
        }
    };
    run.write(&a.out, &encode_dataset(std::slice::from_ref(&out))?)?;
    let manifest = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    run.finish(&manifest, "perturb", a, &[("seed", a.seed)], extra)?;
    println!("wrote perturbed sequence {} to {}", a.index, a.out.display());
    Ok(())
}

const SEPARATOR: u8 = 128;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Four rows of T cells: context frames, predicted means, targets and
/// variances scaled by their maximum; one separator pixel between cells.
fn render_strip(model: &Dmbn, traj: &Trajectory, n_ctx: usize) -> crate::Result<Vec<u8>> {
    let (idx, pred) = predict_sequence(model, traj, n_ctx)?;
    let t = traj.len();
    let width = t * FRAME_W + (t - 1);
    let height = 4 * FRAME_H + 3;
    let mut px = vec![SEPARATOR; width * height];
    let vmax = pred.image_var.data().iter().copied().fold(0.0, f64::max);
    let vscale = if vmax > 0.0 { 1.0 / vmax } else { 0.0 };
    let blank = vec![0.0; FRAME_H * FRAME_W];
    for k in 0..t {
        let observed = if idx.contains(&k) { &traj.frames[k][..] } else { &blank[..] };
        let rows: [&[f64]; 4] = [observed, pred.image_mean.row(k), &traj.frames[k], pred.image_var.row(k)];
        for (band, cell) in rows.iter().enumerate() {
            let scale = if band == 3 { vscale } else { 1.0 };
            for y in 0..FRAME_H {
                for x in 0..FRAME_W {
                    let row = band * (FRAME_H + 1) + y;
                    let col = k * (FRAME_W + 1) + x;
                    px[row * width + col] = to_byte(cell[y * FRAME_W + x] * scale);
                }
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

fn eval(a: &EvalArgs) -> CmdResult {
    if a.n_ctx == 0 {
        return Err(Failure::Usage("--n-ctx must be at least 1".into()));
    }
    let mut run = Run::start();
    let model = run.checkpoint(&a.ckpt)?;
    let data = run.dataset(&a.data)?;
    if let Some(tr) = data.iter().find(|tr| tr.len() < a.n_ctx) {
        return Err(Failure::Runtime(Error::Contract(format!(
            "configuration mismatch: --n-ctx {} exceeds the sequence length {} of {}",
            a.n_ctx,
            tr.len(),
            a.data.display()
        ))));
    }
    if data.is_empty() {
        return Err(Failure::Runtime(Error::Contract(format!("{} holds no sequences", a.data.display()))));
    }
    let metrics = evaluate(&model, &data, a.n_ctx)?;
    run.write(&a.out.join("metrics.csv"), metrics.to_csv().as_bytes())?;
    for (i, tr) in data.iter().enumerate() {
        run.write(&a.out.join(format!("strip_{i:03}.pgm")), &render_strip(&model, tr, a.n_ctx)?)?;
    }
    run.finish(&a.out.join("manifest.json"), "eval", a, &[("model", model.config().seed)], BTreeMap::new())?;
    println!(
        "{} model, {} context points: image mse {:.5}, joint mse {:.5}",
        model.config().time_mode,
        a.n_ctx,
        metrics.image.mse,
        metrics.joint.mse
    );
    Ok(())
}

fn probe(a: &ProbeArgs) -> CmdResult {
    let mut run = Run::start();
    let dmbn = run.checkpoint(&a.ckpt_dmbn)?;
    let pte = run.checkpoint(&a.ckpt_pte)?;
    let data = run.dataset(&a.data)?;
    let pcfg = ProbeConfig {
        repeats: a.repeats,
        epochs: a.epochs,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let sources = ProbeSources {
        dmbn: Some(dmbn),
        pte: Some(pte),
    };
    let report = probe_report(&sources, &data, &pcfg)?;
    let table = report.to_table();
    run.write(&a.out.join("probe.csv"), report.to_csv().as_bytes())?;
    run.write(&a.out.join("probe.txt"), table.as_bytes())?;
    run.finish(&a.out.join("manifest.json"), "probe", a, &[("seed", a.seed)], BTreeMap::new())?;
    print!("{table}");
    Ok(())
}

fn reproduce(a: &ReproduceArgs) -> CmdResult {
    let mut run = Run::start();
    let data_dir = a.out.join("data");
    gen_data(&GenDataArgs {
        out: data_dir.clone(),
        train_n: a.train_n,
        test_n: a.test_n,
        t: a.t,
        seed: a.seed,
    })?;
    let train_file = data_dir.join("train.npx");
    let test_file = data_dir.join("test.npx");
    for (mode, name) in [(ModeArg::Channel, "channel"), (ModeArg::Pte, "pte")] {
        train_cmd(&TrainArgs {
            data: train_file.clone(),
            mode,
            out: a.out.join(name),
            epochs: a.epochs,
            lr: None,
            n_max: None,
            p_aug: None,
            augment: None,
            batch_size: None,
            nll_beta: None,
            warmup_fraction: None,
            hidden_dim: None,
            seed: a.seed,
        })?;
    }
    probe(&ProbeArgs {
        ckpt_dmbn: a.out.join("channel/model.ckpt"),
        ckpt_pte: a.out.join("pte/model.ckpt"),
        data: train_file,
        repeats: a.probe_repeats,
        epochs: ProbeConfig::default().epochs,
        seed: a.seed,
        out: a.out.join("probe"),
    })?;
    let mut evals = Vec::new();
    for name in ["channel", "pte"] {
        for n_ctx in [1, 20.min(a.t)] {
            let out = a.out.join("eval").join(format!("{name}-n{n_ctx}"));
            eval(&EvalArgs {
                ckpt: a.out.join(name).join("model.ckpt"),
                data: test_file.clone(),
                n_ctx,
                out: out.clone(),
            })?;
            evals.push(out.join("manifest.json"));
        }
    }
    let mut steps = vec![data_dir.join("manifest.json"), a.out.join("probe/manifest.json")];
    for name in ["channel", "pte"] {
        steps.push(a.out.join(name).join("manifest.json"));
    }
    steps.extend(evals);
    for path in steps {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        run.outputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    run.finish(&a.out.join("manifest.json"), "reproduce", a, &[("seed", a.seed)], BTreeMap::new())?;
    Ok(())
}
