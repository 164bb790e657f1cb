//! End-to-end acceptance run: one line per criterion, then a single verdict.
//!
//! The full default pipeline is executed twice through the `reproduce`
//! command; this takes several minutes.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use npx_core::cli::main_with_args;
use npx_core::model::{
    decode_checkpoint, encode_checkpoint, Dmbn, ModelConfig, ObservationSet, GaussianPrediction, TimeMode,
    CHECKPOINT_MAGIC,
};
use npx_core::probe::{Condition, Encoder};
use npx_core::synthdata::{
    canonical_times, decode_dataset, encode_dataset, freeze_sequence, generate_trajectory, load_dataset, min_jerk,
    min_jerk_velocity, permute_times, ArmGeometry, Trajectory, DATASET_MAGIC,
};
use npx_core::training::mean_baseline;
use npx_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [TimeMode; 2] = [TimeMode::Channel, TimeMode::Pte];

struct Verdicts(Vec<(u32, bool)>);

impl Verdicts {
    fn record(&mut self, n: u32, pass: bool, detail: String) {
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "criterion {n:>2}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        let _ = out.flush();
        self.0.push((n, pass));
    }
}

fn gradient_correctness() -> (bool, String) {
    let start = Instant::now();
    let mut worst_layer: (f64, &str) = (0.0, "");
    for (name, shapes, build) in common::layer_cases() {
        let shapes: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let e = common::layer_error(&shapes, build);
        if e >= worst_layer.0 {
            worst_layer = (e, name);
        }
    }
    let model = MODES.map(common::model_nll_error);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_layer.0 < 1e-4 && model.iter().all(|&e| e < 1e-4) && secs < 60.0;
    let detail = format!(
        "worst layer {:.2e} ({}), model nll channel {:.2e} pte {:.2e}, {} seeds, {secs:.1}s",
        worst_layer.0,
        worst_layer.1,
        model[0],
        model[1],
        common::SEEDS
    );
    (pass, detail)
}

fn bits(p: &GaussianPrediction) -> Vec<u64> {
    [&p.image_mean, &p.image_var, &p.joint_mean, &p.joint_var]
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn set_invariance() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut mismatches = 0;
    let trials = 1000;
    for mode in MODES {
        let model = Dmbn::new(ModelConfig::new(mode).with_seed(3)).unwrap();
        let tr = generate_trajectory(11, 30, &ArmGeometry::default()).unwrap();
        for trial in 0..trials {
            let n = 2 + trial % 9;
            let idx: Vec<usize> = rand::seq::index::sample(&mut rng, 30, n).into_vec();
            let mut items = ObservationSet::from_trajectory(&tr, &idx).unwrap().items().to_vec();
            let base = bits(&model.forward(&ObservationSet::new(items.clone()).unwrap(), &tr.times).unwrap());
            items.shuffle(&mut rng);
            let shuffled = bits(&model.forward(&ObservationSet::new(items).unwrap(), &tr.times).unwrap());
            if base != shuffled {
                mismatches += 1;
            }
        }
    }
    (mismatches == 0, format!("{mismatches} of {} shuffled contexts differ in any output bit", 2 * trials))
}

fn non_autoregressive() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst: f64 = 0.0;
    let trials = 100;
    for mode in MODES {
        let model = Dmbn::new(ModelConfig::new(mode).with_seed(5)).unwrap();
        for trial in 0..trials {
            let tr = generate_trajectory(trial, 30, &ArmGeometry::default()).unwrap();
            let n = rng.gen_range(1..=10);
            let idx = rand::seq::index::sample(&mut rng, 30, n).into_vec();
            let ctx = ObservationSet::from_trajectory(&tr, &idx).unwrap();
            let targets: Vec<f64> = (0..rng.gen_range(2..=8)).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let all = model.forward(&ctx, &targets).unwrap();
            for (k, &t) in targets.iter().enumerate() {
                let one = model.forward(&ctx, &[t]).unwrap();
                for (a, b) in [
                    (&all.image_mean, &one.image_mean),
                    (&all.image_var, &one.image_var),
                    (&all.joint_mean, &one.joint_mean),
                    (&all.joint_var, &one.joint_var),
                ] {
                    for (x, y) in a.row(k).iter().zip(b.row(0)) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
    }
    (worst <= 1e-12, format!("max |joint − single| {worst:.1e} over {} trials", 2 * trials))
}

fn inverse(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Every permutation for small T; for T = 30 all transpositions, rotations,
/// the reversal and seeded shuffles.
fn permutation_family(t: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if t <= 5 {
        return all_permutations(t);
    }
    let id: Vec<usize> = (0..t).collect();
    let mut out = vec![id.iter().rev().copied().collect()];
    for i in 0..t {
        for j in i + 1..t {
            let mut p = id.clone();
            p.swap(i, j);
            out.push(p);
        }
        let mut r = id.clone();
        r.rotate_left(i);
        out.push(r);
    }
    for _ in 0..500 {
        let mut p = id.clone();
        p.shuffle(rng);
        out.push(p);
    }
    out
}

fn perturbation_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut checked = 0usize;
    let mut failures = Vec::new();
    let mut worst_deriv: f64 = 0.0;
    for t in [2usize, 3, 5, 30] {
        let perms = permutation_family(t, &mut rng);
        for seed in 0..3u64 {
            let tr = generate_trajectory(seed + 10 * t as u64, t, &ArmGeometry::default()).unwrap();
            let id: Vec<usize> = (0..t).collect();
            if permute_times(&tr, &id).unwrap() != tr {
                failures.push(format!("identity T={t}"));
            }
            for p in &perms {
                let q = permute_times(&tr, p).unwrap();
                let mut sorted = q.times.clone();
                sorted.sort_by(f64::total_cmp);
                let contents_kept = q.frames == tr.frames && q.joints == tr.joints;
                if permute_times(&q, &inverse(p)).unwrap() != tr || sorted != tr.times || !contents_kept {
                    failures.push(format!("round trip T={t} {p:?}"));
                }
                checked += 1;
            }
            for k in 0..t {
                let f = freeze_sequence(&tr, k).unwrap();
                if freeze_sequence(&f, k).unwrap() != f {
                    failures.push(format!("freeze T={t} k={k}"));
                }
                checked += 1;
            }
            // Boundary joint velocity of the sampled reach.
            for j in 0..2 {
                let span = tr.joints[t - 1][j] - tr.joints[0][j];
                for tau in [0.0, 1.0] {
                    worst_deriv = worst_deriv.max((span * min_jerk_velocity(tau)).abs());
                }
            }
        }
        let grid = canonical_times(t);
        if min_jerk(grid[0]).unwrap() != 0.0 || min_jerk(grid[t - 1]).unwrap() != 1.0 {
            failures.push(format!("min-jerk endpoints T={t}"));
        }
    }
    // One-sided differences of the profile and of its analytic velocity.
    for (h, accel) in [(1e-7, false), (1e-9, true)] {
        for (a, b) in [(0.0, h), (1.0 - h, 1.0)] {
            let d = if accel {
                (min_jerk_velocity(b) - min_jerk_velocity(a)) / h
            } else {
                (min_jerk(b).unwrap() - min_jerk(a).unwrap()) / h
            };
            worst_deriv = worst_deriv.max(d.abs());
        }
    }
    if worst_deriv >= 1e-6 {
        failures.push(format!("boundary derivative {worst_deriv:e}"));
    }
    let pass = failures.is_empty();
    let detail = format!(
        "{checked} permutation/freeze cases over T in {{2,3,5,30}}, boundary derivative {worst_deriv:.1e}{}",
        if pass { String::new() } else { format!(", failures: {:?}", &failures[..failures.len().min(3)]) }
    );
    (pass, detail)
}

fn persistence() -> (bool, String) {
    let p = Path::new("fixture");
    let mut problems = Vec::new();
    let data: Vec<Trajectory> = (0..4).map(|s| generate_trajectory(s, 30, &ArmGeometry::default()).unwrap()).collect();
    let bytes = encode_dataset(&data).unwrap();
    let back = decode_dataset(&bytes, p).unwrap();
    let exact = back.iter().zip(&data).all(|(a, b)| {
        a.times.iter().zip(&b.times).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.frames.iter().flatten().zip(b.frames.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.joints.iter().flatten().zip(b.joints.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    if !exact || encode_dataset(&back).unwrap() != bytes {
        problems.push("dataset round trip");
    }
    for mode in MODES {
        let m = Dmbn::new(ModelConfig::new(mode).with_seed(21)).unwrap();
        let ck = encode_checkpoint(&m);
        let loaded = decode_checkpoint(&ck, p).unwrap();
        if encode_checkpoint(&loaded) != ck || loaded.config() != m.config() {
            problems.push("checkpoint round trip");
        }
    }
    let ck = encode_checkpoint(&Dmbn::new(ModelConfig::new(TimeMode::Pte)).unwrap());
    for (name, good, magic) in [("dataset", &bytes, DATASET_MAGIC), ("checkpoint", &ck, CHECKPOINT_MAGIC)] {
        assert_eq!(&good[..8], magic);
        let decode = |b: &[u8]| -> npx_core::Result<()> {
            if name == "dataset" {
                decode_dataset(b, p).map(drop)
            } else {
                decode_checkpoint(b, p).map(drop)
            }
        };
        let mut version = good.clone();
        version[7] = b'7';
        let mut magic_bad = good.clone();
        magic_bad[0] ^= 0x20;
        let truncated = &good[..good.len() - 1];
        let mut trailing = good.clone();
        trailing.push(1);
        let cases: [(&[u8], fn(&Error) -> bool); 5] = [
            (&version, |e| matches!(e, Error::Version { .. })),
            (&magic_bad, |e| matches!(e, Error::Malformed { .. })),
            (truncated, |e| matches!(e, Error::Malformed { .. })),
            (&good[..3], |e| matches!(e, Error::Malformed { .. })),
            (&trailing, |e| matches!(e, Error::Malformed { .. })),
        ];
        for (input, expected) in cases {
            if !decode(input).err().is_some_and(|e| expected(&e)) {
                problems.push(if name == "dataset" { "dataset fixture" } else { "checkpoint fixture" });
            }
        }
    }
    (problems.is_empty(), format!("bit-exact round trips, 10 corrupted fixtures; problems: {problems:?}"))
}

/// Runs the default `reproduce` pipeline into `dir`.
fn reproduce(dir: &Path) -> f64 {
    let start = Instant::now();
    let code = main_with_args(["npx", "reproduce", "--out", dir.to_str().unwrap(), "--seed", "0"]);
    assert_eq!(code, 0, "reproduce failed");
    start.elapsed().as_secs_f64()
}

fn read_probe(dir: &Path) -> BTreeMap<(String, String), (f64, f64, f64)> {
    let text = std::fs::read_to_string(dir.join("probe/probe.csv")).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let n = |i: usize| f[i].parse::<f64>().unwrap();
            ((f[0].to_string(), f[1].to_string()), (n(2), n(3), n(4)))
        })
        .collect()
}

fn read_metrics(path: &Path) -> BTreeMap<(String, String), f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ((f[0].to_string(), f[1].to_string()), f[2].parse().unwrap())
        })
        .collect()
}

fn duration(manifest: &Path) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    v["duration_secs"].as_f64().unwrap()
}

fn probe_criteria(dir: &Path, secs: f64) -> [(bool, String); 2] {
    let rows = read_probe(dir);
    let get = |c: Condition, e: Encoder| rows[&(c.to_string(), e.to_string())];
    let mut order_ok = true;
    let mut ratio_ok = false;
    let mut parts = Vec::new();
    let mut ratios = Vec::new();
    for enc in [Encoder::Image, Encoder::Joint] {
        let (pte, random, dmbn, null) = (
            get(Condition::DmbnPte, enc),
            get(Condition::Random, enc),
            get(Condition::Dmbn, enc),
            get(Condition::Null, enc),
        );
        let ordering = pte.0 < random.0 && random.0 < dmbn.0;
        let silenced = dmbn.0 > 0.25 * null.0;
        let separated = pte.2 < dmbn.1;
        order_ok &= ordering && silenced && separated;
        parts.push(format!(
            "{enc}: pte {:.2} random {:.2} dmbn {:.2} null {:.2} (1e-3) order {} dmbn>0.25null {} ci-separated {}",
            pte.0 * 1e3,
            random.0 * 1e3,
            dmbn.0 * 1e3,
            null.0 * 1e3,
            ordering,
            silenced,
            separated
        ));
        ratio_ok |= pte.0 <= random.0 / 2.0;
        ratios.push(format!("{enc} random/pte {:.2}", random.0 / pte.0));
    }
    let probe_secs = duration(&dir.join("probe/manifest.json"));
    [
        (order_ok, format!("{}; pipeline {secs:.0}s, probe {probe_secs:.0}s", parts.join("; "))),
        (ratio_ok, ratios.join(", ")),
    ]
}

fn efficacy_and_calibration(dir: &Path) -> [(bool, String); 2] {
    let test = load_dataset(dir.join("data/test.npx")).unwrap();
    let (baseline, _) = mean_baseline(&test).unwrap();
    let mut eff_ok = true;
    let mut cal_ok = true;
    let mut eff = Vec::new();
    let mut cal = Vec::new();
    for mode in ["channel", "pte"] {
        let m = read_metrics(&dir.join(format!("eval/{mode}-n20/metrics.csv")));
        let ratio = m[&("mse".into(), "image".into())] / baseline;
        let train_secs = duration(&dir.join(mode).join("manifest.json"));
        eff_ok &= ratio <= 0.5 && train_secs < 900.0;
        eff.push(format!("{mode} image mse {ratio:.3}× baseline, trained in {train_secs:.0}s"));
        for modality in ["image", "joints"] {
            let c = m[&("coverage".into(), modality.into())];
            cal_ok &= (0.45..=0.95).contains(&c);
            cal.push(format!("{mode}/{modality} {c:.3}"));
        }
    }
    [(eff_ok, eff.join(", ")), (cal_ok, format!("±1σ coverage at 20 contexts: {}", cal.join(", ")))]
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> (bool, String) {
    let fa = files(a);
    let compared: Vec<&PathBuf> =
        fa.iter().filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "ckpt"))).collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|p| std::fs::read(a.join(p)).ok() != std::fs::read(b.join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    let same_listing = fa == files(b);
    (
        same_listing && differing.is_empty() && !compared.is_empty(),
        format!("{} CSV and checkpoint files compared, differing: {differing:?}", compared.len()),
    )
}

#[test]
fn acceptance() {
    let mut v = Verdicts(Vec::new());

    let (ok, d) = gradient_correctness();
    v.record(3, ok, d);
    let (ok, d) = set_invariance();
    v.record(6, ok, d);
    let (ok, d) = non_autoregressive();
    v.record(7, ok, d);
    let (ok, d) = perturbation_suite();
    v.record(8, ok, d);
    let (ok, d) = persistence();
    v.record(9, ok, d);

    let first = tempfile::tempdir().unwrap();
    let secs = reproduce(first.path());
    let [(ok1, d1), (ok2, d2)] = probe_criteria(first.path(), secs);
    v.record(1, ok1, d1);
    v.record(2, ok2, d2);
    let [(ok4, d4), (ok5, d5)] = efficacy_and_calibration(first.path());
    v.record(4, ok4, d4);
    v.record(5, ok5, d5);

    let second = tempfile::tempdir().unwrap();
    reproduce(second.path());
    let (ok, d) = determinism(first.path(), second.path());
    v.record(10, ok, d);

    let mut failed: Vec<u32> = v.0.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    failed.sort();
    let _ = writeln!(std::io::stdout(), "acceptance: {} of {} criteria pass", v.0.len() - failed.len(), v.0.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
