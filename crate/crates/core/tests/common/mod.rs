//! Gradient-check fixtures shared by the numerics and acceptance suites.

use npx_core::model::{Dmbn, ModelConfig, TimeMode};
use npx_core::numerics::{grad_check, Graph, ParamId, ParameterSet, Tensor, Var};
use npx_core::synthdata::{generate_trajectory, ArmGeometry};
use npx_core::training::sequence_nll;
use npx_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const SEEDS: u64 = 20;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts `y` against fixed random weights so every output element
/// carries a distinct gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = g.value(y).shape().to_vec();
    let w = g.input(random(&mut rng, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst relative error over `SEEDS` random parameter draws.
pub fn layer_error(shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| params.insert(format!("p{i}"), random(&mut rng, s)).unwrap())
            .collect();
        let err = grad_check(
            |g, p| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(p, id)).collect();
                let y = build(g, &vars)?;
                project(g, y, seed)
            },
            &params,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Every differentiable op the model uses, as (name, shapes, graph).
pub fn layer_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    fn case(name: &'static str, shapes: &[&[usize]], f: Build) -> (&'static str, Vec<Vec<usize>>, Build) {
        (name, shapes.iter().map(|s| s.to_vec()).collect(), f)
    }
    vec![
        case("linear", &[&[5, 3], &[3, 4], &[4]], Box::new(|g, v| g.linear(v[0], v[1], v[2]))),
        case("matmul", &[&[2, 6], &[6, 3]], Box::new(|g, v| g.matmul(v[0], v[1]))),
        case(
            "conv2d stride 2 + bias",
            &[&[2, 2, 9, 9], &[3, 2, 4, 4], &[3]],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], 2)?;
                g.channel_bias(y, v[2])
            }),
        ),
        case("conv2d stride 1", &[&[1, 6, 6], &[2, 1, 3, 3]], Box::new(|g, v| g.conv2d(v[0], v[1], 1))),
        case("relu", &[&[4, 5]], Box::new(|g, v| Ok(g.relu(v[0])))),
        case("tanh", &[&[4, 5]], Box::new(|g, v| Ok(g.tanh(v[0])))),
        case("softplus", &[&[4, 5]], Box::new(|g, v| Ok(g.softplus(v[0])))),
        case("exp", &[&[4, 5]], Box::new(|g, v| Ok(g.exp(v[0])))),
        case("square", &[&[4, 5]], Box::new(|g, v| Ok(g.square(v[0])))),
        case(
            "log",
            &[&[4, 5]],
            Box::new(|g, v| {
                let s = g.square(v[0]);
                let s = g.add_scalar(s, 0.5);
                g.log(s)
            }),
        ),
        case("add", &[&[3, 4], &[3, 4]], Box::new(|g, v| g.add(v[0], v[1]))),
        case("sub", &[&[3, 4], &[3, 4]], Box::new(|g, v| g.sub(v[0], v[1]))),
        case("mul", &[&[3, 4], &[3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
        case("mul broadcast", &[&[3, 4], &[1]], Box::new(|g, v| g.mul(v[0], v[1]))),
        case(
            "div",
            &[&[3, 4], &[3, 4]],
            Box::new(|g, v| {
                let d = g.square(v[1]);
                let d = g.add_scalar(d, 1.0);
                g.div(v[0], d)
            }),
        ),
        case("scale", &[&[3, 4]], Box::new(|g, v| Ok(g.scale(v[0], -2.5)))),
        case("mean_rows", &[&[5, 3]], Box::new(|g, v| g.mean_rows(v[0]))),
        case("repeat_rows", &[&[1, 3]], Box::new(|g, v| g.repeat_rows(v[0], 4))),
        case("concat_cols", &[&[3, 2], &[3, 5]], Box::new(|g, v| g.concat_cols(v[0], v[1]))),
        case("reshape", &[&[2, 6]], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        case(
            "sum and mean",
            &[&[2, 6]],
            Box::new(|g, v| {
                let s = g.sum(v[0]);
                let m = g.mean(v[0]);
                g.mul(s, m)
            }),
        ),
    ]
}

pub fn reduced(mode: TimeMode, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(mode).with_seed(seed);
    cfg.hidden_dim = 4;
    cfg.conv_widths = vec![2, 2];
    cfg.joint_widths = vec![4];
    cfg.decoder_widths = vec![4];
    cfg
}

/// Worst relative error of the per-sequence NLL of a reduced model.
pub fn model_nll_error(mode: TimeMode) -> f64 {
    let geom = ArmGeometry::default();
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        // Zero biases over blank pixels put ReLUs exactly on their kink;
        // jitter moves the check to a generic point.
        let mut model = Dmbn::new(reduced(mode, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let traj = generate_trajectory(seed, 4, &geom).unwrap();
        let ctx = [seed as usize % 4, (seed as usize + 2) % 4];
        let err = grad_check(|g, p| sequence_nll(&model, p, g, &traj, &ctx), model.params(), EPS).unwrap();
        worst = worst.max(err);
    }
    worst
}
