use npx_core::model::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Dmbn, ModelConfig, Modality,
    Observation, ObservationSet, TimeMode, TimeSignal, CHECKPOINT_MAGIC,
};
use npx_core::numerics::{Graph, ParamId, Tensor};
use npx_core::synthdata::{generate_trajectory, ArmGeometry, Trajectory, FRAME_LEN};
use npx_core::training::sequence_nll;
use npx_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [TimeMode; 2] = [TimeMode::Channel, TimeMode::Pte];

fn traj(seed: u64) -> Trajectory {
    generate_trajectory(seed, 30, &ArmGeometry::default()).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn context_order_does_not_change_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in MODES {
        let model = Dmbn::new(ModelConfig::new(mode).with_seed(4)).unwrap();
        let tr = traj(2);
        let mut items = ObservationSet::from_trajectory(&tr, &[0, 3, 9, 14, 22, 29]).unwrap().items().to_vec();
        let base = model.forward(&ObservationSet::new(items.clone()).unwrap(), &tr.times).unwrap();
        for _ in 0..100 {
            items.shuffle(&mut rng);
            let p = model.forward(&ObservationSet::new(items.clone()).unwrap(), &tr.times).unwrap();
            assert_eq!(bits(&p.image_mean), bits(&base.image_mean));
            assert_eq!(bits(&p.image_var), bits(&base.image_var));
            assert_eq!(bits(&p.joint_mean), bits(&base.joint_mean));
            assert_eq!(bits(&p.joint_var), bits(&base.joint_var));
        }
    }
}

#[test]
fn targets_are_predicted_independently() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in MODES {
        let model = Dmbn::new(ModelConfig::new(mode).with_seed(9)).unwrap();
        for trial in 0..10 {
            let tr = traj(trial);
            let ctx = ObservationSet::from_trajectory(&tr, &[trial as usize, 15]).unwrap();
            let targets: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let all = model.forward(&ctx, &targets).unwrap();
            for (k, &t) in targets.iter().enumerate() {
                let one = model.forward(&ctx, &[t]).unwrap();
                for (a, b) in [
                    (&all.image_mean, &one.image_mean),
                    (&all.image_var, &one.image_var),
                    (&all.joint_mean, &one.joint_mean),
                    (&all.joint_var, &one.joint_var),
                ] {
                    let diff = a.row(k).iter().zip(b.row(0)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                    assert!(diff <= 1e-12, "{mode} target {k}: {diff:e}");
                }
            }
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for mode in MODES {
        for seed in 0..5 {
            let model = Dmbn::new(ModelConfig::new(mode).with_seed(seed)).unwrap();
            let tr = traj(seed + 20);
            let mut g = Graph::new();
            let loss = sequence_nll(&model, model.params(), &mut g, &tr, &[2, 11, 25]).unwrap();
            let mut used = g.used_params();
            used.sort();
            let all: Vec<ParamId> = model.params().ids().collect();
            assert_eq!(used, all, "{mode}: declared parameters missing from the graph");
            let grads = g.backward(loss).unwrap();
            for id in all {
                let gr = grads.get(id).expect("gradient present");
                assert!(gr.norm() > 0.0, "{mode} seed {seed}: {} has zero gradient", model.params().name(id));
            }
        }
    }
}

#[test]
fn encoders_see_single_pixel_changes() {
    for seed in 0..10 {
        for mode in MODES {
            let model = Dmbn::new(ModelConfig::new(mode).with_seed(seed)).unwrap();
            let ch = model.config().image_channels();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x: Vec<f64> = (0..ch * FRAME_LEN).map(|_| rng.gen_range(0.0..1.0)).collect();
            let a = model.encode_image(&Tensor::new(vec![ch, 16, 16], x.clone()).unwrap()).unwrap();
            let px = rng.gen_range(0..FRAME_LEN);
            x[px] += 0.5;
            let b = model.encode_image(&Tensor::new(vec![ch, 16, 16], x).unwrap()).unwrap();
            assert_ne!(a.data(), b.data(), "{mode} seed {seed} pixel {px}");
        }
    }
}

#[test]
fn variance_respects_floor() {
    for mode in MODES {
        let model = Dmbn::new(ModelConfig::new(mode).with_seed(2)).unwrap();
        let tr = traj(3);
        let p = model.forward(&ObservationSet::from_trajectory(&tr, &[0]).unwrap(), &tr.times).unwrap();
        assert!(p.min_variance() >= model.config().var_floor);
        assert_eq!(p.image_mean.shape(), &[30, FRAME_LEN]);
        assert_eq!(p.joint_var.shape(), &[30, 2]);
    }
}

#[test]
fn pte_target_conditioning_inverts_projection() {
    let model = Dmbn::new(ModelConfig::new(TimeMode::Pte).with_seed(6)).unwrap();
    let tr = traj(6);
    let r = model.representative(&ObservationSet::from_trajectory(&tr, &[4, 8]).unwrap()).unwrap();
    for t in [0.0, 0.3, 1.0] {
        let c = model.condition_target(&r, t).unwrap();
        let p = model.project_time(t).unwrap();
        for ((ci, pi), ri) in c.data().iter().zip(p.data()).zip(&r.r) {
            assert!((ci + pi - ri).abs() < 1e-12);
        }
    }
    let ch = Dmbn::new(ModelConfig::new(TimeMode::Channel)).unwrap();
    assert!(matches!(ch.pte_inject(&r.r, 0.5), Err(Error::Mode(_))));
    let c = ch.condition_target(&r, 0.5).unwrap();
    assert_eq!(c.len(), r.r.len() + 1);
    let (mu, var) = ch.decode(Modality::Joints, c.data()).unwrap();
    assert_eq!((mu.len(), var.len()), (2, 2));
}

#[test]
fn null_signal_removes_time_from_channel_inputs() {
    let model = Dmbn::new(ModelConfig::new(TimeMode::Channel).with_seed(1)).unwrap();
    let tr = traj(1);
    let obs: Vec<Observation> = (0..3)
        .map(|k| Observation {
            t: tr.times[k * 10],
            frame: tr.frames[0].clone(),
            joints: tr.joints[0],
        })
        .collect();
    let actual = model.encoder_features(&obs, TimeSignal::Actual).unwrap();
    let null = model.encoder_features(&obs, TimeSignal::Null).unwrap();
    assert_ne!(actual.image.row(1), actual.image.row(2));
    assert_eq!(null.image.row(1), null.image.row(2));
    assert_eq!(null.joint.row(0), null.joint.row(2));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for mode in MODES {
        let model = Dmbn::new(ModelConfig::new(mode).with_seed(13)).unwrap();
        let path = dir.path().join(format!("{mode}.ckpt"));
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params().flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            model.params().flat_values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&model));
        let tr = traj(0);
        let ctx = ObservationSet::from_trajectory(&tr, &[1, 5]).unwrap();
        assert_eq!(back.forward(&ctx, &tr.times).unwrap(), model.forward(&ctx, &tr.times).unwrap());
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = Dmbn::new(ModelConfig::new(TimeMode::Channel)).unwrap();
    let good = encode_checkpoint(&model);
    let p = std::path::Path::new("fixture.ckpt");

    let mut version = good.clone();
    version[7] = b'9';
    assert!(matches!(decode_checkpoint(&version, p), Err(Error::Version { .. })));

    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic, p), Err(Error::Malformed { .. })));

    assert!(matches!(decode_checkpoint(&good[..good.len() - 3], p), Err(Error::Malformed { .. })));
    assert!(matches!(decode_checkpoint(&good[..5], p), Err(Error::Malformed { .. })));
    let mut extra = good.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint(&extra, p), Err(Error::Malformed { .. })));
    assert_eq!(&good[..8], CHECKPOINT_MAGIC);
    assert!(matches!(load_checkpoint("/nonexistent/model.ckpt"), Err(Error::Io { .. })));
}
