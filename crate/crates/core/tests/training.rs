use susep::network::{init_params, NetworkConfig, NetworkParams};
use susep::physics::{forward_model, AcquisitionSet, DecayKernelMap, SourcePair};
use susep::synth::{build_training_set, SynthConfig, TrainingSample};
use susep::training::{
    infer_volume, train_samples, InferenceOptions, Precision, TrainConfig, TrainHistory,
    TrainOutput, CHECKPOINT_FILE, HISTORY_FILE,
};
use susep::volume::{MaskVolume, Volume3D};
use susep::{network, Error};

fn dataset() -> (Vec<TrainingSample>, susep::synth::NormStats) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        phantom_dims: [32, 32, 32],
        patch: [16, 16, 16],
        stride: [16, 16, 16],
        ..SynthConfig::default()
    };
    let m = build_training_set(1, 3, &cfg, dir.path()).unwrap();
    (m.load_all(dir.path()).unwrap(), m.norm)
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        patch: [16, 16, 16],
    }
}

fn quick(precision: Precision) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        precision,
        validation_fraction: 0.2,
        ..TrainConfig::default()
    }
}

#[test]
fn f64_training_is_bit_stable_and_writes_artifacts() {
    let (samples, norm) = dataset();
    assert!(samples.len() >= 8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(Precision::F64);
    let mut seen = Vec::new();
    let out = TrainOutput {
        dir: Some(dir.path()),
    };
    let (p1, h1) = train_samples(&samples, &norm, &tiny_net(), &cfg, out, &mut |r| {
        seen.push(r.epoch)
    })
    .unwrap();
    let (p2, h2) = train_samples(
        &samples,
        &norm,
        &tiny_net(),
        &cfg,
        TrainOutput::default(),
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(h1, h2);
    assert_eq!(h1.to_json().unwrap(), h2.to_json().unwrap());
    assert_eq!(p1, p2);
    assert_eq!(h1.epochs.len(), 3);
    assert!(h1.is_finite());
    assert_eq!(
        TrainHistory::load(dir.path().join(HISTORY_FILE)).unwrap(),
        h1
    );
    let ck: NetworkParams<f32> =
        network::load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck, p1.cast::<f32>());
    let lr: Vec<f64> = h1.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lr, vec![1e-3, 1e-4, 1e-5]);
}

#[test]
fn training_reduces_loss_and_ablation_zeroes_alpha_only() {
    let (samples, norm) = dataset();
    let cfg = TrainConfig {
        epochs: 4,
        lr_breakpoints: vec![0.75, 1.0],
        ..quick(Precision::F32)
    };
    let (_, h) = train_samples(
        &samples,
        &norm,
        &tiny_net(),
        &cfg,
        TrainOutput::default(),
        &mut |_| {},
    )
    .unwrap();
    let first = h.epochs[0].train.total;
    let last = h.epochs.last().unwrap().train.total;
    assert!(last < first, "train loss {first} -> {last}");

    let off = TrainConfig {
        contrastive_enabled: false,
        ..cfg.clone()
    };
    let (_, h0) = train_samples(
        &samples,
        &norm,
        &tiny_net(),
        &off,
        TrainOutput::default(),
        &mut |_| {},
    )
    .unwrap();
    assert!(!h0.contrastive_enabled);
    assert_eq!(h0.validation_indices, h.validation_indices);
    for e in &h0.epochs {
        let b = e.train;
        let w = cfg.loss.weights;
        let expect = w.beta * b.l2 + w.gamma * b.model + w.delta * b.gradient;
        assert!((b.total - expect).abs() <= 1e-12 * expect.abs());
        assert!(b.contrast > 0.0);
    }
}

#[test]
fn guards() {
    let (samples, norm) = dataset();
    let zero = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let r = train_samples(
        &samples,
        &norm,
        &tiny_net(),
        &zero,
        TrainOutput::default(),
        &mut |_| {},
    );
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
    let wrong_patch = NetworkConfig {
        base_channels: 4,
        patch: [32, 32, 32],
    };
    assert!(train_samples(
        &samples,
        &norm,
        &wrong_patch,
        &quick(Precision::F32),
        TrainOutput::default(),
        &mut |_| {}
    )
    .is_err());
    let huge = TrainConfig {
        learning_rates: vec![1e300, 1e300, 1e300],
        ..quick(Precision::F64)
    };
    let r = train_samples(
        &samples[..4],
        &norm,
        &tiny_net(),
        &huge,
        TrainOutput::default(),
        &mut |_| {},
    );
    assert!(matches!(r, Err(Error::NonFinite { .. })), "{r:?}");
}

fn acquisition(dims: [usize; 3], constant: bool) -> AcquisitionSet {
    let vs = [1.0; 3];
    let n: usize = dims.iter().product();
    let (p, q): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|i| {
            if constant {
                (0.05, -0.03)
            } else {
                (0.05 * ((i % 7) as f64), -0.02 * ((i % 5) as f64))
            }
        })
        .unzip();
    let src = SourcePair::new(
        Volume3D::from_data(dims, vs, p).unwrap(),
        Volume3D::from_data(dims, vs, q).unwrap(),
    )
    .unwrap();
    let a = DecayKernelMap::uniform(dims, vs, 100.0).unwrap();
    let mask = MaskVolume::full(dims, vs).unwrap();
    let mut acq = forward_model(&src, &a, &mask).unwrap();
    if constant {
        // the field of a constant source is zero; keep every channel spatially constant
        acq.local_field = acq.local_field.map(|_| 0.0).unwrap();
    }
    acq
}

#[test]
fn inference_stitching() {
    let (_, norm) = dataset();
    let params = init_params::<f64>(&tiny_net(), 5).unwrap();

    let whole = acquisition([16, 16, 16], false);
    let r = infer_volume(
        &params,
        &whole,
        Some(&norm),
        &InferenceOptions::new([16, 16, 16]),
    )
    .unwrap();
    assert_eq!(r.windows, 1);
    assert!(!r.clamped);

    let big = acquisition([32, 24, 16], true);
    let opts = InferenceOptions::new([16, 16, 16]);
    let stitched = infer_volume(&params, &big, Some(&norm), &opts).unwrap();
    assert_eq!(stitched.windows, 3 * 2);
    let single = infer_volume(
        &params,
        &acquisition([16, 16, 16], true),
        Some(&norm),
        &opts,
    )
    .unwrap();
    // identical inputs in every window: each voxel is the mean of the single-window
    // outputs at its offsets within the covering windows
    let v = single.chi_pos.data();
    let w = susep::volume::Dims::cube(16);
    let d = big.dims();
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let mut acc = (0.0, 0);
                for ox in [0, 8, 16] {
                    for oy in [0, 8] {
                        if (ox..ox + 16).contains(&x) && (oy..oy + 16).contains(&y) {
                            acc.0 += v[w.index(x - ox, y - oy, z)];
                            acc.1 += 1;
                        }
                    }
                }
                let want = acc.0 / acc.1 as f64;
                let got = stitched.chi_pos.data()[d.index(x, y, z)];
                assert!(
                    (got - want).abs() <= 1e-12 * scale,
                    "({x},{y},{z}) {got} vs {want}"
                );
            }
        }
    }

    let clamped = InferenceOptions {
        clamp: true,
        ..opts
    };
    let c = infer_volume(&params, &big, Some(&norm), &clamped).unwrap();
    assert!(c.clamped);
    c.sources().unwrap();

    assert!(infer_volume(&params, &big, None, &opts).is_err());
    assert!(infer_volume(
        &params,
        &big,
        Some(&norm),
        &InferenceOptions::new([12, 16, 16])
    )
    .is_err());
    assert!(infer_volume(
        &params,
        &big,
        Some(&norm),
        &InferenceOptions::new([64, 16, 16])
    )
    .is_err());
}
