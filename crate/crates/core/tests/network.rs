use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use susep::network::*;
use susep::volume::Dims;

fn random_tensor(batch: usize, channels: usize, dims: Dims, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * channels * dims.len();
    Tensor::from_vec(
        batch,
        channels,
        dims,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn tiny() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        patch: [8, 8, 8],
    }
}

#[test]
fn init_statistics_and_determinism() {
    let cfg = NetworkConfig::default();
    let a: NetworkParams<f64> = init_params(&cfg, 3).unwrap();
    let b: NetworkParams<f64> = init_params(&cfg, 3).unwrap();
    assert_eq!(a, b);
    let w = a.tensor("dec_pos.level0.0.conv.weight").unwrap();
    assert!(w.data.len() >= 10_000);
    let n = w.data.len() as f64;
    let mean = w.data.iter().sum::<f64>() / n;
    let std = (w.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((0.009..=0.011).contains(&std), "std {std}");
    for t in &a.tensors {
        if t.name.ends_with(".bias") || t.name.ends_with(".beta") {
            assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name);
        }
        if t.name.ends_with(".gamma") {
            assert!(t.data.iter().all(|&v| v == 1.0), "{}", t.name);
        }
    }
    let c: NetworkParams<f64> = init_params(&cfg, 4).unwrap();
    assert_ne!(a, c);
}

#[test]
fn config_validation() {
    let bad = NetworkConfig {
        base_channels: 3,
        ..NetworkConfig::default()
    };
    assert!(init_params::<f32>(&bad, 0).is_err());
    let bad = NetworkConfig {
        patch: [33, 32, 32],
        ..NetworkConfig::default()
    };
    assert!(init_params::<f32>(&bad, 0).is_err());
}

#[test]
fn shapes_at_desk_scale() {
    let cfg = NetworkConfig::default();
    let p: NetworkParams<f32> = init_params(&cfg, 1).unwrap();
    let x = random_tensor(1, 3, Dims::cube(32), 2).cast::<f32>();
    let a = forward(&p, &x, Mode::Eval).unwrap();
    assert_eq!(a.chi_pos_hat.shape(), [1, 1, 32, 32, 32]);
    assert_eq!(a.chi_neg_hat.shape(), [1, 1, 32, 32, 32]);
    for f in [&a.guide_pos, &a.guide_neg, &a.f_pos, &a.f_neg] {
        assert_eq!(f.shape(), [1, 64, 4, 4, 4]);
    }
    let (b, skips) = encode(&p, &qsm_channel(&x), 2, Mode::Eval).unwrap();
    assert_eq!(b.shape(), [1, 64, 4, 4, 4]);
    assert_eq!(skips.len(), 3);
    assert!(a.chi_pos_hat.is_finite() && a.chi_neg_hat.is_finite());
    assert!(encode(&p, &x, 2, Mode::Eval).is_err());
}

#[test]
fn wide_encoder_reaches_256_channels() {
    let cfg = NetworkConfig {
        base_channels: 64,
        patch: [64, 64, 64],
    };
    let p: NetworkParams<f32> = init_params(&cfg, 1).unwrap();
    let x = random_tensor(1, 3, Dims::cube(64), 5).cast::<f32>();
    let (b, _) = encode(&p, &x, 1, Mode::Eval).unwrap();
    assert_eq!(b.shape(), [1, 256, 8, 8, 8]);
}

#[test]
fn eval_mode_is_deterministic() {
    let p: NetworkParams<f64> = init_params(&tiny(), 9).unwrap();
    let x = random_tensor(2, 3, Dims::cube(8), 10);
    let a = forward(&p, &x, Mode::Eval).unwrap();
    let b = forward(&p, &x, Mode::Eval).unwrap();
    assert_eq!(a.chi_pos_hat, b.chi_pos_hat);
    assert_eq!(a.chi_neg_hat, b.chi_neg_hat);
}

#[test]
fn decoder_branches_are_independent() {
    let mut p: NetworkParams<f64> = init_params(&tiny(), 9).unwrap();
    let x = random_tensor(2, 3, Dims::cube(8), 11);
    let before = forward(&p, &x, Mode::Eval).unwrap();
    for v in &mut p.tensor_mut("dec_pos.level1.0.conv.weight").unwrap().data {
        *v += 0.05;
    }
    let after = forward(&p, &x, Mode::Eval).unwrap();
    assert_eq!(before.chi_neg_hat, after.chi_neg_hat);
    assert_ne!(before.chi_pos_hat, after.chi_pos_hat);
}

#[test]
fn fusion_gate_saturation_selects_a_branch() {
    let mut p: NetworkParams<f64> = init_params(&tiny(), 5).unwrap();
    let g = random_tensor(2, 16, Dims::cube(2), 12);
    let f = random_tensor(2, 16, Dims::cube(2), 13);
    for (bias, pick_guide) in [(-1e3, false), (1e3, true)] {
        p.tensor_mut("fuse_pos.gate.bias").unwrap().data.fill(bias);
        let parts = fuse_parts(&p, &g, &f, Branch::Pos, Mode::Train).unwrap();
        let want = if pick_guide {
            &parts.value_guide
        } else {
            &parts.value_feat
        };
        for (m, w) in parts.mix.data().iter().zip(want.data()) {
            assert!((m - w).abs() < 1e-12);
        }
        assert_eq!(parts.output.shape(), g.shape());
    }
    let wrong = random_tensor(2, 8, Dims::cube(2), 14);
    assert!(fuse(&p, &wrong, &wrong, Branch::Neg, Mode::Eval).is_err());
}

#[test]
fn decoder_rejects_missing_skips() {
    let p: NetworkParams<f64> = init_params(&tiny(), 5).unwrap();
    let x = random_tensor(1, 3, Dims::cube(8), 15);
    let a = forward(&p, &x, Mode::Eval).unwrap();
    let out = decode(&p, &a.f_pos, &a.skips, Branch::Pos, Mode::Eval).unwrap();
    assert_eq!(out.shape(), [1, 1, 8, 8, 8]);
    assert!(decode(&p, &a.f_pos, &a.skips[..2], Branch::Pos, Mode::Eval).is_err());
}

/// Scalar test objective touching every output and feature.
struct Probe {
    w: [Tensor<f64>; 6],
}

impl Probe {
    fn new(a: &ForwardArtifacts<f64>) -> Probe {
        let t = [
            &a.chi_pos_hat,
            &a.chi_neg_hat,
            &a.guide_pos,
            &a.guide_neg,
            &a.f_pos,
            &a.f_neg,
        ];
        Probe {
            w: std::array::from_fn(|i| {
                random_tensor(t[i].batch(), t[i].channels(), t[i].dims(), 100 + i as u64)
            }),
        }
    }

    fn value(&self, a: &ForwardArtifacts<f64>) -> f64 {
        let t = [
            &a.chi_pos_hat,
            &a.chi_neg_hat,
            &a.guide_pos,
            &a.guide_neg,
            &a.f_pos,
            &a.f_neg,
        ];
        t.iter()
            .zip(&self.w)
            .enumerate()
            .map(|(i, (x, w))| {
                x.data()
                    .iter()
                    .zip(w.data())
                    .map(|(v, c)| if i == 1 { c * v * v } else { c * v })
                    .sum::<f64>()
            })
            .sum()
    }

    fn grads(&self, a: &ForwardArtifacts<f64>) -> OutputGrads<f64> {
        let mut neg = self.w[1].clone();
        for (g, v) in neg.data_mut().iter_mut().zip(a.chi_neg_hat.data()) {
            *g *= 2.0 * v;
        }
        OutputGrads {
            chi_pos: self.w[0].clone(),
            chi_neg: neg,
            guide_pos: Some(self.w[2].clone()),
            guide_neg: Some(self.w[3].clone()),
            f_pos: Some(self.w[4].clone()),
            f_neg: Some(self.w[5].clone()),
        }
    }
}

fn perturbed(p: &NetworkParams<f64>, dir: &Gradients<f64>, eps: f64) -> NetworkParams<f64> {
    let mut q = p.clone();
    for (t, d) in q.tensors.iter_mut().zip(&dir.tensors) {
        for (v, s) in t.data.iter_mut().zip(d) {
            *v += eps * s;
        }
    }
    q
}

#[test]
fn backward_matches_central_differences() {
    let p: NetworkParams<f64> = init_params(&tiny(), 21).unwrap();
    let x = random_tensor(2, 3, Dims::cube(8), 22);
    let (a, tape) = forward_train(&p, &x).unwrap();
    let probe = Probe::new(&a);
    let g = backward(&p, &tape, &probe.grads(&a)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..3 {
        let mut dir = Gradients::zeros_like(&p);
        for t in &mut dir.tensors {
            for v in t.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let eps = 1e-6;
        let lp = probe.value(&forward(&perturbed(&p, &dir, eps), &x, Mode::Train).unwrap());
        let lm = probe.value(&forward(&perturbed(&p, &dir, -eps), &x, Mode::Train).unwrap());
        let fd = (lp - lm) / (2.0 * eps);
        let an = g.dot(&dir);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
        assert!(rel < 1e-4, "trial {trial}: fd {fd} analytic {an} rel {rel}");
    }
}

#[test]
fn running_stats_move_toward_batch_stats() {
    let mut p: NetworkParams<f64> = init_params(&tiny(), 2).unwrap();
    let x = random_tensor(2, 3, Dims::cube(8), 3);
    let (_, tape) = forward_train(&p, &x).unwrap();
    p.update_running_stats(&tape, BN_MOMENTUM);
    let rv = &p.tensor("enc1.level0.0.bn.running_var").unwrap().data;
    assert!(rv.iter().any(|&v| v != 1.0));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let p: NetworkParams<f32> = init_params(&tiny(), 7).unwrap();
    save_checkpoint(&p, &path).unwrap();
    let q: NetworkParams<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(p, q);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}
