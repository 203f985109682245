use std::fs;
use std::path::Path;

use susep::physics::forward_model;
use susep::synth::{build_training_set, DatasetManifest, SynthConfig, MANIFEST_FILE};

fn small_config() -> SynthConfig {
    SynthConfig {
        phantom_dims: [64, 64, 64],
        patch: [32, 32, 32],
        stride: [32, 32, 32],
        ..SynthConfig::default()
    }
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn two_phantoms_give_32_samples_and_reproduce_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_training_set(2, 7, &small_config(), dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 2 * 8 * 2);
    let lesioned = manifest.samples.iter().filter(|s| s.lesions).count();
    assert_eq!(lesioned * 2, manifest.samples.len());
    assert!(manifest
        .samples
        .iter()
        .filter(|s| s.lesions)
        .all(|s| s.n_lesions >= 1));

    let reloaded = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(reloaded, manifest);
    reloaded.validate(dir.path()).unwrap();

    let samples = manifest.load_all(dir.path()).unwrap();
    // normalized channels have zero mean and unit std over the whole set
    for c in 0..3 {
        let values: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.input[c].data().iter().copied())
            .collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "channel {c} std {std}");
    }

    // de-normalized inputs equal a fresh forward model of the stored labels
    for s in &samples {
        let physical = s.physical_inputs(&manifest.norm).unwrap();
        let fresh = forward_model(&s.labels, &s.a_patch, &s.mask).unwrap();
        let pairs = [
            (&physical.r2_prime, &fresh.r2_prime, manifest.norm.std[0]),
            (
                &physical.local_field,
                &fresh.local_field,
                manifest.norm.std[1],
            ),
            (&physical.qsm, &fresh.qsm, manifest.norm.std[2]),
        ];
        for (a, b, std) in pairs {
            // stored inputs are f32 in normalized units
            let tol = std * 1e-5 + 1e-12;
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= tol * (1.0 + (y / std).abs()), "{x} vs {y}");
            }
        }
        assert!(s.labels.chi_pos().data().iter().all(|&v| v >= 0.0));
        assert!(s.labels.chi_neg().data().iter().all(|&v| v <= 0.0));
    }
}

#[test]
fn same_seed_is_byte_identical_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        phantom_dims: [32, 32, 32],
        patch: [16, 16, 16],
        stride: [16, 16, 16],
        ..SynthConfig::default()
    };
    build_training_set(3, 11, &cfg, a.path()).unwrap();
    build_training_set(
        3,
        11,
        &SynthConfig {
            jobs: 3,
            ..cfg.clone()
        },
        b.path(),
    )
    .unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
}

#[test]
fn missing_output_dir_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let err = build_training_set(1, 1, &small_config(), &missing).unwrap_err();
    assert!(err.to_string().contains("nope"), "{err}");
}
