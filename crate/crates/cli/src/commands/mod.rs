mod eval;

use std::path::Path;

use serde::{Deserialize, Serialize};
use susep::baseline::{separate_iterative, SolverConfig};
use susep::network::{load_checkpoint, NetworkConfig, NetworkParams};
use susep::physics::forward_model;
use susep::synth::{
    build_training_set, generate_brain_phantom, generate_cylinder_phantom, CylinderConfig,
    DatasetManifest, NormStats, PhantomConfig, SynthConfig, MANIFEST_FILE,
};
use susep::training::{
    infer_volume, train_samples, InferenceOptions, Precision, TrainConfig, TrainOutput,
};
use susep::volume::write_mask;

use crate::error::{CliError, CliResult};
use crate::files::{self, CONFIG_ECHO, NORM_FILE, PHANTOM_FILE};
use crate::{
    BaselineArgs, InferArgs, PhantomArgs, PhantomKind, PrecisionArg, SimulateArgs, TrainArgs,
};

pub use eval::eval;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub phantoms: usize,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            phantoms: 4,
            seed: 0,
            synth: SynthConfig::default(),
        }
    }
}

pub fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut cfg: SimulateConfig = files::load_config(a.config.as_deref())?;
    if let Some(v) = a.phantoms {
        cfg.phantoms = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.patch {
        cfg.synth.patch = v;
        if a.stride.is_none() {
            cfg.synth.stride = v;
        }
    }
    if let Some(v) = a.stride {
        cfg.synth.stride = v;
    }
    if let Some(v) = a.phantom_dims {
        cfg.synth.phantom_dims = v;
    }
    cfg.synth.jobs = a.jobs.unwrap_or(1).max(1);
    // patches must be usable by the network
    NetworkConfig {
        patch: cfg.synth.patch,
        ..NetworkConfig::default()
    }
    .validate()?;
    files::require_dir(&a.out)?;
    let manifest = build_training_set(cfg.phantoms, cfg.seed, &cfg.synth, &a.out)?;
    files::write_json(&a.out.join(CONFIG_ECHO), &cfg)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    println!("{} samples", manifest.samples.len());
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    /// `patch` is taken from the dataset.
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg: TrainRunConfig = files::load_config(a.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(p) = a.precision {
        t.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if a.no_contrast {
        t.contrastive_enabled = false;
    }
    if a.masked_loss {
        t.loss.masked = true;
    }
    if let Some(v) = a.base_channels {
        cfg.network.base_channels = v;
    }
    cfg.train.validate()?;
    let manifest = DatasetManifest::load(a.data.join(MANIFEST_FILE))?;
    cfg.network.patch = manifest.patch_dims;
    cfg.network.validate()?;
    let samples = manifest.load_all(&a.data)?;
    files::ensure_dir(&a.out)?;
    files::write_json(&a.out.join(CONFIG_ECHO), &cfg)?;
    files::write_json(&a.out.join(NORM_FILE), &manifest.norm)?;
    let out = TrainOutput { dir: Some(&a.out) };
    let (_, history) = train_samples(
        &samples,
        &manifest.norm,
        &cfg.network,
        &cfg.train,
        out,
        &mut |r| {
            println!(
                "epoch {:>3}  lr {:.0e}  train {:.6}  val {:.6}",
                r.epoch + 1,
                r.lr,
                r.train.total,
                r.validation.total
            );
        },
    )?;
    println!(
        "trained {} epochs on {} samples ({} validation)",
        history.epochs.len(),
        history.train_indices.len(),
        history.validation_indices.len()
    );
    Ok(())
}

/// Reads normalization stats from a `norm.json` or a dataset manifest.
fn read_norm(path: &Path) -> CliResult<NormStats> {
    let value: serde_json::Value = files::read_json(path)?;
    let inner = value.get("norm").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct InferenceRecord<'a> {
    checkpoint: &'a Path,
    window: [usize; 3],
    stride: [usize; 3],
    windows: usize,
    clamped: bool,
}

pub fn infer(a: InferArgs) -> CliResult<()> {
    let params: NetworkParams<f32> = load_checkpoint(&a.checkpoint)?;
    let norm_path = match &a.norm {
        Some(p) => p.clone(),
        None => a
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(NORM_FILE),
    };
    if !norm_path.exists() {
        return Err(CliError::config(format!(
            "normalization statistics missing: {} (pass --norm)",
            norm_path.display()
        )));
    }
    let norm = read_norm(&norm_path)?;
    let acq = files::read_acquisition(&a.input)?;
    let opts = InferenceOptions {
        window: a.window.unwrap_or(params.config.patch),
        stride: a.stride,
        clamp: a.clamp,
    };
    let r = infer_volume(&params, &acq, Some(&norm), &opts)?;
    files::ensure_dir(&a.out)?;
    files::write_sources(&a.out, &r.chi_pos, &r.chi_neg)?;
    files::write_json(
        &a.out.join("inference.json"),
        &InferenceRecord {
            checkpoint: &a.checkpoint,
            window: opts.window,
            stride: opts.stride(),
            windows: r.windows,
            clamped: r.clamped,
        },
    )?;
    println!("{} windows -> {}", r.windows, a.out.display());
    Ok(())
}

pub fn baseline(a: BaselineArgs) -> CliResult<()> {
    let mut cfg: SolverConfig = files::load_config(a.config.as_deref())?;
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.tol {
        cfg.tol = v;
    }
    cfg.validate()?;
    let acq = files::read_acquisition(&a.input)?;
    let r = separate_iterative(&acq, &cfg)?;
    files::ensure_dir(&a.out)?;
    files::write_json(&a.out.join(CONFIG_ECHO), &cfg)?;
    files::write_source_pair(&a.out, &r.sources)?;
    files::write_json(&a.out.join("trace.json"), &r.trace)?;
    println!(
        "{} iterations, objective {:.6e}, converged {}",
        r.trace.iterations,
        r.trace.objective.last().copied().unwrap_or(f64::NAN),
        r.trace.converged
    );
    Ok(())
}

/// Provenance of a phantom directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PhantomRecord {
    Brain {
        seed: u64,
        dims: [usize; 3],
        config: PhantomConfig,
    },
    Cylinder {
        config: CylinderConfig,
    },
}

pub fn read_phantom_record(dir: &Path) -> CliResult<PhantomRecord> {
    files::read_json(&dir.join(PHANTOM_FILE))
}

pub fn phantom(a: PhantomArgs) -> CliResult<()> {
    files::ensure_dir(&a.out)?;
    match a.kind {
        PhantomKind::Brain => {
            let config: PhantomConfig = files::load_config(a.config.as_deref())?;
            let dims = a.dims.unwrap_or([64; 3]);
            let ph = generate_brain_phantom(a.seed, dims, [1.0; 3], &config)?;
            let acq = forward_model(&ph.sources, &ph.a_map, &ph.mask)?;
            files::write_source_pair(&a.out, &ph.sources)?;
            files::write_acquisition(&a.out, &acq)?;
            files::write_json(
                &a.out.join(PHANTOM_FILE),
                &PhantomRecord::Brain {
                    seed: a.seed,
                    dims,
                    config,
                },
            )?;
        }
        PhantomKind::Cylinder => {
            let mut config: CylinderConfig = files::load_config(a.config.as_deref())?;
            if let Some(d) = a.dims {
                config.dims = d;
            }
            let ph = generate_cylinder_phantom(&config)?;
            let acq = forward_model(&ph.sources, &ph.a_map, &ph.mask)?;
            files::write_source_pair(&a.out, &ph.sources)?;
            files::write_acquisition(&a.out, &acq)?;
            let roi_dir = a.out.join("rois");
            files::ensure_dir(&roi_dir)?;
            for roi in &ph.rois {
                write_mask(
                    &roi.mask,
                    roi_dir.join(format!("r{}c{}.svol", roi.row, roi.col)),
                )?;
            }
            files::write_json(
                &a.out.join(PHANTOM_FILE),
                &PhantomRecord::Cylinder { config },
            )?;
        }
    }
    println!("{}", a.out.display());
    Ok(())
}
