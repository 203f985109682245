//! Optimization loop, learning-rate schedule and sliding-window inference.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{composite_loss, LossBreakdown, LossConfig, LossContext, SampleTarget};
use crate::metrics::{MapMetrics, MetricAccumulator};
use crate::network::{
    backward, forward, forward_train, save_checkpoint, Mode, NetworkConfig, NetworkParams, Real,
    Tensor, BN_MOMENTUM,
};
use crate::physics::{AcquisitionSet, SourcePair};
use crate::synth::{crop_patches, derive_seed, DatasetManifest, NormStats, TrainingSample};
use crate::volume::{Dims, Volume3D};

pub const HISTORY_FILE: &str = "history.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// One rate per schedule phase.
    pub learning_rates: Vec<f64>,
    /// Cumulative fractions of `epochs` at which the next rate takes over.
    pub lr_breakpoints: Vec<f64>,
    pub loss: LossConfig,
    pub contrastive_enabled: bool,
    pub precision: Precision,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 2,
            seed: 0,
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            lr_breakpoints: vec![0.3, 0.6],
            loss: LossConfig::default(),
            contrastive_enabled: true,
            precision: Precision::F32,
            validation_fraction: 0.1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule: 100 epochs, drops after epochs 30 and 60.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.learning_rates.len() != self.lr_breakpoints.len() + 1 {
            return Err(Error::invalid(format!(
                "{} learning rates need {} breakpoints, got {}",
                self.learning_rates.len(),
                self.learning_rates.len().saturating_sub(1),
                self.lr_breakpoints.len()
            )));
        }
        if self
            .learning_rates
            .iter()
            .any(|r| !(r.is_finite() && *r > 0.0))
        {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.lr_breakpoints.iter().any(|f| !(0.0..=1.0).contains(f))
            || self.lr_breakpoints.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::invalid(
                "lr breakpoints must be increasing fractions in [0, 1]",
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation_fraction must be in (0, 1)"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid("invalid Adam hyperparameters"));
        }
        self.loss.weights.validate()
    }

    /// Epoch indices at which each later phase starts.
    pub fn lr_boundaries(&self) -> Vec<usize> {
        self.lr_breakpoints
            .iter()
            .map(|f| (f * self.epochs as f64).round() as usize)
            .collect()
    }
}

pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    config.validate()?;
    if epoch >= config.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule of {} epochs",
            config.epochs
        )));
    }
    let phase = config
        .lr_boundaries()
        .iter()
        .filter(|&&b| b <= epoch)
        .count();
    Ok(config.learning_rates[phase])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub precision: Precision,
    pub contrastive_enabled: bool,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn is_finite(&self) -> bool {
        self.epochs
            .iter()
            .all(|e| e.lr.is_finite() && e.train.is_finite() && e.validation.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|source| Error::Json {
                context: "training history".into(),
                source,
            })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })
    }
}

/// Seed-stable split of `n` samples into (train, validation) index sets.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = ((n as f64 * fraction).round() as usize).max(1);
    if n_val >= n {
        return Err(Error::invalid(format!(
            "{n} samples leave nothing to train on after reserving {n_val} for validation"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &[0x53504c4954],
    )));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Network input tensor `[1, 3, z, y, x]` from normalized channels.
pub fn input_tensor<T: Real>(channels: [&[f64]; 3], dims: Dims) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(3 * dims.len());
    for c in channels {
        if c.len() != dims.len() {
            return Err(Error::invalid("input channel length does not match dims"));
        }
        data.extend(c.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::from_vec(1, 3, dims, data)
}

struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new<T: Real>(cfg: AdamConfig, params: &NetworkParams<T>) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect()
        };
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn update<T: Real>(&mut self, params: &mut NetworkParams<T>, grads: &[Vec<T>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((t, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..g.len() {
                let gi = g[i].to_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                t.data[i] = T::from_f64(t.data[i].to_f64() - step);
            }
        }
    }
}

struct Prepared<T> {
    inputs: Vec<Tensor<T>>,
    targets: Vec<SampleTarget>,
}

fn prepare<T: Real>(samples: &[TrainingSample], norm: &NormStats) -> Result<Prepared<T>> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let ch = [s.input[0].data(), s.input[1].data(), s.input[2].data()];
        inputs.push(input_tensor(ch, s.dims())?);
        targets.push(SampleTarget::from_sample(s, norm)?);
    }
    Ok(Prepared { inputs, targets })
}

fn batch_of<'a, T: Real>(
    data: &'a Prepared<T>,
    idx: &[usize],
) -> Result<(Tensor<T>, Vec<&'a SampleTarget>)> {
    let items: Vec<Tensor<T>> = idx.iter().map(|&i| data.inputs[i].clone()).collect();
    Ok((
        Tensor::stack(&items)?,
        idx.iter().map(|&i| &data.targets[i]).collect(),
    ))
}

fn effective_loss(cfg: &TrainConfig) -> LossConfig {
    let mut loss = cfg.loss.clone();
    if !cfg.contrastive_enabled {
        loss.weights.alpha = 0.0;
    }
    loss
}

/// Mean breakdown of `params` over `idx` in evaluation mode.
fn evaluate<T: Real>(
    params: &NetworkParams<T>,
    data: &Prepared<T>,
    idx: &[usize],
    batch: usize,
    loss: &LossConfig,
    ctx: &LossContext,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for chunk in idx.chunks(batch) {
        let (x, targets) = batch_of(data, chunk)?;
        let art = forward(params, &x, Mode::Eval)?;
        let (b, _) = composite_loss(&art, &targets, loss, ctx)?;
        acc.accumulate(&b, chunk.len() as f64 / idx.len() as f64);
    }
    Ok(acc)
}

/// Where and whether to write per-epoch artifacts.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOutput<'a> {
    pub dir: Option<&'a Path>,
}

fn train_typed<T: Real>(
    samples: &[TrainingSample],
    norm: &NormStats,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    out: TrainOutput<'_>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(NetworkParams<f64>, TrainHistory)> {
    let dims = samples[0].dims();
    if samples.iter().any(|s| s.dims() != dims) {
        return Err(Error::invalid("training samples differ in patch dims"));
    }
    if dims.as_array() != net.patch {
        return Err(Error::invalid(format!(
            "network patch {:?} does not match sample dims {:?}",
            net.patch,
            dims.as_array()
        )));
    }
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.validation_fraction, cfg.seed)?;
    let data = prepare::<T>(samples, norm)?;
    let ctx = LossContext::new(dims, samples[0].labels.voxel_size())?;
    let loss = effective_loss(cfg);
    let mut params = NetworkParams::<T>::init(net, derive_seed(cfg.seed, &[0x494e4954]))?;
    let mut adam = Adam::new(cfg.adam, &params);
    let mut history = TrainHistory {
        seed: cfg.seed,
        precision: cfg.precision,
        contrastive_enabled: cfg.contrastive_enabled,
        train_indices: train_idx.clone(),
        validation_indices: val_idx.clone(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    if let Some(dir) = out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[0x45504f4348, epoch as u64],
        )));
        let mut train = LossBreakdown::default();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, targets) = batch_of(&data, chunk)?;
            let (art, tape) = forward_train(&params, &x)?;
            let (b, grads) = composite_loss(&art, &targets, &loss, &ctx)?;
            if !b.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: format!("{b:?}"),
                });
            }
            let g = backward(&params, &tape, &grads)?;
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    detail: "parameter gradient".into(),
                });
            }
            params.update_running_stats(&tape, BN_MOMENTUM);
            adam.update(&mut params, &g.tensors, lr);
            train.accumulate(&b, chunk.len() as f64 / order.len() as f64);
        }
        let validation = evaluate(&params, &data, &val_idx, cfg.batch_size, &loss, &ctx)?;
        if !validation.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                step: 0,
                detail: format!("validation {validation:?}"),
            });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train,
            validation,
        };
        on_epoch(&record);
        history.epochs.push(record);
        if let Some(dir) = out.dir {
            save_checkpoint(&params, dir.join(CHECKPOINT_FILE))?;
            history.save(dir.join(HISTORY_FILE))?;
        }
    }
    Ok((params.cast(), history))
}

/// Trains on preloaded samples. The returned parameters are widened to f64.
pub fn train_samples(
    samples: &[TrainingSample],
    norm: &NormStats,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    out: TrainOutput<'_>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(NetworkParams<f64>, TrainHistory)> {
    cfg.validate()?;
    net.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(samples, norm, net, cfg, out, on_epoch),
        Precision::F64 => train_typed::<f64>(samples, norm, net, cfg, out, on_epoch),
    }
}

pub fn train(
    manifest: &DatasetManifest,
    root: impl AsRef<Path>,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(NetworkParams<f64>, TrainHistory)> {
    cfg.validate()?;
    let samples = manifest.load_all(root)?;
    train_samples(
        &samples,
        &manifest.norm,
        net,
        cfg,
        TrainOutput::default(),
        &mut |_| {},
    )
}

/// Two runs on identical data and seed differing only in the contrastive weight.
pub struct AblationRuns {
    pub with_contrast: (NetworkParams<f64>, TrainHistory),
    pub without_contrast: (NetworkParams<f64>, TrainHistory),
}

pub fn ablation(
    samples: &[TrainingSample],
    norm: &NormStats,
    net: &NetworkConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(bool, &EpochRecord),
) -> Result<AblationRuns> {
    let mut with = cfg.clone();
    with.contrastive_enabled = true;
    let mut without = cfg.clone();
    without.contrastive_enabled = false;
    let a = train_samples(
        samples,
        norm,
        net,
        &with,
        TrainOutput::default(),
        &mut |r| on_epoch(true, r),
    )?;
    let b = train_samples(
        samples,
        norm,
        net,
        &without,
        TrainOutput::default(),
        &mut |r| on_epoch(false, r),
    )?;
    Ok(AblationRuns {
        with_contrast: a,
        without_contrast: b,
    })
}

/// Evaluation-mode predictions (χ+, χ−) for whole training patches.
pub fn predict_samples<T: Real>(
    params: &NetworkParams<T>,
    samples: &[&TrainingSample],
    batch: usize,
) -> Result<Vec<(Volume3D, Volume3D)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let items = chunk
            .iter()
            .map(|s| {
                input_tensor::<T>(
                    [s.input[0].data(), s.input[1].data(), s.input[2].data()],
                    s.dims(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let art = forward(params, &Tensor::stack(&items)?, Mode::Eval)?;
        for (b, s) in chunk.iter().enumerate() {
            let vol = |t: &Tensor<T>| {
                Volume3D::from_data(
                    s.dims(),
                    s.labels.voxel_size(),
                    t.sample(b).iter().map(|v| v.to_f64()).collect(),
                )
            };
            out.push((vol(&art.chi_pos_hat)?, vol(&art.chi_neg_hat)?));
        }
    }
    Ok(out)
}

/// Reference predictor that splits the input QSM by sign.
pub fn qsm_sign_split(sample: &TrainingSample, norm: &NormStats) -> Result<(Volume3D, Volume3D)> {
    let qsm = sample.input[2].map(|v| norm.denormalize(2, v))?;
    Ok((qsm.map(|v| v.max(0.0))?, qsm.map(|v| v.min(0.0))?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchScores {
    pub pos: MapMetrics,
    pub neg: MapMetrics,
    pub samples: usize,
}

/// Metrics pooled over patches, restricted to each patch's mask.
pub fn score_predictions(
    preds: &[(Volume3D, Volume3D)],
    samples: &[&TrainingSample],
) -> Result<BranchScores> {
    if preds.len() != samples.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut pos = MetricAccumulator::default();
    let mut neg = MetricAccumulator::default();
    for ((p, n), s) in preds.iter().zip(samples) {
        pos.add(p, s.labels.chi_pos(), Some(&s.mask))?;
        neg.add(n, s.labels.chi_neg(), Some(&s.mask))?;
    }
    Ok(BranchScores {
        pos: pos.finish()?,
        neg: neg.finish()?,
        samples: samples.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub window: [usize; 3],
    /// Defaults to half the window.
    pub stride: Option<[usize; 3]>,
    /// Clamp χ+ to ≥ 0 and χ− to ≤ 0.
    pub clamp: bool,
}

impl InferenceOptions {
    pub fn new(window: [usize; 3]) -> Self {
        InferenceOptions {
            window,
            stride: None,
            clamp: false,
        }
    }

    pub fn stride(&self) -> [usize; 3] {
        self.stride.unwrap_or(self.window.map(|w| (w / 2).max(1)))
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub chi_pos: Volume3D,
    pub chi_neg: Volume3D,
    pub windows: usize,
    pub clamped: bool,
}

impl Inference {
    /// Predictions as a sign-checked pair; fails on unclamped sign violations.
    pub fn sources(&self) -> Result<SourcePair> {
        SourcePair::new(self.chi_pos.clone(), self.chi_neg.clone())
    }
}

/// Sliding-window prediction over a whole acquisition with uniform overlap averaging.
pub fn infer_volume<T: Real>(
    params: &NetworkParams<T>,
    acq: &AcquisitionSet,
    norm: Option<&NormStats>,
    opts: &InferenceOptions,
) -> Result<Inference> {
    let norm =
        norm.ok_or_else(|| Error::invalid("normalization statistics are required for inference"))?;
    let dims = acq.dims();
    let window = Dims::from(opts.window);
    if opts
        .window
        .iter()
        .any(|&w| w == 0 || w % (1 << NetworkConfig::DEPTH) != 0)
    {
        return Err(Error::invalid(format!(
            "window {:?} must be positive multiples of {}",
            opts.window,
            1 << NetworkConfig::DEPTH
        )));
    }
    let origins = crop_patches(dims, window, opts.stride())?;
    let vs = acq.local_field.voxel_size();
    let channels = norm.normalize_acquisition(acq);
    let channels: [Volume3D; 3] = {
        let mut it = channels
            .into_iter()
            .map(|c| Volume3D::from_data(dims, vs, c));
        [
            it.next().unwrap()?,
            it.next().unwrap()?,
            it.next().unwrap()?,
        ]
    };
    let mut sum = [vec![0.0; dims.len()], vec![0.0; dims.len()]];
    let mut count = vec![0u32; dims.len()];
    for &o in &origins {
        let crops = [
            channels[0].crop(o, window)?,
            channels[1].crop(o, window)?,
            channels[2].crop(o, window)?,
        ];
        let x = input_tensor::<T>([crops[0].data(), crops[1].data(), crops[2].data()], window)?;
        let art = forward(params, &x, Mode::Eval)?;
        let outs = [art.chi_pos_hat.data(), art.chi_neg_hat.data()];
        for z in 0..window.nz {
            for y in 0..window.ny {
                for xx in 0..window.nx {
                    let src = window.index(xx, y, z);
                    let dst = dims.index(o[0] + xx, o[1] + y, o[2] + z);
                    sum[0][dst] += outs[0][src].to_f64();
                    sum[1][dst] += outs[1][src].to_f64();
                    count[dst] += 1;
                }
            }
        }
    }
    let mask = acq.mask.data();
    let finish = |s: &[f64], sign: f64| -> Vec<f64> {
        s.iter()
            .zip(&count)
            .zip(mask)
            .map(|((&v, &c), &m)| {
                if !m {
                    return 0.0;
                }
                let v = v / c as f64;
                if opts.clamp && v * sign < 0.0 {
                    0.0
                } else {
                    v
                }
            })
            .collect()
    };
    let pos = Volume3D::from_data(dims, vs, finish(&sum[0], 1.0))?;
    let neg = Volume3D::from_data(dims, vs, finish(&sum[1], -1.0))?;
    Ok(Inference {
        chi_pos: pos,
        chi_neg: neg,
        windows: origins.len(),
        clamped: opts.clamp,
    })
}
