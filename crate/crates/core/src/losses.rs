//! Training objectives and their gradients with respect to network outputs
//! and contrastive features. All reductions are voxel means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ForwardArtifacts, OutputGrads, Real, Tensor};
use crate::physics::{dipole_kernel, AcquisitionSet, DipoleKernel, SourcePair};
use crate::synth::{NormStats, TrainingSample};
use crate::volume::{Dims, Fft3, VoxelSize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            delta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Norm applied to the model-consistency and gradient residuals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualNorm {
    #[default]
    L1,
    L2,
}

impl ResidualNorm {
    fn value(self, r: f64) -> f64 {
        match self {
            ResidualNorm::L1 => r.abs(),
            ResidualNorm::L2 => r * r,
        }
    }

    fn deriv(self, r: f64) -> f64 {
        match self {
            ResidualNorm::L1 => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ResidualNorm::L2 => 2.0 * r,
        }
    }
}

/// Units in which the model-consistency residuals are measured during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelUnits {
    /// Each residual divided by the dataset std of its input channel.
    Normalized,
    #[default]
    Physical,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub norm: ResidualNorm,
    /// Restrict voxel-wise terms to the brain mask of each patch.
    pub masked: bool,
    pub model_units: ModelUnits,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrast: f64,
    pub l2: f64,
    pub model: f64,
    pub gradient: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(contrast: f64, l2: f64, model: f64, gradient: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            contrast,
            l2,
            model,
            gradient,
            total: w.alpha * contrast + w.beta * l2 + w.gamma * model + w.delta * gradient,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.contrast,
            self.l2,
            self.model,
            self.gradient,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Running sum helper for epoch means.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.contrast += weight * other.contrast;
        self.l2 += weight * other.l2;
        self.model += weight * other.model;
        self.gradient += weight * other.gradient;
        self.total += weight * other.total;
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: length {a} vs {b}")));
    }
    Ok(())
}

fn check_batch(len: usize, batch: usize) -> Result<usize> {
    if batch == 0 || len % batch != 0 || len == 0 {
        return Err(Error::invalid(format!(
            "cannot split {len} values into {batch} samples"
        )));
    }
    Ok(len / batch)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    /// Batch mean of per-sample cosine similarities.
    pub value: f64,
    /// Set when some sample had a zero-norm tensor; its similarity counts as 0.
    pub degenerate: bool,
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_grad(x: &[f64], y: &[f64], batch: usize) -> Result<(Cosine, Vec<f64>, Vec<f64>)> {
    check_len(x.len(), y.len(), "cosine similarity")?;
    let n = check_batch(x.len(), batch)?;
    let mut dx = vec![0.0; x.len()];
    let mut dy = vec![0.0; y.len()];
    let mut total = 0.0;
    let mut degenerate = false;
    for b in 0..batch {
        let xs = &x[b * n..(b + 1) * n];
        let ys = &y[b * n..(b + 1) * n];
        let xx: f64 = xs.iter().map(|v| v * v).sum();
        let yy: f64 = ys.iter().map(|v| v * v).sum();
        if xx == 0.0 || yy == 0.0 {
            degenerate = true;
            continue;
        }
        let xy: f64 = xs.iter().zip(ys).map(|(a, b)| a * b).sum();
        let (nx, ny) = (xx.sqrt(), yy.sqrt());
        let s = xy / (nx * ny);
        total += s;
        let inv = 1.0 / (batch as f64 * nx * ny);
        for i in 0..n {
            dx[b * n + i] = (ys[i] - s * ny / nx * xs[i]) * inv;
            dy[b * n + i] = (xs[i] - s * nx / ny * ys[i]) * inv;
        }
    }
    Ok((
        Cosine {
            value: total / batch as f64,
            degenerate,
        },
        dx,
        dy,
    ))
}

/// Per-sample flattened cosine similarity, averaged over `batch` samples.
pub fn cosine_similarity(x: &[f64], y: &[f64], batch: usize) -> Result<Cosine> {
    cosine_grad(x, y, batch).map(|r| r.0)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Contrastive loss from the four similarities `s(Gp,Fp)`, `s(Gp,Fn)`,
/// `s(Gn,Fn)`, `s(Gn,Fp)`.
pub fn contrastive_from_similarities(s_pp: f64, s_pn: f64, s_nn: f64, s_np: f64) -> f64 {
    softplus(s_pn - s_pp) + softplus(s_np - s_nn)
}

#[derive(Clone, Debug)]
pub struct ContrastiveResult {
    pub value: f64,
    pub degenerate: bool,
    /// Gradients for (guide_pos, guide_neg, f_pos, f_neg).
    pub grads: [Vec<f64>; 4],
}

pub fn contrastive_loss_grad(
    gp: &[f64],
    gn: &[f64],
    fp: &[f64],
    fneg: &[f64],
    batch: usize,
) -> Result<ContrastiveResult> {
    check_len(gp.len(), gn.len(), "contrastive guide_neg")?;
    check_len(gp.len(), fp.len(), "contrastive f_pos")?;
    check_len(gp.len(), fneg.len(), "contrastive f_neg")?;
    let (pp, d_pp_g, d_pp_f) = cosine_grad(gp, fp, batch)?;
    let (pn, d_pn_g, d_pn_f) = cosine_grad(gp, fneg, batch)?;
    let (nn, d_nn_g, d_nn_f) = cosine_grad(gn, fneg, batch)?;
    let (np, d_np_g, d_np_f) = cosine_grad(gn, fp, batch)?;
    let value = contrastive_from_similarities(pp.value, pn.value, nn.value, np.value);
    // d softplus(a - b) = σ(a - b) (da - db)
    let w1 = logistic(pn.value - pp.value);
    let w2 = logistic(np.value - nn.value);
    let n = gp.len();
    let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        g[0][i] = w1 * (d_pn_g[i] - d_pp_g[i]);
        g[1][i] = w2 * (d_np_g[i] - d_nn_g[i]);
        g[2][i] = -w1 * d_pp_f[i] + w2 * d_np_f[i];
        g[3][i] = w1 * d_pn_f[i] - w2 * d_nn_f[i];
    }
    Ok(ContrastiveResult {
        value,
        degenerate: pp.degenerate || pn.degenerate || nn.degenerate || np.degenerate,
        grads: g,
    })
}

pub fn contrastive_loss(
    gp: &[f64],
    gn: &[f64],
    fp: &[f64],
    fneg: &[f64],
    batch: usize,
) -> Result<f64> {
    contrastive_loss_grad(gp, gn, fp, fneg, batch).map(|r| r.value)
}

/// Value and gradients with respect to the two predicted maps.
#[derive(Clone, Debug)]
pub struct PairGrad {
    pub value: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

fn mask_count(n: usize, mask: Option<&[bool]>) -> Result<f64> {
    match mask {
        None => Ok(n as f64),
        Some(m) => {
            check_len(m.len(), n, "loss mask")?;
            let c = m.iter().filter(|&&v| v).count();
            if c == 0 {
                return Err(Error::invalid("loss mask is empty"));
            }
            Ok(c as f64)
        }
    }
}

fn inside(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

pub fn l2_loss_grad(
    pos: &[f64],
    neg: &[f64],
    gt_pos: &[f64],
    gt_neg: &[f64],
    mask: Option<&[bool]>,
) -> Result<PairGrad> {
    let n = pos.len();
    for (l, w) in [
        (neg.len(), "chi_neg"),
        (gt_pos.len(), "gt_pos"),
        (gt_neg.len(), "gt_neg"),
    ] {
        check_len(n, l, w)?;
    }
    let count = mask_count(n, mask)?;
    let mut value = 0.0;
    let mut d_pos = vec![0.0; n];
    let mut d_neg = vec![0.0; n];
    for i in 0..n {
        if !inside(mask, i) {
            continue;
        }
        let (rp, rn) = (pos[i] - gt_pos[i], neg[i] - gt_neg[i]);
        value += rp * rp + rn * rn;
        d_pos[i] = 2.0 * rp / count;
        d_neg[i] = 2.0 * rn / count;
    }
    Ok(PairGrad {
        value: value / count,
        d_pos,
        d_neg,
    })
}

/// `MSE(pos, gt_pos) + MSE(neg, gt_neg)`.
pub fn l2_loss(pos: &[f64], neg: &[f64], gt_pos: &[f64], gt_neg: &[f64]) -> Result<f64> {
    l2_loss_grad(pos, neg, gt_pos, gt_neg, None).map(|r| r.value)
}

/// Physical-unit targets of the model-consistency term.
#[derive(Clone, Debug)]
pub struct ModelTarget<'a> {
    pub qsm: &'a [f64],
    pub local_field: &'a [f64],
    pub r2_prime: &'a [f64],
    pub a_map: &'a [f64],
    /// Residual divisors in input-channel order (r2_prime, local_field, qsm).
    pub scale: [f64; 3],
}

impl<'a> ModelTarget<'a> {
    pub fn from_acquisition(acq: &'a AcquisitionSet) -> Self {
        ModelTarget {
            qsm: acq.qsm.data(),
            local_field: acq.local_field.data(),
            r2_prime: acq.r2_prime.data(),
            a_map: acq.a_map.volume().data(),
            scale: [1.0; 3],
        }
    }
}

/// Dipole kernel and FFT plan for one patch geometry.
pub struct LossContext {
    kernel: DipoleKernel,
    plan: Fft3,
}

impl LossContext {
    pub fn new(dims: impl Into<Dims>, voxel_size: VoxelSize) -> Result<Self> {
        let dims = dims.into();
        Ok(LossContext {
            kernel: dipole_kernel(dims, voxel_size)?,
            plan: Fft3::new(dims)?,
        })
    }

    pub fn kernel(&self) -> &DipoleKernel {
        &self.kernel
    }

    pub fn dims(&self) -> Dims {
        self.kernel.dims()
    }
}

/// `|(p+n) − χ| + |D⊗(p+n) − ΔB| + |A(p−n) − R2'|`, each a voxel mean, each residual
/// divided by its entry of `target.scale`.
pub fn model_loss_grad(
    pos: &[f64],
    neg: &[f64],
    target: &ModelTarget<'_>,
    ctx: &LossContext,
    norm: ResidualNorm,
    mask: Option<&[bool]>,
) -> Result<PairGrad> {
    let n = ctx.dims().len();
    for (l, w) in [
        (pos.len(), "chi_pos"),
        (neg.len(), "chi_neg"),
        (target.qsm.len(), "qsm"),
        (target.local_field.len(), "local_field"),
        (target.r2_prime.len(), "r2_prime"),
        (target.a_map.len(), "a_map"),
    ] {
        check_len(n, l, w)?;
    }
    if target.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "model residual scales {:?} must be positive",
            target.scale
        )));
    }
    let count = mask_count(n, mask)?;
    let [sr, sf, sq] = target.scale;
    let net: Vec<f64> = pos.iter().zip(neg).map(|(p, q)| p + q).collect();
    let field = ctx.kernel.apply(&ctx.plan, &net)?;
    let mut value = 0.0;
    let mut d_net = vec![0.0; n];
    let mut d_field = vec![0.0; n];
    let mut d_abs = vec![0.0; n];
    for i in 0..n {
        if !inside(mask, i) {
            continue;
        }
        let rq = (net[i] - target.qsm[i]) / sq;
        let rf = (field[i] - target.local_field[i]) / sf;
        let a = target.a_map[i];
        let rr = (a * (pos[i] - neg[i]) - target.r2_prime[i]) / sr;
        value += norm.value(rq) + norm.value(rf) + norm.value(rr);
        d_net[i] = norm.deriv(rq) / (sq * count);
        d_field[i] = norm.deriv(rf) / (sf * count);
        d_abs[i] = a * norm.deriv(rr) / (sr * count);
    }
    // D is self-adjoint
    let back = ctx.kernel.apply(&ctx.plan, &d_field)?;
    let d_pos = (0..n).map(|i| d_net[i] + back[i] + d_abs[i]).collect();
    let d_neg = (0..n).map(|i| d_net[i] + back[i] - d_abs[i]).collect();
    Ok(PairGrad {
        value: value / count,
        d_pos,
        d_neg,
    })
}

pub fn model_loss(
    pos: &[f64],
    neg: &[f64],
    acq: &AcquisitionSet,
    ctx: &LossContext,
    norm: ResidualNorm,
) -> Result<f64> {
    if acq.dims() != ctx.dims() {
        return Err(Error::invalid("acquisition and loss context dims differ"));
    }
    model_loss_grad(
        pos,
        neg,
        &ModelTarget::from_acquisition(acq),
        ctx,
        norm,
        None,
    )
    .map(|r| r.value)
}

fn axis_stride(dims: Dims, axis: usize) -> (usize, usize) {
    let [nx, ny, _] = dims.as_array();
    let stride = [1, nx, nx * ny][axis];
    (stride, dims.as_array()[axis])
}

/// Adds the gradient-matching term of one map to `d` and returns its value.
fn gradient_term(
    x: &[f64],
    g: &[f64],
    dims: Dims,
    norm: ResidualNorm,
    mask: Option<&[bool]>,
    d: &mut [f64],
) -> Result<f64> {
    let mut value = 0.0;
    for axis in 0..3 {
        let (stride, len) = axis_stride(dims, axis);
        if len < 2 {
            continue;
        }
        let pairs: Vec<usize> = (0..x.len())
            .filter(|&i| (i / stride) % len + 1 < len)
            .filter(|&i| inside(mask, i) && inside(mask, i + stride))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let count = pairs.len() as f64;
        let mut sum = 0.0;
        for &i in &pairs {
            let u = x[i + stride] - x[i];
            let v = g[i + stride] - g[i];
            let r = u.abs() - v.abs();
            sum += norm.value(r);
            let su = if u > 0.0 {
                1.0
            } else if u < 0.0 {
                -1.0
            } else {
                0.0
            };
            let du = norm.deriv(r) * su / count;
            d[i + stride] += du;
            d[i] -= du;
        }
        value += sum / count;
    }
    Ok(value)
}

/// Sum over branches and axes of the mean mismatch between absolute forward differences.
pub fn gradient_loss_grad(
    pos: &[f64],
    neg: &[f64],
    gt_pos: &[f64],
    gt_neg: &[f64],
    dims: Dims,
    norm: ResidualNorm,
    mask: Option<&[bool]>,
) -> Result<PairGrad> {
    let n = dims.len();
    for (l, w) in [
        (pos.len(), "chi_pos"),
        (neg.len(), "chi_neg"),
        (gt_pos.len(), "gt_pos"),
        (gt_neg.len(), "gt_neg"),
    ] {
        check_len(n, l, w)?;
    }
    if let Some(m) = mask {
        check_len(n, m.len(), "loss mask")?;
    }
    let mut d_pos = vec![0.0; n];
    let mut d_neg = vec![0.0; n];
    let value = gradient_term(pos, gt_pos, dims, norm, mask, &mut d_pos)?
        + gradient_term(neg, gt_neg, dims, norm, mask, &mut d_neg)?;
    Ok(PairGrad {
        value,
        d_pos,
        d_neg,
    })
}

pub fn gradient_loss(
    pos: &[f64],
    neg: &[f64],
    gt_pos: &[f64],
    gt_neg: &[f64],
    dims: Dims,
    norm: ResidualNorm,
) -> Result<f64> {
    gradient_loss_grad(pos, neg, gt_pos, gt_neg, dims, norm, None).map(|r| r.value)
}

/// Labels and physical inputs of one training patch, flattened.
#[derive(Clone, Debug)]
pub struct SampleTarget {
    pub dims: Dims,
    pub gt_pos: Vec<f64>,
    pub gt_neg: Vec<f64>,
    pub qsm: Vec<f64>,
    pub local_field: Vec<f64>,
    pub r2_prime: Vec<f64>,
    pub a_map: Vec<f64>,
    pub mask: Vec<bool>,
    /// Dataset std of (r2_prime, local_field, qsm); ones when unknown.
    pub channel_std: [f64; 3],
}

impl SampleTarget {
    pub fn new(labels: &SourcePair, acq: &AcquisitionSet) -> Result<Self> {
        if labels.dims() != acq.dims() {
            return Err(Error::invalid("labels and acquisition dims differ"));
        }
        Ok(SampleTarget {
            dims: labels.dims(),
            gt_pos: labels.chi_pos().data().to_vec(),
            gt_neg: labels.chi_neg().data().to_vec(),
            qsm: acq.qsm.data().to_vec(),
            local_field: acq.local_field.data().to_vec(),
            r2_prime: acq.r2_prime.data().to_vec(),
            a_map: acq.a_map.volume().data().to_vec(),
            mask: acq.mask.data().to_vec(),
            channel_std: [1.0; 3],
        })
    }

    pub fn from_sample(sample: &TrainingSample, norm: &NormStats) -> Result<Self> {
        let mut t = SampleTarget::new(&sample.labels, &sample.physical_inputs(norm)?)?;
        t.channel_std = norm.std;
        Ok(t)
    }

    pub fn model_target(&self, units: ModelUnits) -> ModelTarget<'_> {
        ModelTarget {
            qsm: &self.qsm,
            local_field: &self.local_field,
            r2_prime: &self.r2_prime,
            a_map: &self.a_map,
            scale: match units {
                ModelUnits::Normalized => self.channel_std,
                ModelUnits::Physical => [1.0; 3],
            },
        }
    }
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64()).collect()
}

fn tensor_from<T: Real>(like: &Tensor<T>, data: Vec<f64>) -> Tensor<T> {
    Tensor::from_vec(
        like.batch(),
        like.channels(),
        like.dims(),
        data.into_iter().map(T::from_f64).collect(),
    )
    .expect("gradient matches tensor shape")
}

/// Weighted sum of all terms for a batch, with gradients for backpropagation.
/// Voxel-wise terms are averaged over the samples of the batch.
pub fn composite_loss<T: Real>(
    art: &ForwardArtifacts<T>,
    targets: &[&SampleTarget],
    cfg: &LossConfig,
    ctx: &LossContext,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    cfg.weights.validate()?;
    let batch = art.chi_pos_hat.batch();
    if targets.len() != batch {
        return Err(Error::invalid(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    let w = cfg.weights;
    let pos = to_f64(&art.chi_pos_hat);
    let neg = to_f64(&art.chi_neg_hat);
    let n = art.chi_pos_hat.spatial();
    if art.chi_pos_hat.dims() != ctx.dims() {
        return Err(Error::invalid(
            "network output dims differ from loss context",
        ));
    }
    let mut d_pos = vec![0.0; pos.len()];
    let mut d_neg = vec![0.0; neg.len()];
    let (mut l2, mut model, mut grad) = (0.0, 0.0, 0.0);
    let scale = 1.0 / batch as f64;
    for (b, t) in targets.iter().enumerate() {
        if t.dims != ctx.dims() {
            return Err(Error::invalid("target dims differ from loss context"));
        }
        let mask = cfg.masked.then_some(t.mask.as_slice());
        let p = &pos[b * n..(b + 1) * n];
        let q = &neg[b * n..(b + 1) * n];
        let terms = [
            (
                l2_loss_grad(p, q, &t.gt_pos, &t.gt_neg, mask)?,
                w.beta,
                &mut l2,
            ),
            (
                model_loss_grad(p, q, &t.model_target(cfg.model_units), ctx, cfg.norm, mask)?,
                w.gamma,
                &mut model,
            ),
            (
                gradient_loss_grad(p, q, &t.gt_pos, &t.gt_neg, t.dims, cfg.norm, mask)?,
                w.delta,
                &mut grad,
            ),
        ];
        for (r, weight, acc) in terms {
            *acc += scale * r.value;
            if weight != 0.0 {
                let k = weight * scale;
                for i in 0..n {
                    d_pos[b * n + i] += k * r.d_pos[i];
                    d_neg[b * n + i] += k * r.d_neg[i];
                }
            }
        }
    }
    let c = contrastive_loss_grad(
        &to_f64(&art.guide_pos),
        &to_f64(&art.guide_neg),
        &to_f64(&art.f_pos),
        &to_f64(&art.f_neg),
        batch,
    )?;
    let breakdown = LossBreakdown::combine(c.value, l2, model, grad, &w);
    let feature_grad = |i: usize, like: &Tensor<T>| -> Option<Tensor<T>> {
        (w.alpha != 0.0)
            .then(|| tensor_from(like, c.grads[i].iter().map(|g| w.alpha * g).collect()))
    };
    let grads = OutputGrads {
        chi_pos: tensor_from(&art.chi_pos_hat, d_pos),
        chi_neg: tensor_from(&art.chi_neg_hat, d_neg),
        guide_pos: feature_grad(0, &art.guide_pos),
        guide_neg: feature_grad(1, &art.guide_neg),
        f_pos: feature_grad(2, &art.f_pos),
        f_neg: feature_grad(3, &art.f_neg),
    };
    Ok((breakdown, grads))
}
