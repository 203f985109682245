//! Dual-branch separation network: three encoders, gated feature fusion and
//! two decoders with shared skip connections, with hand-written backward
//! passes over a small tensor engine.

mod checkpoint;
mod layers;
mod model;
mod params;
mod real;
mod tensor;

use crate::error::{Error, Result};
use crate::volume::Dims;
use model::{Bwd, DecTape, EncTape, FuseTape, Fwd};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{FuseParts, Mode};
pub use params::{Gradients, NamedTensor, NetworkConfig, NetworkParams, INIT_STD};
pub use real::Real;
pub use tensor::Tensor;

/// Momentum of running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Pos,
    Neg,
}

impl Branch {
    fn index(self) -> usize {
        match self {
            Branch::Pos => 0,
            Branch::Neg => 1,
        }
    }
}

/// Outputs and contrastive features of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts<T> {
    pub chi_pos_hat: Tensor<T>,
    pub chi_neg_hat: Tensor<T>,
    pub guide_pos: Tensor<T>,
    pub guide_neg: Tensor<T>,
    pub f_pos: Tensor<T>,
    pub f_neg: Tensor<T>,
    /// Encoder-1 pre-pool activations, finest scale first.
    pub skips: Vec<Tensor<T>>,
}

/// Saved activations of a training-mode forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    enc: [EncTape<T>; 3],
    fuse: [FuseTape<T>; 2],
    dec: [DecTape<T>; 2],
    stats: Vec<model::BnStat>,
}

/// Upstream gradients with respect to network outputs and features.
#[derive(Clone, Debug)]
pub struct OutputGrads<T> {
    pub chi_pos: Tensor<T>,
    pub chi_neg: Tensor<T>,
    pub guide_pos: Option<Tensor<T>>,
    pub guide_neg: Option<Tensor<T>>,
    pub f_pos: Option<Tensor<T>>,
    pub f_neg: Option<Tensor<T>>,
}

pub fn init_params<T: Real>(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<T>> {
    NetworkParams::init(config, seed)
}

fn check_spatial(d: Dims) -> Result<()> {
    if d.as_array().iter().any(|&v| v == 0 || v % 8 != 0) {
        return Err(Error::invalid(format!(
            "spatial dims {:?} must be positive multiples of 8",
            d.as_array()
        )));
    }
    Ok(())
}

/// Extracts the normalized QSM channel fed to the guidance encoders.
pub fn qsm_channel<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (head, qsm) = input.split(2);
    drop(head);
    qsm
}

/// Runs encoder 1, 2 or 3; returns the bottleneck and the pre-pool activations.
pub fn encode<T: Real>(
    params: &NetworkParams<T>,
    x: &Tensor<T>,
    which: usize,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let want = match which {
        1 => 3,
        2 | 3 => 1,
        _ => {
            return Err(Error::invalid(format!(
                "encoder index must be 1, 2 or 3, got {which}"
            )))
        }
    };
    if x.channels() != want {
        return Err(Error::invalid(format!(
            "encoder {which} expects {want} channels, got {}",
            x.channels()
        )));
    }
    check_spatial(x.dims())?;
    let mut f = Fwd::new(params, mode);
    let (b, skips, _) = f.encoder(&params.layout.enc[which - 1], x);
    Ok((b, skips))
}

fn check_feature<T: Real>(params: &NetworkParams<T>, t: &Tensor<T>, what: &str) -> Result<()> {
    if t.channels() != params.config.feature_channels() {
        return Err(Error::invalid(format!(
            "{what} has {} channels, expected {}",
            t.channels(),
            params.config.feature_channels()
        )));
    }
    Ok(())
}

/// Gated fusion with its intermediate values.
pub fn fuse_parts<T: Real>(
    params: &NetworkParams<T>,
    guide: &Tensor<T>,
    f_v: &Tensor<T>,
    branch: Branch,
    mode: Mode,
) -> Result<FuseParts<T>> {
    guide.check_shape(f_v, "fuse: guide vs f_v")?;
    check_feature(params, guide, "guide")?;
    let mut f = Fwd::new(params, mode);
    Ok(f.fuse(&params.layout.fuse[branch.index()], guide, f_v).0)
}

pub fn fuse<T: Real>(
    params: &NetworkParams<T>,
    guide: &Tensor<T>,
    f_v: &Tensor<T>,
    branch: Branch,
    mode: Mode,
) -> Result<Tensor<T>> {
    fuse_parts(params, guide, f_v, branch, mode).map(|p| p.output)
}

fn check_skips<T: Real>(
    params: &NetworkParams<T>,
    task: &Tensor<T>,
    skips: &[Tensor<T>],
) -> Result<()> {
    check_feature(params, task, "task feature")?;
    if skips.len() != 3 {
        return Err(Error::invalid(format!(
            "decoder needs 3 skip scales, got {}",
            skips.len()
        )));
    }
    let c = params.config.base_channels;
    let mut d = task.dims();
    for (l, want_c) in [(2, 4 * c), (1, 2 * c), (0, c)] {
        d = layers::double_dims(d);
        let s = &skips[l];
        if s.dims() != d || s.channels() != want_c || s.batch() != task.batch() {
            return Err(Error::invalid(format!(
                "skip scale {l} has shape {:?}, expected {want_c} channels at {:?}",
                s.shape(),
                d.as_array()
            )));
        }
    }
    Ok(())
}

pub fn decode<T: Real>(
    params: &NetworkParams<T>,
    task: &Tensor<T>,
    skips: &[Tensor<T>],
    branch: Branch,
    mode: Mode,
) -> Result<Tensor<T>> {
    check_skips(params, task, skips)?;
    let mut f = Fwd::new(params, mode);
    Ok(f.decoder(&params.layout.dec[branch.index()], task, skips).0)
}

fn run<T: Real>(
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(ForwardArtifacts<T>, Tape<T>)> {
    if input.channels() != 3 {
        return Err(Error::invalid(format!(
            "network input needs 3 channels, got {}",
            input.channels()
        )));
    }
    check_spatial(input.dims())?;
    let l = &params.layout;
    let qsm = qsm_channel(input);
    let mut f = Fwd::new(params, mode);
    let (fv, skips, e1) = f.encoder(&l.enc[0], input);
    let (gp, _, e2) = f.encoder(&l.enc[1], &qsm);
    let (gn, _, e3) = f.encoder(&l.enc[2], &qsm);
    let (pp, f0) = f.fuse(&l.fuse[0], &gp, &fv);
    let (pn, f1) = f.fuse(&l.fuse[1], &gn, &fv);
    let (pos, d0) = f.decoder(&l.dec[0], &pp.output, &skips);
    let (neg, d1) = f.decoder(&l.dec[1], &pn.output, &skips);
    let art = ForwardArtifacts {
        chi_pos_hat: pos,
        chi_neg_hat: neg,
        guide_pos: gp,
        guide_neg: gn,
        f_pos: pp.output,
        f_neg: pn.output,
        skips,
    };
    let tape = Tape {
        enc: [e1, e2, e3],
        fuse: [f0, f1],
        dec: [d0, d1],
        stats: f.stats,
    };
    Ok((art, tape))
}

/// Forward pass without saving activations.
pub fn forward<T: Real>(
    params: &NetworkParams<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<ForwardArtifacts<T>> {
    run(params, input, mode).map(|(a, _)| a)
}

/// Training-mode forward pass keeping what [`backward`] needs.
pub fn forward_train<T: Real>(
    params: &NetworkParams<T>,
    input: &Tensor<T>,
) -> Result<(ForwardArtifacts<T>, Tape<T>)> {
    run(params, input, Mode::Train)
}

/// Gradients of a scalar loss given its derivatives with respect to outputs and features.
pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    tape: &Tape<T>,
    grads: &OutputGrads<T>,
) -> Result<Gradients<T>> {
    let l = &params.layout;
    let mut g = Gradients::zeros_like(params);
    let mut b = Bwd {
        p: params,
        g: &mut g,
    };
    let (mut dfp, dsk0) = b.decoder(&l.dec[0], &tape.dec[0], &grads.chi_pos);
    let (mut dfn, dsk1) = b.decoder(&l.dec[1], &tape.dec[1], &grads.chi_neg);
    if let Some(d) = &grads.f_pos {
        dfp.check_shape(d, "f_pos gradient")?;
        dfp.add_assign(d);
    }
    if let Some(d) = &grads.f_neg {
        dfn.check_shape(d, "f_neg gradient")?;
        dfn.add_assign(d);
    }
    let (mut dgp, mut dfv) = b.fuse(&l.fuse[0], &tape.fuse[0], dfp);
    let (mut dgn, dfv1) = b.fuse(&l.fuse[1], &tape.fuse[1], dfn);
    dfv.add_assign(&dfv1);
    if let Some(d) = &grads.guide_pos {
        dgp.check_shape(d, "guide_pos gradient")?;
        dgp.add_assign(d);
    }
    if let Some(d) = &grads.guide_neg {
        dgn.check_shape(d, "guide_neg gradient")?;
        dgn.add_assign(d);
    }
    b.encoder(&l.enc[1], &tape.enc[1], dgp, None);
    b.encoder(&l.enc[2], &tape.enc[2], dgn, None);
    let mut dskips = dsk0;
    for (a, c) in dskips.iter_mut().zip(&dsk1) {
        a.add_assign(c);
    }
    b.encoder(&l.enc[0], &tape.enc[0], dfv, Some(&dskips));
    Ok(g)
}

impl<T: Real> NetworkParams<T> {
    /// Exponential update of running statistics from a training pass.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, momentum: f64) {
        for s in &tape.stats {
            for (r, &m) in self.buffers[s.rmean].data.iter_mut().zip(&s.mean) {
                *r = T::from_f64((1.0 - momentum) * r.to_f64() + momentum * m);
            }
            for (r, &v) in self.buffers[s.rvar].data.iter_mut().zip(&s.var) {
                *r = T::from_f64((1.0 - momentum) * r.to_f64() + momentum * v);
            }
        }
    }
}
