//! Forward and backward passes of the dual-branch network.

use super::layers::*;
use super::params::{BlockH, BnH, ConvH, DecoderH, EncoderH, FuseH, Gradients, NetworkParams};
use super::real::Real;
use super::tensor::Tensor;
use crate::volume::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

/// Batch statistics of one normalization layer, for running updates.
#[derive(Clone, Debug)]
pub(crate) struct BnStat {
    pub rmean: usize,
    pub rvar: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) struct Fwd<'a, T> {
    pub p: &'a NetworkParams<T>,
    pub mode: Mode,
    pub stats: Vec<BnStat>,
}

#[derive(Debug)]
pub(crate) struct BlockTape<T> {
    conv: ConvTape<T>,
    bn: Option<BnTape<T>>,
    y: Tensor<T>,
}

#[derive(Debug)]
pub(crate) struct EncTape<T> {
    blocks: Vec<[BlockTape<T>; 2]>,
    pools: Vec<(Vec<u8>, Dims)>,
}

#[derive(Debug)]
pub(crate) struct FuseTape<T> {
    gate: ConvTape<T>,
    value_guide: ConvTape<T>,
    value_feat: ConvTape<T>,
    alpha: Tensor<T>,
    vg: Tensor<T>,
    vf: Tensor<T>,
    bn: Option<BnTape<T>>,
    blocks: [BlockTape<T>; 2],
}

#[derive(Debug)]
pub(crate) struct DecTape<T> {
    up_inputs: Vec<Tensor<T>>,
    blocks: Vec<[BlockTape<T>; 2]>,
    head_input: Tensor<T>,
}

/// Intermediate values of the fusion stage.
#[derive(Clone, Debug)]
pub struct FuseParts<T> {
    /// Gate activations in (0, 1).
    pub alpha: Tensor<T>,
    /// conv(guide)·α + conv(f_v)·(1 − α), before normalization.
    pub mix: Tensor<T>,
    pub value_guide: Tensor<T>,
    pub value_feat: Tensor<T>,
    pub output: Tensor<T>,
}

impl<'a, T: Real> Fwd<'a, T> {
    pub fn new(p: &'a NetworkParams<T>, mode: Mode) -> Self {
        Fwd {
            p,
            mode,
            stats: Vec::new(),
        }
    }

    fn conv(&self, h: &ConvH, x: &Tensor<T>) -> (Tensor<T>, ConvTape<T>) {
        conv3_forward(x, self.p.p(h.w), self.p.p(h.b), h.cout)
    }

    fn bn(&mut self, h: &BnH, x: &Tensor<T>) -> (Tensor<T>, Option<BnTape<T>>) {
        match self.mode {
            Mode::Train => {
                let (y, t) = bn_train(x, self.p.p(h.gamma), self.p.p(h.beta));
                self.stats.push(BnStat {
                    rmean: h.rmean,
                    rvar: h.rvar,
                    mean: t.mean.clone(),
                    var: t.var_unbiased.clone(),
                });
                (y, Some(t))
            }
            Mode::Eval => (
                bn_eval(
                    x,
                    self.p.p(h.gamma),
                    self.p.p(h.beta),
                    self.p.buf(h.rmean),
                    self.p.buf(h.rvar),
                ),
                None,
            ),
        }
    }

    fn block(&mut self, h: &BlockH, x: &Tensor<T>) -> BlockTape<T> {
        let (c, conv) = self.conv(&h.conv, x);
        let (mut y, bn) = self.bn(&h.bn, &c);
        relu_inplace(&mut y);
        BlockTape { conv, bn, y }
    }

    fn double(&mut self, h: &[BlockH; 2], x: &Tensor<T>) -> [BlockTape<T>; 2] {
        let a = self.block(&h[0], x);
        let b = self.block(&h[1], &a.y);
        [a, b]
    }

    /// Returns (bottleneck, pre-pool skips, tape).
    pub fn encoder(
        &mut self,
        h: &EncoderH,
        x: &Tensor<T>,
    ) -> (Tensor<T>, Vec<Tensor<T>>, EncTape<T>) {
        let mut blocks = Vec::with_capacity(3);
        let mut pools = Vec::with_capacity(3);
        let mut skips = Vec::with_capacity(3);
        let mut cur = x.clone();
        for level in &h.blocks {
            let t = self.double(level, &cur);
            let act = &t[1].y;
            let (pooled, arg) = maxpool_forward(act);
            pools.push((arg, act.dims()));
            skips.push(act.clone());
            blocks.push(t);
            cur = pooled;
        }
        (cur, skips, EncTape { blocks, pools })
    }

    pub fn fuse(
        &mut self,
        h: &FuseH,
        guide: &Tensor<T>,
        fv: &Tensor<T>,
    ) -> (FuseParts<T>, FuseTape<T>) {
        let (gl, gate) = self.conv(&h.gate, guide);
        let alpha = gl.map(sigmoid);
        let (vg, value_guide) = self.conv(&h.value_guide, guide);
        let (vf, value_feat) = self.conv(&h.value_feat, fv);
        let mut mix = vg.clone();
        for ((m, &f), &a) in mix.data_mut().iter_mut().zip(vf.data()).zip(alpha.data()) {
            *m = *m * a + f * (T::ONE - a);
        }
        let (normed, bn) = self.bn(&h.bn, &mix);
        let blocks = self.double(&h.blocks, &normed);
        let output = blocks[1].y.clone();
        (
            FuseParts {
                alpha: alpha.clone(),
                mix,
                value_guide: vg.clone(),
                value_feat: vf.clone(),
                output,
            },
            FuseTape {
                gate,
                value_guide,
                value_feat,
                alpha,
                vg,
                vf,
                bn,
                blocks,
            },
        )
    }

    pub fn decoder(
        &mut self,
        h: &DecoderH,
        task: &Tensor<T>,
        skips: &[Tensor<T>],
    ) -> (Tensor<T>, DecTape<T>) {
        let mut up_inputs = Vec::with_capacity(3);
        let mut blocks = Vec::with_capacity(3);
        let mut cur = task.clone();
        for l in 0..3 {
            let up = upconv_forward(
                &cur,
                self.p.p(h.ups[l].w),
                self.p.p(h.ups[l].b),
                h.ups[l].cout,
            );
            let cat =
                Tensor::concat(&up, &skips[2 - l]).expect("decoder skip shape checked by caller");
            up_inputs.push(cur);
            let t = self.double(&h.blocks[l], &cat);
            cur = t[1].y.clone();
            blocks.push(t);
        }
        let out = conv1_forward(&cur, self.p.p(h.head.w), self.p.p(h.head.b), 1);
        (
            out,
            DecTape {
                up_inputs,
                blocks,
                head_input: cur,
            },
        )
    }
}

pub(crate) struct Bwd<'a, T> {
    pub p: &'a NetworkParams<T>,
    pub g: &'a mut Gradients<T>,
}

impl<T: Real> Bwd<'_, T> {
    fn conv(
        &mut self,
        h: &ConvH,
        tape: &ConvTape<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (dw, db) = self.g.pair(h.w, h.b);
        conv3_backward(dy, tape, self.p.p(h.w), dw, db, need_dx)
    }

    fn bn(&mut self, h: &BnH, tape: &Option<BnTape<T>>, dy: &Tensor<T>) -> Tensor<T> {
        let tape = tape
            .as_ref()
            .expect("backward requires a training-mode forward");
        let (dg, db) = self.g.pair(h.gamma, h.beta);
        bn_backward(dy, tape, self.p.p(h.gamma), dg, db)
    }

    fn block(
        &mut self,
        h: &BlockH,
        t: &BlockTape<T>,
        mut dy: Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        relu_backward(&mut dy, &t.y);
        let d = self.bn(&h.bn, &t.bn, &dy);
        self.conv(&h.conv, &t.conv, &d, need_dx)
    }

    fn double(
        &mut self,
        h: &[BlockH; 2],
        t: &[BlockTape<T>; 2],
        dy: Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let d = self.block(&h[1], &t[1], dy, true).expect("inner gradient");
        self.block(&h[0], &t[0], d, need_dx)
    }

    /// Backpropagates into encoder weights; no input gradient is formed.
    pub fn encoder(
        &mut self,
        h: &EncoderH,
        t: &EncTape<T>,
        d_bottleneck: Tensor<T>,
        d_skips: Option<&[Tensor<T>]>,
    ) {
        let mut d = d_bottleneck;
        for l in (0..3).rev() {
            let (arg, dims) = &t.pools[l];
            let mut dact = maxpool_backward(&d, arg, *dims);
            if let Some(s) = d_skips {
                dact.add_assign(&s[l]);
            }
            match self.double(&h.blocks[l], &t.blocks[l], dact, l > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    /// Returns (d_guide, d_fv).
    pub fn fuse(&mut self, h: &FuseH, t: &FuseTape<T>, dy: Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let dn = self
            .double(&h.blocks, &t.blocks, dy, true)
            .expect("fusion gradient");
        let dmix = self.bn(&h.bn, &t.bn, &dn);
        let mut dvg = dmix.clone();
        let mut dvf = dmix.clone();
        let mut dgl = dmix.clone();
        for i in 0..dmix.data().len() {
            let a = t.alpha.data()[i];
            let g = dmix.data()[i];
            dvg.data_mut()[i] = g * a;
            dvf.data_mut()[i] = g * (T::ONE - a);
            dgl.data_mut()[i] = g * (t.vg.data()[i] - t.vf.data()[i]) * a * (T::ONE - a);
        }
        let mut dguide = self
            .conv(&h.gate, &t.gate, &dgl, true)
            .expect("gate gradient");
        dguide.add_assign(
            &self
                .conv(&h.value_guide, &t.value_guide, &dvg, true)
                .expect("value gradient"),
        );
        let dfv = self
            .conv(&h.value_feat, &t.value_feat, &dvf, true)
            .expect("feature gradient");
        (dguide, dfv)
    }

    /// Returns (d_task, d_skips by scale).
    pub fn decoder(
        &mut self,
        h: &DecoderH,
        t: &DecTape<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Vec<Tensor<T>>) {
        let (dw, db) = self.g.pair(h.head.w, h.head.b);
        let mut d = conv1_backward(dy, &t.head_input, self.p.p(h.head.w), dw, db);
        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None, None, None];
        for l in (0..3).rev() {
            let dcat = self
                .double(&h.blocks[l], &t.blocks[l], d, true)
                .expect("decoder gradient");
            let (dup, dskip) = dcat.split(h.ups[l].cout);
            d_skips[2 - l] = Some(dskip);
            let (dw, db) = self.g.pair(h.ups[l].w, h.ups[l].b);
            d = upconv_backward(&dup, &t.up_inputs[l], self.p.p(h.ups[l].w), dw, db);
        }
        (
            d,
            d_skips
                .into_iter()
                .map(|s| s.expect("all scales"))
                .collect(),
        )
    }
}
