//! Batched layer kernels with explicit backward passes.

use super::real::{gemm, Real, Strides};
use super::tensor::Tensor;
use crate::volume::Dims;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Positions per im2col tile.
const TILE: usize = 512;

/// Zero-padded (one voxel per side) flat geometry of a grid.
///
/// In padded-flat indexing a 3³ neighbourhood is a fixed set of 27 offsets,
/// so every im2col row is a contiguous copy.
#[derive(Clone, Debug)]
pub(crate) struct Geo {
    nx: usize,
    ny: usize,
    nz: usize,
    px: usize,
    pxy: usize,
    np: usize,
    q0: usize,
    q1: usize,
    offs: [isize; 27],
}

impl Geo {
    pub(crate) fn new(d: Dims) -> Geo {
        let [nx, ny, nz] = d.as_array();
        let px = nx + 2;
        let pxy = px * (ny + 2);
        let np = pxy * (nz + 2);
        let q0 = pxy + px + 1;
        let q1 = nz * pxy + ny * px + nx + 1;
        let mut offs = [0isize; 27];
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    offs[(dz * 3 + dy) * 3 + dx] = (dz as isize - 1) * pxy as isize
                        + (dy as isize - 1) * px as isize
                        + dx as isize
                        - 1;
                }
            }
        }
        Geo {
            nx,
            ny,
            nz,
            px,
            pxy,
            np,
            q0,
            q1,
            offs,
        }
    }

    fn spatial(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Writes the interior of `channels` padded blocks; borders are left untouched.
    fn pad_into<T: Real>(&self, x: &[T], channels: usize, xp: &mut [T]) {
        let n = self.spatial();
        for c in 0..channels {
            let src = &x[c * n..(c + 1) * n];
            let dst = &mut xp[c * self.np..(c + 1) * self.np];
            for z in 0..self.nz {
                for y in 0..self.ny {
                    let s = (z * self.ny + y) * self.nx;
                    let d = (z + 1) * self.pxy + (y + 1) * self.px + 1;
                    dst[d..d + self.nx].copy_from_slice(&src[s..s + self.nx]);
                }
            }
        }
    }

    fn unpad_into<T: Real>(&self, xp: &[T], channels: usize, x: &mut [T], bias: Option<&[T]>) {
        let n = self.spatial();
        for c in 0..channels {
            let src = &xp[c * self.np..(c + 1) * self.np];
            let dst = &mut x[c * n..(c + 1) * n];
            let b = bias.map_or(T::ZERO, |b| b[c]);
            for z in 0..self.nz {
                for y in 0..self.ny {
                    let d = (z * self.ny + y) * self.nx;
                    let s = (z + 1) * self.pxy + (y + 1) * self.px + 1;
                    for (o, &v) in dst[d..d + self.nx].iter_mut().zip(&src[s..s + self.nx]) {
                        *o = v + b;
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, xp: &[T], channels: usize, t0: usize, tl: usize, col: &mut [T]) {
        for c in 0..channels {
            let base = (c * self.np + t0) as isize;
            for (k, &off) in self.offs.iter().enumerate() {
                let src = (base + off) as usize;
                let r = c * 27 + k;
                col[r * tl..(r + 1) * tl].copy_from_slice(&xp[src..src + tl]);
            }
        }
    }

    /// `yp[co, q] = sum_{ci,k} w[co, ci, k] * xp[ci, q + off_k]` over the padded
    /// interior span. Border entries of `yp` inside the span receive garbage.
    fn conv_core<T: Real>(
        &self,
        xp: &[T],
        cin: usize,
        w: &[T],
        cout: usize,
        yp: &mut [T],
        col: &mut Vec<T>,
    ) {
        let kdim = 27 * cin;
        if col.len() < kdim * TILE {
            col.resize(kdim * TILE, T::ZERO);
        }
        let mut t0 = self.q0;
        while t0 < self.q1 {
            let tl = TILE.min(self.q1 - t0);
            self.im2col(xp, cin, t0, tl, col);
            gemm(
                tl,
                kdim,
                cout,
                &col[..kdim * tl],
                Strides(1, tl as isize),
                w,
                Strides(1, kdim as isize),
                T::ZERO,
                &mut yp[t0..],
                Strides(1, self.np as isize),
            );
            t0 += tl;
        }
    }
}

/// Saved padded input of a 3³ convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvTape<T> {
    xp: Vec<T>,
    cin: usize,
    dims: Dims,
}

/// 3³ convolution, zero padding 1, weights `[cout, cin, 27]`.
pub(crate) fn conv3_forward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    b: &[T],
    cout: usize,
) -> (Tensor<T>, ConvTape<T>) {
    let geo = Geo::new(x.dims());
    let cin = x.channels();
    debug_assert_eq!(w.len(), cout * cin * 27);
    let mut xp = vec![T::ZERO; x.batch() * cin * geo.np];
    let mut yp = vec![T::ZERO; cout * geo.np];
    let mut out = Tensor::zeros(x.batch(), cout, x.dims());
    let mut col = Vec::new();
    for s in 0..x.batch() {
        let xs = &mut xp[s * cin * geo.np..(s + 1) * cin * geo.np];
        geo.pad_into(x.sample(s), cin, xs);
        geo.conv_core(xs, cin, w, cout, &mut yp, &mut col);
        geo.unpad_into(&yp, cout, out.sample_mut(s), Some(b));
    }
    (
        out,
        ConvTape {
            xp,
            cin,
            dims: x.dims(),
        },
    )
}

/// Accumulates `dw`, `db`; returns the input gradient when requested.
pub(crate) fn conv3_backward<T: Real>(
    dy: &Tensor<T>,
    tape: &ConvTape<T>,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let geo = Geo::new(tape.dims);
    let cin = tape.cin;
    let cout = dy.channels();
    let kdim = 27 * cin;
    let n = geo.spatial();
    let wflip: Vec<T> = if need_dx {
        let mut f = vec![T::ZERO; w.len()];
        for co in 0..cout {
            for ci in 0..cin {
                for k in 0..27 {
                    f[(ci * cout + co) * 27 + k] = w[(co * cin + ci) * 27 + 26 - k];
                }
            }
        }
        f
    } else {
        Vec::new()
    };
    let mut dyp = vec![T::ZERO; cout * geo.np];
    let mut dxp = vec![T::ZERO; if need_dx { cin * geo.np } else { 0 }];
    let mut dx = need_dx.then(|| Tensor::zeros(dy.batch(), cin, tape.dims));
    let mut col = vec![T::ZERO; 27 * cin.max(cout) * TILE];
    for s in 0..dy.batch() {
        let dys = dy.sample(s);
        for co in 0..cout {
            let mut acc = T::ZERO;
            for &v in &dys[co * n..(co + 1) * n] {
                acc += v;
            }
            db[co] += acc;
        }
        geo.pad_into(dys, cout, &mut dyp);
        let xs = &tape.xp[s * cin * geo.np..(s + 1) * cin * geo.np];
        let mut t0 = geo.q0;
        while t0 < geo.q1 {
            let tl = TILE.min(geo.q1 - t0);
            geo.im2col(xs, cin, t0, tl, &mut col);
            gemm(
                kdim,
                tl,
                cout,
                &col[..kdim * tl],
                Strides(tl as isize, 1),
                &dyp[t0..],
                Strides(1, geo.np as isize),
                T::ONE,
                dw,
                Strides(1, kdim as isize),
            );
            t0 += tl;
        }
        if let Some(dx) = dx.as_mut() {
            geo.conv_core(&dyp, cout, &wflip, cin, &mut dxp, &mut col);
            geo.unpad_into(&dxp, cin, dx.sample_mut(s), None);
        }
    }
    dx
}

/// Per-channel batch statistics and normalized activations.
#[derive(Clone, Debug)]
pub(crate) struct BnTape<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    pub(crate) mean: Vec<f64>,
    /// Unbiased variance, used for running estimates.
    pub(crate) var_unbiased: Vec<f64>,
}

pub(crate) fn bn_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> (Tensor<T>, BnTape<T>) {
    let c = x.channels();
    let m = (x.batch() * x.spatial()) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..x.batch() {
            s += x.channel(b, ch).iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for b in 0..x.batch() {
            ss += x
                .channel(b, ch)
                .iter()
                .map(|v| (v.to_f64() - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.batch(), c, x.dims());
    let mut y = Tensor::zeros(x.batch(), c, x.dims());
    let n = x.spatial();
    for b in 0..x.batch() {
        for ch in 0..c {
            let off = (b * c + ch) * n;
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, bt) = (gamma[ch], beta[ch]);
            let src = x.channel(b, ch);
            for i in 0..n {
                let h = T::from_f64((src[i].to_f64() - mu) * is);
                xhat.data_mut()[off + i] = h;
                y.data_mut()[off + i] = g * h + bt;
            }
        }
    }
    let var_unbiased = var.iter().map(|v| v * m / (m - 1.0).max(1.0)).collect();
    (
        y,
        BnTape {
            xhat: xhat.into_data(),
            inv_std,
            mean,
            var_unbiased,
        },
    )
}

pub(crate) fn bn_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    rmean: &[T],
    rvar: &[T],
) -> Tensor<T> {
    let c = x.channels();
    let n = x.spatial();
    let mut y = x.clone();
    for b in 0..x.batch() {
        for ch in 0..c {
            let is = 1.0 / (rvar[ch].to_f64() + BN_EPS).sqrt();
            let scale = T::from_f64(gamma[ch].to_f64() * is);
            let shift =
                T::from_f64(beta[ch].to_f64() - gamma[ch].to_f64() * rmean[ch].to_f64() * is);
            let off = (b * c + ch) * n;
            for v in &mut y.data_mut()[off..off + n] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

pub(crate) fn bn_backward<T: Real>(
    dy: &Tensor<T>,
    tape: &BnTape<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let c = dy.channels();
    let n = dy.spatial();
    let m = (dy.batch() * n) as f64;
    let mut dx = Tensor::zeros(dy.batch(), c, dy.dims());
    for ch in 0..c {
        let mut sdy = 0.0;
        let mut sdyx = 0.0;
        for b in 0..dy.batch() {
            let off = (b * c + ch) * n;
            for (g, h) in dy.data()[off..off + n].iter().zip(&tape.xhat[off..off + n]) {
                sdy += g.to_f64();
                sdyx += g.to_f64() * h.to_f64();
            }
        }
        dgamma[ch] += T::from_f64(sdyx);
        dbeta[ch] += T::from_f64(sdy);
        let k = gamma[ch].to_f64() * tape.inv_std[ch] / m;
        for b in 0..dy.batch() {
            let off = (b * c + ch) * n;
            for i in off..off + n {
                let v = k * (m * dy.data()[i].to_f64() - sdy - tape.xhat[i].to_f64() * sdyx);
                dx.data_mut()[i] = T::from_f64(v);
            }
        }
    }
    dx
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// Masks `dy` by the positive entries of the ReLU output `y`.
pub(crate) fn relu_backward<T: Real>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if !(v > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    let x = v.to_f64();
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    T::from_f64(s)
}

pub(crate) fn half_dims(d: Dims) -> Dims {
    let [x, y, z] = d.as_array();
    Dims::new(x / 2, y / 2, z / 2)
}

pub(crate) fn double_dims(d: Dims) -> Dims {
    let [x, y, z] = d.as_array();
    Dims::new(x * 2, y * 2, z * 2)
}

/// 2³ max pooling with stride 2; returns winner offsets for backward.
pub(crate) fn maxpool_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let d = x.dims();
    let [nx, ny, _] = d.as_array();
    let h = half_dims(d);
    let [hx, hy, hz] = h.as_array();
    let mut out = Tensor::zeros(x.batch(), x.channels(), h);
    let mut arg = vec![0u8; out.data().len()];
    let mut o = 0;
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let src = x.channel(b, c);
            for z in 0..hz {
                for y in 0..hy {
                    for xx in 0..hx {
                        let mut best = T::ZERO;
                        let mut bi = 0u8;
                        for k in 0..8u8 {
                            let (kz, ky, kx) =
                                ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                            let v = src[((2 * z + kz) * ny + 2 * y + ky) * nx + 2 * xx + kx];
                            if k == 0 || v > best {
                                best = v;
                                bi = k;
                            }
                        }
                        out.data_mut()[o] = best;
                        arg[o] = bi;
                        o += 1;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(dy: &Tensor<T>, arg: &[u8], in_dims: Dims) -> Tensor<T> {
    let [nx, ny, _] = in_dims.as_array();
    let [hx, hy, hz] = dy.dims().as_array();
    let mut dx = Tensor::zeros(dy.batch(), dy.channels(), in_dims);
    let n_in = in_dims.len();
    let mut o = 0;
    for bc in 0..dy.batch() * dy.channels() {
        let base = bc * n_in;
        for z in 0..hz {
            for y in 0..hy {
                for xx in 0..hx {
                    let k = arg[o];
                    let (kz, ky, kx) =
                        ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                    dx.data_mut()[base + ((2 * z + kz) * ny + 2 * y + ky) * nx + 2 * xx + kx] +=
                        dy.data()[o];
                    o += 1;
                }
            }
        }
    }
    dx
}

/// 2³ transposed convolution with stride 2, weights `[cin, cout, 8]`.
pub(crate) fn upconv_forward<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize) -> Tensor<T> {
    let cin = x.channels();
    let s = x.spatial();
    let [nx, ny, nz] = x.dims().as_array();
    let od = double_dims(x.dims());
    let (ox, oy) = (2 * nx, 2 * ny);
    let mut out = Tensor::zeros(x.batch(), cout, od);
    let mut zbuf = vec![T::ZERO; cout * 8 * s];
    let no = od.len();
    for bi in 0..x.batch() {
        gemm(
            cout * 8,
            cin,
            s,
            w,
            Strides(1, (cout * 8) as isize),
            x.sample(bi),
            Strides(s as isize, 1),
            T::ZERO,
            &mut zbuf,
            Strides(s as isize, 1),
        );
        let dst = out.sample_mut(bi);
        for co in 0..cout {
            for k in 0..8 {
                let (kz, ky, kx) = (k >> 2, (k >> 1) & 1, k & 1);
                let row = &zbuf[(co * 8 + k) * s..(co * 8 + k + 1) * s];
                for z in 0..nz {
                    for y in 0..ny {
                        for xx in 0..nx {
                            dst[co * no + ((2 * z + kz) * oy + 2 * y + ky) * ox + 2 * xx + kx] =
                                row[(z * ny + y) * nx + xx] + b[co];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upconv_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Tensor<T> {
    let cin = x.channels();
    let cout = dy.channels();
    let s = x.spatial();
    let [nx, ny, nz] = x.dims().as_array();
    let (ox, oy) = (2 * nx, 2 * ny);
    let no = dy.spatial();
    let mut dz = vec![T::ZERO; cout * 8 * s];
    let mut dx = Tensor::zeros(x.batch(), cin, x.dims());
    for bi in 0..x.batch() {
        let g = dy.sample(bi);
        for co in 0..cout {
            let mut acc = T::ZERO;
            for &v in &g[co * no..(co + 1) * no] {
                acc += v;
            }
            db[co] += acc;
            for k in 0..8 {
                let (kz, ky, kx) = (k >> 2, (k >> 1) & 1, k & 1);
                let row = &mut dz[(co * 8 + k) * s..(co * 8 + k + 1) * s];
                for z in 0..nz {
                    for y in 0..ny {
                        for xx in 0..nx {
                            row[(z * ny + y) * nx + xx] =
                                g[co * no + ((2 * z + kz) * oy + 2 * y + ky) * ox + 2 * xx + kx];
                        }
                    }
                }
            }
        }
        gemm(
            cin,
            cout * 8,
            s,
            w,
            Strides((cout * 8) as isize, 1),
            &dz,
            Strides(s as isize, 1),
            T::ZERO,
            dx.sample_mut(bi),
            Strides(s as isize, 1),
        );
        gemm(
            cout * 8,
            s,
            cin,
            &dz,
            Strides(s as isize, 1),
            x.sample(bi),
            Strides(1, s as isize),
            T::ONE,
            dw,
            Strides(1, (cout * 8) as isize),
        );
    }
    dx
}

/// 1×1×1 convolution, weights `[cout, cin]`.
pub(crate) fn conv1_forward<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], cout: usize) -> Tensor<T> {
    let cin = x.channels();
    let s = x.spatial();
    let mut out = Tensor::zeros(x.batch(), cout, x.dims());
    for bi in 0..x.batch() {
        let dst = out.sample_mut(bi);
        for co in 0..cout {
            dst[co * s..(co + 1) * s].fill(b[co]);
        }
        gemm(
            cout,
            cin,
            s,
            w,
            Strides(cin as isize, 1),
            x.sample(bi),
            Strides(s as isize, 1),
            T::ONE,
            dst,
            Strides(s as isize, 1),
        );
    }
    out
}

pub(crate) fn conv1_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
) -> Tensor<T> {
    let cin = x.channels();
    let cout = dy.channels();
    let s = x.spatial();
    let mut dx = Tensor::zeros(x.batch(), cin, x.dims());
    for bi in 0..x.batch() {
        let g = dy.sample(bi);
        for co in 0..cout {
            let mut acc = T::ZERO;
            for &v in &g[co * s..(co + 1) * s] {
                acc += v;
            }
            db[co] += acc;
        }
        gemm(
            cin,
            cout,
            s,
            w,
            Strides(1, cin as isize),
            g,
            Strides(s as isize, 1),
            T::ZERO,
            dx.sample_mut(bi),
            Strides(s as isize, 1),
        );
        gemm(
            cout,
            s,
            cin,
            g,
            Strides(s as isize, 1),
            x.sample(bi),
            Strides(1, s as isize),
            T::ONE,
            dw,
            Strides(cin as isize, 1),
        );
    }
    dx
}
