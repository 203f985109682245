use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Dims;
use crate::error::{Error, Result};

/// Separable 3D DFT over an x-fastest grid.
///
/// The forward transform is unnormalized; the inverse carries the full
/// `1 / (nx * ny * nz)` factor. Every spectral kernel in the crate assumes
/// this convention.
#[derive(Clone)]
pub struct Fft3 {
    dims: Dims,
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
}

impl std::fmt::Debug for Fft3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft3").field("dims", &self.dims).finish()
    }
}

impl Fft3 {
    pub fn new(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let mut planner = FftPlanner::new();
        let n = dims.as_array();
        Ok(Fft3 {
            dims,
            fwd: n.map(|len| planner.plan_fft_forward(len)),
            inv: n.map(|len| planner.plan_fft_inverse(len)),
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn forward(&self, data: &mut [Complex64]) -> Result<()> {
        self.check(data)?;
        self.run(data, &self.fwd);
        Ok(())
    }

    pub fn inverse(&self, data: &mut [Complex64]) -> Result<()> {
        self.check(data)?;
        self.run(data, &self.inv);
        let scale = 1.0 / self.dims.len() as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
        Ok(())
    }

    /// Spectral filtering of a real field: `real(ifft(kernel * fft(x)))`.
    pub fn convolve_real(&self, x: &[f64], kernel: &[f64]) -> Result<Vec<f64>> {
        if kernel.len() != self.dims.len() {
            return Err(Error::invalid(format!(
                "kernel length {} does not match plan dims {:?}",
                kernel.len(),
                self.dims.as_array()
            )));
        }
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf)?;
        for (b, &k) in buf.iter_mut().zip(kernel) {
            *b *= k;
        }
        self.inverse(&mut buf)?;
        Ok(buf.into_iter().map(|c| c.re).collect())
    }

    fn check(&self, data: &[Complex64]) -> Result<()> {
        if data.len() != self.dims.len() {
            return Err(Error::invalid(format!(
                "buffer length {} does not match plan dims {:?}",
                data.len(),
                self.dims.as_array()
            )));
        }
        Ok(())
    }

    fn run(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        let Dims { nx, ny, nz } = self.dims;

        // x lines are contiguous
        let mut scratch = vec![Complex64::default(); plans[0].get_inplace_scratch_len()];
        for line in data.chunks_exact_mut(nx) {
            plans[0].process_with_scratch(line, &mut scratch);
        }

        let mut line = Vec::with_capacity(ny.max(nz));
        for (axis, len, stride) in [(1usize, ny, nx), (2, nz, nx * ny)] {
            if len == 1 {
                continue;
            }
            let plan = &plans[axis];
            scratch.resize(plan.get_inplace_scratch_len(), Complex64::default());
            let outer = self.dims.len() / len;
            for o in 0..outer {
                // base offset of this line
                let base = if axis == 1 {
                    (o % nx) + (o / nx) * nx * ny
                } else {
                    o
                };
                line.clear();
                line.extend((0..len).map(|i| data[base + i * stride]));
                plan.process_with_scratch(&mut line, &mut scratch);
                for (i, v) in line.iter().enumerate() {
                    data[base + i * stride] = *v;
                }
            }
        }
    }
}

/// Forward 3D DFT (unnormalized).
pub fn fft3(dims: Dims, input: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = input.to_vec();
    Fft3::new(dims)?.forward(&mut out)?;
    Ok(out)
}

/// Inverse 3D DFT including the `1/N` factor.
pub fn ifft3(dims: Dims, input: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = input.to_vec();
    Fft3::new(dims)?.inverse(&mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_complex(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    // O(N^2) direct DFT, independent of the separable implementation.
    fn direct_dft(dims: Dims, x: &[Complex64]) -> Vec<Complex64> {
        let [nx, ny, nz] = dims.as_array();
        let mut out = vec![Complex64::default(); dims.len()];
        for (k, o) in out.iter_mut().enumerate() {
            let [kx, ky, kz] = dims.coords(k);
            let mut acc = Complex64::default();
            for (i, v) in x.iter().enumerate() {
                let [ix, iy, iz] = dims.coords(i);
                let phase = -2.0
                    * PI
                    * ((kx * ix) as f64 / nx as f64
                        + (ky * iy) as f64 / ny as f64
                        + (kz * iz) as f64 / nz as f64);
                acc += v * Complex64::from_polar(1.0, phase);
            }
            *o = acc;
        }
        out
    }

    #[test]
    fn constant_volume_has_only_dc() {
        let dims = Dims::new(4, 6, 5);
        let c = 2.5;
        let x = vec![Complex64::new(c, 0.0); dims.len()];
        let s = fft3(dims, &x).unwrap();
        assert!((s[0].re - c * dims.len() as f64).abs() < 1e-9);
        assert!(s[0].im.abs() < 1e-9);
        assert!(s[1..].iter().all(|v| v.norm() < 1e-9));
    }

    #[test]
    fn round_trip_is_identity() {
        let dims = Dims::cube(8);
        let x = random_complex(dims.len(), 1);
        let back = ifft3(dims, &fft3(dims, &x).unwrap()).unwrap();
        let num: f64 = x.iter().zip(&back).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = x.iter().map(|a| a.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn parseval_matches_direct_summation() {
        let dims = Dims::cube(8);
        let x = random_complex(dims.len(), 2);
        let spectrum = direct_dft(dims, &x);
        let lhs: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let rhs: f64 = spectrum.iter().map(|v| v.norm_sqr()).sum::<f64>() / dims.len() as f64;
        assert!(((lhs - rhs) / lhs).abs() < 1e-10);

        let fast = fft3(dims, &x).unwrap();
        let err: f64 = fast
            .iter()
            .zip(&spectrum)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let norm: f64 = spectrum.iter().map(|a| a.norm_sqr()).sum();
        assert!((err / norm).sqrt() < 1e-10);
    }

    #[test]
    fn anisotropic_grid_matches_direct() {
        let dims = Dims::new(3, 5, 4);
        let x = random_complex(dims.len(), 3);
        let fast = fft3(dims, &x).unwrap();
        let slow = direct_dft(dims, &x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn mismatched_buffer_is_rejected() {
        let plan = Fft3::new(Dims::cube(4)).unwrap();
        let mut buf = vec![Complex64::default(); 63];
        assert!(matches!(
            plan.forward(&mut buf),
            Err(Error::InvalidArgument(_))
        ));
        assert!(plan.inverse(&mut buf).is_err());
    }
}
