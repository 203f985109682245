//! Forward model linking paramagnetic/diamagnetic sources to the measured
//! local field, R2' and net susceptibility.
//!
//! ```text
//! R2'(r) + i ΔB(r) = A(r) (χpos(r) − χneg(r)) + i D ⊗ (χpos(r) + χneg(r))
//! ```
//!
//! `χneg` is stored signed (≤ 0), so the net map is `χpos + χneg` and the
//! absolute content seen by R2' is `χpos − χneg`.

use crate::error::{Error, Result};
use crate::volume::{units, Dims, Fft3, MaskVolume, Volume3D, VoxelSize};

/// k-space dipole response `1/3 − kz²/|k|²` with `D(0) = 0`.
#[derive(Clone, Debug)]
pub struct DipoleKernel {
    dims: Dims,
    voxel_size: VoxelSize,
    values: Vec<f64>,
}

/// Signed DFT frequency of bin `i` on a length-`n` axis with spacing `d`.
fn fft_freq(i: usize, n: usize, d: f64) -> f64 {
    let signed = if i <= (n - 1) / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    signed / (n as f64 * d)
}

pub fn dipole_kernel(dims: impl Into<Dims>, voxel_size: VoxelSize) -> Result<DipoleKernel> {
    let dims = dims.into();
    if dims.nx < 2 || dims.ny < 2 || dims.nz < 2 {
        return Err(Error::invalid(format!(
            "dipole kernel needs dims >= 2 on every axis, got {:?}",
            dims.as_array()
        )));
    }
    crate::volume::validate_voxel_size(&voxel_size)?;
    let kx: Vec<f64> = (0..dims.nx)
        .map(|i| fft_freq(i, dims.nx, voxel_size[0]))
        .collect();
    let ky: Vec<f64> = (0..dims.ny)
        .map(|i| fft_freq(i, dims.ny, voxel_size[1]))
        .collect();
    let kz: Vec<f64> = (0..dims.nz)
        .map(|i| fft_freq(i, dims.nz, voxel_size[2]))
        .collect();
    let mut values = Vec::with_capacity(dims.len());
    for z in &kz {
        for y in &ky {
            for x in &kx {
                let k2 = x * x + y * y + z * z;
                values.push(if k2 == 0.0 {
                    0.0
                } else {
                    1.0 / 3.0 - z * z / k2
                });
            }
        }
    }
    Ok(DipoleKernel {
        dims,
        voxel_size,
        values,
    })
}

impl DipoleKernel {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.voxel_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `D ⊗ x` for a raw x-fastest buffer. Self-adjoint since D is real and
    /// even in k.
    pub fn apply(&self, plan: &Fft3, x: &[f64]) -> Result<Vec<f64>> {
        if plan.dims() != self.dims {
            return Err(Error::invalid("fft plan and dipole kernel dims differ"));
        }
        plan.convolve_real(x, &self.values)
    }

    pub fn convolve(&self, x: &Volume3D) -> Result<Volume3D> {
        if x.dims() != self.dims {
            return Err(Error::invalid(format!(
                "volume dims {:?} do not match kernel dims {:?}",
                x.dims().as_array(),
                self.dims.as_array()
            )));
        }
        let plan = Fft3::new(self.dims)?;
        let out = self.apply(&plan, x.data())?;
        Volume3D::from_data(self.dims, x.voxel_size(), out)
    }
}

/// Coupled paramagnetic (≥ 0) and diamagnetic (≤ 0) susceptibility maps in ppm.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePair {
    chi_pos: Volume3D,
    chi_neg: Volume3D,
}

impl SourcePair {
    pub fn new(chi_pos: Volume3D, chi_neg: Volume3D) -> Result<Self> {
        chi_pos.check_same_grid(&chi_neg, "source pair")?;
        if let Some(i) = chi_pos.data().iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(format!("chi_pos negative at voxel {i}")));
        }
        if let Some(i) = chi_neg.data().iter().position(|&v| v > 0.0) {
            return Err(Error::invalid(format!("chi_neg positive at voxel {i}")));
        }
        Ok(SourcePair {
            chi_pos: chi_pos.with_units(units::PPM),
            chi_neg: chi_neg.with_units(units::PPM),
        })
    }

    pub fn zeros(dims: impl Into<Dims>, voxel_size: VoxelSize) -> Result<Self> {
        let z = Volume3D::new(dims, voxel_size, 0.0)?;
        Ok(SourcePair {
            chi_pos: z.clone(),
            chi_neg: z,
        })
    }

    pub fn chi_pos(&self) -> &Volume3D {
        &self.chi_pos
    }

    pub fn chi_neg(&self) -> &Volume3D {
        &self.chi_neg
    }

    pub fn dims(&self) -> Dims {
        self.chi_pos.dims()
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.chi_pos.voxel_size()
    }

    pub fn into_parts(self) -> (Volume3D, Volume3D) {
        (self.chi_pos, self.chi_neg)
    }

    /// `χpos + χneg`.
    pub fn net(&self) -> Volume3D {
        self.chi_pos
            .zip_map(&self.chi_neg, |p, n| p + n)
            .expect("same grid")
    }

    /// `χpos − χneg`.
    pub fn absolute(&self) -> Volume3D {
        self.chi_pos
            .zip_map(&self.chi_neg, |p, n| p - n)
            .expect("same grid")
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<SourcePair> {
        Ok(SourcePair {
            chi_pos: self.chi_pos.crop(origin, size)?,
            chi_neg: self.chi_neg.crop(origin, size)?,
        })
    }

    pub fn quantize_f32(&self) -> SourcePair {
        SourcePair {
            chi_pos: self.chi_pos.quantize_f32(),
            chi_neg: self.chi_neg.quantize_f32(),
        }
    }
}

/// Voxel-wise decay kernel `A` in 1/(s·ppm).
#[derive(Clone, Debug, PartialEq)]
pub struct DecayKernelMap(Volume3D);

impl DecayKernelMap {
    pub fn new(a_map: Volume3D) -> Result<Self> {
        if let Some(i) = a_map.data().iter().position(|&v| v < 0.0) {
            return Err(Error::invalid(format!(
                "decay kernel negative at voxel {i}"
            )));
        }
        Ok(DecayKernelMap(a_map.with_units(units::PER_SECOND_PER_PPM)))
    }

    pub fn uniform(dims: impl Into<Dims>, voxel_size: VoxelSize, a: f64) -> Result<Self> {
        if a < 0.0 {
            return Err(Error::invalid("decay kernel must be non-negative"));
        }
        DecayKernelMap::new(Volume3D::new(dims, voxel_size, a)?)
    }

    pub fn volume(&self) -> &Volume3D {
        &self.0
    }

    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<Self> {
        Ok(DecayKernelMap(self.0.crop(origin, size)?))
    }

    pub fn quantize_f32(&self) -> Self {
        DecayKernelMap(self.0.quantize_f32())
    }
}

/// The three network inputs plus the decay kernel and mask that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionSet {
    pub local_field: Volume3D,
    pub r2_prime: Volume3D,
    pub qsm: Volume3D,
    pub a_map: DecayKernelMap,
    pub mask: MaskVolume,
}

impl AcquisitionSet {
    pub fn new(
        local_field: Volume3D,
        r2_prime: Volume3D,
        qsm: Volume3D,
        a_map: DecayKernelMap,
        mask: MaskVolume,
    ) -> Result<Self> {
        local_field.check_same_grid(&r2_prime, "acquisition r2_prime")?;
        local_field.check_same_grid(&qsm, "acquisition qsm")?;
        local_field.check_same_grid(a_map.volume(), "acquisition a_map")?;
        mask.check_matches(&local_field)?;
        if let Some(i) = r2_prime
            .data()
            .iter()
            .zip(mask.data())
            .position(|(&r, &m)| m && r < 0.0)
        {
            return Err(Error::invalid(format!(
                "r2_prime negative inside mask at voxel {i}"
            )));
        }
        Ok(AcquisitionSet {
            local_field: local_field.with_units(units::PPM),
            r2_prime: r2_prime.with_units(units::PER_SECOND),
            qsm: qsm.with_units(units::PPM),
            a_map,
            mask,
        })
    }

    pub fn dims(&self) -> Dims {
        self.local_field.dims()
    }
}

/// Local field `D ⊗ (χpos + χneg)` in ppm.
pub fn field_forward(src: &SourcePair, kernel: &DipoleKernel) -> Result<Volume3D> {
    kernel.convolve(&src.net())
}

/// `A · (χpos − χneg)` in 1/s.
pub fn r2p_forward(src: &SourcePair, a_map: &DecayKernelMap) -> Result<Volume3D> {
    src.chi_pos()
        .check_same_grid(a_map.volume(), "r2p_forward a_map")?;
    let abs = src.absolute();
    abs.zip_map(a_map.volume(), |c, a| a * c)
        .map(|v| v.with_units(units::PER_SECOND))
}

/// Synthesizes a complete acquisition from known sources.
pub fn forward_model(
    src: &SourcePair,
    a_map: &DecayKernelMap,
    mask: &MaskVolume,
) -> Result<AcquisitionSet> {
    mask.check_matches(src.chi_pos())?;
    let kernel = dipole_kernel(src.dims(), src.voxel_size())?;
    let local_field = field_forward(src, &kernel)?;
    let r2_prime = r2p_forward(src, a_map)?;
    AcquisitionSet::new(
        local_field,
        r2_prime,
        src.net(),
        a_map.clone(),
        mask.clone(),
    )
}

/// Closed-form field of a uniformly magnetized sphere (Lorentz-corrected,
/// zero inside). `center` is in voxel coordinates, `radius` in mm.
pub fn analytic_sphere_field(
    dims: impl Into<Dims>,
    voxel_size: VoxelSize,
    center: [f64; 3],
    radius: f64,
    delta_chi: f64,
) -> Result<Volume3D> {
    let dims = dims.into();
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!(
            "radius must be positive, got {radius}"
        )));
    }
    let mut out = Volume3D::new(dims, voxel_size, 0.0)?;
    let r3 = radius.powi(3);
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let [x, y, z] = dims.coords(idx);
        let dx = (x as f64 - center[0]) * voxel_size[0];
        let dy = (y as f64 - center[1]) * voxel_size[1];
        let dz = (z as f64 - center[2]) * voxel_size[2];
        let r2 = dx * dx + dy * dy + dz * dz;
        if r2 <= radius * radius {
            continue;
        }
        let r = r2.sqrt();
        let cos2 = dz * dz / r2;
        *v = delta_chi / 3.0 * r3 / (r * r2) * (3.0 * cos2 - 1.0);
    }
    Ok(out)
}

/// Sphere of susceptibility `delta_chi` with partial-volume edges estimated
/// from `supersample³` sub-voxel samples.
pub fn sphere_source(
    dims: impl Into<Dims>,
    voxel_size: VoxelSize,
    center: [f64; 3],
    radius: f64,
    delta_chi: f64,
    supersample: usize,
) -> Result<Volume3D> {
    let dims = dims.into();
    let s = supersample.max(1);
    let mut out = Volume3D::new(dims, voxel_size, 0.0)?;
    let offsets: Vec<f64> = (0..s).map(|i| (i as f64 + 0.5) / s as f64 - 0.5).collect();
    let reach = radius / voxel_size.iter().cloned().fold(f64::INFINITY, f64::min) + 1.0;
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let [x, y, z] = dims.coords(idx);
        let c = [
            x as f64 - center[0],
            y as f64 - center[1],
            z as f64 - center[2],
        ];
        if c.iter().any(|d| d.abs() > reach) {
            continue;
        }
        let mut inside = 0usize;
        for ox in &offsets {
            for oy in &offsets {
                for oz in &offsets {
                    let px = (c[0] + ox) * voxel_size[0];
                    let py = (c[1] + oy) * voxel_size[1];
                    let pz = (c[2] + oz) * voxel_size[2];
                    if px * px + py * py + pz * pz <= radius * radius {
                        inside += 1;
                    }
                }
            }
        }
        *v = delta_chi * inside as f64 / (s * s * s) as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(dims: Dims, seed: u64) -> SourcePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = (0..dims.len())
            .map(|_| rng.random_range(0.0..0.2))
            .collect();
        let n: Vec<f64> = (0..dims.len())
            .map(|_| -rng.random_range(0.0..0.1))
            .collect();
        SourcePair::new(
            Volume3D::from_data(dims, [1.0; 3], p).unwrap(),
            Volume3D::from_data(dims, [1.0; 3], n).unwrap(),
        )
        .unwrap()
    }

    fn random_a(dims: Dims, seed: u64) -> DecayKernelMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..dims.len())
            .map(|_| rng.random_range(50.0..150.0))
            .collect();
        DecayKernelMap::new(Volume3D::from_data(dims, [1.0; 3], a).unwrap()).unwrap()
    }

    #[test]
    fn dipole_kernel_reference_values() {
        let dims = Dims::cube(8);
        let d = dipole_kernel(dims, [1.0; 3]).unwrap();
        assert_eq!(d.values()[0], 0.0);
        // pure kz
        assert!((d.values()[dims.index(0, 0, 1)] + 2.0 / 3.0).abs() < 1e-15);
        // kz = 0 plane
        assert!((d.values()[dims.index(3, 2, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!(d
            .values()
            .iter()
            .all(|&v| (-2.0 / 3.0 - 1e-15..=1.0 / 3.0 + 1e-15).contains(&v)));
        assert!(dipole_kernel([1, 8, 8], [1.0; 3]).is_err());
    }

    #[test]
    fn dipole_kernel_respects_anisotropic_voxels() {
        let dims = Dims::new(8, 8, 8);
        let d = dipole_kernel(dims, [1.0, 1.0, 2.0]).unwrap();
        // kx = 1/8, kz = 1/16: 1/3 - (1/256)/(1/64 + 1/256)
        let expected = 1.0 / 3.0 - (1.0 / 256.0) / (1.0 / 64.0 + 1.0 / 256.0);
        assert!((d.values()[dims.index(1, 0, 1)] - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_and_uniform_sources_give_zero_field() {
        let dims = Dims::cube(8);
        let d = dipole_kernel(dims, [1.0; 3]).unwrap();
        let zero = SourcePair::zeros(dims, [1.0; 3]).unwrap();
        assert!(field_forward(&zero, &d)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let uniform = SourcePair::new(
            Volume3D::new(dims, [1.0; 3], 0.3).unwrap(),
            Volume3D::new(dims, [1.0; 3], -0.1).unwrap(),
        )
        .unwrap();
        assert!(field_forward(&uniform, &d)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn field_operator_is_linear_self_adjoint_and_zero_mean() {
        let dims = Dims::cube(16);
        let d = dipole_kernel(dims, [1.0; 3]).unwrap();
        let plan = Fft3::new(dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..dims.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let y: Vec<f64> = (0..dims.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (a, b) = (1.7, -0.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = d.apply(&plan, &x).unwrap();
        let fy = d.apply(&plan, &y).unwrap();
        let fc = d.apply(&plan, &combo).unwrap();
        let num: f64 = fc
            .iter()
            .zip(fx.iter().zip(&fy))
            .map(|(c, (p, q))| (c - (a * p + b * q)).powi(2))
            .sum();
        let den: f64 = fc.iter().map(|c| c * c).sum();
        assert!((num / den).sqrt() < 1e-10);

        let lhs: f64 = fx.iter().zip(&y).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.iter().zip(&fy).map(|(p, q)| p * q).sum();
        assert!(((lhs - rhs) / lhs.abs()).abs() < 1e-10);

        let mean = fx.iter().sum::<f64>() / fx.len() as f64;
        assert!(mean.abs() < 1e-14);
    }

    #[test]
    fn r2p_arithmetic() {
        let dims = Dims::cube(2);
        let src = SourcePair::new(
            Volume3D::new(dims, [1.0; 3], 0.01).unwrap(),
            Volume3D::new(dims, [1.0; 3], -0.005).unwrap(),
        )
        .unwrap();
        let a = DecayKernelMap::uniform(dims, [1.0; 3], 100.0).unwrap();
        let r = r2p_forward(&src, &a).unwrap();
        assert!(r.data().iter().all(|&v| (v - 1.5).abs() < 1e-12));

        let calc = SourcePair::new(
            Volume3D::new(dims, [1.0; 3], 0.0).unwrap(),
            Volume3D::new(dims, [1.0; 3], -0.2).unwrap(),
        )
        .unwrap();
        let r = r2p_forward(&calc, &a).unwrap();
        assert!(r.data().iter().all(|&v| (v - 20.0).abs() < 1e-12));

        let zero = SourcePair::zeros(dims, [1.0; 3]).unwrap();
        assert!(r2p_forward(&zero, &a)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn forward_model_identities() {
        let dims = Dims::cube(16);
        let src = random_pair(dims, 3);
        let a = random_a(dims, 4);
        let mask = MaskVolume::full(dims, [1.0; 3]).unwrap();
        let acq = forward_model(&src, &a, &mask).unwrap();
        for i in 0..dims.len() {
            let p = src.chi_pos().data()[i];
            let n = src.chi_neg().data()[i];
            assert_eq!(acq.qsm.data()[i], p + n);
            let lhs = acq.r2_prime.data()[i] / a.volume().data()[i] + acq.qsm.data()[i];
            assert!((lhs - 2.0 * p).abs() < 1e-12);
        }

        let zero = SourcePair::zeros(dims, [1.0; 3]).unwrap();
        let acq = forward_model(&zero, &a, &mask).unwrap();
        assert!(acq.local_field.data().iter().all(|&v| v == 0.0));
        assert!(acq.r2_prime.data().iter().all(|&v| v == 0.0));
        assert!(acq.qsm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let src = random_pair(Dims::cube(8), 1);
        let a = random_a(Dims::cube(4), 2);
        assert!(matches!(
            r2p_forward(&src, &a),
            Err(Error::InvalidArgument(_))
        ));
        let d = dipole_kernel(Dims::cube(4), [1.0; 3]).unwrap();
        assert!(field_forward(&src, &d).is_err());
        assert!(SourcePair::new(
            Volume3D::new([4, 4, 4], [1.0; 3], 0.0).unwrap(),
            Volume3D::new([4, 4, 2], [1.0; 3], 0.0).unwrap()
        )
        .is_err());
    }

    #[test]
    fn sign_invariants_are_enforced() {
        let dims = Dims::cube(2);
        let bad = SourcePair::new(
            Volume3D::new(dims, [1.0; 3], -0.1).unwrap(),
            Volume3D::new(dims, [1.0; 3], 0.0).unwrap(),
        );
        assert!(bad.is_err());
        assert!(DecayKernelMap::new(Volume3D::new(dims, [1.0; 3], -1.0).unwrap()).is_err());
    }

    #[test]
    fn analytic_sphere_reference_points() {
        let dims = Dims::cube(33);
        let c = [16.0; 3];
        let r = 4.0;
        let f = analytic_sphere_field(dims, [1.0; 3], c, r, 1.0).unwrap();
        // +z axis at 2R: (1/3)(1/8)(2)
        assert!((f.get(16, 16, 24) - 1.0 / 3.0 / 8.0 * 2.0).abs() < 1e-14);
        // equator at 2R
        assert!((f.get(24, 16, 16) + 1.0 / 3.0 / 8.0).abs() < 1e-14);
        assert_eq!(f.get(16, 16, 16), 0.0);
        assert_eq!(f.get(17, 18, 15), 0.0);
        assert!(analytic_sphere_field(dims, [1.0; 3], c, 0.0, 1.0).is_err());
    }
}
