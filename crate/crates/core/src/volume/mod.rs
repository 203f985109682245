//! Volumetric grid types shared by every other module.
//!
//! Voxels are stored x-fastest (`x + nx * (y + ny * z)`), the main field
//! direction is always the third grid axis.

mod fft;
mod svol;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fft::{fft3, ifft3, Fft3};
pub use svol::{
    decode_svol, encode_svol, read_mask, read_svol, read_svol_header, write_mask, write_svol,
    SvolHeader, KIND_MASK, KIND_SCALAR, SVOL_MAGIC,
};

pub mod units {
    pub const PPM: &str = "ppm";
    pub const PER_SECOND: &str = "1/s";
    pub const PER_SECOND_PER_PPM: &str = "1/(s*ppm)";
    pub const NORMALIZED: &str = "normalized";
    pub const DIMENSIONLESS: &str = "1";
}

/// Grid extent along x, y and z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        [x, y, z]
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::invalid(format!(
                "dimensions must be positive, got {:?}",
                self.as_array()
            )));
        }
        Ok(())
    }
}

impl From<[usize; 3]> for Dims {
    fn from(d: [usize; 3]) -> Self {
        Dims::new(d[0], d[1], d[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

/// Voxel edge lengths in millimetres.
pub type VoxelSize = [f64; 3];

pub(crate) fn validate_voxel_size(vs: &VoxelSize) -> Result<()> {
    if vs.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::invalid(format!(
            "voxel size must be finite and positive, got {vs:?}"
        )));
    }
    Ok(())
}

/// A real scalar field on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    voxel_size: VoxelSize,
    units: String,
    data: Vec<f64>,
}

impl Volume3D {
    /// Volume filled with a constant.
    pub fn new(dims: impl Into<Dims>, voxel_size: VoxelSize, fill: f64) -> Result<Self> {
        let dims = dims.into();
        dims.validate()?;
        validate_voxel_size(&voxel_size)?;
        if !fill.is_finite() {
            return Err(Error::invalid("fill value must be finite"));
        }
        Ok(Volume3D {
            dims,
            voxel_size,
            units: units::PPM.to_owned(),
            data: vec![fill; dims.len()],
        })
    }

    pub fn from_data(dims: impl Into<Dims>, voxel_size: VoxelSize, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        dims.validate()?;
        validate_voxel_size(&voxel_size)?;
        if data.len() != dims.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims.as_array()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at voxel {i}")));
        }
        Ok(Volume3D {
            dims,
            voxel_size,
            units: units::PPM.to_owned(),
            data,
        })
    }

    pub fn zeros_like(other: &Volume3D) -> Self {
        Volume3D {
            dims: other.dims,
            voxel_size: other.voxel_size,
            units: other.units.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = units.into();
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.voxel_size
    }

    pub fn units(&self) -> &str {
        &self.units
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_same_grid(&self, other: &Volume3D, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims.as_array(),
                other.dims.as_array()
            )));
        }
        Ok(())
    }

    /// Applies `f` voxel-wise; non-finite results are rejected.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume3D> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Volume3D::from_data(self.dims, self.voxel_size, data)
            .map(|v| v.with_units(self.units.clone()))
    }

    /// Combines two volumes on the same grid voxel-wise.
    pub fn zip_map(&self, other: &Volume3D, f: impl Fn(f64, f64) -> f64) -> Result<Volume3D> {
        self.check_same_grid(other, "zip_map")?;
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Volume3D::from_data(self.dims, self.voxel_size, data)
            .map(|v| v.with_units(self.units.clone()))
    }

    /// Extracts the sub-block starting at `origin` with extent `size`.
    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<Volume3D> {
        let d = self.dims;
        if origin[0] + size.nx > d.nx || origin[1] + size.ny > d.ny || origin[2] + size.nz > d.nz {
            return Err(Error::invalid(format!(
                "crop {:?}+{:?} exceeds dims {:?}",
                origin,
                size.as_array(),
                d.as_array()
            )));
        }
        let mut out = Vec::with_capacity(size.len());
        for z in 0..size.nz {
            for y in 0..size.ny {
                let start = d.index(origin[0], origin[1] + y, origin[2] + z);
                out.extend_from_slice(&self.data[start..start + size.nx]);
            }
        }
        Ok(Volume3D {
            dims: size,
            voxel_size: self.voxel_size,
            units: self.units.clone(),
            data: out,
        })
    }

    /// Element-wise rounding to single precision; used before writing so the
    /// on-disk payload is exactly what downstream computations saw.
    pub fn quantize_f32(&self) -> Volume3D {
        let mut v = self.clone();
        for x in &mut v.data {
            *x = *x as f32 as f64;
        }
        v
    }
}

/// Binary voxel selection (brain mask, ROI).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: Dims,
    voxel_size: VoxelSize,
    data: Vec<bool>,
}

impl MaskVolume {
    pub fn from_data(
        dims: impl Into<Dims>,
        voxel_size: VoxelSize,
        data: Vec<bool>,
    ) -> Result<Self> {
        let dims = dims.into();
        dims.validate()?;
        validate_voxel_size(&voxel_size)?;
        if data.len() != dims.len() {
            return Err(Error::invalid(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                dims.as_array()
            )));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::invalid("mask has no voxel set"));
        }
        Ok(MaskVolume {
            dims,
            voxel_size,
            data,
        })
    }

    pub fn full(dims: impl Into<Dims>, voxel_size: VoxelSize) -> Result<Self> {
        let dims = dims.into();
        dims.validate()?;
        MaskVolume::from_data(dims, voxel_size, vec![true; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.voxel_size
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            dims: self.dims,
            voxel_size: self.voxel_size,
            units: units::DIMENSIONLESS.to_owned(),
            data: self
                .data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub(crate) fn check_matches(&self, vol: &Volume3D) -> Result<()> {
        if self.dims != vol.dims() {
            return Err(Error::invalid(format!(
                "mask dims {:?} do not match volume dims {:?}",
                self.dims.as_array(),
                vol.dims().as_array()
            )));
        }
        Ok(())
    }

    /// Cropped mask; `None` when the block contains no set voxel.
    pub fn crop(&self, origin: [usize; 3], size: Dims) -> Result<Option<MaskVolume>> {
        let cropped = self.to_volume().crop(origin, size)?;
        let data: Vec<bool> = cropped.data().iter().map(|&v| v > 0.5).collect();
        if !data.iter().any(|&b| b) {
            return Ok(None);
        }
        Ok(Some(MaskVolume {
            dims: size,
            voxel_size: self.voxel_size,
            data,
        }))
    }
}
