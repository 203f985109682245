use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rng_for;
use crate::error::{Error, Result};
use crate::filter::{gaussian_smooth, Boundary};
use crate::physics::{DecayKernelMap, SourcePair};
use crate::volume::{Dims, MaskVolume, Volume3D, VoxelSize};

/// Procedural brain-like source phantom settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Nominal decay kernel in 1/(s·ppm).
    pub a0: f64,
    /// Relative amplitude of the smooth modulation of the decay kernel.
    pub a_modulation: f64,
    /// Inclusive range for the number of substructures.
    pub structures: [usize; 2],
    pub grey_matter_chi: [f64; 2],
    pub white_matter_chi: [f64; 2],
    /// Co-located background sources, magnitude range in ppm.
    pub background_chi: [f64; 2],
    /// Ellipsoidal mask semi-axes as a fraction of the grid extent.
    pub mask_semi_axes: [f64; 3],
    pub smoothing_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            a0: 100.0,
            a_modulation: 0.3,
            structures: [6, 10],
            grey_matter_chi: [0.05, 0.20],
            white_matter_chi: [-0.08, -0.01],
            background_chi: [0.005, 0.03],
            mask_semi_axes: [0.42, 0.45, 0.40],
            smoothing_sigma: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BrainPhantom {
    pub sources: SourcePair,
    pub a_map: DecayKernelMap,
    pub mask: MaskVolume,
}

pub const MIN_PHANTOM_EXTENT: usize = 16;

/// Sum of random low-frequency cosines scaled into [-1, 1].
pub(crate) fn smooth_random_field(
    rng: &mut ChaCha8Rng,
    dims: Dims,
    modes: usize,
    max_freq: f64,
) -> Vec<f64> {
    let n = dims.as_array().map(|v| v as f64);
    let waves: Vec<([f64; 3], f64, f64)> = (0..modes)
        .map(|_| {
            let k = [
                rng.random_range(-max_freq..max_freq),
                rng.random_range(-max_freq..max_freq),
                rng.random_range(-max_freq..max_freq),
            ];
            let amp = rng.random_range(0.2..1.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (k, amp, phase)
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.1).sum();
    (0..dims.len())
        .map(|i| {
            let c = dims.coords(i);
            let s: f64 = waves
                .iter()
                .map(|(k, amp, phase)| {
                    let arg = std::f64::consts::TAU
                        * (k[0] * c[0] as f64 / n[0]
                            + k[1] * c[1] as f64 / n[1]
                            + k[2] * c[2] as f64 / n[2]);
                    amp * (arg + phase).cos()
                })
                .sum();
            s / total
        })
        .collect()
}

fn ellipsoid_contains(c: [usize; 3], center: [f64; 3], semi: [f64; 3]) -> bool {
    (0..3)
        .map(|i| ((c[i] as f64 - center[i]) / semi[i]).powi(2))
        .sum::<f64>()
        <= 1.0
}

/// Deterministic brain-like phantom: ellipsoidal mask, co-located smooth
/// background sources, grey-matter-like (χpos) and white-matter-like (χneg)
/// ellipsoids, and a smoothly modulated decay kernel.
pub fn generate_brain_phantom(
    seed: u64,
    dims: impl Into<Dims>,
    voxel_size: VoxelSize,
    config: &PhantomConfig,
) -> Result<BrainPhantom> {
    let dims = dims.into();
    dims.validate()?;
    if dims.as_array().iter().any(|&n| n < MIN_PHANTOM_EXTENT) {
        return Err(Error::invalid(format!(
            "phantom dims {:?} too small, need >= {MIN_PHANTOM_EXTENT} per axis",
            dims.as_array()
        )));
    }
    if config.structures[0] < 2 || config.structures[0] > config.structures[1] {
        return Err(Error::invalid(
            "structure count range must satisfy 2 <= lo <= hi",
        ));
    }
    let mut rng = rng_for(seed, &[0x5048_414e]);
    let n = dims.as_array().map(|v| v as f64);

    let center: [f64; 3] =
        std::array::from_fn(|i| n[i] / 2.0 + rng.random_range(-0.02..0.02) * n[i]);
    let semi: [f64; 3] =
        std::array::from_fn(|i| config.mask_semi_axes[i] * n[i] * rng.random_range(0.95..1.05));
    let mask_data: Vec<bool> = (0..dims.len())
        .map(|i| ellipsoid_contains(dims.coords(i), center, semi))
        .collect();
    let mask = MaskVolume::from_data(dims, voxel_size, mask_data)?;

    let n_struct = rng.random_range(config.structures[0]..=config.structures[1]);
    let min_extent = n.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut pos_struct = vec![0.0f64; dims.len()];
    let mut neg_struct = vec![0.0f64; dims.len()];
    for s in 0..n_struct {
        let grey = match s {
            0 => true,
            1 => false,
            _ => rng.random_bool(0.5),
        };
        let (lo, hi) = if grey { (0.06, 0.16) } else { (0.10, 0.22) };
        let axes: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo..hi) * min_extent);
        let c: [f64; 3] =
            std::array::from_fn(|i| center[i] + rng.random_range(-0.55..0.55) * semi[i]);
        let value = if grey {
            rng.random_range(config.grey_matter_chi[0]..config.grey_matter_chi[1])
        } else {
            rng.random_range(config.white_matter_chi[0]..config.white_matter_chi[1])
        };
        for (i, (p, q)) in pos_struct.iter_mut().zip(neg_struct.iter_mut()).enumerate() {
            if ellipsoid_contains(dims.coords(i), c, axes) {
                if grey {
                    *p = p.max(value);
                } else {
                    *q = q.min(value);
                }
            }
        }
    }
    let radius = (3.0 * config.smoothing_sigma).ceil() as usize;
    let pos_struct = gaussian_smooth(
        &pos_struct,
        dims,
        config.smoothing_sigma,
        radius,
        Boundary::Zero,
    );
    let neg_struct = gaussian_smooth(
        &neg_struct,
        dims,
        config.smoothing_sigma,
        radius,
        Boundary::Zero,
    );

    let [bg_lo, bg_hi] = config.background_chi;
    let bg_pos = smooth_random_field(&mut rng, dims, 6, 2.5);
    let bg_neg = smooth_random_field(&mut rng, dims, 6, 2.5);
    let a_mod = smooth_random_field(&mut rng, dims, 5, 1.5);

    let mut chi_pos = Vec::with_capacity(dims.len());
    let mut chi_neg = Vec::with_capacity(dims.len());
    for i in 0..dims.len() {
        if mask.data()[i] {
            let bp = bg_lo + (bg_hi - bg_lo) * 0.5 * (bg_pos[i] + 1.0);
            let bn = bg_lo + (bg_hi - bg_lo) * 0.5 * (bg_neg[i] + 1.0);
            chi_pos.push((bp + pos_struct[i]).max(0.0));
            chi_neg.push((-bn + neg_struct[i]).min(0.0));
        } else {
            chi_pos.push(0.0);
            chi_neg.push(0.0);
        }
    }
    let a: Vec<f64> = a_mod
        .iter()
        .map(|m| config.a0 * (1.0 + config.a_modulation * m))
        .collect();

    Ok(BrainPhantom {
        sources: SourcePair::new(
            Volume3D::from_data(dims, voxel_size, chi_pos)?,
            Volume3D::from_data(dims, voxel_size, chi_neg)?,
        )?,
        a_map: DecayKernelMap::new(Volume3D::from_data(dims, voxel_size, a)?)?,
        mask,
    })
}

/// Adds a sphere of constant susceptibility (positive values to χpos,
/// negative to χneg). Used for the fixed-value pathology experiment.
pub fn add_sphere_lesion(
    src: &SourcePair,
    center: [f64; 3],
    radius: f64,
    value: f64,
) -> Result<SourcePair> {
    let dims = src.dims();
    let (mut pos, mut neg) = src.clone().into_parts();
    let target = if value >= 0.0 { &mut pos } else { &mut neg };
    for (i, v) in target.data_mut().iter_mut().enumerate() {
        let c = dims.coords(i);
        let r2: f64 = (0..3).map(|k| (c[k] as f64 - center[k]).powi(2)).sum();
        if r2 <= radius * radius {
            *v += value;
        }
    }
    SourcePair::new(pos, neg)
}

/// Layout of the 3×3 tube phantom: row 0 diamagnetic, row 1 paramagnetic,
/// row 2 the voxel-wise sum of rows 0 and 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CylinderConfig {
    pub dims: [usize; 3],
    pub voxel_size_mm: [f64; 3],
    /// Tube radius in voxels.
    pub radius: f64,
    /// Center-to-center distance in voxels.
    pub spacing: f64,
    /// Tube length along z in voxels.
    pub length: usize,
    /// CaCO3 concentrations in mg/ml for the diamagnetic row.
    pub diamagnetic_concentrations: [f64; 3],
    /// Fe3O4 concentrations in µg/ml for the paramagnetic row.
    pub paramagnetic_concentrations: [f64; 3],
    /// ppm per mg/ml (negative).
    pub diamagnetic_coefficient: f64,
    /// ppm per µg/ml.
    pub paramagnetic_coefficient: f64,
    pub a0: f64,
    /// Number of central slices in each tube ROI.
    pub roi_slices: usize,
}

impl Default for CylinderConfig {
    fn default() -> Self {
        CylinderConfig {
            dims: [64, 64, 48],
            voxel_size_mm: [1.0, 1.0, 1.0],
            radius: 5.0,
            spacing: 16.0,
            length: 28,
            diamagnetic_concentrations: [58.0, 116.0, 174.0],
            paramagnetic_concentrations: [2.0, 4.0, 6.0],
            diamagnetic_coefficient: -0.1 / 58.0,
            paramagnetic_coefficient: 0.05 / 2.0,
            a0: 100.0,
            roi_slices: 9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CylinderRoi {
    pub row: usize,
    pub col: usize,
    pub mask: MaskVolume,
}

#[derive(Clone, Debug)]
pub struct CylinderPhantom {
    pub sources: SourcePair,
    pub a_map: DecayKernelMap,
    pub mask: MaskVolume,
    pub rois: Vec<CylinderRoi>,
}

impl CylinderPhantom {
    pub fn roi(&self, row: usize, col: usize) -> Option<&CylinderRoi> {
        self.rois.iter().find(|r| r.row == row && r.col == col)
    }
}

pub fn generate_cylinder_phantom(config: &CylinderConfig) -> Result<CylinderPhantom> {
    let dims = Dims::from(config.dims);
    dims.validate()?;
    let vs = config.voxel_size_mm;
    if config.radius <= 0.0 {
        return Err(Error::invalid("cylinder radius must be positive"));
    }
    if config.spacing <= 2.0 * config.radius + 1.0 {
        return Err(Error::invalid(format!(
            "cylinders overlap: spacing {} <= 2 * radius + 1 = {}",
            config.spacing,
            2.0 * config.radius + 1.0
        )));
    }
    let cx = dims.nx as f64 / 2.0;
    let cy = dims.ny as f64 / 2.0;
    let cz = dims.nz as f64 / 2.0;
    let reach = config.spacing + config.radius + 2.0;
    if cx - reach < 0.0
        || cy - reach < 0.0
        || config.length + 4 > dims.nz
        || config.roi_slices > config.length
    {
        return Err(Error::invalid(format!(
            "grid {:?} too small for 3x3 cylinders with radius {} and spacing {}",
            config.dims, config.radius, config.spacing
        )));
    }
    let z0 = (cz - config.length as f64 / 2.0).round() as usize;
    let z1 = z0 + config.length;
    let roi_z0 = (cz - config.roi_slices as f64 / 2.0).round() as usize;
    let roi_z1 = roi_z0 + config.roi_slices;

    let centers = |row: usize, col: usize| -> [f64; 2] {
        [
            cx + (col as f64 - 1.0) * config.spacing,
            cy + (row as f64 - 1.0) * config.spacing,
        ]
    };
    let inside = |c: [usize; 3], tube: [f64; 2], radius: f64| -> bool {
        let dx = c[0] as f64 - tube[0];
        let dy = c[1] as f64 - tube[1];
        dx * dx + dy * dy <= radius * radius
    };

    let mut pos = vec![0.0; dims.len()];
    let mut neg = vec![0.0; dims.len()];
    let mut rois = Vec::new();
    for col in 0..3 {
        let dia = config.diamagnetic_coefficient * config.diamagnetic_concentrations[col];
        let para = config.paramagnetic_coefficient * config.paramagnetic_concentrations[col];
        if dia > 0.0 || para < 0.0 {
            return Err(Error::invalid(
                "coefficients must give chi_neg <= 0 and chi_pos >= 0",
            ));
        }
        for row in 0..3 {
            let tube = centers(row, col);
            let mut roi = vec![false; dims.len()];
            for i in 0..dims.len() {
                let c = dims.coords(i);
                if c[2] < z0 || c[2] >= z1 || !inside(c, tube, config.radius) {
                    continue;
                }
                if row != 1 {
                    neg[i] += dia;
                }
                if row != 0 {
                    pos[i] += para;
                }
                if c[2] >= roi_z0 && c[2] < roi_z1 && inside(c, tube, config.radius - 1.0) {
                    roi[i] = true;
                }
            }
            rois.push(CylinderRoi {
                row,
                col,
                mask: MaskVolume::from_data(dims, vs, roi)?,
            });
        }
    }

    // agarose container: box enclosing all tubes with a margin
    let half = config.spacing + config.radius + 2.0;
    let mask_data: Vec<bool> = (0..dims.len())
        .map(|i| {
            let c = dims.coords(i);
            (c[0] as f64 - cx).abs() <= half
                && (c[1] as f64 - cy).abs() <= half
                && c[2] + 2 >= z0
                && c[2] < z1 + 2
        })
        .collect();

    Ok(CylinderPhantom {
        sources: SourcePair::new(
            Volume3D::from_data(dims, vs, pos)?,
            Volume3D::from_data(dims, vs, neg)?,
        )?,
        a_map: DecayKernelMap::uniform(dims, vs, config.a0)?,
        mask: MaskVolume::from_data(dims, vs, mask_data)?,
        rois,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brain_phantom_is_deterministic() {
        let cfg = PhantomConfig::default();
        let a = generate_brain_phantom(3, Dims::cube(32), [1.0; 3], &cfg).unwrap();
        let b = generate_brain_phantom(3, Dims::cube(32), [1.0; 3], &cfg).unwrap();
        assert_eq!(a.sources, b.sources);
        assert_eq!(a.a_map, b.a_map);
        assert_eq!(a.mask, b.mask);
        let c = generate_brain_phantom(4, Dims::cube(32), [1.0; 3], &cfg).unwrap();
        assert_ne!(a.sources, c.sources);
    }

    #[test]
    fn brain_phantom_invariants_hold() {
        let cfg = PhantomConfig::default();
        for seed in 0..3 {
            let p = generate_brain_phantom(seed, Dims::cube(48), [1.0; 3], &cfg).unwrap();
            assert!(p.sources.chi_pos().data().iter().all(|&v| v >= 0.0));
            assert!(p.sources.chi_neg().data().iter().all(|&v| v <= 0.0));
            assert!(p.a_map.volume().data().iter().all(|&v| v > 0.0));
            let a = p.a_map.volume().data();
            assert!(a.iter().all(|&v| (70.0 - 1e-9..=130.0 + 1e-9).contains(&v)));
            // sources live inside the mask
            for (i, &m) in p.mask.data().iter().enumerate() {
                if !m {
                    assert_eq!(p.sources.chi_pos().data()[i], 0.0);
                    assert_eq!(p.sources.chi_neg().data()[i], 0.0);
                }
            }
            let peak = p
                .sources
                .chi_pos()
                .data()
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(peak > 0.05 && peak <= 0.23, "peak chi_pos {peak}");
        }
    }

    #[test]
    fn mask_fraction_within_band_over_ten_seeds() {
        let cfg = PhantomConfig::default();
        for seed in 0..10 {
            let p = generate_brain_phantom(seed, Dims::cube(32), [1.0; 3], &cfg).unwrap();
            let f = p.mask.fraction();
            assert!((0.2..=0.6).contains(&f), "seed {seed}: fraction {f}");
        }
    }

    #[test]
    fn tiny_grid_is_rejected() {
        let r =
            generate_brain_phantom(0, Dims::new(8, 32, 32), [1.0; 3], &PhantomConfig::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cylinder_rows_follow_concentrations() {
        let cfg = CylinderConfig::default();
        let ph = generate_cylinder_phantom(&cfg).unwrap();
        let mean_in = |v: &Volume3D, m: &MaskVolume| {
            let (s, n) = v
                .data()
                .iter()
                .zip(m.data())
                .filter(|(_, &b)| b)
                .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
            s / n as f64
        };
        let neg: Vec<f64> = (0..3)
            .map(|c| mean_in(ph.sources.chi_neg(), &ph.roi(0, c).unwrap().mask))
            .collect();
        let pos: Vec<f64> = (0..3)
            .map(|c| mean_in(ph.sources.chi_pos(), &ph.roi(1, c).unwrap().mask))
            .collect();
        assert!((neg[1] / neg[0] - 2.0).abs() < 1e-12);
        assert!((neg[2] / neg[0] - 3.0).abs() < 1e-12);
        assert!((pos[1] / pos[0] - 2.0).abs() < 1e-12);
        assert!((pos[2] / pos[0] - 3.0).abs() < 1e-12);
        // single-source rows carry no opposite source
        assert_eq!(
            mean_in(ph.sources.chi_pos(), &ph.roi(0, 1).unwrap().mask),
            0.0
        );
        assert_eq!(
            mean_in(ph.sources.chi_neg(), &ph.roi(1, 1).unwrap().mask),
            0.0
        );
    }

    #[test]
    fn cylinder_mixture_row_is_exact_sum() {
        let cfg = CylinderConfig::default();
        let ph = generate_cylinder_phantom(&cfg).unwrap();
        let dims = ph.sources.dims();
        let shift = cfg.spacing as usize;
        for i in 0..dims.len() {
            let [x, y, z] = dims.coords(i);
            // row 2 sits `spacing` voxels below row 1, which sits below row 0
            if y >= 2 * shift && ph.rois.iter().any(|r| r.row == 2 && r.mask.data()[i]) {
                let r1 = dims.index(x, y - shift, z);
                let r0 = dims.index(x, y - 2 * shift, z);
                let p = ph.sources.chi_pos().data();
                let n = ph.sources.chi_neg().data();
                assert_eq!(p[i], p[r1] + p[r0]);
                assert_eq!(n[i], n[r1] + n[r0]);
            }
        }
    }

    #[test]
    fn overlapping_cylinders_are_rejected() {
        let cfg = CylinderConfig {
            spacing: 9.0,
            ..CylinderConfig::default()
        };
        assert!(matches!(
            generate_cylinder_phantom(&cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sphere_lesion_goes_to_matching_branch() {
        let src = SourcePair::zeros(Dims::cube(16), [1.0; 3]).unwrap();
        let h = add_sphere_lesion(&src, [8.0; 3], 2.0, 1.0).unwrap();
        assert_eq!(h.chi_pos().get(8, 8, 8), 1.0);
        assert!(h.chi_neg().data().iter().all(|&v| v == 0.0));
        let c = add_sphere_lesion(&h, [4.0; 3], 1.5, -0.2).unwrap();
        assert_eq!(c.chi_neg().get(4, 4, 4), -0.2);
        assert_eq!(c.chi_pos(), h.chi_pos());
    }
}
