use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng_for;
use crate::error::{Error, Result};
use crate::physics::SourcePair;
use crate::volume::MaskVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LesionConfig {
    /// Inclusive range of lesions per call.
    pub count: [usize; 2],
    /// Principal radii range in voxels.
    pub radius: [f64; 2],
    pub hemorrhage_chi: [f64; 2],
    pub calcification_chi: [f64; 2],
    pub hemorrhage_probability: f64,
    /// Minimum share of a lesion's in-grid voxels that must fall inside the mask.
    pub min_inside_fraction: f64,
    pub max_retries: usize,
}

impl Default for LesionConfig {
    fn default() -> Self {
        LesionConfig {
            count: [1, 4],
            radius: [2.0, 8.0],
            hemorrhage_chi: [0.4, 1.2],
            calcification_chi: [-0.3, -0.1],
            hemorrhage_probability: 0.5,
            min_inside_fraction: 0.5,
            max_retries: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionShape {
    Sphere,
    Ellipsoid,
    Cuboid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Hemorrhage,
    Calcification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub kind: LesionKind,
    pub shape: LesionShape,
    pub center: [usize; 3],
    pub radii: [f64; 3],
    pub value: f64,
    /// Voxel indices covered (inside grid and mask).
    #[serde(skip)]
    pub voxels: Vec<usize>,
}

fn lesion_voxels(
    mask: &MaskVolume,
    center: [usize; 3],
    radii: [f64; 3],
    shape: LesionShape,
) -> (Vec<usize>, usize) {
    let dims = mask.dims();
    let n = dims.as_array();
    let mut covered = Vec::new();
    let mut in_grid = 0usize;
    let lo: [usize; 3] =
        std::array::from_fn(|i| (center[i] as f64 - radii[i]).floor().max(0.0) as usize);
    let hi: [usize; 3] =
        std::array::from_fn(|i| ((center[i] as f64 + radii[i]).ceil() as usize).min(n[i] - 1));
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let d = [
                    (x as f64 - center[0] as f64) / radii[0],
                    (y as f64 - center[1] as f64) / radii[1],
                    (z as f64 - center[2] as f64) / radii[2],
                ];
                let hit = match shape {
                    LesionShape::Sphere | LesionShape::Ellipsoid => {
                        d.iter().map(|v| v * v).sum::<f64>() <= 1.0
                    }
                    LesionShape::Cuboid => d.iter().all(|v| v.abs() <= 1.0),
                };
                if hit {
                    in_grid += 1;
                    let idx = dims.index(x, y, z);
                    if mask.data()[idx] {
                        covered.push(idx);
                    }
                }
            }
        }
    }
    (covered, in_grid)
}

/// Adds 1–4 constant-valued hemorrhage (χpos) or calcification (χneg)
/// lesions inside the mask. Lesions are clipped to the mask.
pub fn insert_lesions(
    src: &SourcePair,
    mask: &MaskVolume,
    seed: u64,
    config: &LesionConfig,
) -> Result<(SourcePair, Vec<Lesion>)> {
    mask.check_matches(src.chi_pos())?;
    if config.count[0] > config.count[1]
        || config.radius[0] <= 0.0
        || config.radius[0] > config.radius[1]
    {
        return Err(Error::invalid("invalid lesion count or radius range"));
    }
    let mut rng = rng_for(seed, &[0x4c45_5349]);
    let candidates: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    let dims = src.dims();
    let (mut pos, mut neg) = src.clone().into_parts();
    let n_lesions = rng.random_range(config.count[0]..=config.count[1]);
    let mut lesions = Vec::with_capacity(n_lesions);

    for _ in 0..n_lesions {
        let kind = if rng.random_bool(config.hemorrhage_probability) {
            LesionKind::Hemorrhage
        } else {
            LesionKind::Calcification
        };
        let shape = match rng.random_range(0..3) {
            0 => LesionShape::Sphere,
            1 => LesionShape::Ellipsoid,
            _ => LesionShape::Cuboid,
        };
        let value = match kind {
            LesionKind::Hemorrhage => {
                rng.random_range(config.hemorrhage_chi[0]..=config.hemorrhage_chi[1])
            }
            LesionKind::Calcification => {
                rng.random_range(config.calcification_chi[0]..=config.calcification_chi[1])
            }
        };
        let mut placed = None;
        for _ in 0..config.max_retries {
            let radii = match shape {
                LesionShape::Sphere => [rng.random_range(config.radius[0]..=config.radius[1]); 3],
                _ => std::array::from_fn(|_| rng.random_range(config.radius[0]..=config.radius[1])),
            };
            let center = dims.coords(candidates[rng.random_range(0..candidates.len())]);
            let (voxels, in_grid) = lesion_voxels(mask, center, radii, shape);
            if in_grid > 0 && voxels.len() as f64 >= config.min_inside_fraction * in_grid as f64 {
                placed = Some(Lesion {
                    kind,
                    shape,
                    center,
                    radii,
                    value,
                    voxels,
                });
                break;
            }
        }
        let lesion = placed.ok_or_else(|| {
            Error::Placement(format!(
                "no placement inside mask after {} retries ({} mask voxels)",
                config.max_retries,
                candidates.len()
            ))
        })?;
        let target = match kind {
            LesionKind::Hemorrhage => pos.data_mut(),
            LesionKind::Calcification => neg.data_mut(),
        };
        for &i in &lesion.voxels {
            target[i] += value;
        }
        lesions.push(lesion);
    }
    Ok((SourcePair::new(pos, neg)?, lesions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_brain_phantom, PhantomConfig};
    use crate::volume::Dims;

    fn phantom() -> (SourcePair, MaskVolume) {
        let p =
            generate_brain_phantom(1, Dims::cube(32), [1.0; 3], &PhantomConfig::default()).unwrap();
        (p.sources, p.mask)
    }

    #[test]
    fn lesion_values_and_branches() {
        let (src, mask) = phantom();
        let mut seen_h = false;
        let mut seen_c = false;
        for seed in 0..20 {
            let (out, lesions) =
                insert_lesions(&src, &mask, seed, &LesionConfig::default()).unwrap();
            assert!((1..=4).contains(&lesions.len()));
            let dp: Vec<f64> = out
                .chi_pos()
                .data()
                .iter()
                .zip(src.chi_pos().data())
                .map(|(a, b)| a - b)
                .collect();
            let dn: Vec<f64> = out
                .chi_neg()
                .data()
                .iter()
                .zip(src.chi_neg().data())
                .map(|(a, b)| a - b)
                .collect();
            let has_h = lesions.iter().any(|l| l.kind == LesionKind::Hemorrhage);
            let has_c = lesions.iter().any(|l| l.kind == LesionKind::Calcification);
            if !has_h {
                assert!(dp.iter().all(|&v| v == 0.0));
            }
            if !has_c {
                assert!(dn.iter().all(|&v| v == 0.0));
            }
            for l in &lesions {
                assert!(l.radii.iter().all(|r| (2.0..=8.0).contains(r)));
                assert!(mask.data()[mask.dims().index(l.center[0], l.center[1], l.center[2])]);
                match l.kind {
                    LesionKind::Hemorrhage => {
                        seen_h = true;
                        assert!((0.4..=1.2).contains(&l.value));
                    }
                    LesionKind::Calcification => {
                        seen_c = true;
                        assert!((-0.3..=-0.1).contains(&l.value));
                    }
                }
                for &i in &l.voxels {
                    assert!(mask.data()[i]);
                }
            }
            // single lesion of one kind: increment equals its value exactly
            if lesions.len() == 1 {
                let l = &lesions[0];
                let d = if l.kind == LesionKind::Hemorrhage {
                    &dp
                } else {
                    &dn
                };
                for &i in &l.voxels {
                    assert!((d[i] - l.value).abs() < 1e-12);
                }
            }
            assert!(out.chi_pos().data().iter().all(|&v| v >= 0.0));
            assert!(out.chi_neg().data().iter().all(|&v| v <= 0.0));
        }
        assert!(seen_h && seen_c);
    }

    #[test]
    fn insertion_is_deterministic() {
        let (src, mask) = phantom();
        let a = insert_lesions(&src, &mask, 9, &LesionConfig::default()).unwrap();
        let b = insert_lesions(&src, &mask, 9, &LesionConfig::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn impossible_placement_errors() {
        let dims = Dims::cube(16);
        let mut m = vec![false; dims.len()];
        m[dims.index(0, 0, 0)] = true;
        let mask = MaskVolume::from_data(dims, [1.0; 3], m).unwrap();
        let src = SourcePair::zeros(dims, [1.0; 3]).unwrap();
        let cfg = LesionConfig {
            radius: [4.0, 8.0],
            max_retries: 10,
            ..LesionConfig::default()
        };
        assert!(matches!(
            insert_lesions(&src, &mask, 0, &cfg),
            Err(Error::Placement(_))
        ));
    }
}
