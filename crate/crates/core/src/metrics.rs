//! Image-quality metrics, ROI statistics, regression and line profiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{filter_separable, gaussian_smooth, gaussian_taps, Boundary};
use crate::synth::{neumaier_sum, CylinderConfig, CylinderPhantom};
use crate::volume::{Dims, MaskVolume, Volume3D};

fn check_pair(
    est: &Volume3D,
    reference: &Volume3D,
    mask: Option<&MaskVolume>,
) -> Result<Vec<usize>> {
    if est.dims() != reference.dims() {
        return Err(Error::invalid(format!(
            "metric inputs differ in dims: {:?} vs {:?}",
            est.dims().as_array(),
            reference.dims().as_array()
        )));
    }
    let idx: Vec<usize> = match mask {
        Some(m) => {
            if m.dims() != est.dims() {
                return Err(Error::invalid("metric mask dims differ from inputs"));
            }
            (0..est.len()).filter(|&i| m.data()[i]).collect()
        }
        None => (0..est.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::invalid("metric mask is empty"));
    }
    Ok(idx)
}

fn relative_error(est: &[f64], reference: &[f64], idx: &[usize], what: &str) -> Result<f64> {
    let num = neumaier_sum(idx.iter().map(|&i| (est[i] - reference[i]).powi(2)));
    let den = neumaier_sum(idx.iter().map(|&i| reference[i] * reference[i]));
    if den == 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "{what}: reference has zero energy in the mask"
        )));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// `100·‖est − ref‖ / ‖ref‖` over the masked voxels, in percent.
pub fn nrmse(est: &Volume3D, reference: &Volume3D, mask: Option<&MaskVolume>) -> Result<f64> {
    let idx = check_pair(est, reference, mask)?;
    relative_error(est.data(), reference.data(), &idx, "nrmse")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HfenConfig {
    pub sigma: f64,
    /// Half-width of the filter support; 7 gives 15³ taps.
    pub radius: usize,
}

impl Default for HfenConfig {
    fn default() -> Self {
        HfenConfig {
            sigma: 1.5,
            radius: 7,
        }
    }
}

/// Laplacian of Gaussian as a sum of three separable terms. Every 1D factor
/// is normalized so that the full kernel sums to zero.
pub fn laplacian_of_gaussian(data: &[f64], dims: Dims, cfg: &HfenConfig) -> Vec<f64> {
    let g = gaussian_taps(cfg.sigma, cfg.radius);
    let s2 = cfg.sigma * cfg.sigma;
    let mut g2: Vec<f64> = g
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let x = i as f64 - cfg.radius as f64;
            w * (x * x - s2) / (s2 * s2)
        })
        .collect();
    let mean = g2.iter().sum::<f64>() / g2.len() as f64;
    g2.iter_mut().for_each(|v| *v -= mean);
    let mut out = filter_separable(data, dims, [&g2, &g, &g], Boundary::Replicate);
    for taps in [[&g[..], &g2[..], &g[..]], [&g[..], &g[..], &g2[..]]] {
        let t = filter_separable(data, dims, taps, Boundary::Replicate);
        out.iter_mut().zip(t).for_each(|(o, v)| *o += v);
    }
    out
}

/// Relative error of LoG-filtered volumes in percent.
pub fn hfen(est: &Volume3D, reference: &Volume3D, mask: Option<&MaskVolume>) -> Result<f64> {
    hfen_with(est, reference, mask, &HfenConfig::default())
}

pub fn hfen_with(
    est: &Volume3D,
    reference: &Volume3D,
    mask: Option<&MaskVolume>,
    cfg: &HfenConfig,
) -> Result<f64> {
    let idx = check_pair(est, reference, mask)?;
    let dims = est.dims();
    let a = laplacian_of_gaussian(est.data(), dims, cfg);
    let b = laplacian_of_gaussian(reference.data(), dims, cfg);
    relative_error(&a, &b, &idx, "hfen")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XsimConfig {
    /// Dynamic range in ppm.
    pub range: f64,
    pub k1: f64,
    pub k2: f64,
    pub sigma: f64,
    pub radius: usize,
}

impl Default for XsimConfig {
    fn default() -> Self {
        XsimConfig {
            range: 1.0,
            k1: 0.01,
            k2: 0.001,
            sigma: 1.5,
            radius: 5,
        }
    }
}

/// Structural similarity with susceptibility-scaled constants, averaged over the mask.
pub fn xsim(est: &Volume3D, reference: &Volume3D, mask: Option<&MaskVolume>) -> Result<f64> {
    xsim_with(est, reference, mask, &XsimConfig::default())
}

pub fn xsim_with(
    est: &Volume3D,
    reference: &Volume3D,
    mask: Option<&MaskVolume>,
    cfg: &XsimConfig,
) -> Result<f64> {
    let idx = check_pair(est, reference, mask)?;
    Ok(xsim_sum(est, reference, &idx, cfg) / idx.len() as f64)
}

/// Sum of the local similarity map over `idx`.
fn xsim_sum(est: &Volume3D, reference: &Volume3D, idx: &[usize], cfg: &XsimConfig) -> f64 {
    let dims = est.dims();
    let smooth = |v: &[f64]| gaussian_smooth(v, dims, cfg.sigma, cfg.radius, Boundary::Replicate);
    let (x, y) = (est.data(), reference.data());
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let (mx, my) = (smooth(x), smooth(y));
    let (sxx, syy, sxy) = (
        smooth(&prod(x, x)),
        smooth(&prod(y, y)),
        smooth(&prod(x, y)),
    );
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);
    let map = idx.iter().map(|&i| {
        let (a, b) = (mx[i], my[i]);
        let va = sxx[i] - a * a;
        let vb = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2))
    });
    neumaier_sum(map)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

pub fn roi_stats(vol: &Volume3D, roi: &MaskVolume) -> Result<RoiStats> {
    if roi.dims() != vol.dims() {
        return Err(Error::invalid("ROI dims differ from volume"));
    }
    let values: Vec<f64> = vol
        .data()
        .iter()
        .zip(roi.data())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if values.is_empty() {
        return Err(Error::invalid("ROI is empty"));
    }
    let n = values.len() as f64;
    let mean = neumaier_sum(values.iter().copied()) / n;
    let var = neumaier_sum(values.iter().map(|v| (v - mean).powi(2))) / n;
    Ok(RoiStats {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope·x + intercept`. A constant `y` is a
/// perfect horizontal fit and reports `R² = 1`.
pub fn linear_regression(xs: &[f64], ys: &[f64]) -> Result<RegressionResult> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "{} x values vs {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("regression needs at least 2 points"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("regression inputs must be finite"));
    }
    let n = xs.len() as f64;
    let mx = neumaier_sum(xs.iter().copied()) / n;
    let my = neumaier_sum(ys.iter().copied()) / n;
    let sxx = neumaier_sum(xs.iter().map(|x| (x - mx).powi(2)));
    if sxx == 0.0 {
        return Err(Error::invalid("regression x values are all equal"));
    }
    let sxy = neumaier_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let syy = neumaier_sum(ys.iter().map(|y| (y - my).powi(2)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let ss_res = neumaier_sum(
            xs.iter()
                .zip(ys)
                .map(|(x, y)| (y - slope * x - intercept).powi(2)),
        );
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(RegressionResult {
        slope,
        intercept,
        r_squared,
    })
}

/// Trilinear interpolation at a point in voxel coordinates.
pub fn sample_trilinear(vol: &Volume3D, p: [f64; 3]) -> Result<f64> {
    let n = vol.dims().as_array();
    for a in 0..3 {
        if !(p[a] >= 0.0 && p[a] <= (n[a] - 1) as f64) {
            return Err(Error::invalid(format!("point {p:?} outside grid {n:?}")));
        }
    }
    let base: [usize; 3] =
        std::array::from_fn(|a| (p[a].floor() as usize).min(n[a].saturating_sub(2)));
    let frac: [f64; 3] = std::array::from_fn(|a| p[a] - base[a] as f64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut c = [0usize; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            let f = frac[a];
            w *= if hi { f } else { 1.0 - f };
            c[a] = (base[a] + hi as usize).min(n[a] - 1);
        }
        if w != 0.0 {
            acc += w * vol.get(c[0], c[1], c[2]);
        }
    }
    Ok(acc)
}

/// `n` equidistant samples from `p0` to `p1` (voxel coordinates) as (distance in mm, value).
pub fn line_profile(
    vol: &Volume3D,
    p0: [f64; 3],
    p1: [f64; 3],
    n: usize,
) -> Result<Vec<(f64, f64)>> {
    if n < 2 {
        return Err(Error::invalid("line profile needs at least 2 samples"));
    }
    let vs = vol.voxel_size();
    sample_trilinear(vol, p0)?;
    sample_trilinear(vol, p1)?;
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            let p: [f64; 3] = std::array::from_fn(|a| p0[a] + t * (p1[a] - p0[a]));
            let dist = (0..3)
                .map(|a| ((p[a] - p0[a]) * vs[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            Ok((dist, sample_trilinear(vol, p)?))
        })
        .collect()
}

/// NRMSE, HFEN and XSIM of one map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub nrmse: f64,
    pub hfen: f64,
    pub xsim: f64,
}

pub fn map_metrics(
    est: &Volume3D,
    reference: &Volume3D,
    mask: Option<&MaskVolume>,
) -> Result<MapMetrics> {
    let mut acc = MetricAccumulator::default();
    acc.add(est, reference, mask)?;
    acc.finish()
}

/// Pools NRMSE/HFEN energies and XSIM voxels over many volume pairs, e.g.
/// all patches of a validation split.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    pub hfen: HfenConfig,
    pub xsim: XsimConfig,
    err: f64,
    energy: f64,
    log_err: f64,
    log_energy: f64,
    sim: f64,
    voxels: usize,
}

impl MetricAccumulator {
    pub fn new(hfen: HfenConfig, xsim: XsimConfig) -> Self {
        MetricAccumulator {
            hfen,
            xsim,
            ..MetricAccumulator::default()
        }
    }

    pub fn add(
        &mut self,
        est: &Volume3D,
        reference: &Volume3D,
        mask: Option<&MaskVolume>,
    ) -> Result<()> {
        let idx = check_pair(est, reference, mask)?;
        let (e, r) = (est.data(), reference.data());
        self.err += neumaier_sum(idx.iter().map(|&i| (e[i] - r[i]).powi(2)));
        self.energy += neumaier_sum(idx.iter().map(|&i| r[i] * r[i]));
        let le = laplacian_of_gaussian(e, est.dims(), &self.hfen);
        let lr = laplacian_of_gaussian(r, est.dims(), &self.hfen);
        self.log_err += neumaier_sum(idx.iter().map(|&i| (le[i] - lr[i]).powi(2)));
        self.log_energy += neumaier_sum(idx.iter().map(|&i| lr[i] * lr[i]));
        self.sim += xsim_sum(est, reference, &idx, &self.xsim);
        self.voxels += idx.len();
        Ok(())
    }

    pub fn finish(&self) -> Result<MapMetrics> {
        if self.voxels == 0 {
            return Err(Error::invalid("no volumes were accumulated"));
        }
        if self.energy == 0.0 {
            return Err(Error::UndefinedMetric(
                "nrmse: reference has zero energy in the mask".into(),
            ));
        }
        if self.log_energy == 0.0 {
            return Err(Error::UndefinedMetric(
                "hfen: reference has zero energy in the mask".into(),
            ));
        }
        Ok(MapMetrics {
            nrmse: 100.0 * (self.err / self.energy).sqrt(),
            hfen: 100.0 * (self.log_err / self.log_energy).sqrt(),
            xsim: self.sim / self.voxels as f64,
        })
    }
}

/// Mean ROI value of one branch in one tube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TubeMeasurement {
    pub row: usize,
    pub col: usize,
    /// "pos" or "neg".
    pub branch: &'static str,
    pub concentration: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowRegression {
    pub row: usize,
    pub branch: &'static str,
    pub fit: RegressionResult,
}

/// Concentration linearity and single-vs-mixed agreement on the tube phantom.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearityReport {
    pub measurements: Vec<TubeMeasurement>,
    pub within_row: Vec<RowRegression>,
    /// Mixed-row means regressed on the matching single-row means, both branches pooled.
    pub single_vs_mixed: RegressionResult,
}

/// `pos`/`neg` need not satisfy sign constraints (raw network output is accepted).
pub fn cylinder_linearity(
    pos: &Volume3D,
    neg: &Volume3D,
    phantom: &CylinderPhantom,
    cfg: &CylinderConfig,
) -> Result<LinearityReport> {
    // (row, branch) pairs carrying signal: row 0 diamagnetic, row 1 paramagnetic, row 2 both
    let layout: [(usize, &'static str); 4] = [(0, "neg"), (1, "pos"), (2, "pos"), (2, "neg")];
    let mut measurements = Vec::new();
    for &(row, branch) in &layout {
        let vol = if branch == "pos" { pos } else { neg };
        for col in 0..3 {
            let roi = phantom.roi(row, col).ok_or_else(|| {
                Error::invalid(format!("phantom has no tube at row {row} col {col}"))
            })?;
            let s = roi_stats(vol, &roi.mask)?;
            let concentration = if branch == "pos" {
                cfg.paramagnetic_concentrations[col]
            } else {
                cfg.diamagnetic_concentrations[col]
            };
            measurements.push(TubeMeasurement {
                row,
                col,
                branch,
                concentration,
                mean: s.mean,
                std: s.std,
            });
        }
    }
    let pick = |row: usize, branch: &str| -> Vec<&TubeMeasurement> {
        measurements
            .iter()
            .filter(|m| m.row == row && m.branch == branch)
            .collect()
    };
    let mut within_row = Vec::new();
    for &(row, branch) in &layout {
        let m = pick(row, branch);
        let xs: Vec<f64> = m.iter().map(|t| t.concentration).collect();
        let ys: Vec<f64> = m.iter().map(|t| t.mean).collect();
        within_row.push(RowRegression {
            row,
            branch,
            fit: linear_regression(&xs, &ys)?,
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (single_row, branch) in [(1, "pos"), (0, "neg")] {
        for (s, m) in pick(single_row, branch).iter().zip(pick(2, branch)) {
            xs.push(s.mean);
            ys.push(m.mean);
        }
    }
    Ok(LinearityReport {
        measurements,
        within_row,
        single_vs_mixed: linear_regression(&xs, &ys)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], f: impl Fn(usize) -> f64) -> Volume3D {
        let n = dims.iter().product();
        Volume3D::from_data(dims, [1.0; 3], (0..n).map(f).collect()).unwrap()
    }

    fn bumpy(dims: [usize; 3]) -> Volume3D {
        let d = Dims::from(dims);
        vol(dims, |i| {
            let [x, y, z] = d.coords(i);
            (0.3 * x as f64).sin() * (0.2 * y as f64).cos() + 0.1 * ((x * y + z) % 5) as f64
        })
    }

    #[test]
    fn nrmse_examples() {
        let r = bumpy([8, 8, 8]);
        assert_eq!(nrmse(&r, &r, None).unwrap(), 0.0);
        let zero = r.map(|_| 0.0).unwrap();
        assert!((nrmse(&zero, &r, None).unwrap() - 100.0).abs() < 1e-12);
        let scaled = r.map(|v| 1.1 * v).unwrap();
        assert!((nrmse(&scaled, &r, None).unwrap() - 10.0).abs() < 1e-9);
        assert!(matches!(
            nrmse(&r, &zero, None),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn log_kernel_annihilates_constants_and_linear_ramps() {
        let d = Dims::new(20, 18, 16);
        let c = laplacian_of_gaussian(&vec![3.0; d.len()], d, &HfenConfig::default());
        assert!(c.iter().all(|v| v.abs() < 1e-12));
        let ramp: Vec<f64> = (0..d.len()).map(|i| d.coords(i)[0] as f64 * 0.5).collect();
        let l = laplacian_of_gaussian(&ramp, d, &HfenConfig::default());
        // away from the replicated borders
        assert!(l[d.index(10, 9, 8)].abs() < 1e-12);
    }

    #[test]
    fn log_of_quadratic_is_its_laplacian() {
        // ∇²(x²) = 2 up to the tap-sum correction of the discrete kernel
        let d = Dims::cube(24);
        let q: Vec<f64> = (0..d.len())
            .map(|i| (d.coords(i)[1] as f64 - 12.0).powi(2))
            .collect();
        let l = laplacian_of_gaussian(&q, d, &HfenConfig::default());
        let v = l[d.index(12, 12, 12)];
        assert!((v - 2.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn hfen_examples() {
        let r = bumpy([16, 16, 16]);
        assert_eq!(hfen(&r, &r, None).unwrap(), 0.0);
        let shifted = r.map(|v| v + 4.0).unwrap();
        assert!(hfen(&shifted, &r, None).unwrap() < 1e-9);
        let doubled = r.map(|v| 2.0 * v).unwrap();
        assert!((hfen(&doubled, &r, None).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn xsim_examples() {
        let r = bumpy([12, 12, 12]);
        assert_eq!(xsim(&r, &r, None).unwrap(), 1.0);
        let neg = r.map(|v| -v).unwrap();
        assert!(xsim(&neg, &r, None).unwrap() < 1.0);
        let other = r.map(|v| v * v - 0.2).unwrap();
        assert_eq!(
            xsim(&other, &r, None).unwrap(),
            xsim(&r, &other, None).unwrap()
        );
        let empty = MaskVolume::from_data([12, 12, 12], [1.0; 3], vec![false; 1728]);
        if let Ok(m) = empty {
            assert!(xsim(&r, &r, Some(&m)).is_err());
        }
    }

    #[test]
    fn pooled_metrics_match_single_and_concatenated() {
        let a = bumpy([8, 8, 8]);
        let b = a.map(|v| 0.8 * v + 0.05).unwrap();
        let single = map_metrics(&b, &a, None).unwrap();
        assert_eq!(single.nrmse, nrmse(&b, &a, None).unwrap());
        assert_eq!(single.xsim, xsim(&b, &a, None).unwrap());
        assert!((single.hfen - hfen(&b, &a, None).unwrap()).abs() < 1e-12);
        let mut acc = MetricAccumulator::default();
        acc.add(&b, &a, None).unwrap();
        acc.add(&b, &a, None).unwrap();
        let twice = acc.finish().unwrap();
        assert!((twice.nrmse - single.nrmse).abs() < 1e-12);
        assert!((twice.xsim - single.xsim).abs() < 1e-12);
    }

    #[test]
    fn roi_examples() {
        let v = vol([2, 1, 1], |i| [1.0, 3.0][i]);
        let m = MaskVolume::full([2, 1, 1], [1.0; 3]).unwrap();
        assert_eq!(
            roi_stats(&v, &m).unwrap(),
            RoiStats {
                mean: 2.0,
                std: 1.0,
                n: 2
            }
        );
        let c = vol([3, 3, 3], |_| 0.7);
        let s = roi_stats(&c, &MaskVolume::full([3, 3, 3], [1.0; 3]).unwrap()).unwrap();
        assert_eq!((s.mean, s.std, s.n), (0.7, 0.0, 27));
    }

    #[test]
    fn regression_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let r = linear_regression(&xs, &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert_eq!((r.slope, r.intercept, r.r_squared), (2.0, 0.0, 1.0));
        let flat = linear_regression(&xs, &[5.0; 4]).unwrap();
        assert_eq!((flat.slope, flat.r_squared), (0.0, 1.0));
        let d = 0.3;
        let noisy = linear_regression(&xs, &[1.0 - d, 2.0 + d, 3.0 - d, 4.0 + d]).unwrap();
        // slope = 1 + Σ(x − x̄)·noise / Σ(x − x̄)², with Σ(x − x̄)² = 5
        let sxy: f64 = [(-1.5, -d), (-0.5, d), (0.5, -d), (1.5, d)]
            .iter()
            .map(|(a, b)| a * b)
            .sum();
        assert!((noisy.slope - (1.0 + sxy / 5.0)).abs() < 1e-12);
        assert!(linear_regression(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(linear_regression(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn profiles() {
        let r = bumpy([6, 5, 4]);
        let p = line_profile(&r, [0.0, 2.0, 1.0], [5.0, 2.0, 1.0], 6).unwrap();
        for (k, (dist, v)) in p.iter().enumerate() {
            assert_eq!(*dist, k as f64);
            assert!((v - r.get(k, 2, 1)).abs() < 1e-15);
        }
        let same = line_profile(&r, [1.5, 1.5, 1.5], [1.5, 1.5, 1.5], 3).unwrap();
        assert!(same.iter().all(|&(d, v)| d == 0.0 && v == same[0].1));
        let c = vol([4, 4, 4], |_| 2.5);
        assert!(line_profile(&c, [0.0; 3], [3.0, 2.2, 1.7], 9)
            .unwrap()
            .iter()
            .all(|&(_, v)| (v - 2.5).abs() < 1e-15));
        assert!(line_profile(&c, [0.0; 3], [4.0, 0.0, 0.0], 3).is_err());
    }
}
