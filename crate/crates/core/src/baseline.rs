//! Iterative constrained least-squares separation used as a reference solver.
//!
//! The problem is solved in sum/difference coordinates `s = χ+ + χ−`,
//! `d = χ+ − χ−`, where the objective splits into a diagonal decay term in `d`
//! and a dipole term in `s`, and the sign constraints become `|s| ≤ d`.
//! Each iteration takes a projected gradient step scaled per coordinate block
//! and backtracks until the quadratic upper bound holds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{dipole_kernel, AcquisitionSet, DipoleKernel, SourcePair};
use crate::volume::{Fft3, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub w_field: f64,
    pub w_r2p: f64,
    pub lambda: f64,
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
    /// Fixed step scale instead of backtracking; an objective increase is then an error.
    pub fixed_step: Option<f64>,
    /// Power iterations for the dipole operator norm.
    pub power_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 1000,
            w_field: 1.0,
            w_r2p: 1.0,
            lambda: 1e-3,
            tol: 1e-10,
            fixed_step: None,
            power_iters: 30,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        for (v, name) in [
            (self.w_field, "w_field"),
            (self.w_r2p, "w_r2p"),
            (self.lambda, "lambda"),
            (self.tol, "tol"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Some(t) = self.fixed_step {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::invalid("fixed_step must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolverTrace {
    /// Objective at the initial point and after every iteration.
    pub objective: Vec<f64>,
    /// Masked RMS of `A(χ+ − χ−) − R2'` per entry of `objective`.
    pub r2p_residual: Vec<f64>,
    /// Masked RMS of `D⊗(χ+ + χ−) − ΔB` per entry of `objective`.
    pub field_residual: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the last scaled gradient-mapping step.
    pub gradient_mapping_norm: f64,
}

#[derive(Clone, Debug)]
pub struct SolverResult {
    pub sources: SourcePair,
    pub trace: SolverTrace,
}

struct Problem<'a> {
    cfg: &'a SolverConfig,
    kernel: DipoleKernel,
    plan: Fft3,
    mask: &'a [bool],
    a: &'a [f64],
    r2p: &'a [f64],
    field: &'a [f64],
    count: f64,
}

struct Eval {
    f: f64,
    rms_r: f64,
    rms_f: f64,
    gs: Vec<f64>,
    gd: Vec<f64>,
}

impl Problem<'_> {
    fn dipole(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.kernel.apply(&self.plan, x)
    }

    fn masked(&self, mut x: Vec<f64>) -> Vec<f64> {
        for (v, &m) in x.iter_mut().zip(self.mask) {
            if !m {
                *v = 0.0;
            }
        }
        x
    }

    fn eval(&self, s: &[f64], d: &[f64], grad: bool) -> Result<Eval> {
        let c = self.cfg;
        let ds = self.dipole(s)?;
        let n = s.len();
        let mut rf = vec![0.0; n];
        let mut rr = vec![0.0; n];
        let (mut er, mut ef, mut reg) = (0.0, 0.0, 0.0);
        for i in 0..n {
            if !self.mask[i] {
                continue;
            }
            rf[i] = ds[i] - self.field[i];
            rr[i] = self.a[i] * d[i] - self.r2p[i];
            ef += rf[i] * rf[i];
            er += rr[i] * rr[i];
            reg += 0.5 * (s[i] * s[i] + d[i] * d[i]);
        }
        let f = c.w_r2p * er + c.w_field * ef + c.lambda * reg;
        let (mut gs, mut gd) = (Vec::new(), Vec::new());
        if grad {
            gs = self.masked(self.dipole(&rf)?);
            gd = vec![0.0; n];
            for i in 0..n {
                if self.mask[i] {
                    gs[i] = 2.0 * c.w_field * gs[i] + c.lambda * s[i];
                    gd[i] = 2.0 * c.w_r2p * self.a[i] * rr[i] + c.lambda * d[i];
                }
            }
        }
        Ok(Eval {
            f,
            rms_r: (er / self.count).sqrt(),
            rms_f: (ef / self.count).sqrt(),
            gs,
            gd,
        })
    }

    /// Largest eigenvalue of `M D M D M` by power iteration.
    fn dipole_norm_sq(&self) -> Result<f64> {
        let n = self.mask.len();
        let mut x: Vec<f64> = (0..n)
            .map(|i| {
                if self.mask[i] {
                    1.0 + ((i * 7919) % 13) as f64 / 13.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut est = 4.0 / 9.0;
        for _ in 0..self.cfg.power_iters {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            x.iter_mut().for_each(|v| *v /= norm);
            let y = self.masked(self.dipole(&x)?);
            let y = self.masked(self.dipole(&y)?);
            est = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
            x = y;
        }
        // D has spectral radius 2/3
        Ok((est * 1.01).min(4.0 / 9.0))
    }
}

/// Projection of `(s, d)` onto `{|s| ≤ d}` under the metric `diag(hs, hd)`.
fn project_cone(s: f64, d: f64, hs: f64, hd: f64) -> (f64, f64) {
    if s.abs() <= d {
        return (s, d);
    }
    let mut best = (0.0, 0.0);
    let mut best_dist = hs * s * s + hd * d * d;
    for sign in [1.0, -1.0] {
        // ray (sign·t, t), t ≥ 0
        let t = (hs * sign * s + hd * d) / (hs + hd);
        if t > 0.0 {
            let dist = hs * (s - sign * t).powi(2) + hd * (d - t).powi(2);
            if dist < best_dist {
                best = (sign * t, t);
                best_dist = dist;
            }
        }
    }
    best
}

const MAX_BACKTRACKS: usize = 40;

/// Projected-gradient separation of an acquisition into χ+ ≥ 0 and χ− ≤ 0.
pub fn separate_iterative(acq: &AcquisitionSet, cfg: &SolverConfig) -> Result<SolverResult> {
    cfg.validate()?;
    let dims = acq.dims();
    let vs = acq.local_field.voxel_size();
    let mask = acq.mask.data();
    let a = acq.a_map.volume().data();
    if let Some(i) = (0..a.len()).find(|&i| mask[i] && !(a[i] > 0.0)) {
        return Err(Error::invalid(format!(
            "a_map must be > 0 inside the mask (voxel {i})"
        )));
    }
    let p = Problem {
        cfg,
        kernel: dipole_kernel(dims, vs)?,
        plan: Fft3::new(dims)?,
        mask,
        a,
        r2p: acq.r2_prime.data(),
        field: acq.local_field.data(),
        count: acq.mask.count() as f64,
    };
    let n = dims.len();
    let hs = 2.0 * cfg.w_field * p.dipole_norm_sq()? + cfg.lambda;
    let hd: Vec<f64> = a
        .iter()
        .map(|&v| 2.0 * cfg.w_r2p * v * v + cfg.lambda)
        .collect();
    if !(hs > 0.0) || hd.iter().zip(mask).any(|(&h, &m)| m && !(h > 0.0)) {
        return Err(Error::invalid(
            "objective has zero curvature; raise lambda or a data weight",
        ));
    }

    let qsm = acq.qsm.data();
    let mut s: Vec<f64> = (0..n).map(|i| if mask[i] { qsm[i] } else { 0.0 }).collect();
    let mut d: Vec<f64> = (0..n)
        .map(|i| if mask[i] { qsm[i].abs() } else { 0.0 })
        .collect();
    let mut cur = p.eval(&s, &d, true)?;
    let mut trace = SolverTrace {
        objective: vec![cur.f],
        r2p_residual: vec![cur.rms_r],
        field_residual: vec![cur.rms_f],
        iterations: 0,
        converged: false,
        gradient_mapping_norm: f64::INFINITY,
    };
    let mut t = cfg.fixed_step.unwrap_or(1.0);
    for _ in 0..cfg.max_iters {
        let mut tries = 0;
        let (ns, nd, next, step_norm) = loop {
            let mut ns = vec![0.0; n];
            let mut nd = vec![0.0; n];
            let (mut lin, mut quad) = (0.0, 0.0);
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let ys = s[i] - t * cur.gs[i] / hs;
                let yd = d[i] - t * cur.gd[i] / hd[i];
                let (ps, pd) = project_cone(ys, yd, hs, hd[i]);
                ns[i] = ps;
                nd[i] = pd;
                let (es, ed) = (ps - s[i], pd - d[i]);
                lin += cur.gs[i] * es + cur.gd[i] * ed;
                quad += hs * es * es + hd[i] * ed * ed;
            }
            let next = p.eval(&ns, &nd, true)?;
            if cfg.fixed_step.is_some() {
                if next.f > cur.f {
                    trace.objective.push(next.f);
                    return Err(Error::Solver {
                        message: format!("objective increased to {} with fixed step {t}", next.f),
                        trace: trace.objective,
                    });
                }
                break (ns, nd, next, quad.sqrt());
            }
            if next.f <= cur.f + lin + quad / (2.0 * t) + 1e-14 * cur.f.abs() {
                break (ns, nd, next, quad.sqrt());
            }
            tries += 1;
            if tries > MAX_BACKTRACKS {
                return Err(Error::Solver {
                    message: "line search failed to decrease the objective".into(),
                    trace: trace.objective,
                });
            }
            t *= 0.5;
        };
        let prev = cur.f;
        s = ns;
        d = nd;
        cur = next;
        trace.objective.push(cur.f);
        trace.r2p_residual.push(cur.rms_r);
        trace.field_residual.push(cur.rms_f);
        trace.iterations += 1;
        trace.gradient_mapping_norm = step_norm / t;
        if !cur.f.is_finite() {
            return Err(Error::Solver {
                message: "objective became non-finite".into(),
                trace: trace.objective,
            });
        }
        if prev - cur.f <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE) {
            trace.converged = true;
            break;
        }
        if cfg.fixed_step.is_none() {
            t = (t * 2.0).min(1.0);
        }
    }

    let pos: Vec<f64> = s
        .iter()
        .zip(&d)
        .map(|(s, d)| (0.5 * (s + d)).max(0.0))
        .collect();
    let neg: Vec<f64> = s
        .iter()
        .zip(&d)
        .map(|(s, d)| (0.5 * (s - d)).min(0.0))
        .collect();
    let sources = SourcePair::new(
        Volume3D::from_data(dims, vs, pos)?,
        Volume3D::from_data(dims, vs, neg)?,
    )?;
    Ok(SolverResult { sources, trace })
}
