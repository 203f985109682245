use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use susep::metrics::{
    cylinder_linearity, line_profile, roi_stats, HfenConfig, MapMetrics, MetricAccumulator,
    RoiStats, XsimConfig,
};
use susep::network::{load_checkpoint, NetworkParams};
use susep::synth::{
    generate_cylinder_phantom, sample_files, DatasetManifest, TrainingSample, MANIFEST_FILE,
};
use susep::training::{
    predict_samples, qsm_sign_split, score_predictions, BranchScores, TrainHistory,
};
use susep::volume::{MaskVolume, Volume3D};

use super::{read_phantom_record, PhantomRecord};
use crate::error::{CliError, CliResult};
use crate::files::{self, CONFIG_ECHO};
use crate::{EvalArgs, RegressionKind};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub hfen: HfenConfig,
    pub xsim: XsimConfig,
}

const BRANCHES: [&str; 2] = ["pos", "neg"];

#[derive(Serialize)]
struct MetricRow {
    label: String,
    branch: &'static str,
    #[serde(flatten)]
    metrics: MapMetrics,
}

#[derive(Serialize)]
struct RoiRow {
    label: String,
    branch: &'static str,
    roi: String,
    #[serde(flatten)]
    stats: RoiStats,
}

#[derive(Serialize)]
struct ProfileRow {
    label: String,
    branch: &'static str,
    profile: usize,
    distance_mm: f64,
    value: f64,
}

#[derive(Serialize)]
struct RegressionRow {
    label: String,
    fit: String,
    slope: f64,
    intercept: f64,
    r_squared: f64,
}

#[derive(Serialize, Default)]
struct Report {
    metrics: Vec<MetricRow>,
    rois: Vec<RoiRow>,
    profiles: Vec<ProfileRow>,
    regressions: Vec<RegressionRow>,
}

/// Runs `f` over `items` on at most `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> CliResult<R> + Sync,
) -> CliResult<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let results: Vec<CliResult<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<CliResult<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn parse_profile(spec: &str) -> CliResult<([f64; 3], [f64; 3], usize)> {
    let bad = || CliError::config(format!("profile {spec:?}: expected x0,y0,z0:x1,y1,z1:n"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let point = |p: &str| -> CliResult<[f64; 3]> {
        let v: Vec<f64> = p
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<CliResult<_>>()?;
        v.try_into().map_err(|_| bad())
    };
    let n = parts[2].trim().parse::<usize>().map_err(|_| bad())?;
    Ok((point(parts[0])?, point(parts[1])?, n))
}

fn csv<T>(header: &str, rows: &[T], line: impl Fn(&T) -> String) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

fn branch_of<'a>(pair: &'a (Volume3D, Volume3D), branch: &str) -> &'a Volume3D {
    if branch == "pos" {
        &pair.0
    } else {
        &pair.1
    }
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let cfg: EvalConfig = files::load_config(a.config.as_deref())?;
    if a.ablation {
        return ablation(&a, &cfg);
    }
    let reference_dir = a.reference.as_deref().expect("clap requires --reference");
    if a.recons.is_empty() {
        return Err(CliError::config(
            "eval needs at least one --recon label=dir",
        ));
    }
    let reference = files::read_sources(reference_dir)?;
    let default_mask = reference_dir.join(sample_files::MASK);
    let mask = match (&a.mask, a.no_mask) {
        (_, true) => None,
        (Some(p), false) => Some(files::read_mask_file(p)?),
        (None, false) if default_mask.exists() => Some(files::read_mask_file(&default_mask)?),
        (None, false) => None,
    };
    let recons: Vec<(String, (Volume3D, Volume3D))> = a
        .recons
        .iter()
        .map(|(label, dir)| Ok((label.clone(), files::read_sources(dir)?)))
        .collect::<CliResult<_>>()?;

    let jobs = a.jobs.unwrap_or(1);
    let mut report = Report::default();
    let scored = par_map(&recons, jobs, |(label, pair)| {
        BRANCHES
            .iter()
            .map(|&b| {
                let mut acc = MetricAccumulator::new(cfg.hfen, cfg.xsim);
                acc.add(branch_of(pair, b), branch_of(&reference, b), mask.as_ref())?;
                Ok(MetricRow {
                    label: label.clone(),
                    branch: b,
                    metrics: acc.finish()?,
                })
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    report.metrics = scored.into_iter().flatten().collect();

    let mut all = vec![("reference".to_string(), reference.clone())];
    all.extend(recons.iter().cloned());
    for (name, path) in &a.rois {
        let roi: MaskVolume = files::read_mask_file(path)?;
        for (label, pair) in &all {
            for b in BRANCHES {
                report.rois.push(RoiRow {
                    label: label.clone(),
                    branch: b,
                    roi: name.clone(),
                    stats: roi_stats(branch_of(pair, b), &roi)?,
                });
            }
        }
    }
    for (k, spec) in a.profiles.iter().enumerate() {
        let (p0, p1, n) = parse_profile(spec)?;
        for (label, pair) in &all {
            for b in BRANCHES {
                for (distance_mm, value) in line_profile(branch_of(pair, b), p0, p1, n)? {
                    report.profiles.push(ProfileRow {
                        label: label.clone(),
                        branch: b,
                        profile: k,
                        distance_mm,
                        value,
                    });
                }
            }
        }
    }
    if a.regression == Some(RegressionKind::SingleVsMixed) {
        let PhantomRecord::Cylinder { config } = read_phantom_record(reference_dir)? else {
            return Err(CliError::config(
                "--regression needs a cylinder phantom as --reference",
            ));
        };
        let ph = generate_cylinder_phantom(&config)?;
        for (label, pair) in &all {
            let rep = cylinder_linearity(&pair.0, &pair.1, &ph, &config)?;
            let fits = rep
                .within_row
                .iter()
                .map(|r| (format!("row{}_{}", r.row, r.branch), r.fit))
                .chain([("single_vs_mixed".to_string(), rep.single_vs_mixed)]);
            for (fit, r) in fits {
                report.regressions.push(RegressionRow {
                    label: label.clone(),
                    fit,
                    slope: r.slope,
                    intercept: r.intercept,
                    r_squared: r.r_squared,
                });
            }
        }
    }

    files::ensure_dir(&a.out)?;
    files::write_json(&a.out.join(CONFIG_ECHO), &cfg)?;
    files::write_json(&a.out.join("report.json"), &report)?;
    let metrics = csv("label,branch,nrmse,hfen,xsim", &report.metrics, |r| {
        format!(
            "{},{},{},{},{}",
            r.label, r.branch, r.metrics.nrmse, r.metrics.hfen, r.metrics.xsim
        )
    });
    files::write_text(&a.out.join("metrics.csv"), &metrics)?;
    if !report.rois.is_empty() {
        let t = csv("label,branch,roi,mean,std,n", &report.rois, |r| {
            format!(
                "{},{},{},{},{},{}",
                r.label, r.branch, r.roi, r.stats.mean, r.stats.std, r.stats.n
            )
        });
        files::write_text(&a.out.join("roi.csv"), &t)?;
    }
    if !report.profiles.is_empty() {
        let t = csv(
            "label,branch,profile,distance_mm,value",
            &report.profiles,
            |r| {
                format!(
                    "{},{},{},{},{}",
                    r.label, r.branch, r.profile, r.distance_mm, r.value
                )
            },
        );
        files::write_text(&a.out.join("profiles.csv"), &t)?;
    }
    if !report.regressions.is_empty() {
        let t = csv(
            "label,fit,slope,intercept,r_squared",
            &report.regressions,
            |r| {
                format!(
                    "{},{},{},{},{}",
                    r.label, r.fit, r.slope, r.intercept, r.r_squared
                )
            },
        );
        files::write_text(&a.out.join("regression.csv"), &t)?;
    }
    print!("{metrics}");
    Ok(())
}

/// Table of pooled patch metrics for the two checkpoints and the sign-split reference.
fn ablation_table(
    with: &NetworkParams<f32>,
    without: &NetworkParams<f32>,
    samples: &[&TrainingSample],
    manifest: &DatasetManifest,
) -> CliResult<String> {
    let scores: Vec<(&'static str, BranchScores)> = vec![
        (
            "with_contrast",
            score_predictions(&predict_samples(with, samples, 2)?, samples)?,
        ),
        (
            "without_contrast",
            score_predictions(&predict_samples(without, samples, 2)?, samples)?,
        ),
        (
            "qsm_sign_split",
            score_predictions(
                &samples
                    .iter()
                    .map(|s| qsm_sign_split(s, &manifest.norm))
                    .collect::<susep::Result<Vec<_>>>()?,
                samples,
            )?,
        ),
    ];
    let mut out = String::from("method,branch,nrmse,hfen,xsim\n");
    for (method, s) in &scores {
        for (branch, m) in [("pos", s.pos), ("neg", s.neg)] {
            writeln!(out, "{method},{branch},{},{},{}", m.nrmse, m.hfen, m.xsim)
                .expect("write to string");
        }
    }
    Ok(out)
}

fn ablation(a: &EvalArgs, cfg: &EvalConfig) -> CliResult<()> {
    let data: &Path = a.data.as_deref().expect("clap requires --data");
    let ck = |p: &Option<PathBuf>| -> CliResult<NetworkParams<f32>> {
        Ok(load_checkpoint(
            p.as_deref().expect("clap requires both checkpoints"),
        )?)
    };
    let (with, without) = (ck(&a.with)?, ck(&a.without)?);
    let manifest = DatasetManifest::load(data.join(MANIFEST_FILE))?;
    let samples = manifest.load_all(data)?;
    let indices: Vec<usize> = match &a.history {
        Some(h) => TrainHistory::load(h)?.validation_indices,
        None => (0..samples.len()).collect(),
    };
    if let Some(&i) = indices.iter().find(|&&i| i >= samples.len()) {
        return Err(CliError::config(format!(
            "history index {i} outside dataset of {}",
            samples.len()
        )));
    }
    let test: Vec<&TrainingSample> = indices.iter().map(|&i| &samples[i]).collect();
    let table = ablation_table(&with, &without, &test, &manifest)?;
    files::ensure_dir(&a.out)?;
    files::write_json(&a.out.join(CONFIG_ECHO), cfg)?;
    files::write_text(&a.out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}
