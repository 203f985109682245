//! Directory layouts shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use susep::physics::{AcquisitionSet, DecayKernelMap, SourcePair};
use susep::synth::sample_files;
use susep::volume::{read_mask, read_svol, write_mask, write_svol, MaskVolume};

use crate::error::{CliError, CliResult};

pub const CONFIG_ECHO: &str = "config.json";
pub const NORM_FILE: &str = "norm.json";
pub const PHANTOM_FILE: &str = "phantom.json";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::config(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Loads an optional JSON config, falling back to defaults.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    path.map(read_json)
        .transpose()
        .map(Option::unwrap_or_default)
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
        ))
    }
}

fn file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Reads r2_prime, local_field, qsm, mask and (if present) a_map from `dir`.
/// A missing A map is replaced by zeros, which only inference tolerates.
pub fn read_acquisition(dir: &Path) -> CliResult<AcquisitionSet> {
    let [r2, field, qsm] = sample_files::INPUTS;
    let r2_prime = read_svol(file(dir, r2))?;
    let local_field = read_svol(file(dir, field))?;
    let qsm = read_svol(file(dir, qsm))?;
    let mask_path = file(dir, sample_files::MASK);
    let mask = if mask_path.exists() {
        read_mask(mask_path)?
    } else {
        MaskVolume::full(qsm.dims(), qsm.voxel_size())?
    };
    let a_path = file(dir, sample_files::A_MAP);
    let a_map = if a_path.exists() {
        DecayKernelMap::new(read_svol(a_path)?)?
    } else {
        DecayKernelMap::uniform(qsm.dims(), qsm.voxel_size(), 0.0)?
    };
    Ok(AcquisitionSet::new(
        local_field,
        r2_prime,
        qsm,
        a_map,
        mask,
    )?)
}

pub fn write_acquisition(dir: &Path, acq: &AcquisitionSet) -> CliResult<()> {
    let [r2, field, qsm] = sample_files::INPUTS;
    write_svol(&acq.r2_prime, file(dir, r2))?;
    write_svol(&acq.local_field, file(dir, field))?;
    write_svol(&acq.qsm, file(dir, qsm))?;
    write_svol(acq.a_map.volume(), file(dir, sample_files::A_MAP))?;
    write_mask(&acq.mask, file(dir, sample_files::MASK))?;
    Ok(())
}

/// Reads chi_pos/chi_neg without enforcing sign constraints.
pub fn read_sources(dir: &Path) -> CliResult<(susep::volume::Volume3D, susep::volume::Volume3D)> {
    Ok((
        read_svol(file(dir, sample_files::CHI_POS))?,
        read_svol(file(dir, sample_files::CHI_NEG))?,
    ))
}

pub fn write_sources(
    dir: &Path,
    pos: &susep::volume::Volume3D,
    neg: &susep::volume::Volume3D,
) -> CliResult<()> {
    write_svol(pos, file(dir, sample_files::CHI_POS))?;
    write_svol(neg, file(dir, sample_files::CHI_NEG))?;
    Ok(())
}

pub fn write_source_pair(dir: &Path, src: &SourcePair) -> CliResult<()> {
    write_sources(dir, src.chi_pos(), src.chi_neg())
}

pub fn read_mask_file(path: &Path) -> CliResult<MaskVolume> {
    Ok(read_mask(path)?)
}
