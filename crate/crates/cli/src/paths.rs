//! Configuration files, run directories and dataset locations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clim::synth::{config_hash, SynthDataset};
use clim::{Error, Result, RunConfig};
use log::info;
use serde::Deserialize;

use crate::ConfigArgs;

/// Optional `[paths]` table of a configuration file. Relative paths are
/// resolved against the file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub runs: Option<PathBuf>,
}

pub struct Loaded {
    pub config: RunConfig,
    pub paths: Paths,
}

pub fn load_config(args: &ConfigArgs) -> Result<Loaded> {
    let (mut table, base) = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let table = text
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (toml::Table::new(), PathBuf::new()),
    };
    let mut paths: Paths = match table.remove("paths") {
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[paths]: {e}")))?,
        None => Paths::default(),
    };
    for p in [&mut paths.data, &mut paths.runs].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    let config = RunConfig::load_table(table, &args.overrides)?;
    Ok(Loaded { config, paths })
}

/// `<root>/<first 12 hex digits of the config hash>-<unix seconds>`.
pub fn fresh_run_dir(root: &Path, config: &RunConfig) -> PathBuf {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    root.join(format!("{}-{secs}", &config.hash()[..12]))
}

/// Creates `dir`, refusing a non-empty directory unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if occupied {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Fails early, as a usage error, when `dir` does not hold a dataset cache.
pub fn check_data_dir(dir: &Path) -> Result<()> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Config(format!(
            "{} is not a dataset cache (no manifest.json); run generate-data first",
            dir.display()
        )));
    }
    Ok(())
}

/// Reads the cache at `dir` when given, otherwise regenerates the dataset.
pub fn dataset(config: &RunConfig, dir: Option<&Path>) -> Result<SynthDataset> {
    match dir {
        Some(dir) => {
            check_data_dir(dir)?;
            let ds = SynthDataset::read_cache(dir)?;
            let want = config_hash(config.data_seed, &config.data);
            if ds.config_hash() != want {
                return Err(Error::Config(format!(
                    "dataset in {} was generated from a different data configuration",
                    dir.display()
                )));
            }
            info!(
                "loaded {} train / {} eval samples from {}",
                ds.train.len(),
                ds.eval.len(),
                dir.display()
            );
            Ok(ds)
        }
        None => {
            let ds = SynthDataset::generate(config.data_seed, &config.data)?;
            info!("generated {} train / {} eval samples", ds.train.len(), ds.eval.len());
            Ok(ds)
        }
    }
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}
