//! Run manifests: config hash, seeds and input digests. No timestamps, so
//! identical manifests mean identical runs.

use std::path::{Path, PathBuf};

use plexus_core::config::RunConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Serialize)]
struct Input {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Seeds {
    head: u64,
    train: u64,
    fold: u64,
    sample: u64,
    synth: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    config: String,
    seeds: Seeds,
    inputs: Vec<Input>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(cfg.canonical().as_bytes())
}

/// Writes `manifest.json` into `out_dir`.
pub fn write_manifest(out_dir: &Path, command: &str, cfg: &RunConfig, inputs: &[&PathBuf]) -> Result<(), CliError> {
    let inputs = inputs
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| CliError::data(p.display(), e))?;
            Ok(Input {
                path: p.display().to_string(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: config_hash(cfg),
        config: cfg.canonical(),
        seeds: Seeds {
            head: cfg.head_seed,
            train: cfg.train_seed,
            fold: cfg.fold_seed,
            sample: cfg.sample_seed,
            synth: cfg.synth_seed,
        },
        inputs,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), text + "\n")?;
    Ok(())
}
