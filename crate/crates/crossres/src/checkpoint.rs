//! Versioned checkpoint directories.
//!
//! Layout:
//!
//! ```text
//! dir/meta.toml           format version, kind, step, seed, hashes, RNG position
//! dir/config.toml         full canonical run config
//! dir/params.safetensors  every parameter in the store
//! dir/optim.safetensors   optimizer moments (train checkpoints only)
//! ```
//!
//! `meta.toml` is written last so a torn write cannot look like a complete
//! checkpoint. Loading re-hashes the stored config and the denoiser
//! parameter group and rejects any disagreement with `meta.toml`, so a
//! checkpoint cannot silently drift from the run that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{AblationMode, RunConfig};
use crate::error::{Error, Result};
use crate::nn::optim::AdamW;
use crate::nn::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

/// Parameter-name prefix of the frozen denoiser group in every store.
pub const DENOISER_PREFIX: &str = "denoiser";

const META_FILE: &str = "meta.toml";
const CONFIG_FILE: &str = "config.toml";
const PARAMS_FILE: &str = "params.safetensors";
const OPTIM_FILE: &str = "optim.safetensors";

/// Fingerprint of the denoiser parameter group, trainable or not.
pub fn denoiser_checksum(store: &ParamStore) -> Result<String> {
    store.checksum_prefix(&format!("{DENOISER_PREFIX}."))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// A pretrained denoiser: parameters only, no optimizer state.
    Denoiser,
    /// A full training state: both branches plus optimizer moments.
    Train,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub step: u64,
    pub seed: u64,
    pub mode: AblationMode,
    /// Hash of the full canonical config text.
    pub config_sha256: String,
    /// Hash of the `[diffusion]` section; compatibility key for reusing a
    /// pretrained denoiser downstream.
    pub prior_sha256: String,
    /// Checksum of the `denoiser.` parameter group at save time.
    pub denoiser_checksum: String,
    /// Training-stream RNG position, decimal u128. Zero for fresh streams.
    pub rng_word_pos: String,
}

impl CheckpointMeta {
    pub fn rng_word_pos_u128(&self) -> Result<u128> {
        self.rng_word_pos.parse().map_err(|_| {
            Error::Checkpoint(format!(
                "rng_word_pos {:?} is not a decimal integer",
                self.rng_word_pos
            ))
        })
    }
}

/// A checkpoint's metadata and the config it was produced under.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub meta: CheckpointMeta,
    pub config: RunConfig,
}

fn write_meta_and_config(dir: &Path, meta: &CheckpointMeta, config: &RunConfig) -> Result<()> {
    config.save(&dir.join(CONFIG_FILE))?;
    let text = toml::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(dir.join(META_FILE), text).map_err(|e| Error::io(dir.join(META_FILE), e))
}

fn build_meta(
    kind: CheckpointKind,
    config: &RunConfig,
    store: &ParamStore,
    step: u64,
    rng_word_pos: u128,
) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind,
        step,
        seed: config.train.seed,
        mode: config.train.mode,
        config_sha256: config.config_sha256()?,
        prior_sha256: config.prior_sha256()?,
        denoiser_checksum: denoiser_checksum(store)?,
        rng_word_pos: rng_word_pos.to_string(),
    })
}

/// Saves a pretrained denoiser. The store is expected to hold the denoiser
/// group; anything else it holds is saved too and restored verbatim.
pub fn save_denoiser(dir: &Path, config: &RunConfig, store: &ParamStore, step: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    store.save(&dir.join(PARAMS_FILE))?;
    let meta = build_meta(CheckpointKind::Denoiser, config, store, step, 0)?;
    write_meta_and_config(dir, &meta, config)
}

/// Saves a full training state, optimizer moments included.
pub fn save_train(
    dir: &Path,
    config: &RunConfig,
    store: &ParamStore,
    optim: &AdamW,
    step: u64,
    rng_word_pos: u128,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    store.save(&dir.join(PARAMS_FILE))?;
    optim.save_state(&dir.join(OPTIM_FILE))?;
    let meta = build_meta(CheckpointKind::Train, config, store, step, rng_word_pos)?;
    write_meta_and_config(dir, &meta, config)
}

/// Reads and verifies `meta.toml` + `config.toml` without touching
/// parameters.
pub fn read_meta(dir: &Path) -> Result<Loaded> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{META_FILE}: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (this build reads {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let config = RunConfig::from_path(&dir.join(CONFIG_FILE))?;
    let have = config.config_sha256()?;
    if have != meta.config_sha256 {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: meta.toml records {}, config.toml hashes to {have}",
            meta.config_sha256
        )));
    }
    let prior = config.prior_sha256()?;
    if prior != meta.prior_sha256 {
        return Err(Error::Checkpoint(format!(
            "prior hash mismatch: meta.toml records {}, config.toml yields {prior}",
            meta.prior_sha256
        )));
    }
    Ok(Loaded { meta, config })
}

/// Loads a checkpoint's parameters into `store` and verifies the denoiser
/// group against its recorded checksum.
pub fn load(dir: &Path, store: &mut ParamStore) -> Result<Loaded> {
    let loaded = read_meta(dir)?;
    store.load(&dir.join(PARAMS_FILE))?;
    let have = denoiser_checksum(store)?;
    if have != loaded.meta.denoiser_checksum {
        return Err(Error::Checkpoint(format!(
            "denoiser parameters hash to {have}, checkpoint records {}",
            loaded.meta.denoiser_checksum
        )));
    }
    Ok(loaded)
}

/// Restores optimizer moments from a train checkpoint. The optimizer must
/// already be constructed over the same parameter names.
pub fn load_optim(dir: &Path, optim: &mut AdamW, meta: &CheckpointMeta) -> Result<()> {
    if meta.kind != CheckpointKind::Train {
        return Err(Error::Checkpoint(
            "checkpoint has no optimizer state (not a train checkpoint)".into(),
        ));
    }
    optim.load_state(&dir.join(OPTIM_FILE), meta.step)
}

/// A pretrained denoiser is usable downstream exactly when its
/// `[diffusion]` section matches the current config's.
pub fn check_prior_compat(current: &RunConfig, denoiser_meta: &CheckpointMeta) -> Result<()> {
    if denoiser_meta.kind != CheckpointKind::Denoiser {
        return Err(Error::Checkpoint(
            "expected a pretrained denoiser checkpoint".into(),
        ));
    }
    let want = current.prior_sha256()?;
    if want != denoiser_meta.prior_sha256 {
        return Err(Error::Checkpoint(format!(
            "denoiser checkpoint was pretrained under a different [diffusion] \
             config: prior hash {} vs current {want}",
            denoiser_meta.prior_sha256
        )));
    }
    Ok(())
}

/// Convenience for tests and tooling: the params file path inside `dir`.
pub fn params_path(dir: &Path) -> PathBuf {
    dir.join(PARAMS_FILE)
}
