//! Run configuration: sectioned `key = value` text, canonicalized before
//! hashing so formatting, comments, and section order never change a run's
//! identity.
//!
//! Two hashes matter. [`RunConfig::config_sha256`] covers the whole config
//! and names the run. [`RunConfig::prior_sha256`] covers only the
//! `[diffusion]` section and decides whether a pretrained denoiser
//! checkpoint may feed a downstream run: downstream settings (transformer,
//! fusion, optimizer, ablation mode, seed) can change freely without
//! invalidating a prior trained under the same schedule and architecture.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::transformer::TransformerConfig;

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Which parts of the dual-branch model train and which output is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Both branches, confidence-masked pseudo-label supervision.
    Full,
    /// Local branch alone; the objective is its label loss.
    DiffusionOnly,
    /// Global branch alone over zeroed feature pyramids, supervised
    /// directly by the labels.
    TransformerOnly,
    /// Both branches, but every pseudo-labeled pixel is kept.
    NoPcem,
}

impl AblationMode {
    /// Row order of the ablation report: single branches first, then the
    /// unmasked dual-branch run, then the full method.
    pub const ALL: [AblationMode; 4] = [
        AblationMode::DiffusionOnly,
        AblationMode::TransformerOnly,
        AblationMode::NoPcem,
        AblationMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::DiffusionOnly => "diffusion_only",
            AblationMode::TransformerOnly => "transformer_only",
            AblationMode::NoPcem => "no_pcem",
        }
    }

    /// The local branch (frozen denoiser, fusion, first head) is built and
    /// its label loss enters the objective.
    pub fn trains_diffusion_branch(self) -> bool {
        !matches!(self, AblationMode::TransformerOnly)
    }

    /// The global branch (encoder, hierarchical fusion, second head) is
    /// built and optimized.
    pub fn trains_transformer_branch(self) -> bool {
        !matches!(self, AblationMode::DiffusionOnly)
    }

    /// Pseudo-labels are filtered through the prototype cosine mask rather
    /// than taken wholesale.
    pub fn uses_confidence_mask(self) -> bool {
        matches!(self, AblationMode::Full)
    }

    /// Whether a pretrained denoiser checkpoint must exist before training.
    pub fn needs_denoiser(self) -> bool {
        self.trains_diffusion_branch()
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "diffusion_only" => Ok(AblationMode::DiffusionOnly),
            "transformer_only" => Ok(AblationMode::TransformerOnly),
            "no_pcem" => Ok(AblationMode::NoPcem),
            other => Err(Error::Config(format!(
                "unknown ablation mode {other:?}; expected one of \
                 full, diffusion_only, transformer_only, no_pcem"
            ))),
        }
    }
}

/// Dataset geometry and degradation settings. `root` holds the `train`,
/// `val`, and `test` split directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: String,
    pub scene_height: usize,
    pub scene_width: usize,
    pub scenes_train: usize,
    pub scenes_val: usize,
    pub scenes_test: usize,
    pub num_regions: usize,
    pub texture_noise_sigma: f32,
    pub meters_per_pixel: f64,
    /// Resolution gap R between imagery and supervision.
    pub factor: usize,
    pub flip_rate: f64,
    pub boundary_shift: usize,
    pub crop_size: usize,
    pub crops_per_image: usize,
}

/// Channel widths of the two fusion paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Width of the local branch's fused full-resolution representation;
    /// also the prototype feature dimension.
    pub fused_channels: usize,
    /// Stage outputs of the token-to-pixel fusion ladder, coarsest first.
    pub hierarchical_widths: [usize; 5],
}

/// Optimization settings shared by pretraining and dual-branch training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: AblationMode,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Mixing weight of the label loss against the pseudo-label loss.
    pub lambda: f64,
    /// Cosine threshold of the confidence mask.
    pub tau: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub transformer: TransformerConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
}

/// Serialization scope of [`RunConfig::prior_sha256`].
#[derive(Serialize)]
struct PriorScope<'a> {
    diffusion: &'a DiffusionConfig,
}

impl Default for RunConfig {
    /// Reference-scale settings: 224 crops, 50 crops per image, batch 8,
    /// learning rate 0.01, lambda 0.5, tau 0.9, 1000 diffusion steps with
    /// extraction at step 1000. Step counts have no reference default and
    /// are sized here for an overnight CPU run.
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                root: "data/default".into(),
                scene_height: 448,
                scene_width: 448,
                scenes_train: 100,
                scenes_val: 5,
                scenes_test: 20,
                num_regions: 24,
                texture_noise_sigma: 0.05,
                meters_per_pixel: 1.0,
                factor: 8,
                flip_rate: 0.1,
                boundary_shift: 2,
                crop_size: 224,
                crops_per_image: 50,
            },
            diffusion: DiffusionConfig::default(),
            transformer: TransformerConfig::default(),
            fusion: FusionConfig {
                fused_channels: 64,
                hierarchical_widths: [128, 96, 64, 48, 32],
            },
            train: TrainConfig {
                mode: AblationMode::Full,
                seed: 0,
                batch_size: 8,
                learning_rate: 0.01,
                pretrain_steps: 10_000,
                pretrain_lr: 1e-4,
                lambda: 0.5,
                tau: 0.9,
                max_steps: 10_000,
            },
        }
    }
}

impl RunConfig {
    /// Desk-scale profile: the whole pipeline (generate, pretrain, train,
    /// evaluate) fits in CPU minutes. 64-pixel crops over 128-pixel scenes,
    /// resolution gap 8, a 4-block encoder, and step budgets well under 5k.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            data: DataConfig {
                root: "data/desk".into(),
                scene_height: 128,
                scene_width: 128,
                scenes_train: 8,
                scenes_val: 2,
                scenes_test: 4,
                num_regions: 10,
                texture_noise_sigma: 0.05,
                meters_per_pixel: 1.0,
                factor: 8,
                flip_rate: 0.1,
                boundary_shift: 2,
                crop_size: 64,
                crops_per_image: 50,
            },
            diffusion: DiffusionConfig {
                base_channels: 8,
                scale_channels: [16, 12, 8, 8, 8],
                time_embed_dim: 16,
                extraction_step: 100,
                ..DiffusionConfig::default()
            },
            transformer: TransformerConfig {
                depth: 4,
                heads: 4,
                d: 64,
                patch_size: 8,
                mlp_ratio: 4,
                positional: true,
            },
            fusion: FusionConfig {
                fused_channels: 24,
                hierarchical_widths: [32, 24, 16, 12, 12],
            },
            train: TrainConfig {
                mode: AblationMode::Full,
                seed,
                batch_size: 8,
                learning_rate: 1e-3,
                pretrain_steps: 500,
                pretrain_lr: 3e-3,
                lambda: 0.5,
                tau: 0.9,
                max_steps: 600,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        if d.root.is_empty() {
            return cfg("data.root must not be empty".into());
        }
        if d.scene_height < 16 || d.scene_width < 16 {
            return cfg(format!(
                "scenes must be at least 16x16, got {}x{}",
                d.scene_height, d.scene_width
            ));
        }
        if d.factor == 0 {
            return cfg("factor must be at least 1".into());
        }
        if !d.scene_height.is_multiple_of(d.factor) || !d.scene_width.is_multiple_of(d.factor) {
            return cfg(format!(
                "scene size {}x{} is not divisible by factor {}",
                d.scene_height, d.scene_width, d.factor
            ));
        }
        if d.crop_size == 0 || d.crop_size > d.scene_height || d.crop_size > d.scene_width {
            return cfg(format!(
                "crop_size {} must be in 1..={}",
                d.crop_size,
                d.scene_height.min(d.scene_width)
            ));
        }
        if !d.crop_size.is_multiple_of(d.factor) {
            return cfg(format!(
                "crop_size {} is not divisible by factor {}; crops would \
                 straddle supervision pixels",
                d.crop_size, d.factor
            ));
        }
        if !d.crop_size.is_multiple_of(16) {
            return cfg(format!(
                "crop_size {} is not divisible by 16, the deepest feature stride",
                d.crop_size
            ));
        }
        if !d.crop_size.is_multiple_of(self.transformer.patch_size) {
            return cfg(format!(
                "crop_size {} is not divisible by patch_size {}",
                d.crop_size, self.transformer.patch_size
            ));
        }
        if d.scenes_train == 0 || d.scenes_val == 0 || d.scenes_test == 0 {
            return cfg("every split needs at least one scene".into());
        }
        if d.num_regions < 2 {
            return cfg("scenes need at least 2 regions".into());
        }
        if !(0.0..=1.0).contains(&d.texture_noise_sigma) {
            return cfg(format!(
                "texture_noise_sigma must be in [0, 1], got {}",
                d.texture_noise_sigma
            ));
        }
        if !(d.meters_per_pixel.is_finite() && d.meters_per_pixel > 0.0) {
            return cfg("meters_per_pixel must be positive".into());
        }
        if !(0.0..1.0).contains(&d.flip_rate) {
            return cfg(format!("flip_rate must be in [0, 1), got {}", d.flip_rate));
        }
        if d.crops_per_image == 0 {
            return cfg("crops_per_image must be at least 1".into());
        }
        self.diffusion.validate()?;
        self.transformer.validate()?;
        if self.fusion.fused_channels == 0 {
            return cfg("fused_channels must be at least 1".into());
        }
        if self.fusion.hierarchical_widths.contains(&0) {
            return cfg("hierarchical_widths must all be at least 1".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return cfg("batch_size must be at least 1".into());
        }
        for (what, lr) in [("learning_rate", t.learning_rate), ("pretrain_lr", t.pretrain_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return cfg(format!("{what} must be positive, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&t.lambda) {
            return cfg(format!("lambda must be in [0, 1], got {}", t.lambda));
        }
        if !(-1.0..=1.0).contains(&t.tau) {
            return cfg(format!("tau must be in [-1, 1], got {}", t.tau));
        }
        Ok(())
    }

    /// Parses sectioned `key = value` text. Unknown keys are rejected;
    /// section order, comments, and whitespace are free.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })
    }

    /// The one true text form: fixed key order, no comments. Parsing and
    /// re-canonicalizing any equivalent text reproduces it byte for byte.
    pub fn canonical_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the canonical text; names the run in checkpoints and logs.
    pub fn config_sha256(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_text()?.as_bytes()))
    }

    /// Hash of the `[diffusion]` section alone: schedule and denoiser
    /// architecture. A pretrained denoiser is accepted downstream exactly
    /// when this value matches.
    pub fn prior_sha256(&self) -> Result<String> {
        let scope = PriorScope {
            diffusion: &self.diffusion,
        };
        let text = toml::to_string(&scope).map_err(|e| Error::Config(e.to_string()))?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_text()?).map_err(|e| Error::io(path, e))
    }
}
