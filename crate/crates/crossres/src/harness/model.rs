//! Dual-branch model assembly over one parameter store.
//!
//! Parameter names are grouped by fixed prefixes so checkpoints, freezing,
//! and checksums all address the same sets. Build order matters only in
//! that checkpoint loads must happen before [`Model::build`], which then
//! picks the loaded values up instead of initializing fresh ones.

use candle_core::{DType, Tensor};

use crate::checkpoint::DENOISER_PREFIX;
use crate::config::RunConfig;
use crate::diffusion::{
    extract_features, DenoiserNet, DiffusionFeatures, FeatureFusion, NoiseSchedule,
    SCALE_STRIDES,
};
use crate::error::{Error, Result};
use crate::label_space::source_space;
use crate::nn::params::ParamStore;
use crate::supervision::{PredictHead, PredictionMap};
use crate::transformer::{HierarchicalFusion, PatchEmbed, TransformerEncoder};

pub const FUSION_PREFIX: &str = "fusion";
pub const HEAD1_PREFIX: &str = "head1";
pub const PATCH_PREFIX: &str = "patch";
pub const ENCODER_PREFIX: &str = "encoder";
pub const HIER_PREFIX: &str = "hier";
pub const HEAD2_PREFIX: &str = "head2";

struct LocalBranch {
    denoiser: DenoiserNet,
    fusion: FeatureFusion,
    head: PredictHead,
}

struct GlobalBranch {
    patch: PatchEmbed,
    encoder: TransformerEncoder,
    hier: HierarchicalFusion,
    head: PredictHead,
}

/// The branches a mode requires, sharing one store.
pub struct Model {
    local: Option<LocalBranch>,
    global: Option<GlobalBranch>,
    schedule: NoiseSchedule,
    cfg: RunConfig,
    classes: usize,
}

/// Local-branch forward products: the fused representation that prototypes
/// live in, and its prediction.
pub struct LocalOutput {
    pub features: Tensor,
    pub pred: PredictionMap,
}

impl Model {
    pub fn build(store: &mut ParamStore, cfg: &RunConfig) -> Result<Model> {
        cfg.validate()?;
        let classes = source_space().len();
        let mode = cfg.train.mode;
        let schedule = cfg.diffusion.schedule()?;
        let local = if mode.trains_diffusion_branch() {
            let denoiser = DenoiserNet::new(store, DENOISER_PREFIX, cfg.diffusion)?;
            let fusion = FeatureFusion::new(
                store,
                FUSION_PREFIX,
                cfg.diffusion.scale_channels,
                cfg.fusion.fused_channels,
            )?;
            let head = PredictHead::new(store, HEAD1_PREFIX, cfg.fusion.fused_channels, classes)?;
            Some(LocalBranch {
                denoiser,
                fusion,
                head,
            })
        } else {
            None
        };
        let global = if mode.trains_transformer_branch() {
            let patch = PatchEmbed::new(store, PATCH_PREFIX, cfg.transformer)?;
            let encoder = TransformerEncoder::new(store, ENCODER_PREFIX, &cfg.transformer)?;
            let hier = HierarchicalFusion::new(
                store,
                HIER_PREFIX,
                cfg.transformer.d,
                cfg.diffusion.scale_channels,
                cfg.fusion.hierarchical_widths,
            )?;
            let head = PredictHead::new(
                store,
                HEAD2_PREFIX,
                cfg.fusion.hierarchical_widths[4],
                classes,
            )?;
            Some(GlobalBranch {
                patch,
                encoder,
                hier,
                head,
            })
        } else {
            None
        };
        Ok(Model {
            local,
            global,
            schedule,
            cfg: cfg.clone(),
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn has_local(&self) -> bool {
        self.local.is_some()
    }

    pub fn has_global(&self) -> bool {
        self.global.is_some()
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Marks the denoiser group untrainable. Must run before the optimizer
    /// snapshots the trainable set, and before feature extraction, which
    /// refuses unfrozen denoisers.
    pub fn freeze_denoiser(&mut self, store: &mut ParamStore) {
        if let Some(local) = &mut self.local {
            local.denoiser.freeze(store);
        }
    }

    /// Frozen-prior feature pyramid for `images`. Without a local branch
    /// (transformer_only) the pyramid is zeros with the configured channel
    /// counts, keeping the downstream fusion shape identical.
    pub fn features(
        &self,
        store: &ParamStore,
        images: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<DiffusionFeatures> {
        match &self.local {
            Some(local) => extract_features(
                &local.denoiser,
                store,
                images,
                self.cfg.diffusion.extraction_step,
                &self.schedule,
                noise,
            ),
            None => {
                let (b, _, h, w) = images.dims4()?;
                let sc = self.cfg.diffusion.scale_channels;
                let mut maps = Vec::with_capacity(5);
                for (i, stride) in SCALE_STRIDES.iter().enumerate() {
                    maps.push(Tensor::zeros(
                        (b, sc[i], h / stride, w / stride),
                        DType::F32,
                        images.device(),
                    )?);
                }
                let maps: [Tensor; 5] = maps.try_into().expect("five scales");
                DiffusionFeatures::new(maps, (h, w))
            }
        }
    }

    pub fn local_forward(
        &self,
        store: &mut ParamStore,
        feats: &DiffusionFeatures,
        train: bool,
    ) -> Result<LocalOutput> {
        let local = self
            .local
            .as_ref()
            .ok_or_else(|| Error::invalid("this mode has no diffusion branch"))?;
        let features = local.fusion.forward(store, feats, train)?;
        let pred = local.head.forward(&features)?;
        Ok(LocalOutput { features, pred })
    }

    pub fn global_forward(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        feats: &DiffusionFeatures,
        train: bool,
    ) -> Result<PredictionMap> {
        let global = self
            .global
            .as_ref()
            .ok_or_else(|| Error::invalid("this mode has no transformer branch"))?;
        let tokens = global.patch.forward(store, images)?;
        let encoded = global.encoder.encode(&tokens)?;
        let fused = global.hier.forward(store, &encoded, feats, train)?;
        global.head.forward(&fused)
    }

    /// The scored output: the transformer branch when the mode has one,
    /// the diffusion branch otherwise. Runs in inference mode.
    pub fn eval_forward(&self, store: &mut ParamStore, images: &Tensor) -> Result<PredictionMap> {
        let feats = self.features(store, images, None)?;
        if self.has_global() {
            self.global_forward(store, images, &feats, false)
        } else {
            Ok(self.local_forward(store, &feats, false)?.pred)
        }
    }
}
