//! Run configuration: every knob of data generation, training,
//! evaluation, and the ablation harness, serializable as JSON.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mgpm::{FusionStrategy, ImageTextFusion};
use crate::scenegen::DatasetConfig;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Dims {
    /// Prompt/text embedding width.
    pub d: usize,
    /// RoI visual feature width.
    pub d_v: usize,
    /// Latent scene-context width.
    pub d_c: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { d: 32, d_v: 32, d_c: 8 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PromptParams {
    /// Templates per category.
    pub n_p: usize,
    /// Descriptors per template.
    pub l: usize,
    /// Templates sampled per RoI per step.
    pub k_sample: usize,
}

impl Default for PromptParams {
    fn default() -> Self {
        PromptParams {
            n_p: 32,
            l: 4,
            k_sample: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SamplingParams {
    /// Reparameterized draws per selected template.
    pub n_s: usize,
    /// RoIs selected per scene per batch.
    pub rois_per_scene: usize,
    /// Scenes per batch.
    pub batch_scenes: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            n_s: 4,
            rois_per_scene: 4,
            batch_scenes: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimParams {
    pub epochs: usize,
    /// Batches drawn per epoch.
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimParams {
    fn default() -> Self {
        OptimParams {
            epochs: 25,
            steps_per_epoch: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Which pseudo-label loss family supervises stage 2.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Stage2LossKind {
    Weakm3d,
    Gga,
}

impl Stage2LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            Stage2LossKind::Weakm3d => "weakm3d",
            Stage2LossKind::Gga => "gga",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Stage2Params {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub loss: Stage2LossKind,
}

impl Default for Stage2Params {
    fn default() -> Self {
        Stage2Params {
            epochs: 50,
            steps_per_epoch: 16,
            loss: Stage2LossKind::Weakm3d,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GgaLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Score-term weight carried for configuration completeness; the
    /// score head itself belongs to detector backbones outside this
    /// crate, so the weight is unused here.
    pub lambda4: f64,
}

impl Default for GgaLossWeights {
    fn default() -> Self {
        GgaLossWeights {
            lambda1: 0.3,
            lambda2: 0.1,
            lambda3: 0.1,
            lambda4: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    /// Prompt-regularizer weight in the stage-1 composite.
    pub alpha: f64,
    /// Pseudo-3D weight in the stage-2 composite.
    pub lambda: f64,
    /// Center-term weight inside the density-balanced 3D loss.
    pub lambda_center: f64,
    pub gga: GgaLossWeights,
    /// Initial contrastive temperature.
    pub tau_init: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            lambda: 1.0,
            lambda_center: 1.0,
            gga: GgaLossWeights::default(),
            tau_init: 0.07,
        }
    }
}

/// Full run configuration. The effective config is serialized verbatim
/// into every output directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: Dims,
    pub prompts: PromptParams,
    pub sampling: SamplingParams,
    pub optim: OptimParams,
    pub stage2: Stage2Params,
    pub loss: LossWeights,
    pub fusion: FusionStrategy,
    pub image_text_fusion: ImageTextFusion,
    pub gaussian_sampling: bool,
    /// Scale of seeded Gaussian weight initialization.
    pub init_scale: f64,
    /// Neighborhood radius of the point-density weights (meters).
    pub density_radius: f64,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dims: Dims::default(),
            prompts: PromptParams::default(),
            sampling: SamplingParams::default(),
            optim: OptimParams::default(),
            stage2: Stage2Params::default(),
            loss: LossWeights::default(),
            fusion: FusionStrategy::Maxpool,
            image_text_fusion: ImageTextFusion::CrossAttention,
            gaussian_sampling: true,
            init_scale: 0.05,
            density_radius: 0.4,
            dataset: DatasetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.dims.d < 1 || c.dims.d_v < 1 || c.dims.d_c < 1 {
            return Err(Error::Config("dims must be >= 1".into()));
        }
        if c.prompts.n_p < 1 || c.prompts.l < 1 {
            return Err(Error::Config("prompt bank needs n_p, l >= 1".into()));
        }
        if c.prompts.k_sample < 1 || c.prompts.k_sample > c.prompts.n_p {
            return Err(Error::Config(format!(
                "k_sample must lie in 1..=n_p, got {} of {}",
                c.prompts.k_sample, c.prompts.n_p
            )));
        }
        if c.sampling.n_s < 1 || c.sampling.rois_per_scene < 1 || c.sampling.batch_scenes < 1 {
            return Err(Error::Config("sampling counts must be >= 1".into()));
        }
        if c.optim.steps_per_epoch < 1 || c.stage2.steps_per_epoch < 1 {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        if !(c.optim.lr > 0.0) || !(c.optim.eps > 0.0) {
            return Err(Error::Config("learning rate and eps must be > 0".into()));
        }
        if !(0.0..1.0).contains(&c.optim.beta1) || !(0.0..1.0).contains(&c.optim.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if c.optim.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(c.loss.alpha >= 0.0) || !(c.loss.lambda >= 0.0) || !(c.loss.lambda_center >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(c.loss.tau_init > 0.0) {
            return Err(Error::Config(format!(
                "tau_init must be > 0, got {}",
                c.loss.tau_init
            )));
        }
        if !(c.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be >= 0".into()));
        }
        if !(c.density_radius >= 0.0) {
            return Err(Error::Config("density_radius must be >= 0".into()));
        }
        c.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        if c.dataset.dim_v != c.dims.d_v || c.dataset.dim_c != c.dims.d_c {
            return Err(Error::Config(format!(
                "dataset dims ({}, {}) disagree with model dims ({}, {})",
                c.dataset.dim_v, c.dataset.dim_c, c.dims.d_v, c.dims.d_c
            )));
        }
        Ok(())
    }

    pub fn from_json(body: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(body).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
