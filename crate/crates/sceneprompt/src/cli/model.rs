//! Stage-1 model assembly: prompt bank, projections, decoders, fusion
//! weights, and temperature over one shared parameter set, plus the
//! per-batch forward pass producing the stage-1 loss.

use serde::{Deserialize, Serialize};

use crate::apb::{build_bank, instantiate_prompts, PromptBank};
use crate::cli::config::RunConfig;
use crate::encoders::{build_visual_tokens, Vocabulary};
use crate::error::{Error, Result};
use crate::mgpm::{
    decode_mean, decode_std, fuse_prompts, sample_reparam_with_eps, DecoderWeights, FusionWeights,
    GaussianPromptParams,
};
use crate::numerics::array::DenseArray;
use crate::numerics::nn::LinearWeights;
use crate::numerics::param::{ParamSet, Parameter, Session};
use crate::numerics::rng::{normal_array, Prng};
use crate::numerics::tape::{mean_scalars, vstack, Tensor};
use crate::objective::{
    contrastive_loss, diversity_loss, kl_to_standard_normal, stage1_loss, EmbeddingPairBatch,
    LossBreakdown, Temperature,
};
use crate::scenegen::{Batch, SceneSet};

pub struct Stage1Model {
    pub bank: PromptBank,
    pub o_proj: LinearWeights,
    pub visual_proj: LinearWeights,
    pub image_proj: LinearWeights,
    pub decoders: DecoderWeights,
    pub fusion: FusionWeights,
    pub temperature: Temperature,
    pub vocab: Vocabulary,
}

impl Stage1Model {
    /// Registers every stage-1 parameter. The object-token projection
    /// starts at zero: instance conditioning is learned, not imposed at
    /// initialization.
    pub fn init(
        params: &mut ParamSet,
        cfg: &RunConfig,
        categories: &[String],
        rng: &mut Prng,
    ) -> Result<Self> {
        let d = cfg.dims.d;
        let d_v = cfg.dims.d_v;
        let bank = build_bank(
            params,
            categories,
            cfg.prompts.n_p,
            cfg.prompts.l,
            d,
            cfg.init_scale,
            rng,
        )?;
        params.insert(Parameter::new("model/o_proj", DenseArray::zeros(vec![d, d_v])))?;
        let o_proj = LinearWeights {
            w: "model/o_proj".to_string(),
        };
        let visual_proj =
            LinearWeights::init(params, "model/visual_proj", d, d_v, cfg.init_scale, rng)?;
        let image_proj =
            LinearWeights::init(params, "model/image_proj", d, d_v, cfg.init_scale, rng)?;
        let decoders = DecoderWeights::init(params, d, cfg.init_scale, rng)?;
        let fusion = FusionWeights::init(
            params,
            d,
            cfg.prompts.k_sample * cfg.sampling.n_s,
            cfg.init_scale,
            rng,
        )?;
        let temperature = Temperature::init(params, cfg.loss.tau_init)?;
        let vocab = Vocabulary::seeded(&["object"], d, rng)?;
        Ok(Stage1Model {
            bank,
            o_proj,
            visual_proj,
            image_proj,
            decoders,
            fusion,
            temperature,
            vocab,
        })
    }
}

/// Frozen per-step randomness: template subsets and reparameterization
/// noise, drawn before the forward pass so a step is a deterministic
/// function of (parameters, batch, noise).
pub struct BatchNoise {
    /// Selected template indices per RoI.
    pub subsets: Vec<Vec<usize>>,
    /// Per RoI, per selected template: `[N_s x D]` noise.
    pub eps: Vec<Vec<DenseArray>>,
}

impl BatchNoise {
    pub fn draw(cfg: &RunConfig, n_rois: usize, rng: &mut Prng) -> Self {
        let mut subsets = Vec::with_capacity(n_rois);
        let mut eps = Vec::with_capacity(n_rois);
        for _ in 0..n_rois {
            let subset: Vec<usize> =
                rand::seq::index::sample(rng, cfg.prompts.n_p, cfg.prompts.k_sample)
                    .iter()
                    .collect();
            let mut roi_eps = Vec::with_capacity(subset.len());
            for _ in 0..subset.len() {
                let draw = normal_array(vec![cfg.sampling.n_s, cfg.dims.d], 1.0, rng);
                roi_eps.push(if cfg.gaussian_sampling {
                    draw
                } else {
                    // Sampling-disabled ablation: keep the stream aligned
                    // but use the means exactly.
                    DenseArray::zeros(vec![cfg.sampling.n_s, cfg.dims.d])
                });
            }
            subsets.push(subset);
            eps.push(roi_eps);
        }
        BatchNoise { subsets, eps }
    }

    /// Deterministic evaluation-path noise: the first `k` templates and
    /// zero noise (mean embeddings).
    pub fn deterministic(cfg: &RunConfig, n_rois: usize) -> Self {
        let subset: Vec<usize> = (0..cfg.prompts.k_sample).collect();
        BatchNoise {
            subsets: vec![subset; n_rois],
            eps: vec![
                vec![
                    DenseArray::zeros(vec![cfg.sampling.n_s, cfg.dims.d]);
                    cfg.prompts.k_sample
                ];
                n_rois
            ],
        }
    }
}

/// Tensors of one stage-1 forward pass that the trainer needs.
pub struct Stage1Forward {
    pub sess: Session,
    pub l_stage1: Tensor,
    pub breakdown: LossBreakdown,
    /// `[N x D]` unit-norm text embeddings in batch order.
    pub text_embeddings: Tensor,
    /// `[N x D]` unit-norm image embeddings in batch order.
    pub image_embeddings: Tensor,
    /// `(scene_id, roi_id)` per batch row.
    pub keys: Vec<(u64, u64)>,
}

/// Per-RoI tensors shared by the training and evaluation paths.
struct RoiPass {
    text: Tensor,
    image: Tensor,
    /// `[k x D]` row-normalized decoded means.
    prompt_matrix: Tensor,
    kl_terms: Vec<Tensor>,
}

#[allow(clippy::too_many_arguments)]
fn roi_pass(
    sess: &mut Session,
    model: &Stage1Model,
    params: &ParamSet,
    cfg: &RunConfig,
    set: &SceneSet,
    scene_ctx: &DenseArray,
    scene_idx: usize,
    roi_idx: usize,
    subset: &[usize],
    eps: &[DenseArray],
) -> Result<RoiPass> {
    let scene = &set.scenes[scene_idx];
    let roi = &scene.rois[roi_idx];
    let feature = roi.feature_row();
    let prompt_set = instantiate_prompts(
        sess,
        params,
        &model.bank,
        roi.id,
        &roi.category,
        &feature,
        &model.o_proj,
        &model.vocab,
    )?;
    let visual = build_visual_tokens(
        sess,
        params,
        &feature,
        scene_ctx,
        &model.visual_proj,
        roi.id as usize,
    )?;

    let mut mu_rows = Vec::with_capacity(subset.len());
    let mut kl_terms = Vec::with_capacity(subset.len());
    let mut sample_blocks = Vec::with_capacity(subset.len());
    for (j, &t) in subset.iter().enumerate() {
        let query = &prompt_set.queries[t];
        let mu = decode_mean(sess, params, query, &prompt_set.query_matrix, &model.decoders)?;
        let sigma = decode_std(
            sess,
            params,
            query,
            &visual,
            &model.decoders,
            cfg.image_text_fusion,
        )?;
        let gaussian = GaussianPromptParams::new(mu.clone(), sigma, (roi.id as usize, t))?;
        kl_terms.push(kl_to_standard_normal(&gaussian)?);
        let samples = sample_reparam_with_eps(sess, &gaussian, &eps[j])?;
        sample_blocks.push(samples.z);
        mu_rows.push(mu);
    }
    let sample_matrix = vstack(&sample_blocks)?;
    let text = fuse_prompts(sess, params, &sample_matrix, cfg.fusion, &model.fusion)?;
    let feature_t = sess.constant(feature);
    let image = model
        .image_proj
        .forward(sess, params, &feature_t)?
        .l2_normalize_rows(1e-12)?;
    let prompt_matrix = vstack(&mu_rows)?.l2_normalize_rows(1e-12)?;
    Ok(RoiPass {
        text,
        image,
        prompt_matrix,
        kl_terms,
    })
}

/// Runs the full stage-1 pipeline on one batch: prompts -> Gaussian
/// decoding -> sampling -> fusion -> contrastive + prompt losses.
pub fn stage1_forward(
    model: &Stage1Model,
    params: &ParamSet,
    cfg: &RunConfig,
    set: &SceneSet,
    batch: &Batch,
    noise: &BatchNoise,
) -> Result<Stage1Forward> {
    let mut sess = Session::new();
    let pairs: Vec<(usize, usize)> = batch.flat().collect();
    if pairs.len() != noise.subsets.len() {
        return Err(Error::Dimension(format!(
            "{} noise slots for {} RoIs",
            noise.subsets.len(),
            pairs.len()
        )));
    }

    // Scene contexts are shared across the batch.
    let mut scene_ctx: Vec<Option<DenseArray>> = vec![None; set.scenes.len()];
    for &(s, _) in &pairs {
        if scene_ctx[s].is_none() {
            scene_ctx[s] = Some(set.scenes[s].context_feature(set.dim_v));
        }
    }

    let mut text_rows = Vec::with_capacity(pairs.len());
    let mut image_rows = Vec::with_capacity(pairs.len());
    let mut prompt_rows = Vec::with_capacity(pairs.len());
    let mut kl_terms = Vec::new();
    let mut keys = Vec::with_capacity(pairs.len());

    for (slot, &(s, r)) in pairs.iter().enumerate() {
        let out = roi_pass(
            &mut sess,
            model,
            params,
            cfg,
            set,
            scene_ctx[s].as_ref().expect("context precomputed"),
            s,
            r,
            &noise.subsets[slot],
            &noise.eps[slot],
        )?;
        text_rows.push(out.text);
        image_rows.push(out.image);
        prompt_rows.push(out.prompt_matrix);
        kl_terms.extend(out.kl_terms);
        keys.push((set.scenes[s].id, set.scenes[s].rois[r].id));
    }

    let text_embeddings = vstack(&text_rows)?;
    let image_embeddings = vstack(&image_rows)?;
    let pair_batch = EmbeddingPairBatch::new(text_embeddings.clone(), image_embeddings.clone())?;
    let (l_contrast, _) = contrastive_loss(&mut sess, params, &pair_batch, &model.temperature)?;
    let l_div = diversity_loss(&mut sess, &prompt_rows)?;
    let kl_mean = mean_scalars(&kl_terms)?;
    let (l_stage1, l_prompt) = stage1_loss(&l_contrast, &l_div, &kl_mean, cfg.loss.alpha)?;

    let breakdown = LossBreakdown {
        l_contrast: l_contrast.scalar_value()?,
        l_div: l_div.scalar_value()?,
        kl_mean: kl_mean.scalar_value()?,
        l_prompt: l_prompt.scalar_value()?,
        l_stage1: l_stage1.scalar_value()?,
        alpha: cfg.loss.alpha,
        tau: model.temperature.tau(params)?,
        ..Default::default()
    };
    for (name, value) in [
        ("l_contrast", breakdown.l_contrast),
        ("l_div", breakdown.l_div),
        ("kl", breakdown.kl_mean),
        ("l_stage1", breakdown.l_stage1),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss tensor '{name}'")));
        }
    }
    Ok(Stage1Forward {
        sess,
        l_stage1,
        breakdown,
        text_embeddings,
        image_embeddings,
        keys,
    })
}

/// Deterministic text/image embeddings for every RoI: the first
/// `k_sample` templates with zero noise, so dumps are byte-stable.
pub fn embed_all(
    model: &Stage1Model,
    params: &ParamSet,
    cfg: &RunConfig,
    set: &SceneSet,
) -> Result<(crate::encoders::EmbeddingFile, crate::encoders::EmbeddingFile)> {
    let noise = BatchNoise::deterministic(cfg, 1);
    let mut text_file = crate::encoders::EmbeddingFile::new(cfg.dims.d);
    let mut image_file = crate::encoders::EmbeddingFile::new(cfg.dims.d);
    for (s, scene) in set.scenes.iter().enumerate() {
        let ctx = scene.context_feature(set.dim_v);
        for r in 0..scene.rois.len() {
            let mut sess = Session::new();
            let out = roi_pass(
                &mut sess,
                model,
                params,
                cfg,
                set,
                &ctx,
                s,
                r,
                &noise.subsets[0],
                &noise.eps[0],
            )?;
            let key = format!("s{}/r{}", scene.id, scene.rois[r].id);
            text_file.push(key.clone(), out.text.value().into_vec())?;
            image_file.push(key, out.image.value().into_vec())?;
        }
    }
    Ok((text_file, image_file))
}

/// JSON checkpoint of a full parameter set.
#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    params: Vec<CheckpointParam>,
}

pub fn save_checkpoint(params: &ParamSet, path: &std::path::Path) -> Result<()> {
    let ck = Checkpoint {
        params: params
            .iter()
            .map(|p| CheckpointParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.as_slice().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ParamSet> {
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
    let mut params = ParamSet::new();
    for p in ck.params {
        let value = DenseArray::new(p.shape, p.values)?;
        let mut param = Parameter::new(p.name, value);
        param.trainable = p.trainable;
        params.insert(param)?;
    }
    Ok(params)
}
