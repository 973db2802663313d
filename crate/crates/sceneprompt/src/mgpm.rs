//! Multi-Gaussian prompt modeling.
//!
//! Each encoded prompt query becomes an isotropic Gaussian: the mean
//! decoder adds an MLP projection to self-attention over the RoI's
//! prompt set; the deviation decoder attends to the visual-language
//! tokens (cross-attention by default, with add / concat ablation
//! variants) and passes through a softplus so deviations stay strictly
//! positive. Reparameterized draws from the Gaussians are fused into
//! one object-level text embedding.

use serde::{Deserialize, Serialize};

use crate::encoders::{PromptQuery, VisualTokens};
use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::attention::{attention, AttentionWeights};
use crate::numerics::nn::{LinearWeights, MlpWeights};
use crate::numerics::param::{ParamSet, Session};
use crate::numerics::rng::{normal_array, Prng};
use crate::numerics::tape::Tensor;

/// How sampled prompt rows collapse into one object-level embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    Maxpool,
    Add,
    ConcatMlp,
    Mlp,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Maxpool,
        FusionStrategy::Add,
        FusionStrategy::ConcatMlp,
        FusionStrategy::Mlp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::Maxpool => "maxpool",
            FusionStrategy::Add => "add",
            FusionStrategy::ConcatMlp => "concat_mlp",
            FusionStrategy::Mlp => "mlp",
        }
    }
}

/// How visual tokens enter the deviation decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageTextFusion {
    CrossAttention,
    Add,
    Concat,
}

impl ImageTextFusion {
    pub const ALL: [ImageTextFusion; 3] = [
        ImageTextFusion::CrossAttention,
        ImageTextFusion::Add,
        ImageTextFusion::Concat,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ImageTextFusion::CrossAttention => "cross_attention",
            ImageTextFusion::Add => "add",
            ImageTextFusion::Concat => "concat",
        }
    }
}

/// Parameter names for both decoders.
#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub mu_mlp: MlpWeights,
    pub mu_attn: AttentionWeights,
    pub sigma_mlp: MlpWeights,
    pub sigma_attn: AttentionWeights,
    /// `[D x 2D]` projection for the concat image-text variant.
    pub sigma_concat: LinearWeights,
}

impl DecoderWeights {
    pub fn init(params: &mut ParamSet, dim: usize, scale: f64, rng: &mut Prng) -> Result<Self> {
        Ok(DecoderWeights {
            mu_mlp: MlpWeights::init(params, "mgpm/mu_mlp", dim, dim, scale, rng)?,
            mu_attn: AttentionWeights::init(params, "mgpm/mu_attn", dim, scale, rng)?,
            sigma_mlp: MlpWeights::init(params, "mgpm/sigma_mlp", dim, dim, scale, rng)?,
            sigma_attn: AttentionWeights::init(params, "mgpm/sigma_attn", dim, scale, rng)?,
            sigma_concat: LinearWeights::init(params, "mgpm/sigma_concat", dim, 2 * dim, scale, rng)?,
        })
    }
}

/// Trainable weights used by the parameterized fusion strategies.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    /// `[D x (rows * D)]` projection for concatenated samples.
    pub concat: LinearWeights,
    /// `[D x D]` per-row projection for the mlp strategy.
    pub row: LinearWeights,
}

impl FusionWeights {
    /// `fused_rows` is the fixed sample-matrix height `k * N_s` the
    /// concat projection is sized for.
    pub fn init(
        params: &mut ParamSet,
        dim: usize,
        fused_rows: usize,
        scale: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        Ok(FusionWeights {
            concat: LinearWeights::init(params, "fusion/concat", dim, fused_rows * dim, scale, rng)?,
            row: LinearWeights::init(params, "fusion/row", dim, dim, scale, rng)?,
        })
    }
}

/// Mean and deviation of one scenario-conditioned prompt Gaussian.
#[derive(Clone, Debug)]
pub struct GaussianPromptParams {
    pub mu: Tensor,
    pub sigma: Tensor,
    /// `(roi, template)` owner.
    pub owner: (usize, usize),
}

impl GaussianPromptParams {
    /// Requires strictly positive, finite deviations.
    pub fn new(mu: Tensor, sigma: Tensor, owner: (usize, usize)) -> Result<Self> {
        if mu.rows() != 1 || sigma.rows() != 1 || mu.cols() != sigma.cols() {
            return Err(Error::Dimension(format!(
                "gaussian params must be [1 x D] pairs, got [{}x{}] and [{}x{}]",
                mu.rows(),
                mu.cols(),
                sigma.rows(),
                sigma.cols()
            )));
        }
        let s = sigma.value();
        if s.as_slice().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("sigma must be strictly positive".into()));
        }
        Ok(GaussianPromptParams { mu, sigma, owner })
    }

    /// Degenerate Gaussian with sigma = 0: sampling reproduces the mean
    /// exactly (the sampling-disabled ablation).
    pub fn degenerate(sess: &Session, mu: Tensor, owner: (usize, usize)) -> Self {
        let sigma = sess.constant(DenseArray::zeros(vec![1, mu.cols()]));
        GaussianPromptParams { mu, sigma, owner }
    }
}

/// Reparameterized draws and the noise that produced them.
#[derive(Clone, Debug)]
pub struct PromptSamples {
    /// `[N_s x D]` rows `z_j = mu + sigma .* eps_j`.
    pub z: Tensor,
    /// The recorded standard-normal draws.
    pub eps: DenseArray,
    pub n_samples: usize,
}

impl PromptSamples {
    /// Largest |z - mu - sigma .* eps| over all entries; exact replays
    /// return 0.
    pub fn replay_residual(&self, mu: &DenseArray, sigma: &DenseArray) -> f64 {
        let z = self.z.value();
        let (n, d) = z.dims2().expect("samples are rank 2");
        let mut worst = 0.0f64;
        for j in 0..n {
            for k in 0..d {
                let expect = mu.as_slice()[k] + sigma.as_slice()[k] * self.eps.get2(j, k);
                worst = worst.max((z.get2(j, k) - expect).abs());
            }
        }
        worst
    }
}

/// Mean decoder: `mu = mlp(q) + SelfAttn(q; P)` over the RoI's prompt
/// set.
pub fn decode_mean(
    sess: &mut Session,
    params: &ParamSet,
    query: &PromptQuery,
    prompt_set: &Tensor,
    weights: &DecoderWeights,
) -> Result<Tensor> {
    if prompt_set.rows() == 0 {
        return Err(Error::EmptyContext("mean decoder needs a non-empty prompt set".into()));
    }
    let direct = weights.mu_mlp.forward(sess, params, &query.q)?;
    let attended = attention(sess, params, &query.q, prompt_set, prompt_set, &weights.mu_attn)?;
    direct.add(&attended)
}

/// Deviation decoder: `sigma = softplus(mlp(q) + fuse(q, F))` with the
/// configured image-text fusion.
pub fn decode_std(
    sess: &mut Session,
    params: &ParamSet,
    query: &PromptQuery,
    visual: &VisualTokens,
    weights: &DecoderWeights,
    variant: ImageTextFusion,
) -> Result<Tensor> {
    if visual.tokens.rows() == 0 {
        return Err(Error::EmptyContext("deviation decoder needs visual tokens".into()));
    }
    let direct = weights.sigma_mlp.forward(sess, params, &query.q)?;
    let visual_term = match variant {
        ImageTextFusion::CrossAttention => attention(
            sess,
            params,
            &query.q,
            &visual.tokens,
            &visual.tokens,
            &weights.sigma_attn,
        )?,
        ImageTextFusion::Add => visual.tokens.mean_rows(),
        ImageTextFusion::Concat => {
            let joint = crate::numerics::tape::hstack(&[query.q.clone(), visual.tokens.mean_rows()])?;
            weights.sigma_concat.forward(sess, params, &joint)?
        }
    };
    Ok(direct.add(&visual_term)?.softplus())
}

/// Draws `n_samples` reparameterized samples `mu + sigma .* eps` with
/// fresh standard-normal noise.
pub fn sample_reparam(
    sess: &Session,
    gaussian: &GaussianPromptParams,
    n_samples: usize,
    rng: &mut Prng,
) -> Result<PromptSamples> {
    if n_samples < 1 {
        return Err(Error::Value(format!("n_samples must be >= 1, got {n_samples}")));
    }
    let d = gaussian.mu.cols();
    let eps = normal_array(vec![n_samples, d], 1.0, rng);
    sample_reparam_with_eps(sess, gaussian, &eps)
}

/// Replays sampling with recorded noise; `z - mu - sigma .* eps` is
/// exactly zero.
pub fn sample_reparam_with_eps(
    sess: &Session,
    gaussian: &GaussianPromptParams,
    eps: &DenseArray,
) -> Result<PromptSamples> {
    let (n_samples, d) = eps.dims2()?;
    if d != gaussian.mu.cols() || n_samples < 1 {
        return Err(Error::Dimension(format!(
            "eps [{n_samples}x{d}] incompatible with D = {}",
            gaussian.mu.cols()
        )));
    }
    let eps_t = sess.constant(eps.clone());
    let mu_b = gaussian.mu.broadcast_rows(n_samples)?;
    let sigma_b = gaussian.sigma.broadcast_rows(n_samples)?;
    let z = mu_b.add(&sigma_b.mul(&eps_t)?)?;
    Ok(PromptSamples {
        z,
        eps: eps.clone(),
        n_samples,
    })
}

/// Collapses sampled prompt rows into a unit-norm object-level text
/// embedding.
pub fn fuse_prompts(
    sess: &mut Session,
    params: &ParamSet,
    samples: &Tensor,
    strategy: FusionStrategy,
    weights: &FusionWeights,
) -> Result<Tensor> {
    if samples.rows() < 1 {
        return Err(Error::EmptyInput("fusion needs at least one sample row".into()));
    }
    let pooled = match strategy {
        FusionStrategy::Maxpool => samples.max_rows(),
        FusionStrategy::Add => samples.sum_rows(),
        FusionStrategy::ConcatMlp => {
            let flat = samples.reshape(1, samples.rows() * samples.cols())?;
            weights.concat.forward(sess, params, &flat)?
        }
        FusionStrategy::Mlp => {
            let projected = weights.row.forward(sess, params, samples)?;
            projected.relu().mean_rows()
        }
    };
    pooled.l2_normalize_rows(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{toy_encode_tokens, TokenInput, Vocabulary};
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::param::Parameter;
    use crate::numerics::rng::{normal_vec, seeded};
    use crate::numerics::tape::vstack;

    const D: usize = 6;

    fn fixture(seed: u64) -> (ParamSet, DecoderWeights, FusionWeights, Vocabulary) {
        let mut rng = seeded(seed);
        let mut params = ParamSet::new();
        let dec = DecoderWeights::init(&mut params, D, 0.3, &mut rng).unwrap();
        let fuse = FusionWeights::init(&mut params, D, 4, 0.3, &mut rng).unwrap();
        let vocab = Vocabulary::seeded(&["pad"], D, &mut rng).unwrap();
        (params, dec, fuse, vocab)
    }

    fn query_from(sess: &mut Session, vocab: &Vocabulary, row: Vec<f64>) -> PromptQuery {
        let t = sess.constant(DenseArray::row_vector(row).unwrap());
        toy_encode_tokens(sess, &[TokenInput::Continuous(t)], vocab, (0, 0)).unwrap()
    }

    #[test]
    fn zero_weights_zero_mean() {
        let (mut params, dec, _, vocab) = fixture(1);
        for name in [
            "mgpm/mu_mlp/w2",
            "mgpm/mu_mlp/b2",
            "mgpm/mu_attn/wv",
        ] {
            params.get_mut(name).unwrap().value.fill(0.0);
        }
        let mut sess = Session::new();
        let mut rng = seeded(2);
        let q = query_from(&mut sess, &vocab, normal_vec(D, &mut rng));
        let prompts = sess.constant(normal_array(vec![5, D], 1.0, &mut rng));
        let mu = decode_mean(&mut sess, &params, &q, &prompts, &dec).unwrap();
        assert!(mu.value().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_prompt_set_reduces_to_projected_value() {
        let (params, dec, _, vocab) = fixture(3);
        let mut sess = Session::new();
        let mut rng = seeded(4);
        let q = query_from(&mut sess, &vocab, normal_vec(D, &mut rng));
        let single = normal_array(vec![1, D], 1.0, &mut rng);
        let prompts = sess.constant(single.clone());
        let mu = decode_mean(&mut sess, &params, &q, &prompts, &dec).unwrap();

        let wv = params.get("mgpm/mu_attn/wv").unwrap().value.clone();
        let wo = params.get("mgpm/mu_attn/wo").unwrap().value.clone();
        let attn_term = single
            .matmul(&wv.transposed().unwrap())
            .unwrap()
            .matmul(&wo.transposed().unwrap())
            .unwrap();
        let mut sess2 = Session::new();
        let q2 = query_from(&mut sess2, &vocab, q.q.value().into_vec());
        let direct = dec.mu_mlp.forward(&mut sess2, &params, &q2.q).unwrap();
        for k in 0..D {
            let expect = direct.value().as_slice()[k] + attn_term.as_slice()[k];
            assert!((mu.value().as_slice()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_prompt_set_is_an_error() {
        let (params, dec, _, vocab) = fixture(5);
        let mut sess = Session::new();
        let q = query_from(&mut sess, &vocab, vec![0.0; D]);
        let prompts = sess.constant(DenseArray::zeros(vec![0, D]));
        assert!(matches!(
            decode_mean(&mut sess, &params, &q, &prompts, &dec).unwrap_err(),
            Error::EmptyContext(_)
        ));
    }

    #[test]
    fn zero_preactivation_gives_ln2_sigma() {
        let (mut params, dec, _, vocab) = fixture(6);
        for name in [
            "mgpm/sigma_mlp/w2",
            "mgpm/sigma_mlp/b2",
            "mgpm/sigma_attn/wv",
        ] {
            params.get_mut(name).unwrap().value.fill(0.0);
        }
        let mut sess = Session::new();
        let mut rng = seeded(7);
        let q = query_from(&mut sess, &vocab, normal_vec(D, &mut rng));
        let visual = VisualTokens {
            tokens: sess.constant(normal_array(vec![2, D], 1.0, &mut rng)),
            roi_id: 0,
        };
        let sigma =
            decode_std(&mut sess, &params, &q, &visual, &dec, ImageTextFusion::CrossAttention)
                .unwrap();
        for &v in sigma.value().as_slice() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn large_negative_preactivation_stays_positive() {
        let (mut params, dec, _, vocab) = fixture(8);
        for name in ["mgpm/sigma_mlp/w2", "mgpm/sigma_attn/wv"] {
            params.get_mut(name).unwrap().value.fill(0.0);
        }
        params.get_mut("mgpm/sigma_mlp/b2").unwrap().value.fill(-20.0);
        let mut sess = Session::new();
        let mut rng = seeded(9);
        let q = query_from(&mut sess, &vocab, normal_vec(D, &mut rng));
        let visual = VisualTokens {
            tokens: sess.constant(normal_array(vec![2, D], 1.0, &mut rng)),
            roi_id: 0,
        };
        let sigma =
            decode_std(&mut sess, &params, &q, &visual, &dec, ImageTextFusion::CrossAttention)
                .unwrap();
        for &v in sigma.value().as_slice() {
            assert!(v > 0.0);
            assert!((v - (-20.0f64).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn fusion_variants_change_sigma_and_pass_grad_check() {
        let base = {
            let (params, dec, _, vocab) = fixture(10);
            let mut sess = Session::new();
            let mut rng = seeded(11);
            let q = query_from(&mut sess, &vocab, normal_vec(D, &mut rng));
            let visual = VisualTokens {
                tokens: sess.constant(normal_array(vec![2, D], 1.0, &mut rng)),
                roi_id: 0,
            };
            let cross = decode_std(
                &mut sess, &params, &q, &visual, &dec, ImageTextFusion::CrossAttention,
            )
            .unwrap();
            let add =
                decode_std(&mut sess, &params, &q, &visual, &dec, ImageTextFusion::Add).unwrap();
            (cross.value(), add.value())
        };
        assert_ne!(base.0.as_slice(), base.1.as_slice());

        for variant in ImageTextFusion::ALL {
            let (mut params, dec, _, _) = fixture(12);
            let mut rng = seeded(13);
            params
                .insert(Parameter::new("q_in", normal_array(vec![1, D], 1.0, &mut rng)))
                .unwrap();
            let tokens = normal_array(vec![2, D], 1.0, &mut rng);
            let report = grad_check(
                &mut params,
                |ps: &mut ParamSet| {
                    let mut sess = Session::new();
                    let vocab = Vocabulary::seeded(&["pad"], D, &mut seeded(14)).unwrap();
                    let q_in = sess.lease(ps, "q_in")?;
                    let q = toy_encode_tokens(
                        &mut sess,
                        &[TokenInput::Continuous(q_in)],
                        &vocab,
                        (0, 0),
                    )?;
                    let visual = VisualTokens {
                        tokens: sess.constant(tokens.clone()),
                        roi_id: 0,
                    };
                    let sigma = decode_std(&mut sess, ps, &q, &visual, &dec, variant)?;
                    let probe = sess.constant(normal_array(vec![1, D], 1.0, &mut seeded(15)));
                    let loss = sigma.mul(&probe)?.sum_all();
                    loss.backward()?;
                    sess.harvest_grads(ps)?;
                    loss.scalar_value()
                },
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(
                report.pass,
                "decode_std {} grad check: {:e}",
                variant.name(),
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn mean_decoder_passes_grad_check_on_prompt_sets() {
        for (case, n_p) in [(0u64, 3usize), (1, 8), (2, 1)] {
            let (mut params, dec, _, _) = fixture(20 + case);
            let mut rng = seeded(30 + case);
            params
                .insert(Parameter::new("q_in", normal_array(vec![1, D], 1.0, &mut rng)))
                .unwrap();
            params
                .insert(Parameter::new(
                    "prompts",
                    normal_array(vec![n_p, D], 1.0, &mut rng),
                ))
                .unwrap();
            let report = grad_check(
                &mut params,
                |ps: &mut ParamSet| {
                    let mut sess = Session::new();
                    let vocab = Vocabulary::seeded(&["pad"], D, &mut seeded(16)).unwrap();
                    let q_in = sess.lease(ps, "q_in")?;
                    let q = toy_encode_tokens(
                        &mut sess,
                        &[TokenInput::Continuous(q_in)],
                        &vocab,
                        (0, 0),
                    )?;
                    let prompts = sess.lease(ps, "prompts")?;
                    let mu = decode_mean(&mut sess, ps, &q, &prompts, &dec)?;
                    let probe = sess.constant(normal_array(vec![1, D], 1.0, &mut seeded(17)));
                    let loss = mu.mul(&probe)?.sum_all();
                    loss.backward()?;
                    sess.harvest_grads(ps)?;
                    loss.scalar_value()
                },
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(
                report.pass,
                "decode_mean grad check (N_p = {n_p}): {:e}",
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn degenerate_sigma_reproduces_mean() {
        let sess = Session::new();
        let mut rng = seeded(18);
        let mu_val = normal_array(vec![1, D], 1.0, &mut rng);
        let mu = sess.constant(mu_val.clone());
        let g = GaussianPromptParams::degenerate(&sess, mu, (0, 0));
        let samples = sample_reparam(&sess, &g, 5, &mut rng).unwrap();
        let z = samples.z.value();
        for j in 0..5 {
            assert_eq!(z.row(j), mu_val.as_slice());
        }
    }

    #[test]
    fn monte_carlo_statistics_match_standard_normal() {
        let sess = Session::new();
        let n = 100_000usize;
        let mu = sess.constant(DenseArray::zeros(vec![1, 4]));
        let sigma = sess.constant(DenseArray::filled(vec![1, 4], 1.0));
        let g = GaussianPromptParams::new(mu, sigma, (0, 0)).unwrap();
        let mut rng = seeded(19);
        let samples = sample_reparam(&sess, &g, n, &mut rng).unwrap();
        let z = samples.z.value();
        for k in 0..4 {
            let mean: f64 = (0..n).map(|j| z.get2(j, k)).sum::<f64>() / n as f64;
            let var: f64 =
                (0..n).map(|j| (z.get2(j, k) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "dim {k}: mean {mean}");
            assert!(
                (var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt(),
                "dim {k}: var {var}"
            );
        }
    }

    #[test]
    fn recorded_noise_replays_bitwise() {
        let sess = Session::new();
        let mut rng = seeded(20);
        let mu_val = normal_array(vec![1, D], 1.0, &mut rng);
        let sigma_val = normal_array(vec![1, D], 1.0, &mut rng).map(|v| v.abs() + 0.1);
        let mu = sess.constant(mu_val.clone());
        let sigma = sess.constant(sigma_val.clone());
        let g = GaussianPromptParams::new(mu, sigma, (1, 2)).unwrap();
        let first = sample_reparam(&sess, &g, 6, &mut rng).unwrap();
        let replay = sample_reparam_with_eps(&sess, &g, &first.eps).unwrap();
        assert_eq!(first.z.value().as_slice(), replay.z.value().as_slice());
        assert_eq!(first.replay_residual(&mu_val, &sigma_val), 0.0);
    }

    #[test]
    fn sigma_must_be_strictly_positive() {
        let sess = Session::new();
        let mu = sess.constant(DenseArray::zeros(vec![1, 3]));
        let sigma = sess.constant(DenseArray::zeros(vec![1, 3]));
        assert!(matches!(
            GaussianPromptParams::new(mu, sigma, (0, 0)).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn two_row_maxpool_fixture() {
        let (params, _, fuse, _) = fixture(21);
        let mut sess = Session::new();
        let rows = DenseArray::from_rows(&[vec![1.0, -2.0], vec![0.0, 5.0]]).unwrap();
        let samples = sess.constant(rows);
        let out = fuse_prompts(&mut sess, &params, &samples, FusionStrategy::Maxpool, &fuse)
            .unwrap()
            .value();
        let norm = 26.0f64.sqrt();
        assert!((out.as_slice()[0] - 1.0 / norm).abs() < 1e-15);
        assert!((out.as_slice()[1] - 5.0 / norm).abs() < 1e-15);
    }

    #[test]
    fn single_row_fusion_is_identity_after_normalization() {
        let (mut params, _, fuse, _) = fixture(22);
        let row = vec![0.5, 1.5, 0.25, 2.0, 0.75, 1.0];
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Identity row projection keeps the mlp strategy comparable on a
        // positive row.
        let mut ident = DenseArray::zeros(vec![D, D]);
        for i in 0..D {
            ident.set2(i, i, 1.0);
        }
        params
            .get_mut("fusion/row")
            .unwrap()
            .value
            .as_mut_slice()
            .copy_from_slice(ident.as_slice());
        for strategy in [FusionStrategy::Maxpool, FusionStrategy::Add, FusionStrategy::Mlp] {
            let mut sess = Session::new();
            let samples = sess.constant(DenseArray::from_rows(&[row.clone()]).unwrap());
            let out = fuse_prompts(&mut sess, &params, &samples, strategy, &fuse)
                .unwrap()
                .value();
            for (a, b) in out.as_slice().iter().zip(&row) {
                assert!((a - b / norm).abs() < 1e-12, "{strategy:?}");
            }
        }
    }

    #[test]
    fn add_and_maxpool_differ_but_both_unit_norm() {
        let (params, _, fuse, _) = fixture(23);
        let mut rng = seeded(24);
        let rows = normal_array(vec![8, 4], 1.0, &mut rng);
        let mut outs = Vec::new();
        for strategy in [FusionStrategy::Add, FusionStrategy::Maxpool] {
            let mut sess = Session::new();
            let fw = FusionWeights {
                concat: fuse.concat.clone(),
                row: fuse.row.clone(),
            };
            let samples = sess.constant(rows.clone());
            let out = fuse_prompts(&mut sess, &params, &samples, strategy, &fw)
                .unwrap()
                .value();
            let norm: f64 = out.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            outs.push(out);
        }
        assert_ne!(outs[0].as_slice(), outs[1].as_slice());
    }

    #[test]
    fn zero_rows_degenerate_embedding() {
        let (params, _, fuse, _) = fixture(25);
        let mut sess = Session::new();
        let samples = sess.constant(DenseArray::zeros(vec![3, D]));
        assert!(matches!(
            fuse_prompts(&mut sess, &params, &samples, FusionStrategy::Add, &fuse).unwrap_err(),
            Error::DegenerateEmbedding(_)
        ));
    }

    #[test]
    fn fused_embedding_gradients_match_finite_differences() {
        // Through sampling (frozen noise) and every fusion strategy,
        // w.r.t. mu and sigma.
        for strategy in FusionStrategy::ALL {
            let (mut params, _, fuse, _) = fixture(26);
            let mut rng = seeded(27);
            params
                .insert(Parameter::new("mu", normal_array(vec![1, D], 1.0, &mut rng)))
                .unwrap();
            params
                .insert(Parameter::new(
                    "sigma_raw",
                    normal_array(vec![1, D], 0.5, &mut rng),
                ))
                .unwrap();
            let eps = normal_array(vec![4, D], 1.0, &mut rng);
            let probe = normal_array(vec![1, D], 1.0, &mut rng);
            let report = grad_check(
                &mut params,
                |ps: &mut ParamSet| {
                    let mut sess = Session::new();
                    let mu = sess.lease(ps, "mu")?;
                    let sigma = sess.lease(ps, "sigma_raw")?.softplus();
                    let g = GaussianPromptParams::new(mu, sigma, (0, 0))?;
                    let samples = sample_reparam_with_eps(&sess, &g, &eps)?;
                    let fused = fuse_prompts(&mut sess, ps, &samples.z, strategy, &fuse)?;
                    let pw = sess.constant(probe.clone());
                    let loss = fused.mul(&pw)?.sum_all();
                    loss.backward()?;
                    sess.harvest_grads(ps)?;
                    loss.scalar_value()
                },
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(
                report.pass,
                "fusion {} grad check: {:e}",
                strategy.name(),
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn decoded_sigmas_stay_positive_over_many_seeds() {
        // 3400 seeds x 3 variants > 1e4 decoder evaluations.
        let (params, dec, _, vocab) = fixture(28);
        let mut min_sigma = f64::INFINITY;
        for seed in 0..3400u64 {
            let mut sess = Session::new();
            let mut rng = seeded(1000 + seed);
            let q = query_from(&mut sess, &vocab, normal_vec(D, &mut rng));
            let visual = VisualTokens {
                tokens: sess.constant(normal_array(vec![2, D], 2.0, &mut rng)),
                roi_id: 0,
            };
            for variant in ImageTextFusion::ALL {
                let sigma = decode_std(&mut sess, &params, &q, &visual, &dec, variant).unwrap();
                for &v in sigma.value().as_slice() {
                    min_sigma = min_sigma.min(v);
                }
            }
        }
        assert!(min_sigma > 0.0, "min sigma {min_sigma:e}");
    }

    #[test]
    fn monte_carlo_consistency_across_sample_counts() {
        let sess = Session::new();
        let mut rng = seeded(29);
        let mu_val = normal_array(vec![1, 3], 1.0, &mut rng);
        let sigma_val = normal_array(vec![1, 3], 1.0, &mut rng).map(|v| v.abs() + 0.2);
        for n in [1_000usize, 10_000, 100_000] {
            let mu = sess.constant(mu_val.clone());
            let sigma = sess.constant(sigma_val.clone());
            let g = GaussianPromptParams::new(mu, sigma, (0, 0)).unwrap();
            let samples = sample_reparam(&sess, &g, n, &mut rng).unwrap();
            let z = samples.z.value();
            for k in 0..3 {
                let mean: f64 = (0..n).map(|j| z.get2(j, k)).sum::<f64>() / n as f64;
                let var: f64 =
                    (0..n).map(|j| (z.get2(j, k) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let m0 = mu_val.as_slice()[k];
                let s0 = sigma_val.as_slice()[k];
                assert!(
                    (mean - m0).abs() < 4.0 * s0 / (n as f64).sqrt(),
                    "n = {n}, dim {k}: mean {mean} vs {m0}"
                );
                assert!(
                    (var - s0 * s0).abs() < 4.0 * s0 * s0 * (2.0 / n as f64).sqrt(),
                    "n = {n}, dim {k}: var {var} vs {}",
                    s0 * s0
                );
            }
        }
    }

    #[test]
    fn stacked_query_matrix_feeds_decoder() {
        // End-to-end shape check: encode three queries, stack, decode one.
        let (params, dec, _, vocab) = fixture(30);
        let mut sess = Session::new();
        let mut rng = seeded(31);
        let qs: Vec<PromptQuery> = (0..3)
            .map(|_| query_from(&mut sess, &vocab, normal_vec(D, &mut rng)))
            .collect();
        let matrix = vstack(&qs.iter().map(|q| q.q.clone()).collect::<Vec<_>>()).unwrap();
        let mu = decode_mean(&mut sess, &params, &qs[0], &matrix, &dec).unwrap();
        assert_eq!((mu.rows(), mu.cols()), (1, D));
    }
}
