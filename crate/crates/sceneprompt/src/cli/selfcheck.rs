//! Self-verification suites: the finite-difference gradient oracle over
//! every differentiable operation, a Monte Carlo check of the
//! closed-form KL, the ray-marching geometry oracle, and brute-force
//! recomputation of the clustering metrics.

use crate::cli::config::RunConfig;
use crate::cli::model::{stage1_forward, BatchNoise, Stage1Model};
use crate::encoders::{toy_encode_tokens, TokenInput, VisualTokens, Vocabulary};
use crate::error::Result;
use crate::latentmetrics::{calinski_harabasz, silhouette, LabeledEmbeddings};
use crate::mgpm::{
    decode_mean, decode_std, fuse_prompts, sample_reparam_with_eps, DecoderWeights,
    FusionStrategy, FusionWeights, GaussianPromptParams, ImageTextFusion,
};
use crate::numerics::array::DenseArray;
use crate::numerics::attention::{attention, AttentionWeights};
use crate::numerics::gradcheck::grad_check;
use crate::numerics::param::{ParamSet, Parameter, Session};
use crate::numerics::rng::{normal_array, normal_vec, seeded, substream, Prng};
use crate::objective::{
    contrastive_loss, distill_mse, diversity_loss, kl_to_standard_normal, stage1_loss,
    stage2_loss, EmbeddingPairBatch, Temperature,
};
use crate::pseudo3d::diff::{gga_bpl_t, gga_pal_t, gga_srl_t, gga_total_t, weakm3d_losses_t, DiffBox};
use crate::pseudo3d::{
    gga_bpl, gga_pal, oracle, ray_box_intersect, weakm3d_losses, CameraIntrinsics,
    DensityWeights, GGAWeights, OrientedBox3D, PointSet,
};
use crate::scenegen::{generate_dataset, sample_batch, DatasetConfig};
use rand::Rng;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

const FD_STEP: f64 = 1e-6;

fn grad_outcome<F>(name: &str, params: &mut ParamSet, tol: f64, loss_fn: F) -> Result<CheckOutcome>
where
    F: Fn(&mut ParamSet) -> Result<f64>,
{
    let report = grad_check(params, loss_fn, FD_STEP, tol)?;
    Ok(CheckOutcome::new(
        name,
        report.pass,
        format!("max rel err {:.3e} (tol {:.1e})", report.max_rel_err(), tol),
    ))
}

/// Finite-difference checks over every differentiable operation, each
/// on at least three seeded shapes.
pub fn gradient_suite(seed: u64, tol: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // Attention: inputs and all four projections.
    for (case, (m, n, d)) in [(2usize, 3usize, 4usize), (1, 2, 5), (3, 4, 3)]
        .into_iter()
        .enumerate()
    {
        let mut rng = substream(seed, &format!("attn{case}"));
        let mut params = ParamSet::new();
        let w = AttentionWeights::init(&mut params, "attn", d, 0.4, &mut rng)?;
        params.insert(Parameter::new("q", normal_array(vec![m, d], 1.0, &mut rng)))?;
        params.insert(Parameter::new("kv", normal_array(vec![n, d], 1.0, &mut rng)))?;
        let probe = normal_array(vec![m, d], 1.0, &mut rng);
        out.push(grad_outcome(
            &format!("grad/attention/{m}x{n}x{d}"),
            &mut params,
            tol,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let q = sess.lease(ps, "q")?;
                let kv = sess.lease(ps, "kv")?;
                let y = attention(&mut sess, ps, &q, &kv, &kv, &w)?;
                let p = sess.constant(probe.clone());
                let loss = y.mul(&p)?.sum_all();
                loss.backward()?;
                sess.harvest_grads(ps)?;
                loss.scalar_value()
            },
        )?);
    }

    // Decoders across prompt-set sizes and image-text fusion variants.
    for (case, n_p) in [(0usize, 1usize), (1, 4), (2, 8)] {
        let d = 5;
        let mut rng = substream(seed, &format!("decoders{case}"));
        let mut params = ParamSet::new();
        let dec = DecoderWeights::init(&mut params, d, 0.3, &mut rng)?;
        params.insert(Parameter::new("q_in", normal_array(vec![1, d], 1.0, &mut rng)))?;
        params.insert(Parameter::new(
            "prompts",
            normal_array(vec![n_p, d], 1.0, &mut rng),
        ))?;
        let vocab_seed = 9000 + case as u64;
        let probe = normal_array(vec![1, d], 1.0, &mut rng);
        out.push(grad_outcome(
            &format!("grad/decode_mean/np{n_p}"),
            &mut params,
            tol,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let vocab = Vocabulary::seeded(&["pad"], d, &mut seeded(vocab_seed))?;
                let q_in = sess.lease(ps, "q_in")?;
                let q = toy_encode_tokens(&mut sess, &[TokenInput::Continuous(q_in)], &vocab, (0, 0))?;
                let prompts = sess.lease(ps, "prompts")?;
                let mu = decode_mean(&mut sess, ps, &q, &prompts, &dec)?;
                let p = sess.constant(probe.clone());
                let loss = mu.mul(&p)?.sum_all();
                loss.backward()?;
                sess.harvest_grads(ps)?;
                loss.scalar_value()
            },
        )?);
    }
    for (case, variant) in ImageTextFusion::ALL.into_iter().enumerate() {
        let d = 5;
        let mut rng = substream(seed, &format!("decode_std{case}"));
        let mut params = ParamSet::new();
        let dec = DecoderWeights::init(&mut params, d, 0.3, &mut rng)?;
        params.insert(Parameter::new("q_in", normal_array(vec![1, d], 1.0, &mut rng)))?;
        params.insert(Parameter::new(
            "tokens",
            normal_array(vec![2, d], 1.0, &mut rng),
        ))?;
        let vocab_seed = 9100 + case as u64;
        let probe = normal_array(vec![1, d], 1.0, &mut rng);
        out.push(grad_outcome(
            &format!("grad/decode_std/{}", variant.name()),
            &mut params,
            tol,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let vocab = Vocabulary::seeded(&["pad"], d, &mut seeded(vocab_seed))?;
                let q_in = sess.lease(ps, "q_in")?;
                let q = toy_encode_tokens(&mut sess, &[TokenInput::Continuous(q_in)], &vocab, (0, 0))?;
                let tokens = sess.lease(ps, "tokens")?;
                let visual = VisualTokens { tokens, roi_id: 0 };
                let sigma = decode_std(&mut sess, ps, &q, &visual, &dec, variant)?;
                let p = sess.constant(probe.clone());
                let loss = sigma.mul(&p)?.sum_all();
                loss.backward()?;
                sess.harvest_grads(ps)?;
                loss.scalar_value()
            },
        )?);
    }

    // Sampling path and the four fusion strategies, w.r.t. mu and sigma.
    for (case, strategy) in FusionStrategy::ALL.into_iter().enumerate() {
        let d = 5;
        let rows = 4;
        let mut rng = substream(seed, &format!("fusion{case}"));
        let mut params = ParamSet::new();
        let fuse = FusionWeights::init(&mut params, d, rows, 0.3, &mut rng)?;
        params.insert(Parameter::new("mu", normal_array(vec![1, d], 1.0, &mut rng)))?;
        params.insert(Parameter::new(
            "sigma_raw",
            normal_array(vec![1, d], 0.5, &mut rng),
        ))?;
        let eps = normal_array(vec![rows, d], 1.0, &mut rng);
        let probe = normal_array(vec![1, d], 1.0, &mut rng);
        out.push(grad_outcome(
            &format!("grad/fusion/{}", strategy.name()),
            &mut params,
            tol,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let mu = sess.lease(ps, "mu")?;
                let sigma = sess.lease(ps, "sigma_raw")?.softplus();
                let g = GaussianPromptParams::new(mu, sigma, (0, 0))?;
                let samples = sample_reparam_with_eps(&sess, &g, &eps)?;
                let fused = fuse_prompts(&mut sess, ps, &samples.z, strategy, &fuse)?;
                let p = sess.constant(probe.clone());
                let loss = fused.mul(&p)?.sum_all();
                loss.backward()?;
                sess.harvest_grads(ps)?;
                loss.scalar_value()
            },
        )?);
    }

    // Losses.
    for (case, (n, d)) in [(0usize, (3usize, 4usize)), (1, (4, 6)), (2, (2, 5))] {
        let mut rng = substream(seed, &format!("contrastive{case}"));
        let mut params = ParamSet::new();
        let temp = Temperature::init(&mut params, 0.07)?;
        params.insert(Parameter::new(
            "e_txt",
            normal_array(vec![n, d], 1.0, &mut rng),
        ))?;
        params.insert(Parameter::new(
            "e_img",
            normal_array(vec![n, d], 1.0, &mut rng),
        ))?;
        out.push(grad_outcome(
            &format!("grad/contrastive/{n}x{d}"),
            &mut params,
            tol,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let text = sess.lease(ps, "e_txt")?;
                let image = sess.lease(ps, "e_img")?;
                let batch = EmbeddingPairBatch { text, image };
                let (loss, _) = contrastive_loss(&mut sess, ps, &batch, &temp)?;
                loss.backward()?;
                sess.harvest_grads(ps)?;
                loss.scalar_value()
            },
        )?);
    }
    for (case, (k, d)) in [(0usize, (2usize, 4usize)), (1, (3, 5)), (2, (4, 8))] {
        let mut rng = substream(seed, &format!("diversity{case}"));
        let mut params = ParamSet::new();
        params.insert(Parameter::new("raw", normal_array(vec![k, d], 1.0, &mut rng)))?;
        out.push(grad_outcome(
            &format!("grad/diversity/{k}x{d}"),
            &mut params,
            tol,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let rows = sess.lease(ps, "raw")?.l2_normalize_rows(1e-12)?;
                let loss = diversity_loss(&mut sess, &[rows])?;
                loss.backward()?;
                sess.harvest_grads(ps)?;
                loss.scalar_value()
            },
        )?);
    }
    for (case, d) in [(0usize, 1usize), (1, 4), (2, 7)] {
        let mut rng = substream(seed, &format!("kl{case}"));
        let mut params = ParamSet::new();
        params.insert(Parameter::new("mu", normal_array(vec![1, d], 1.0, &mut rng)))?;
        params.insert(Parameter::new(
            "sigma_raw",
            normal_array(vec![1, d], 0.5, &mut rng),
        ))?;
        out.push(grad_outcome(
            &format!("grad/kl/d{d}"),
            &mut params,
            tol,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let mu = sess.lease(ps, "mu")?;
                let sigma = sess.lease(ps, "sigma_raw")?.softplus();
                let g = GaussianPromptParams::new(mu, sigma, (0, 0))?;
                let kl = kl_to_standard_normal(&g)?;
                kl.backward()?;
                sess.harvest_grads(ps)?;
                kl.scalar_value()
            },
        )?);
    }
    for (case, (n, d)) in [(0usize, (2usize, 3usize)), (1, (4, 5)), (2, (3, 8))] {
        let mut rng = substream(seed, &format!("mse{case}"));
        let mut params = ParamSet::new();
        params.insert(Parameter::new(
            "student",
            normal_array(vec![n, d], 1.0, &mut rng),
        ))?;
        let teacher = normal_array(vec![n, d], 1.0, &mut rng);
        out.push(grad_outcome(
            &format!("grad/distill_mse/{n}x{d}"),
            &mut params,
            tol,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let student = sess.lease(ps, "student")?;
                let loss = distill_mse(&mut sess, &student, &teacher)?;
                loss.backward()?;
                sess.harvest_grads(ps)?;
                loss.scalar_value()
            },
        )?);
    }

    // Geometry losses w.r.t. the box parameters.
    for case in 0..3u64 {
        let mut rng = substream(seed, &format!("geom{case}"));
        let mut params = ParamSet::new();
        let row = DenseArray::row_vector(vec![
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.3..0.3),
            rng.random_range(9.0..11.0),
            3.8,
            1.7,
            1.5,
            rng.random_range(0.2..0.8),
        ])?;
        params.insert(Parameter::new("box", row))?;
        let pts: Vec<[f64; 3]> = (0..5)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-0.8..0.8),
                    10.0 + rng.random_range(-2.0..2.0),
                ]
            })
            .collect();
        let weights = DensityWeights::compute(&PointSet::new(pts.clone()), 0.4)?;
        let intr = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0)?;
        let gga_w = GGAWeights::default();
        {
            let pts = pts.clone();
            out.push(grad_outcome(
                &format!("grad/weakm3d/case{case}"),
                &mut params,
                tol,
                move |ps: &mut ParamSet| {
                    let mut sess = Session::new();
                    let row = sess.lease(ps, "box")?;
                    let dbox = DiffBox::from_row(&row)?;
                    let parts = weakm3d_losses_t(&sess.tape, &dbox, &pts, &weights, 1.0)?;
                    parts.l_3d.backward()?;
                    sess.harvest_grads(ps)?;
                    parts.l_3d.scalar_value()
                },
            )?);
        }
        out.push(grad_outcome(
            &format!("grad/gga/case{case}"),
            &mut params,
            tol,
            move |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let row = sess.lease(ps, "box")?;
                let dbox = DiffBox::from_row(&row)?;
                let bpl = gga_bpl_t(&sess.tape, &dbox, &intr, [250.0, 200.0, 400.0, 290.0])?;
                let srl = gga_srl_t(&sess.tape, &dbox, 0.45)?;
                let (pal1, pal2) = gga_pal_t(&sess.tape, &dbox, &pts)?;
                let total = gga_total_t(&bpl, &srl, &pal1, &pal2, &gga_w)?;
                total.backward()?;
                sess.harvest_grads(ps)?;
                total.scalar_value()
            },
        )?);
    }

    // Composed stage losses on a micro-batch with frozen draws.
    out.push(stage1_micro_grad_check(seed, tol)?);
    out.push(stage2_micro_grad_check(seed, tol)?);

    Ok(out)
}

/// Micro configuration small enough for elementwise finite differences
/// over the whole parameter set.
fn micro_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.dims.d = 5;
    cfg.dims.d_v = 4;
    cfg.dims.d_c = 3;
    cfg.prompts.n_p = 3;
    cfg.prompts.l = 2;
    cfg.prompts.k_sample = 2;
    cfg.sampling.n_s = 2;
    cfg.sampling.rois_per_scene = 2;
    cfg.sampling.batch_scenes = 2;
    cfg.init_scale = 0.3;
    cfg.dataset = DatasetConfig {
        n_scenes: 2,
        rois_per_scene: 2,
        n_categories: 2,
        noise_scale: 0.1,
        dim_v: 4,
        dim_c: 3,
        with_3d: true,
        points_per_roi: 5,
    };
    cfg
}

/// Full stage-1 loss on a two-scene micro-batch: every parameter checked
/// against central differences.
fn stage1_micro_grad_check(seed: u64, tol: f64) -> Result<CheckOutcome> {
    let cfg = micro_config(seed);
    let set = generate_dataset(&cfg.dataset, seed)?;
    let mut params = ParamSet::new();
    let mut model_rng = substream(seed, "micro/model");
    let model = Stage1Model::init(&mut params, &cfg, &set.categories(), &mut model_rng)?;
    let mut rng = substream(seed, "micro/batch");
    let batch = sample_batch(&set, 2, cfg.sampling.rois_per_scene, &mut rng)?;
    let noise = BatchNoise::draw(&cfg, batch.total(), &mut rng);
    grad_outcome("grad/stage1_micro_batch", &mut params, tol, |ps| {
        let fwd = stage1_forward(&model, ps, &cfg, &set, &batch, &noise)?;
        fwd.l_stage1.backward()?;
        fwd.sess.harvest_grads(ps)?;
        fwd.l_stage1.scalar_value()
    })
}

/// Stage-2 composite on a toy box head: student projection and box-head
/// weights against central differences.
fn stage2_micro_grad_check(seed: u64, tol: f64) -> Result<CheckOutcome> {
    let cfg = micro_config(seed);
    let set = generate_dataset(&cfg.dataset, seed ^ 0x5eed)?;
    let mut rng = substream(seed, "micro/stage2");
    let mut params = ParamSet::new();
    params.insert(Parameter::new(
        "student/proj",
        normal_array(vec![cfg.dims.d, cfg.dims.d_v], 0.3, &mut rng),
    ))?;
    params.insert(Parameter::new(
        "student/box_head",
        normal_array(vec![7, cfg.dims.d], 0.05, &mut rng),
    ))?;
    let teacher = normal_array(vec![2, cfg.dims.d], 1.0, &mut rng);
    let rois: Vec<(usize, usize)> = vec![(0, 0), (1, 1)];
    let lambda = 1.0;
    grad_outcome("grad/stage2_micro_batch", &mut params, tol, move |ps| {
        let mut sess = Session::new();
        let proj = sess.lease(ps, "student/proj")?;
        let head = sess.lease(ps, "student/box_head")?;
        let mut students = Vec::new();
        let mut l3d_terms = Vec::new();
        for &(s, r) in &rois {
            let roi = &set.scenes[s].rois[r];
            let feature = sess.constant(roi.feature_row());
            let student = feature.matmul_nt(&proj)?;
            let delta = student.matmul_nt(&head)?;
            let points = PointSet::new(roi.points.clone().expect("3d enabled"));
            let centroid = points.centroid()?;
            let dims = crate::scenegen::category_dims(&roi.category);
            let at = |j: usize| delta.elem(0, j);
            let row = crate::numerics::tape::hstack(&[
                at(0)?.add_const(centroid[0]),
                at(1)?.add_const(centroid[1]),
                at(2)?.add_const(centroid[2]),
                at(3)?.exp().scale(dims[0]),
                at(4)?.exp().scale(dims[1]),
                at(5)?.exp().scale(dims[2]),
                at(6)?,
            ])?;
            let dbox = DiffBox::from_row(&row)?;
            let weights = DensityWeights::compute(&points, 0.4)?;
            let parts = weakm3d_losses_t(&sess.tape, &dbox, &points.points, &weights, 1.0)?;
            l3d_terms.push(parts.l_3d);
            students.push(student);
        }
        let student_matrix = crate::numerics::tape::vstack(&students)?;
        let l_mse = distill_mse(&mut sess, &student_matrix, &teacher)?;
        let l_3d = crate::numerics::tape::mean_scalars(&l3d_terms)?;
        let (l_stage1_unused, _) = (0.0, 0.0);
        let _ = l_stage1_unused;
        let total = stage2_loss(&l_mse, &l_3d, lambda)?;
        total.backward()?;
        sess.harvest_grads(ps)?;
        total.scalar_value()
    })
}

/// Composite-weighting identities of both stage losses.
pub fn composite_suite() -> Result<Vec<CheckOutcome>> {
    let sess = Session::new();
    let c = sess.tape.scalar(0.5);
    let d = sess.tape.scalar(0.2);
    let k = sess.tape.scalar(0.3);
    let (s1, _) = stage1_loss(&c, &d, &k, 1.0)?;
    let ok1 = (s1.scalar_value()? - 1.0).abs() < 1e-12;
    let mse = sess.tape.scalar(0.4);
    let l3d = sess.tape.scalar(0.6);
    let s2 = stage2_loss(&mse, &l3d, 1.0)?;
    let ok2 = (s2.scalar_value()? - 1.0).abs() < 1e-12;
    Ok(vec![
        CheckOutcome::new("composite/stage1", ok1, "0.5 + 1.0 * (0.2 + 0.3)"),
        CheckOutcome::new("composite/stage2", ok2, "0.4 + 1.0 * 0.6"),
    ])
}

/// Closed-form KL against a one-million-sample Monte Carlo estimate for
/// twenty seeded (mu, sigma) pairs in four dimensions.
pub fn kl_monte_carlo_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = substream(seed, "klmc");
    let d = 4;
    let n = 1_000_000usize;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-0.7..0.7)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.7..1.3)).collect();
        let sess = Session::new();
        let g = GaussianPromptParams::new(
            sess.constant(DenseArray::row_vector(mu.clone())?),
            sess.constant(DenseArray::row_vector(sigma.clone())?),
            (0, 0),
        )?;
        let closed = kl_to_standard_normal(&g)?.scalar_value()?;

        let mut acc = 0.0;
        for _ in 0..n {
            let mut log_q = 0.0;
            let mut log_p = 0.0;
            for k in 0..d {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let z = mu[k] + sigma[k] * e;
                log_q += -sigma[k].ln() - e * e / 2.0;
                log_p += -z * z / 2.0;
            }
            acc += log_q - log_p;
        }
        let mc = acc / n as f64;
        worst = worst.max((mc - closed).abs());
    }

    // Exact anchors.
    let sess = Session::new();
    let zero = GaussianPromptParams::new(
        sess.constant(DenseArray::zeros(vec![1, d])),
        sess.constant(DenseArray::filled(vec![1, d], 1.0)),
        (0, 0),
    )?;
    let exact_zero = kl_to_standard_normal(&zero)?.scalar_value()? == 0.0;
    let ones = GaussianPromptParams::new(
        sess.constant(DenseArray::filled(vec![1, d], 1.0)),
        sess.constant(DenseArray::filled(vec![1, d], 1.0)),
        (0, 0),
    )?;
    let half_d =
        (kl_to_standard_normal(&ones)?.scalar_value()? - d as f64 / 2.0).abs() < 1e-12;

    Ok(vec![
        CheckOutcome::new(
            "kl/monte_carlo_20_pairs",
            worst < 1e-2,
            format!("worst |MC - closed| = {worst:.3e} (tol 1e-2)"),
        ),
        CheckOutcome::new("kl/zero_at_standard_normal", exact_zero, "KL(N(0,1)||N(0,1)) = 0"),
        CheckOutcome::new("kl/half_d_at_unit_mean", half_d, "KL = d/2 for unit mean shift"),
    ])
}

/// Reparameterization statistics at three sample counts.
pub fn reparam_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = substream(seed, "reparam");
    let d = 3;
    let mu: Vec<f64> = normal_vec(d, &mut rng);
    let sigma: Vec<f64> = normal_vec(d, &mut rng)
        .into_iter()
        .map(|v| v.abs() + 0.2)
        .collect();
    let mut out = Vec::new();
    for n in [1_000usize, 10_000, 100_000] {
        let sess = Session::new();
        let g = GaussianPromptParams::new(
            sess.constant(DenseArray::row_vector(mu.clone())?),
            sess.constant(DenseArray::row_vector(sigma.clone())?),
            (0, 0),
        )?;
        let samples = crate::mgpm::sample_reparam(&sess, &g, n, &mut rng)?;
        let z = samples.z.value();
        let mut ok = true;
        let mut detail = String::new();
        for k in 0..d {
            let mean: f64 = (0..n).map(|j| z.get2(j, k)).sum::<f64>() / n as f64;
            let var: f64 =
                (0..n).map(|j| (z.get2(j, k) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let mean_tol = 4.0 * sigma[k] / (n as f64).sqrt();
            let var_tol = 4.0 * sigma[k] * sigma[k] * (2.0 / n as f64).sqrt();
            if (mean - mu[k]).abs() >= mean_tol || (var - sigma[k] * sigma[k]).abs() >= var_tol {
                ok = false;
                detail = format!(
                    "dim {k}: mean {mean:.4} vs {:.4}, var {var:.4} vs {:.4}",
                    mu[k],
                    sigma[k] * sigma[k]
                );
            }
        }
        out.push(CheckOutcome::new(
            format!("reparam/statistics_n{n}"),
            ok,
            if ok { "within 4 standard errors".to_string() } else { detail },
        ));
    }
    Ok(out)
}

/// Contrastive and diversity closed forms.
pub fn contrastive_closed_form_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // Uniform similarity -> log N.
    for n in [2usize, 8, 64] {
        let d = n.max(4);
        let mut params = ParamSet::new();
        let temp = Temperature::init(&mut params, 0.7)?;
        let mut sess = Session::new();
        let mut shared = normal_vec(d, &mut seeded(7000 + n as u64));
        let norm: f64 = shared.iter().map(|v| v * v).sum::<f64>().sqrt();
        shared.iter_mut().for_each(|v| *v /= norm);
        let image = DenseArray::from_rows(&vec![shared; n])?;
        let mut text_rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = normal_vec(d, &mut seeded(7100 + (n * 31 + i) as u64));
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= norm);
            text_rows.push(r);
        }
        let batch = EmbeddingPairBatch::new(
            sess.constant(DenseArray::from_rows(&text_rows)?),
            sess.constant(image),
        )?;
        let (loss, _) = contrastive_loss(&mut sess, &params, &batch, &temp)?;
        let gap = (loss.scalar_value()? - (n as f64).ln()).abs();
        out.push(CheckOutcome::new(
            format!("contrastive/uniform_log_n/{n}"),
            gap < 1e-9,
            format!("|loss - ln {n}| = {gap:.3e}"),
        ));
    }

    // Identity similarity at the 0.07 reference temperature.
    let ident = |tau: f64| -> Result<f64> {
        let mut params = ParamSet::new();
        let temp = Temperature::init(&mut params, tau)?;
        let mut sess = Session::new();
        let mut basis = DenseArray::zeros(vec![2, 4]);
        basis.set2(0, 0, 1.0);
        basis.set2(1, 1, 1.0);
        let batch =
            EmbeddingPairBatch::new(sess.constant(basis.clone()), sess.constant(basis))?;
        let (loss, _) = contrastive_loss(&mut sess, &params, &batch, &temp)?;
        loss.scalar_value()
    };
    let sharp = ident(0.07)?;
    let broad = ident(1.0)?;
    out.push(CheckOutcome::new(
        "contrastive/identity_tau_007",
        sharp < 1e-6 && sharp < broad,
        format!("loss(0.07) = {sharp:.3e}, loss(1.0) = {broad:.3e}"),
    ));

    // Diversity closed forms.
    let mut sess = Session::new();
    let mut basis = DenseArray::zeros(vec![3, 6]);
    for i in 0..3 {
        basis.set2(i, i, 1.0);
    }
    let basis_t = sess.constant(basis);
    let ortho = diversity_loss(&mut sess, &[basis_t])?.scalar_value()?;
    let mut row = normal_vec(6, &mut seeded(7200));
    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter_mut().for_each(|v| *v /= norm);
    let dup = sess.constant(DenseArray::from_rows(&[row.clone(), row])?);
    let two = diversity_loss(&mut sess, &[dup])?.scalar_value()?;
    out.push(CheckOutcome::new(
        "diversity/orthonormal_zero",
        ortho.abs() < 1e-12,
        format!("loss = {ortho:.3e}"),
    ));
    out.push(CheckOutcome::new(
        "diversity/duplicate_rows_two",
        (two - 2.0).abs() < 1e-12,
        format!("loss = {two}"),
    ));
    Ok(out)
}

/// Slab intersection against the ray-marching oracle plus the fixed
/// projection and alignment fixtures.
pub fn geometry_suite(seed: u64, cases: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = substream(seed, "geo");
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    let mut disagreements = 0usize;
    let mut hits = 0usize;
    for _ in 0..cases {
        let bx = random_box(&mut rng);
        let origin = [
            rng.random_range(-10.0..10.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-2.0..2.0),
        ];
        let target = [
            bx.center[0] + rng.random_range(-4.0..4.0),
            bx.center[1] + rng.random_range(-3.0..3.0),
            bx.center[2] + rng.random_range(-4.0..4.0),
        ];
        let fast = ray_box_intersect(origin, target, &bx)?;
        let slow = oracle::ray_march_intersect(origin, target, &bx, 1e-4);
        match (fast, slow) {
            (Some(a), Some(b)) => {
                hits += 1;
                let d: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(d);
            }
            (None, None) => {}
            _ => disagreements += 1,
        }
    }
    out.push(CheckOutcome::new(
        format!("geometry/ray_marching_{cases}_cases"),
        worst < 1e-3 && disagreements == 0 && hits > cases / 10,
        format!("worst gap {worst:.3e}, {disagreements} hit/miss disagreements, {hits} hits"),
    ));

    // On-surface point sets zero the alignment and ray losses.
    let bx = OrientedBox3D::new([1.0, 0.5, 12.0], [4.0, 1.8, 1.6], 0.4)?;
    let pts = PointSet::new(crate::scenegen::sample_visible_face_points(&bx, 24, &mut rng));
    let w = DensityWeights::compute(&pts, 0.4)?;
    let breakdown = weakm3d_losses(&pts, &bx, &w, 1.0)?;
    let max_geo = breakdown.l_geo.iter().cloned().fold(0.0, f64::max);
    let max_ray = breakdown.l_ray.iter().cloned().fold(0.0, f64::max);
    out.push(CheckOutcome::new(
        "geometry/on_surface_zero_losses",
        max_geo < 1e-9 && max_ray < 1e-9,
        format!("max L_geo {max_geo:.3e}, max L_ray {max_ray:.3e}"),
    ));

    // Projection fixture: unit cube at z = 10 with f = 100.
    let cube = OrientedBox3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0)?;
    let intr = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0)?;
    let bpl = gga_bpl(&cube, &intr, [-5.0, -5.0, 5.0, 5.0])?;
    out.push(CheckOutcome::new(
        "geometry/bpl_unit_cube",
        (bpl - 1.052631).abs() < 1e-5,
        format!("L_BPL = {bpl:.6}"),
    ));

    // Alignment fixture: centered point in a 4 x 2 footprint.
    let car = OrientedBox3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 2.0], 0.0)?;
    let (pal1, pal2) = gga_pal(&PointSet::new(vec![[0.0, 0.0, 0.0]]), &car)?;
    out.push(CheckOutcome::new(
        "geometry/pal_centered_point",
        pal1 == 0.0 && pal2 == 1.0,
        format!("(L_PAL1, L_PAL2) = ({pal1}, {pal2})"),
    ));

    Ok(out)
}

fn random_box(rng: &mut Prng) -> OrientedBox3D {
    OrientedBox3D::new(
        [
            rng.random_range(-5.0..5.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(5.0..20.0),
        ],
        [
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..5.0),
        ],
        rng.random_range(-3.0..3.0),
    )
    .expect("valid random box")
}

/// Clustering metrics against naive recomputation on seeded datasets,
/// plus the fixed 1-D fixture.
pub fn metric_suite(seed: u64, datasets: usize) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    let fixture = LabeledEmbeddings::new(
        DenseArray::from_rows(&[vec![0.0], vec![1.0], vec![4.0], vec![5.0]])?,
        vec![0, 0, 1, 1],
    )?;
    let ch = calinski_harabasz(&fixture)?;
    let (s_mean, _) = silhouette(&fixture)?;
    out.push(CheckOutcome::new(
        "metrics/ch_fixture_32",
        (ch - 32.0).abs() < 1e-9,
        format!("CH = {ch}"),
    ));
    out.push(CheckOutcome::new(
        "metrics/silhouette_fixture",
        (s_mean - 0.746032).abs() < 1e-6,
        format!("mean s = {s_mean:.6}"),
    ));

    let mut rng = substream(seed, "metrics");
    let mut worst_ch = 0.0f64;
    let mut worst_s = 0.0f64;
    for _ in 0..datasets {
        let k = rng.random_range(2..6usize);
        let per = rng.random_range(2..7usize);
        let d = rng.random_range(2..7usize);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            let center: Vec<f64> = normal_vec(d, &mut rng).iter().map(|v| v * 3.0).collect();
            for _ in 0..per {
                rows.push(
                    center
                        .iter()
                        .zip(normal_vec(d, &mut rng))
                        .map(|(c, n)| c + n)
                        .collect::<Vec<f64>>(),
                );
                labels.push(c as u64);
            }
        }
        let data = LabeledEmbeddings::new(DenseArray::from_rows(&rows)?, labels.clone())?;
        let (bf_ch, bf_s) = brute_force_metrics(&rows, &labels);
        worst_ch = worst_ch.max((calinski_harabasz(&data)? - bf_ch).abs());
        worst_s = worst_s.max((silhouette(&data)?.0 - bf_s).abs());
    }
    out.push(CheckOutcome::new(
        format!("metrics/brute_force_{datasets}_datasets"),
        worst_ch < 1e-9 && worst_s < 1e-9,
        format!("worst CH gap {worst_ch:.3e}, worst silhouette gap {worst_s:.3e}"),
    ));
    Ok(out)
}

/// Naive O(n^2 k) recomputation of CH and mean silhouette.
pub fn brute_force_metrics(rows: &[Vec<f64>], labels: &[u64]) -> (f64, f64) {
    let n = rows.len();
    let d = rows[0].len();
    let mut distinct: Vec<u64> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let k = distinct.len();
    let members = |lab: u64| -> Vec<usize> {
        (0..n).filter(|&i| labels[i] == lab).collect()
    };
    let cent = |idx: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; d];
        for &i in idx {
            for j in 0..d {
                c[j] += rows[i][j] / idx.len() as f64;
            }
        }
        c
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let overall = cent(&(0..n).collect::<Vec<_>>());
    let mut between = 0.0;
    let mut within = 0.0;
    for &lab in &distinct {
        let m = members(lab);
        let c = cent(&m);
        between += m.len() as f64 * dist(&c, &overall).powi(2);
        for &i in &m {
            within += dist(rows[i].as_slice(), &c).powi(2);
        }
    }
    let ch = between / within * (n - k) as f64 / (k - 1) as f64;

    let mut s_sum = 0.0;
    for i in 0..n {
        let own = members(labels[i]);
        if own.len() == 1 {
            continue;
        }
        let a: f64 = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(&rows[i], &rows[j]))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let mut b = f64::INFINITY;
        for &lab in &distinct {
            if lab == labels[i] {
                continue;
            }
            let m = members(lab);
            b = b.min(m.iter().map(|&j| dist(&rows[i], &rows[j])).sum::<f64>() / m.len() as f64);
        }
        if a.max(b) > 0.0 {
            s_sum += (b - a) / a.max(b);
        }
    }
    (ch, s_sum / n as f64)
}

/// Every suite; `tol` applies to the gradient checks.
pub fn run_all(seed: u64, tol: f64) -> Result<SelfCheckReport> {
    let mut checks = Vec::new();
    checks.extend(gradient_suite(seed, tol)?);
    checks.extend(composite_suite()?);
    checks.extend(kl_monte_carlo_suite(seed)?);
    checks.extend(reparam_suite(seed)?);
    checks.extend(contrastive_closed_form_suite()?);
    checks.extend(geometry_suite(seed, 1000)?);
    checks.extend(metric_suite(seed, 100)?);
    Ok(SelfCheckReport { checks })
}
