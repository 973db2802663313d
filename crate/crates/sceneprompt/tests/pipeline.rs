//! End-to-end behavior of the training commands, file outputs, and the
//! CLI binary itself.

use std::process::Command;

use sceneprompt::cli::config::{RunConfig, Stage2LossKind};
use sceneprompt::cli::model::{stage1_forward, BatchNoise, Stage1Model};
use sceneprompt::cli::train::{train_stage1, train_stage2, BoxAnchor};
use sceneprompt::cli::{cmd_eval, cmd_gen_data};
use sceneprompt::encoders::{save_embedding_file, EmbeddingFile};
use sceneprompt::error::Error;
use sceneprompt::latentmetrics::{silhouette, LabeledEmbeddings};
use sceneprompt::numerics::adamw::{AdamWConfig, AdamWState};
use sceneprompt::numerics::array::DenseArray;
use sceneprompt::numerics::param::ParamSet;
use sceneprompt::numerics::rng::substream;
use sceneprompt::scenegen::{generate_dataset, sample_batch, DatasetConfig};

/// Small-but-real configuration for fast end-to-end runs.
fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dims.d = 8;
    cfg.dims.d_v = 8;
    cfg.dims.d_c = 4;
    cfg.prompts.n_p = 6;
    cfg.prompts.l = 2;
    cfg.prompts.k_sample = 3;
    cfg.sampling.n_s = 2;
    cfg.sampling.rois_per_scene = 3;
    cfg.sampling.batch_scenes = 4;
    cfg.optim.epochs = 2;
    cfg.optim.steps_per_epoch = 4;
    cfg.stage2.epochs = 2;
    cfg.stage2.steps_per_epoch = 4;
    cfg.dataset = DatasetConfig {
        n_scenes: 5,
        rois_per_scene: 4,
        n_categories: 2,
        noise_scale: 0.1,
        dim_v: 8,
        dim_c: 4,
        with_3d: true,
        points_per_roi: 12,
    };
    cfg
}

#[test]
fn zero_epochs_dump_initial_state_only() {
    let mut cfg = small_config();
    cfg.optim.epochs = 0;
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = train_stage1(&cfg, &set, dir.path()).unwrap();
    assert!(summary.rows.is_empty());
    let csv = std::fs::read_to_string(&summary.loss_csv).unwrap();
    assert_eq!(csv.trim_end(), "step,epoch,l_contrast,l_div,kl,l_prompt,l_stage1,tau");
    assert!(summary.initial_image_embeddings.exists());
    assert!(summary.image_embeddings.exists());
    // With no steps, initial and final dumps coincide.
    assert_eq!(
        std::fs::read(&summary.initial_image_embeddings).unwrap(),
        std::fs::read(&summary.image_embeddings).unwrap()
    );
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn sampling_ablation_changes_loss_trajectory() {
    let set = generate_dataset(&small_config().dataset, 3).unwrap();
    let run = |sampling: bool| {
        let mut cfg = small_config();
        cfg.seed = 3;
        cfg.gaussian_sampling = sampling;
        let dir = tempfile::tempdir().unwrap();
        let summary = train_stage1(&cfg, &set, dir.path()).unwrap();
        std::fs::read_to_string(&summary.loss_csv).unwrap()
    };
    let on = run(true);
    let off = run(false);
    assert_ne!(on, off);
}

#[test]
fn descriptor_gradients_reach_every_sampled_template() {
    let cfg = small_config();
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let mut params = ParamSet::new();
    let mut model_rng = substream(cfg.seed, "flowtest/model");
    let model = Stage1Model::init(&mut params, &cfg, &set.categories(), &mut model_rng).unwrap();

    let mut rng = substream(cfg.seed, "flowtest/train");
    let batch = sample_batch(&set, 4, cfg.sampling.rois_per_scene, &mut rng).unwrap();
    let noise = BatchNoise::draw(&cfg, batch.total(), &mut rng);

    let before: Vec<(String, DenseArray)> = model
        .bank
        .categories
        .iter()
        .map(|c| {
            (
                c.descriptors.clone(),
                params.get(&c.descriptors).unwrap().value.clone(),
            )
        })
        .collect();

    let fwd = stage1_forward(&model, &params, &cfg, &set, &batch, &noise).unwrap();
    fwd.l_stage1.backward().unwrap();
    fwd.sess.harvest_grads(&mut params).unwrap();
    let mut opt = AdamWState::new(AdamWConfig::default(), &params).unwrap();
    opt.step(&mut params).unwrap();

    // Every sampled template of every batched RoI moved at least one
    // descriptor element.
    let pairs: Vec<(usize, usize)> = batch.flat().collect();
    for (slot, &(s, r)) in pairs.iter().enumerate() {
        let category = &set.scenes[s].rois[r].category;
        let cat = model.bank.category(category).unwrap();
        let after = &params.get(&cat.descriptors).unwrap().value;
        let prev = &before.iter().find(|(n, _)| n == &cat.descriptors).unwrap().1;
        for &t in &noise.subsets[slot] {
            let mut moved = false;
            for l in 0..model.bank.template_len {
                let row = t * model.bank.template_len + l;
                if after.row(row) != prev.row(row) {
                    moved = true;
                    break;
                }
            }
            assert!(moved, "template {t} of '{category}' saw no update");
        }
    }
}

#[test]
fn stage2_distillation_converges_without_geometry() {
    // Full-width embeddings (the default dims) with a short teacher run;
    // distillation itself is cheap without the geometry term.
    let mut cfg = RunConfig::default();
    cfg.loss.lambda = 0.0;
    cfg.optim.epochs = 2;
    cfg.stage2.epochs = 100;
    cfg.stage2.steps_per_epoch = 16;
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let s1 = tempfile::tempdir().unwrap();
    let stage1 = train_stage1(&cfg, &set, s1.path()).unwrap();
    let s2 = tempfile::tempdir().unwrap();
    let summary = train_stage2(&cfg, &set, &stage1.out_dir, s2.path(), BoxAnchor::Centroid).unwrap();
    let first = summary.rows.first().unwrap().l_mse;
    let last = summary.rows.last().unwrap().l_mse;
    assert!(
        last < 0.1 * first,
        "student should converge toward teacher: {first:.5} -> {last:.5}"
    );
    assert!(summary.rows.iter().all(|r| r.l_3d == 0.0));
}

#[test]
fn stage2_loss_families_differ() {
    let cfg = small_config();
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let s1 = tempfile::tempdir().unwrap();
    let stage1 = train_stage1(&cfg, &set, s1.path()).unwrap();

    let run = |kind: Stage2LossKind| {
        let mut cfg = small_config();
        cfg.stage2.loss = kind;
        let dir = tempfile::tempdir().unwrap();
        let summary =
            train_stage2(&cfg, &set, &stage1.out_dir, dir.path(), BoxAnchor::Centroid).unwrap();
        summary.rows.iter().map(|r| r.l_3d).collect::<Vec<f64>>()
    };
    let weak = run(Stage2LossKind::Weakm3d);
    let gga = run(Stage2LossKind::Gga);
    assert_ne!(weak, gga);
}

#[test]
fn stage2_anchored_at_pseudo_labels_starts_at_zero_geometry_loss() {
    // With boxes initialized at the stored pseudo-labels and the
    // undefined center term disabled, the surface-sampled points make
    // the first geometric loss vanish.
    let mut cfg = small_config();
    cfg.loss.lambda_center = 0.0;
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let s1 = tempfile::tempdir().unwrap();
    let stage1 = train_stage1(&cfg, &set, s1.path()).unwrap();
    let s2 = tempfile::tempdir().unwrap();
    let summary =
        train_stage2(&cfg, &set, &stage1.out_dir, s2.path(), BoxAnchor::PseudoLabel).unwrap();
    let first = summary.rows.first().unwrap();
    assert!(
        first.l_3d < 1e-6,
        "first L_3D should vanish at the pseudo-label anchor, got {:.3e}",
        first.l_3d
    );
}

#[test]
fn stage2_requires_3d_data_when_lambda_positive() {
    let mut cfg = small_config();
    cfg.dataset.with_3d = false;
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let s1 = tempfile::tempdir().unwrap();
    let stage1 = train_stage1(&cfg, &set, s1.path()).unwrap();
    let s2 = tempfile::tempdir().unwrap();
    let err = train_stage2(&cfg, &set, &stage1.out_dir, s2.path(), BoxAnchor::Centroid)
        .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn gen_data_digest_is_reproducible() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_gen_data(&cfg, &dir.path().join("a.json")).unwrap();
    let b = cmd_gen_data(&cfg, &dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed = 99;
    let c = cmd_gen_data(&other, &dir.path().join("c.json")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn geometry_vector_file_replays_clean() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/geometry_vectors.json");
    let failures = sceneprompt::pseudo3d::vectors::run_geometry_vectors(&path).unwrap();
    assert!(failures.is_empty(), "geometry vector failures: {failures:?}");

    // Round trip the file through the writer.
    let cases = sceneprompt::pseudo3d::vectors::load_geometry_vectors(&path).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.json");
    sceneprompt::pseudo3d::vectors::save_geometry_vectors(&cases, &copy).unwrap();
    let replayed = sceneprompt::pseudo3d::vectors::run_geometry_vectors(&copy).unwrap();
    assert!(replayed.is_empty());
}

#[test]
fn acceptance_dataset_features_cluster_by_scene() {
    // Raw generated features, grouped by scene, already separate.
    let set = generate_dataset(&DatasetConfig::default(), 0).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for scene in &set.scenes {
        for roi in &scene.rois {
            rows.push(roi.feature.clone());
            labels.push(scene.id);
        }
    }
    let data = LabeledEmbeddings::new(DenseArray::from_rows(&rows).unwrap(), labels).unwrap();
    let (mean, _) = silhouette(&data).unwrap();
    assert!(mean > 0.0, "scene-labeled silhouette {mean} should be positive");
}

#[test]
fn noiseless_single_category_features_have_unit_silhouette() {
    let mut dataset = small_config().dataset;
    dataset.noise_scale = 0.0;
    dataset.n_categories = 1;
    let set = generate_dataset(&dataset, 11).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for scene in &set.scenes {
        for roi in &scene.rois {
            rows.push(roi.feature.clone());
            labels.push(scene.id);
        }
    }
    let data = LabeledEmbeddings::new(DenseArray::from_rows(&rows).unwrap(), labels).unwrap();
    let (mean, per_point) = silhouette(&data).unwrap();
    assert!((mean - 1.0).abs() < 1e-9, "mean silhouette {mean}");
    assert!(per_point.iter().all(|s| (s - 1.0).abs() < 1e-9));
}

#[test]
fn eval_emits_three_csvs_with_expected_shapes() {
    let cfg = small_config();
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let s1 = tempfile::tempdir().unwrap();
    let stage1 = train_stage1(&cfg, &set, s1.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let eval = cmd_eval(&stage1.image_embeddings, None, out.path()).unwrap();

    let metrics = std::fs::read_to_string(&eval.metrics_csv).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "label,ch,silhouette_mean");
    let row = lines.next().unwrap();
    assert!(row.starts_with("scene,"));
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields.len(), 3);
    fields[1].parse::<f64>().unwrap();
    fields[2].parse::<f64>().unwrap();

    let scatter = std::fs::read_to_string(&eval.scatter_csv).unwrap();
    assert_eq!(scatter.lines().next().unwrap(), "scene_id,pc1,pc2");
    assert_eq!(scatter.lines().count(), 1 + set.total_rois());

    let distances = std::fs::read_to_string(&eval.distances_csv).unwrap();
    assert_eq!(distances.lines().next().unwrap(), "scene_a,scene_b,distance");
    let k = set.scenes.len();
    assert_eq!(distances.lines().count(), 1 + k * (k - 1) / 2);
}

#[test]
fn trained_embeddings_improve_over_initial() {
    let mut cfg = small_config();
    cfg.optim.epochs = 10;
    cfg.optim.steps_per_epoch = 8;
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = train_stage1(&cfg, &set, dir.path()).unwrap();

    let initial = cmd_eval(
        &summary.initial_image_embeddings,
        None,
        &dir.path().join("eval_initial"),
    )
    .unwrap();
    let trained =
        cmd_eval(&summary.image_embeddings, None, &dir.path().join("eval_trained")).unwrap();
    assert!(
        trained.report.ch > initial.report.ch,
        "trained CH {:.4} should exceed initial {:.4}",
        trained.report.ch,
        initial.report.ch
    );
}

// ---- binary-level checks ---------------------------------------------------

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sceneprompt"))
}

#[test]
fn binary_rejects_invalid_dataset_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"dataset": {"n_scenes": 0}}"#).unwrap();
    let status = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "gen-data", "--out"])
        .arg(dir.path().join("x.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn binary_eval_single_scene_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("one.emb");
    let mut file = EmbeddingFile::new(3);
    file.push("s0/r0", vec![1.0, 0.0, 0.0]).unwrap();
    file.push("s0/r1", vec![0.0, 1.0, 0.0]).unwrap();
    save_embedding_file(&emb, &file).unwrap();
    let out = bin()
        .args(["eval", "--embeddings", emb.to_str().unwrap(), "--out"])
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("cluster count"), "stderr: {stderr}");
}

#[test]
fn binary_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string(&small_config()).unwrap(),
    )
    .unwrap();
    let scenes = dir.path().join("scenes.json");
    let status = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "gen-data", "--out"])
        .arg(&scenes)
        .status()
        .unwrap();
    assert!(status.success());

    let out_dir = dir.path().join("s1");
    let status = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "train-stage1",
            "--scenes",
        ])
        .arg(&scenes)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_dir.join("stage1.csv").exists());
    assert!(out_dir.join("params.json").exists());
    assert!(out_dir.join("bank.emb").exists());

    let eval_dir = dir.path().join("eval");
    let status = bin()
        .args(["eval", "--embeddings"])
        .arg(out_dir.join("image_embeddings.emb"))
        .arg("--out")
        .arg(&eval_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(eval_dir.join("metrics.csv").exists());
}
