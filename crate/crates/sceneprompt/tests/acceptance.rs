//! Acceptance suite: one test per criterion, each printing a pass line.
//!
//! Heavy end-to-end criteria serialize on a gate so wall-clock budgets
//! are measured without interference from parallel tests.

use std::sync::Mutex;
use std::time::Instant;

use sceneprompt::cli::config::RunConfig;
use sceneprompt::cli::selfcheck::{
    contrastive_closed_form_suite, geometry_suite, gradient_suite, kl_monte_carlo_suite,
    metric_suite, reparam_suite,
};
use sceneprompt::cli::train::{run_ablation, train_stage1};
use sceneprompt::encoders::load_embedding_file;
use sceneprompt::latentmetrics::{calinski_harabasz, silhouette, LabeledEmbeddings};
use sceneprompt::numerics::array::DenseArray;
use sceneprompt::scenegen::generate_dataset;

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|p| p.into_inner())
}

fn report(criterion: &str, detail: String) {
    println!("ACCEPTANCE {criterion}: PASS ({detail})");
}

fn acceptance_config() -> RunConfig {
    // 20 scenes x 6 RoIs, 25 epochs, seed 0: the library defaults.
    let cfg = RunConfig::default();
    assert_eq!(cfg.seed, 0);
    assert_eq!(cfg.dataset.n_scenes, 20);
    assert_eq!(cfg.dataset.rois_per_scene, 6);
    assert_eq!(cfg.optim.epochs, 25);
    cfg
}

/// Scene-labeled metrics of an embedding dump.
fn dump_metrics(path: &std::path::Path) -> (f64, f64) {
    let dump = load_embedding_file(path).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (key, row) in &dump.entries {
        let scene: u64 = key
            .split_once('/')
            .unwrap()
            .0
            .trim_start_matches('s')
            .parse()
            .unwrap();
        labels.push(scene);
        rows.push(row.clone());
    }
    let data = LabeledEmbeddings::new(DenseArray::from_rows(&rows).unwrap(), labels).unwrap();
    let ch = calinski_harabasz(&data).unwrap();
    let (s_mean, _) = silhouette(&data).unwrap();
    (ch, s_mean)
}

#[test]
fn criterion_01_gradient_oracle() {
    let _g = gate();
    let start = Instant::now();
    let checks = gradient_suite(0, 1e-4).unwrap();
    let elapsed = start.elapsed();
    for c in &checks {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "gradient oracle took {:.1} s, budget 60 s",
        elapsed.as_secs_f64()
    );
    report(
        "1 gradient-oracle",
        format!("{} checks in {:.1} s", checks.len(), elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_kl_correctness() {
    let checks = kl_monte_carlo_suite(0).unwrap();
    for c in &checks {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
    report("2 kl-correctness", format!("{} checks", checks.len()));
}

#[test]
fn criterion_03_reparameterization_statistics() {
    let checks = reparam_suite(0).unwrap();
    assert_eq!(checks.len(), 3); // N_s in {1e3, 1e4, 1e5}
    for c in &checks {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
    report("3 reparameterization", "three sample counts".to_string());
}

#[test]
fn criterion_04_contrastive_closed_forms() {
    let checks = contrastive_closed_form_suite().unwrap();
    for c in checks
        .iter()
        .filter(|c| c.name.starts_with("contrastive/"))
    {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
    report("4 contrastive-closed-forms", "log N and tau sharpening".to_string());
}

#[test]
fn criterion_05_diversity_loss() {
    let checks = contrastive_closed_form_suite().unwrap();
    let ortho = checks
        .iter()
        .find(|c| c.name == "diversity/orthonormal_zero")
        .unwrap();
    let dup = checks
        .iter()
        .find(|c| c.name == "diversity/duplicate_rows_two")
        .unwrap();
    assert!(ortho.pass, "{}", ortho.detail);
    assert!(dup.pass, "{}", dup.detail);
    report("5 diversity-loss", "orthonormal zero, duplicate rows two".to_string());
}

#[test]
fn criterion_06_clustering_metric_oracle() {
    let checks = metric_suite(0, 100).unwrap();
    for c in &checks {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
    report("6 clustering-metric-oracle", "fixtures and 100 datasets".to_string());
}

#[test]
fn criterion_07_geometry_oracle() {
    let checks = geometry_suite(0, 1000).unwrap();
    for c in &checks {
        assert!(c.pass, "{}: {}", c.name, c.detail);
    }
    report("7 geometry-oracle", "1000 rays, fixtures".to_string());
}

#[test]
fn criterion_08_end_to_end_stage1() {
    let _g = gate();
    let cfg = acceptance_config();
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let start = Instant::now();
    let summary = train_stage1(&cfg, &set, dir.path()).unwrap();
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "stage 1 took {:.1} s, budget 300 s",
        elapsed.as_secs_f64()
    );

    let first = summary.first_loss().unwrap();
    let last = summary.final_loss().unwrap();
    assert!(
        last < 0.5 * first,
        "final L_stage1 {last:.4} not below half of initial {first:.4}"
    );

    let (ch0, s0) = dump_metrics(&summary.initial_image_embeddings);
    let (ch1, s1) = dump_metrics(&summary.image_embeddings);
    assert!(ch1 > ch0, "trained CH {ch1:.4} must exceed initial {ch0:.4}");
    assert!(
        s1 > s0,
        "trained silhouette {s1:.4} must exceed initial {s0:.4}"
    );
    report(
        "8 end-to-end-stage1",
        format!(
            "{:.1} s, loss {first:.3} -> {last:.3}, CH {ch0:.2} -> {ch1:.2}, s {s0:.3} -> {s1:.3}",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_ablation_harness() {
    let _g = gate();
    let mut cfg = acceptance_config();
    // The grid completes on the acceptance dataset; a reduced epoch
    // count keeps the 24-cell sweep inside a test-suite budget.
    cfg.optim.epochs = 2;
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cells = run_ablation(&cfg, &set, dir.path()).unwrap();
    assert_eq!(cells.len(), 24);
    for cell in &cells {
        assert!(
            cell.first_l_stage1.is_finite() && cell.final_l_stage1.is_finite(),
            "cell produced non-finite losses"
        );
    }
    // Gaussian sampling on vs off changes the loss trajectory.
    for on in cells.iter().filter(|c| c.gaussian_sampling) {
        let off = cells
            .iter()
            .find(|c| {
                !c.gaussian_sampling
                    && c.fusion == on.fusion
                    && c.image_text_fusion == on.image_text_fusion
            })
            .unwrap();
        let csv_on = std::fs::read(&on.csv_path).unwrap();
        let csv_off = std::fs::read(&off.csv_path).unwrap();
        assert_ne!(
            csv_on, csv_off,
            "sampling on/off trajectories identical for {}/{}",
            on.fusion.name(),
            on.image_text_fusion.name()
        );
    }
    report("9 ablation-harness", "24 cells complete, no NaN".to_string());
}

#[test]
fn criterion_10_determinism() {
    let _g = gate();
    let mut cfg = acceptance_config();
    cfg.optim.epochs = 3;
    let set = generate_dataset(&cfg.dataset, cfg.seed).unwrap();

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = train_stage1(&cfg, &set, dir_a.path()).unwrap();
    let b = train_stage1(&cfg, &set, dir_b.path()).unwrap();

    for (pa, pb, what) in [
        (&a.loss_csv, &b.loss_csv, "loss CSV"),
        (&a.text_embeddings, &b.text_embeddings, "text dump"),
        (&a.image_embeddings, &b.image_embeddings, "image dump"),
        (
            &a.initial_image_embeddings,
            &b.initial_image_embeddings,
            "initial image dump",
        ),
    ] {
        assert_eq!(
            std::fs::read(pa).unwrap(),
            std::fs::read(pb).unwrap(),
            "{what} differs between identical runs"
        );
    }
    report("10 determinism", "byte-identical CSVs and dumps".to_string());
}
