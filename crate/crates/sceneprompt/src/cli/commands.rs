//! Command implementations behind the CLI: dataset generation,
//! training, evaluation, the ablation grid, and the self-check runner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cli::config::RunConfig;
use crate::cli::selfcheck::{run_all, SelfCheckReport};
use crate::cli::train::{
    run_ablation, train_stage1, train_stage2, AblationCell, BoxAnchor, Stage1Summary,
    Stage2Summary,
};
use crate::encoders::load_embedding_file;
use crate::error::{Error, Result};
use crate::latentmetrics::{metric_report, pca_project, LabeledEmbeddings, MetricReport};
use crate::numerics::array::DenseArray;
use crate::scenegen::{generate_dataset, load_scene_file, save_scene_file};

fn csv_num(v: f64) -> String {
    format!("{v:.8e}")
}

/// Generates the synthetic dataset, writes the scene file, and returns
/// the content digest of its bytes.
pub fn cmd_gen_data(cfg: &RunConfig, out_path: &Path) -> Result<String> {
    cfg.validate()?;
    let set = generate_dataset(&cfg.dataset, cfg.seed)?;
    save_scene_file(&set, out_path)?;
    let bytes = std::fs::read(out_path)?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").expect("write to string");
    }
    Ok(hex)
}

pub fn cmd_train_stage1(cfg: &RunConfig, scene_path: &Path, out_dir: &Path) -> Result<Stage1Summary> {
    let set = load_scene_file(scene_path)?;
    train_stage1(cfg, &set, out_dir)
}

pub fn cmd_train_stage2(
    cfg: &RunConfig,
    stage1_dir: &Path,
    scene_path: &Path,
    out_dir: &Path,
    anchor: BoxAnchor,
) -> Result<Stage2Summary> {
    let set = load_scene_file(scene_path)?;
    train_stage2(cfg, &set, stage1_dir, out_dir, anchor)
}

/// Files emitted by `cmd_eval`.
pub struct EvalOutputs {
    pub report: MetricReport,
    pub metrics_csv: PathBuf,
    pub scatter_csv: PathBuf,
    pub distances_csv: PathBuf,
}

/// Parses an embedding-dump key `s<scene>/r<roi>` into its scene id.
fn scene_of_key(key: &str) -> Result<u64> {
    let (scene_part, roi_part) = key
        .split_once('/')
        .ok_or_else(|| Error::Key(format!("key '{key}' is not 's<scene>/r<roi>'")))?;
    if !scene_part.starts_with('s') || !roi_part.starts_with('r') {
        return Err(Error::Key(format!("key '{key}' is not 's<scene>/r<roi>'")));
    }
    scene_part[1..]
        .parse()
        .map_err(|e| Error::Key(format!("key '{key}': {e}")))
}

/// Groups a dump by scene and emits the metric, scatter, and distance
/// CSVs. When a scene file is given, every key must resolve to one of
/// its RoIs.
pub fn cmd_eval(
    embeddings_path: &Path,
    scenes: Option<&Path>,
    out_dir: &Path,
) -> Result<EvalOutputs> {
    let dump = load_embedding_file(embeddings_path)?;
    if dump.is_empty() {
        return Err(Error::Value("embedding dump is empty".into()));
    }
    let set = scenes.map(load_scene_file).transpose()?;
    let mut rows = Vec::with_capacity(dump.len());
    let mut labels = Vec::with_capacity(dump.len());
    for (key, row) in &dump.entries {
        let scene_id = scene_of_key(key)?;
        if let Some(set) = &set {
            let known = set.scenes.iter().any(|s| {
                s.id == scene_id && s.rois.iter().any(|r| format!("s{}/r{}", s.id, r.id) == *key)
            });
            if !known {
                return Err(Error::Key(format!("key '{key}' matches no RoI in the scene file")));
            }
        }
        labels.push(scene_id);
        rows.push(row.clone());
    }
    let data = LabeledEmbeddings::new(DenseArray::from_rows(&rows)?, labels.clone())?;
    let report = metric_report(&data)?;

    std::fs::create_dir_all(out_dir)?;
    let metrics_csv = out_dir.join("metrics.csv");
    let mut metrics = String::from("label,ch,silhouette_mean\n");
    writeln!(
        metrics,
        "scene,{},{}",
        csv_num(report.ch),
        csv_num(report.silhouette_mean)
    )
    .expect("write to string");
    std::fs::write(&metrics_csv, metrics)?;

    let scatter_csv = out_dir.join("scatter.csv");
    let proj = pca_project(&data.x, 2.min(data.x.shape()[1]).min(rows.len() - 1))?;
    let mut scatter = String::from("scene_id,pc1,pc2\n");
    for (i, label) in labels.iter().enumerate() {
        let pc1 = proj.coordinates.get2(i, 0);
        let pc2 = if proj.coordinates.shape()[1] > 1 {
            proj.coordinates.get2(i, 1)
        } else {
            0.0
        };
        writeln!(scatter, "{label},{},{}", csv_num(pc1), csv_num(pc2)).expect("write to string");
    }
    std::fs::write(&scatter_csv, scatter)?;

    let distances_csv = out_dir.join("distances.csv");
    let mut distances = String::from("scene_a,scene_b,distance\n");
    for i in 0..report.labels.len() {
        for j in (i + 1)..report.labels.len() {
            writeln!(
                distances,
                "{},{},{}",
                report.labels[i],
                report.labels[j],
                csv_num(report.centroid_distances.get2(i, j))
            )
            .expect("write to string");
        }
    }
    std::fs::write(&distances_csv, distances)?;

    Ok(EvalOutputs {
        report,
        metrics_csv,
        scatter_csv,
        distances_csv,
    })
}

pub fn cmd_ablate(cfg: &RunConfig, scene_path: &Path, out_dir: &Path) -> Result<Vec<AblationCell>> {
    let set = load_scene_file(scene_path)?;
    run_ablation(cfg, &set, out_dir)
}

pub fn cmd_selfcheck(cfg: &RunConfig, tol: f64) -> Result<SelfCheckReport> {
    run_all(cfg.seed, tol)
}
