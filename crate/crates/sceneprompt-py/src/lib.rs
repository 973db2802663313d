//! Python bindings: dataset generation, the loss and metric operations,
//! box geometry, and the two training stages.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use sceneprompt::cli::config::RunConfig;
use sceneprompt::cli::train::BoxAnchor;
use sceneprompt::cli::{cmd_eval, cmd_gen_data, cmd_selfcheck, cmd_train_stage1, cmd_train_stage2};
use sceneprompt::encoders::load_embedding_file;
use sceneprompt::error::Error;
use sceneprompt::latentmetrics::{
    calinski_harabasz as ch_impl, centroid_distances as cd_impl, pca_project as pca_impl,
    silhouette as sil_impl, LabeledEmbeddings,
};
use sceneprompt::mgpm::{FusionStrategy, GaussianPromptParams};
use sceneprompt::numerics::array::DenseArray;
use sceneprompt::numerics::param::{ParamSet, Session};
use sceneprompt::objective::{
    contrastive_loss as contrastive_impl, diversity_loss as diversity_impl,
    kl_to_standard_normal, EmbeddingPairBatch, Temperature,
};
use sceneprompt::pseudo3d::{
    gga_bpl as bpl_impl, gga_pal as pal_impl, gga_srl as srl_impl, gga_total as total_impl,
    ray_box_intersect as ray_impl, weakm3d_losses as weakm3d_impl, CameraIntrinsics,
    DensityWeights, GGAWeights, OrientedBox3D, PointSet,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DenseArray> {
    DenseArray::from_rows(rows).map_err(err)
}

fn box_from(b: [f64; 7]) -> PyResult<OrientedBox3D> {
    OrientedBox3D::new([b[0], b[1], b[2]], [b[3], b[4], b[5]], b[6]).map_err(err)
}

fn config_from(json: Option<&str>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = match json {
        Some(body) => RunConfig::from_json(body).map_err(err)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Library version string.
#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Default run configuration as pretty JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json_pretty()
}

/// Generates the synthetic dataset and returns its content digest.
#[pyfunction]
#[pyo3(signature = (path, config_json=None, seed=None))]
fn generate_dataset(path: PathBuf, config_json: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = config_from(config_json, seed)?;
    cmd_gen_data(&cfg, &path).map_err(err)
}

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)).
#[pyfunction]
fn kl_standard_normal(mu: Vec<f64>, sigma: Vec<f64>) -> PyResult<f64> {
    let sess = Session::new();
    let g = GaussianPromptParams::new(
        sess.constant(DenseArray::row_vector(mu).map_err(err)?),
        sess.constant(DenseArray::row_vector(sigma).map_err(err)?),
        (0, 0),
    )
    .map_err(err)?;
    kl_to_standard_normal(&g)
        .and_then(|t| t.scalar_value())
        .map_err(err)
}

/// Contrastive loss over unit-norm row pairs at a fixed temperature.
#[pyfunction]
fn contrastive_loss(text: Vec<Vec<f64>>, image: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let mut params = ParamSet::new();
    let temp = Temperature::init(&mut params, tau).map_err(err)?;
    let mut sess = Session::new();
    let batch = EmbeddingPairBatch::new(
        sess.constant(matrix(&text)?),
        sess.constant(matrix(&image)?),
    )
    .map_err(err)?;
    let (loss, _) = contrastive_impl(&mut sess, &params, &batch, &temp).map_err(err)?;
    loss.scalar_value().map_err(err)
}

/// Diversity loss of one row-normalized prompt matrix.
#[pyfunction]
fn diversity_loss(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let mut sess = Session::new();
    let t = sess.constant(matrix(&rows)?);
    diversity_impl(&mut sess, &[t])
        .and_then(|l| l.scalar_value())
        .map_err(err)
}

/// Parameter-free prompt fusion (maxpool or add) with L2 normalization.
#[pyfunction]
fn fuse_prompts(rows: Vec<Vec<f64>>, strategy: &str) -> PyResult<Vec<f64>> {
    let strategy = match strategy {
        "maxpool" => FusionStrategy::Maxpool,
        "add" => FusionStrategy::Add,
        other => {
            return Err(PyValueError::new_err(format!(
                "strategy must be 'maxpool' or 'add' here, got '{other}'"
            )))
        }
    };
    let sess = Session::new();
    let samples = sess.constant(matrix(&rows)?);
    let pooled = match strategy {
        FusionStrategy::Maxpool => samples.max_rows(),
        _ => samples.sum_rows(),
    };
    pooled
        .l2_normalize_rows(1e-12)
        .map(|t| t.value().into_vec())
        .map_err(err)
}

fn labeled(x: Vec<Vec<f64>>, labels: Vec<u64>) -> PyResult<LabeledEmbeddings> {
    LabeledEmbeddings::new(matrix(&x)?, labels).map_err(err)
}

/// Calinski-Harabasz index of labeled embeddings.
#[pyfunction]
fn calinski_harabasz(x: Vec<Vec<f64>>, labels: Vec<u64>) -> PyResult<f64> {
    ch_impl(&labeled(x, labels)?).map_err(err)
}

/// Mean and per-point silhouette scores.
#[pyfunction]
fn silhouette(x: Vec<Vec<f64>>, labels: Vec<u64>) -> PyResult<(f64, Vec<f64>)> {
    sil_impl(&labeled(x, labels)?).map_err(err)
}

/// Sorted labels plus the pairwise centroid-distance matrix.
#[pyfunction]
fn centroid_distances(x: Vec<Vec<f64>>, labels: Vec<u64>) -> PyResult<(Vec<u64>, Vec<Vec<f64>>)> {
    let (order, m) = cd_impl(&labeled(x, labels)?).map_err(err)?;
    let k = order.len();
    let rows = (0..k).map(|i| m.row(i).to_vec()).collect();
    Ok((order, rows))
}

/// PCA projection: coordinates and explained-variance fractions.
#[pyfunction]
fn pca_project(x: Vec<Vec<f64>>, out_dims: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let proj = pca_impl(&matrix(&x)?, out_dims).map_err(err)?;
    let n = proj.coordinates.shape()[0];
    let coords = (0..n).map(|i| proj.coordinates.row(i).to_vec()).collect();
    Ok((coords, proj.explained))
}

/// Nearest ray/box surface intersection, if any. The box is
/// `(x, y, z, l, w, h, yaw)`.
#[pyfunction]
fn ray_box_intersect(
    origin: [f64; 3],
    target: [f64; 3],
    box3d: [f64; 7],
) -> PyResult<Option<[f64; 3]>> {
    ray_impl(origin, target, &box_from(box3d)?).map_err(err)
}

/// Density-balanced geometric losses:
/// `(l_geo, l_ray, l_center, l_3d)`.
#[pyfunction]
#[pyo3(signature = (points, box3d, radius=0.4, lambda_center=1.0))]
fn weakm3d_losses(
    points: Vec<[f64; 3]>,
    box3d: [f64; 7],
    radius: f64,
    lambda_center: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, f64, f64)> {
    let pts = PointSet::new(points);
    let weights = DensityWeights::compute(&pts, radius).map_err(err)?;
    let out = weakm3d_impl(&pts, &box_from(box3d)?, &weights, lambda_center).map_err(err)?;
    Ok((out.l_geo, out.l_ray, out.l_center, out.l_3d))
}

/// Projection, ratio, and alignment losses plus their weighted total:
/// `(bpl, srl, pal1, pal2, total)`.
#[pyfunction]
#[pyo3(signature = (box3d, intrinsics, gt2d, points, r_prior=0.45))]
fn gga_losses(
    box3d: [f64; 7],
    intrinsics: [f64; 4],
    gt2d: [f64; 4],
    points: Vec<[f64; 3]>,
    r_prior: f64,
) -> PyResult<(f64, f64, f64, f64, f64)> {
    let bx = box_from(box3d)?;
    let intr = CameraIntrinsics::new(intrinsics[0], intrinsics[1], intrinsics[2], intrinsics[3])
        .map_err(err)?;
    let bpl = bpl_impl(&bx, &intr, gt2d).map_err(err)?;
    let srl = srl_impl(&bx, r_prior).map_err(err)?;
    let (pal1, pal2) = pal_impl(&PointSet::new(points), &bx).map_err(err)?;
    let total = total_impl(bpl, srl, pal1, pal2, &GGAWeights::default()).map_err(err)?;
    Ok((bpl, srl, pal1, pal2, total))
}

/// Runs stage-1 training; returns `(steps, first_l_stage1, last_l_stage1)`.
#[pyfunction]
#[pyo3(signature = (scenes, out_dir, config_json=None, seed=None))]
fn train_stage1(
    scenes: PathBuf,
    out_dir: PathBuf,
    config_json: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(usize, Option<f64>, Option<f64>)> {
    let cfg = config_from(config_json, seed)?;
    let summary = cmd_train_stage1(&cfg, &scenes, &out_dir).map_err(err)?;
    Ok((summary.rows.len(), summary.first_loss(), summary.final_loss()))
}

/// Runs stage-2 training; returns `(steps, first_l_stage2, last_l_stage2)`.
#[pyfunction]
#[pyo3(signature = (stage1_dir, scenes, out_dir, config_json=None, seed=None, anchor_pseudo_label=false))]
fn train_stage2(
    stage1_dir: PathBuf,
    scenes: PathBuf,
    out_dir: PathBuf,
    config_json: Option<&str>,
    seed: Option<u64>,
    anchor_pseudo_label: bool,
) -> PyResult<(usize, Option<f64>, Option<f64>)> {
    let cfg = config_from(config_json, seed)?;
    let anchor = if anchor_pseudo_label {
        BoxAnchor::PseudoLabel
    } else {
        BoxAnchor::Centroid
    };
    let summary = cmd_train_stage2(&cfg, &stage1_dir, &scenes, &out_dir, anchor).map_err(err)?;
    Ok((
        summary.rows.len(),
        summary.rows.first().map(|r| r.l_stage2),
        summary.rows.last().map(|r| r.l_stage2),
    ))
}

/// Scene-grouped metrics of an embedding dump; emits the three CSVs and
/// returns `(ch, silhouette_mean)`. Keys are validated against the
/// scene file when one is given.
#[pyfunction]
#[pyo3(signature = (embeddings, out_dir, scenes=None))]
fn evaluate_embeddings(
    embeddings: PathBuf,
    out_dir: PathBuf,
    scenes: Option<PathBuf>,
) -> PyResult<(f64, f64)> {
    let outputs = cmd_eval(&embeddings, scenes.as_deref(), &out_dir).map_err(err)?;
    Ok((outputs.report.ch, outputs.report.silhouette_mean))
}

/// Loads an embedding dump as `(keys, rows)`.
#[pyfunction]
fn load_embeddings(path: PathBuf) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
    let dump = load_embedding_file(Path::new(&path)).map_err(err)?;
    let mut keys = Vec::with_capacity(dump.len());
    let mut rows = Vec::with_capacity(dump.len());
    for (k, v) in dump.entries {
        keys.push(k);
        rows.push(v);
    }
    Ok((keys, rows))
}

/// Runs every verification suite; returns True when all checks pass.
#[pyfunction]
#[pyo3(signature = (seed=0, tol=1e-4))]
fn selfcheck(seed: u64, tol: f64) -> PyResult<bool> {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    Ok(cmd_selfcheck(&cfg, tol).map_err(err)?.all_pass())
}

#[pymodule]
fn sceneprompt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(kl_standard_normal, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(calinski_harabasz, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(centroid_distances, m)?)?;
    m.add_function(wrap_pyfunction!(pca_project, m)?)?;
    m.add_function(wrap_pyfunction!(ray_box_intersect, m)?)?;
    m.add_function(wrap_pyfunction!(weakm3d_losses, m)?)?;
    m.add_function(wrap_pyfunction!(gga_losses, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage1, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage2, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
