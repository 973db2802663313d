//! Stage-1 and stage-2 training loops with loss logs, checkpoints, and
//! embedding dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::apb::save_bank;
use crate::cli::config::{RunConfig, Stage2LossKind};
use crate::cli::model::{
    embed_all, load_checkpoint, save_checkpoint, stage1_forward, BatchNoise, Stage1Model,
};
use crate::encoders::{load_embedding_file, save_embedding_file};
use crate::error::{Error, Result};
use crate::numerics::adamw::{AdamWConfig, AdamWState};
use crate::numerics::array::DenseArray;
use crate::numerics::param::{ParamSet, Parameter, Session};
use crate::numerics::rng::substream;
use crate::numerics::tape::{hstack, mean_scalars, Tensor};
use crate::objective::{distill_mse, stage2_loss, LossBreakdown};
use crate::pseudo3d::diff::{gga_bpl_t, gga_pal_t, gga_srl_t, gga_total_t, weakm3d_losses_t, DiffBox};
use crate::pseudo3d::{DensityWeights, GGAWeights, PointSet};
use crate::scenegen::{category_dims, sample_batch, SceneSet};

/// Nine-significant-digit formatting for CSV output.
fn csv_num(v: f64) -> String {
    format!("{v:.8e}")
}

fn adamw_config(cfg: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.optim.lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
        weight_decay: cfg.optim.weight_decay,
    }
}

fn union_categories(set: &SceneSet) -> Vec<String> {
    let mut cats: Vec<String> = set.categories();
    for scene in &set.scenes {
        for roi in &scene.rois {
            if !cats.contains(&roi.category) {
                cats.push(roi.category.clone());
            }
        }
    }
    cats.sort();
    cats
}

#[derive(Debug)]
pub struct Stage1Summary {
    pub out_dir: PathBuf,
    pub rows: Vec<LossBreakdown>,
    pub loss_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub initial_image_embeddings: PathBuf,
    pub image_embeddings: PathBuf,
    pub initial_text_embeddings: PathBuf,
    pub text_embeddings: PathBuf,
}

impl Stage1Summary {
    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.l_stage1)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.l_stage1)
    }
}

pub const STAGE1_CSV_HEADER: &str = "step,epoch,l_contrast,l_div,kl,l_prompt,l_stage1,tau";
pub const STAGE2_CSV_HEADER: &str = "step,epoch,l_mse,l_3d,l_stage2";

/// Runs stage-1 training end to end on a loaded scene set.
pub fn train_stage1(cfg: &RunConfig, set: &SceneSet, out_dir: &Path) -> Result<Stage1Summary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json_pretty())?;

    let categories = union_categories(set);
    let mut params = ParamSet::new();
    let mut model_rng = substream(cfg.seed, "stage1/model");
    let model = Stage1Model::init(&mut params, cfg, &categories, &mut model_rng)?;

    let (init_text, init_image) = embed_all(&model, &params, cfg, set)?;
    let initial_text_embeddings = out_dir.join("initial_text_embeddings.emb");
    let initial_image_embeddings = out_dir.join("initial_image_embeddings.emb");
    save_embedding_file(&initial_text_embeddings, &init_text)?;
    save_embedding_file(&initial_image_embeddings, &init_image)?;

    let mut rng = substream(cfg.seed, "stage1/train");
    let mut opt = AdamWState::new(adamw_config(cfg), &params)?;
    let mut rows: Vec<LossBreakdown> = Vec::new();
    let mut csv = String::from(STAGE1_CSV_HEADER);
    csv.push('\n');

    let batch_scenes = cfg.sampling.batch_scenes.min(set.scenes.len());
    let mut step = 0u64;
    for epoch in 1..=cfg.optim.epochs {
        for _ in 0..cfg.optim.steps_per_epoch {
            step += 1;
            let batch = sample_batch(set, batch_scenes, cfg.sampling.rois_per_scene, &mut rng)?;
            let noise = BatchNoise::draw(cfg, batch.total(), &mut rng);
            let fwd = stage1_forward(&model, &params, cfg, set, &batch, &noise)?;
            fwd.l_stage1.backward()?;
            fwd.sess.harvest_grads(&mut params)?;
            opt.step(&mut params)?;
            params.zero_grads();

            let mut row = fwd.breakdown;
            row.step = step;
            row.epoch = epoch as u64;
            row.verify()?;
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                row.step,
                row.epoch,
                csv_num(row.l_contrast),
                csv_num(row.l_div),
                csv_num(row.kl_mean),
                csv_num(row.l_prompt),
                csv_num(row.l_stage1),
                csv_num(row.tau)
            )
            .expect("write to string");
            rows.push(row);
        }
    }

    let loss_csv = out_dir.join("stage1.csv");
    std::fs::write(&loss_csv, csv)?;

    let (text, image) = embed_all(&model, &params, cfg, set)?;
    let text_embeddings = out_dir.join("text_embeddings.emb");
    let image_embeddings = out_dir.join("image_embeddings.emb");
    save_embedding_file(&text_embeddings, &text)?;
    save_embedding_file(&image_embeddings, &image)?;

    let checkpoint = out_dir.join("params.json");
    save_checkpoint(&params, &checkpoint)?;
    save_bank(
        &model.bank,
        &params,
        &out_dir.join("bank.emb"),
        &out_dir.join("bank_positions.json"),
    )?;

    Ok(Stage1Summary {
        out_dir: out_dir.to_path_buf(),
        rows,
        loss_csv,
        checkpoint,
        initial_image_embeddings,
        image_embeddings,
        initial_text_embeddings,
        text_embeddings,
    })
}

#[derive(Debug)]
pub struct Stage2Row {
    pub step: u64,
    pub epoch: u64,
    pub l_mse: f64,
    pub l_3d: f64,
    pub l_stage2: f64,
}

#[derive(Debug)]
pub struct Stage2Summary {
    pub out_dir: PathBuf,
    pub rows: Vec<Stage2Row>,
    pub loss_csv: PathBuf,
    pub checkpoint: PathBuf,
}

/// How the stage-2 box head anchors its predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxAnchor {
    /// Point-centroid position with frozen category dims (default).
    Centroid,
    /// The stored pseudo-label box itself (deltas start at zero loss).
    PseudoLabel,
}

/// Builds the predicted box for one RoI: anchor plus head deltas, with
/// dims kept positive through an exponential parameterization.
fn predict_box(
    sess: &Session,
    delta: &Tensor,
    anchor_center: [f64; 3],
    anchor_dims: [f64; 3],
    anchor_yaw: f64,
) -> Result<DiffBox> {
    let at = |j: usize| delta.elem(0, j);
    let row = hstack(&[
        at(0)?.add_const(anchor_center[0]),
        at(1)?.add_const(anchor_center[1]),
        at(2)?.add_const(anchor_center[2]),
        at(3)?.exp().scale(anchor_dims[0]),
        at(4)?.exp().scale(anchor_dims[1]),
        at(5)?.exp().scale(anchor_dims[2]),
        at(6)?.add_const(anchor_yaw),
    ])?;
    let _ = sess;
    DiffBox::from_row(&row)
}

/// Stage-2 distillation: a fresh student projection regresses frozen
/// stage-1 image embeddings while a small box head is supervised by the
/// geometric pseudo-label losses.
pub fn train_stage2(
    cfg: &RunConfig,
    set: &SceneSet,
    stage1_dir: &Path,
    out_dir: &Path,
    anchor: BoxAnchor,
) -> Result<Stage2Summary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json_pretty())?;

    // The stage-1 checkpoint must be loadable; the teacher is its final
    // image-embedding dump.
    let _stage1_params = load_checkpoint(&stage1_dir.join("params.json"))?;
    let teacher = load_embedding_file(&stage1_dir.join("image_embeddings.emb"))?;
    if teacher.dim != cfg.dims.d {
        return Err(Error::Config(format!(
            "teacher dim {} vs model dim {}",
            teacher.dim, cfg.dims.d
        )));
    }

    if cfg.loss.lambda > 0.0 {
        for scene in &set.scenes {
            for roi in &scene.rois {
                if roi.box3d.is_none() || roi.points.as_ref().map_or(true, |p| p.is_empty()) {
                    return Err(Error::Config(format!(
                        "lambda > 0 needs 3D boxes and points; roi {} has none",
                        roi.id
                    )));
                }
            }
            if cfg.stage2.loss == Stage2LossKind::Gga && scene.intrinsics.is_none() {
                return Err(Error::Config(format!(
                    "gga stage-2 loss needs intrinsics; scene {} has none",
                    scene.id
                )));
            }
        }
    }

    let mut params = ParamSet::new();
    let mut model_rng = substream(cfg.seed, "stage2/model");
    params.insert(Parameter::new(
        "student/proj",
        crate::numerics::rng::normal_array(vec![cfg.dims.d, cfg.dims.d_v], cfg.init_scale, &mut model_rng),
    ))?;
    params.insert(Parameter::new(
        "student/box_head",
        DenseArray::zeros(vec![7, cfg.dims.d]),
    ))?;

    let mut rng = substream(cfg.seed, "stage2/train");
    let mut opt = AdamWState::new(adamw_config(cfg), &params)?;
    let gga_weights = GGAWeights {
        lambda1: cfg.loss.gga.lambda1,
        lambda2: cfg.loss.gga.lambda2,
        lambda3: cfg.loss.gga.lambda3,
        lambda4: cfg.loss.gga.lambda4,
    };

    let mut rows: Vec<Stage2Row> = Vec::new();
    let mut csv = String::from(STAGE2_CSV_HEADER);
    csv.push('\n');
    let batch_scenes = cfg.sampling.batch_scenes.min(set.scenes.len());
    let mut step = 0u64;
    for epoch in 1..=cfg.stage2.epochs {
        for _ in 0..cfg.stage2.steps_per_epoch {
            step += 1;
            let batch = sample_batch(set, batch_scenes, cfg.sampling.rois_per_scene, &mut rng)?;
            let mut sess = Session::new();
            let proj = sess.lease(&params, "student/proj")?;
            let head = sess.lease(&params, "student/box_head")?;

            let mut student_rows = Vec::new();
            let mut teacher_rows = Vec::new();
            let mut l3d_terms = Vec::new();
            for (s, r) in batch.flat() {
                let scene = &set.scenes[s];
                let roi = &scene.rois[r];
                let key = format!("s{}/r{}", scene.id, roi.id);
                let t_row = teacher
                    .get(&key)
                    .ok_or_else(|| Error::Key(format!("teacher dump misses '{key}'")))?;
                let feature = sess.constant(roi.feature_row());
                let student = feature.matmul_nt(&proj)?;
                teacher_rows.push(t_row.to_vec());
                student_rows.push(student.clone());

                if cfg.loss.lambda > 0.0 {
                    let points = PointSet::new(roi.points.clone().expect("validated above"));
                    let gt = roi.gt_box3d()?.expect("validated above");
                    let (anchor_center, anchor_dims, anchor_yaw) = match anchor {
                        BoxAnchor::Centroid => {
                            (points.centroid()?, category_dims(&roi.category), 0.0)
                        }
                        BoxAnchor::PseudoLabel => (gt.center, gt.dims, gt.yaw),
                    };
                    let delta = student.matmul_nt(&head)?;
                    let dbox = predict_box(&sess, &delta, anchor_center, anchor_dims, anchor_yaw)?;
                    let l3d = match cfg.stage2.loss {
                        Stage2LossKind::Weakm3d => {
                            let weights = DensityWeights::compute(&points, cfg.density_radius)?;
                            weakm3d_losses_t(
                                &sess.tape,
                                &dbox,
                                &points.points,
                                &weights,
                                cfg.loss.lambda_center,
                            )?
                            .l_3d
                        }
                        Stage2LossKind::Gga => {
                            let intr = scene
                                .intrinsics
                                .as_ref()
                                .expect("validated above")
                                .typed()?;
                            let r_prior = *set
                                .ratio_priors
                                .get(&roi.category)
                                .ok_or_else(|| {
                                    Error::Config(format!(
                                        "no ratio prior for category '{}'",
                                        roi.category
                                    ))
                                })?;
                            let bpl = gga_bpl_t(&sess.tape, &dbox, &intr, roi.box2d)?;
                            let srl = gga_srl_t(&sess.tape, &dbox, r_prior)?;
                            let (pal1, pal2) = gga_pal_t(&sess.tape, &dbox, &points.points)?;
                            gga_total_t(&bpl, &srl, &pal1, &pal2, &gga_weights)?
                        }
                    };
                    l3d_terms.push(l3d);
                }
            }

            let student_matrix = crate::numerics::tape::vstack(&student_rows)?;
            let teacher_matrix = DenseArray::from_rows(&teacher_rows)?;
            let l_mse = distill_mse(&mut sess, &student_matrix, &teacher_matrix)?;
            let l_3d = if l3d_terms.is_empty() {
                sess.tape.scalar(0.0)
            } else {
                mean_scalars(&l3d_terms)?
            };
            let l_stage2 = stage2_loss(&l_mse, &l_3d, cfg.loss.lambda)?;

            let row = Stage2Row {
                step,
                epoch: epoch as u64,
                l_mse: l_mse.scalar_value()?,
                l_3d: l_3d.scalar_value()?,
                l_stage2: l_stage2.scalar_value()?,
            };
            for (name, v) in [
                ("l_mse", row.l_mse),
                ("l_3d", row.l_3d),
                ("l_stage2", row.l_stage2),
            ] {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("loss tensor '{name}'")));
                }
            }

            l_stage2.backward()?;
            sess.harvest_grads(&mut params)?;
            opt.step(&mut params)?;
            params.zero_grads();

            writeln!(
                csv,
                "{},{},{},{},{}",
                row.step,
                row.epoch,
                csv_num(row.l_mse),
                csv_num(row.l_3d),
                csv_num(row.l_stage2)
            )
            .expect("write to string");
            rows.push(row);
        }
    }

    let loss_csv = out_dir.join("stage2.csv");
    std::fs::write(&loss_csv, csv)?;
    let checkpoint = out_dir.join("student.json");
    save_checkpoint(&params, &checkpoint)?;

    Ok(Stage2Summary {
        out_dir: out_dir.to_path_buf(),
        rows,
        loss_csv,
        checkpoint,
    })
}

/// One cell of the ablation grid.
pub struct AblationCell {
    pub fusion: crate::mgpm::FusionStrategy,
    pub image_text_fusion: crate::mgpm::ImageTextFusion,
    pub gaussian_sampling: bool,
    pub first_l_stage1: f64,
    pub final_l_stage1: f64,
    pub csv_path: PathBuf,
}

/// Runs the full fusion x image-text-fusion x sampling grid. Every cell
/// shares the base seed and dataset; only the three ablated knobs vary.
pub fn run_ablation(cfg: &RunConfig, set: &SceneSet, out_dir: &Path) -> Result<Vec<AblationCell>> {
    std::fs::create_dir_all(out_dir)?;
    let mut cells = Vec::new();
    let mut summary = String::from(
        "fusion,image_text_fusion,gaussian_sampling,first_l_stage1,final_l_stage1\n",
    );
    for fusion in crate::mgpm::FusionStrategy::ALL {
        for itf in crate::mgpm::ImageTextFusion::ALL {
            for sampling in [true, false] {
                let mut cell_cfg = cfg.clone();
                cell_cfg.fusion = fusion;
                cell_cfg.image_text_fusion = itf;
                cell_cfg.gaussian_sampling = sampling;
                let name = format!(
                    "{}_{}_{}",
                    fusion.name(),
                    itf.name(),
                    if sampling { "gs_on" } else { "gs_off" }
                );
                let cell_dir = out_dir.join(&name);
                let run = train_stage1(&cell_cfg, set, &cell_dir)?;
                let first = run.first_loss().unwrap_or(f64::NAN);
                let last = run.final_loss().unwrap_or(f64::NAN);
                if !first.is_finite() || !last.is_finite() {
                    return Err(Error::NonFinite(format!("ablation cell '{name}'")));
                }
                writeln!(
                    summary,
                    "{},{},{},{},{}",
                    fusion.name(),
                    itf.name(),
                    sampling,
                    csv_num(first),
                    csv_num(last)
                )
                .expect("write to string");
                cells.push(AblationCell {
                    fusion,
                    image_text_fusion: itf,
                    gaussian_sampling: sampling,
                    first_l_stage1: first,
                    final_l_stage1: last,
                    csv_path: run.loss_csv,
                });
            }
        }
    }
    std::fs::write(out_dir.join("ablation_summary.csv"), summary)?;
    Ok(cells)
}
