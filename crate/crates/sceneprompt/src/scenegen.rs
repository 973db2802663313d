//! Synthetic scene generation and scene-file I/O.
//!
//! Scenes carry a latent context vector; RoI features mix a category
//! signature, the scene context, and noise through fixed seeded maps,
//! so scene structure is statistically visible in feature space. With
//! 3D generation enabled each RoI also gets a ground-truth oriented box
//! and a point set sampled on its camera-facing side faces.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::rng::{normal_vec, seeded, Prng};
use crate::pseudo3d::{CameraIntrinsics, OrientedBox3D};
use rand::seq::index::sample as index_sample;
use rand::Rng;

/// One detected object region: 2D box, visual feature, optional 3D
/// supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoI {
    pub id: u64,
    pub category: String,
    /// `(x_min, y_min, x_max, y_max)` in pixels.
    pub box2d: [f64; 4],
    pub feature: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub box3d: Option<[f64; 7]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub points: Option<Vec<[f64; 3]>>,
}

impl RoI {
    pub fn validate(&self, dim_v: usize) -> Result<()> {
        if !(self.box2d[0] < self.box2d[2]) || !(self.box2d[1] < self.box2d[3]) {
            return Err(Error::Value(format!(
                "roi {}: box2d must satisfy x_min < x_max and y_min < y_max, got {:?}",
                self.id, self.box2d
            )));
        }
        if self.feature.len() != dim_v {
            return Err(Error::Dimension(format!(
                "roi {}: feature has {} dims, dataset dim_v is {dim_v}",
                self.id,
                self.feature.len()
            )));
        }
        if self.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("roi {} feature", self.id)));
        }
        if let Some(b) = &self.box3d {
            self.gt_box3d()?.ok_or(()).ok();
            let _ = b;
        }
        Ok(())
    }

    /// Typed view of the optional ground-truth box.
    pub fn gt_box3d(&self) -> Result<Option<OrientedBox3D>> {
        match &self.box3d {
            None => Ok(None),
            Some(b) => Ok(Some(OrientedBox3D::new(
                [b[0], b[1], b[2]],
                [b[3], b[4], b[5]],
                b[6],
            )?)),
        }
    }

    pub fn feature_row(&self) -> DenseArray {
        DenseArray::row_vector(self.feature.clone()).expect("validated feature")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsRepr {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl IntrinsicsRepr {
    pub fn typed(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }
}

/// One scene: latent context plus its RoIs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub context: Vec<f64>,
    pub rois: Vec<RoI>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intrinsics: Option<IntrinsicsRepr>,
}

impl Scene {
    /// Mean of the RoI features: the scene-context visual signal.
    pub fn context_feature(&self, dim_v: usize) -> DenseArray {
        let mut acc = vec![0.0; dim_v];
        for roi in &self.rois {
            for (a, v) in acc.iter_mut().zip(&roi.feature) {
                *a += v / self.rois.len() as f64;
            }
        }
        DenseArray::row_vector(acc).expect("finite features")
    }
}

/// A whole dataset, matching the scene-file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSet {
    pub dim_v: usize,
    pub dim_c: usize,
    pub ratio_priors: BTreeMap<String, f64>,
    pub scenes: Vec<Scene>,
}

impl SceneSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for scene in &self.scenes {
            if !seen.insert(scene.id) {
                return Err(Error::Value(format!("duplicate scene id {}", scene.id)));
            }
            if scene.rois.is_empty() {
                return Err(Error::Value(format!("scene {} has no RoIs", scene.id)));
            }
            if scene.context.len() != self.dim_c {
                return Err(Error::Dimension(format!(
                    "scene {}: context has {} dims, dataset dim_c is {}",
                    scene.id,
                    scene.context.len(),
                    self.dim_c
                )));
            }
            for roi in &scene.rois {
                roi.validate(self.dim_v)?;
                if let Some(b) = roi.gt_box3d()? {
                    let _ = b;
                }
            }
        }
        for (cat, r) in &self.ratio_priors {
            if !(*r > 0.0 && *r <= 1.0) {
                return Err(Error::Value(format!(
                    "ratio prior for '{cat}' must lie in (0, 1], got {r}"
                )));
            }
        }
        Ok(())
    }

    pub fn total_rois(&self) -> usize {
        self.scenes.iter().map(|s| s.rois.len()).sum()
    }

    pub fn categories(&self) -> Vec<String> {
        self.ratio_priors.keys().cloned().collect()
    }
}

/// One training batch: per-scene RoI selections.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(scene index, selected roi indices)` per sampled scene.
    pub selections: Vec<(usize, Vec<usize>)>,
}

impl Batch {
    pub fn total(&self) -> usize {
        self.selections.iter().map(|(_, r)| r.len()).sum()
    }

    /// Flattened `(scene index, roi index)` pairs in sampling order.
    pub fn flat(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.selections
            .iter()
            .flat_map(|(s, rois)| rois.iter().map(move |&r| (*s, r)))
    }
}

/// Generation knobs for the synthetic dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub rois_per_scene: usize,
    pub n_categories: usize,
    pub noise_scale: f64,
    pub dim_v: usize,
    pub dim_c: usize,
    pub with_3d: bool,
    pub points_per_roi: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_scenes: 20,
            rois_per_scene: 6,
            n_categories: 3,
            noise_scale: 0.1,
            dim_v: 32,
            dim_c: 8,
            with_3d: true,
            points_per_roi: 48,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes < 1
            || self.rois_per_scene < 1
            || self.n_categories < 1
            || self.dim_v < 1
            || self.dim_c < 1
            || (self.with_3d && self.points_per_roi < 1)
        {
            return Err(Error::Value(format!("dataset counts must be >= 1: {self:?}")));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Value(format!(
                "noise_scale must be >= 0, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Category scale by how strongly the class signature separates
/// features; context dominates so scenes form visible clusters.
const CATEGORY_SCALE: f64 = 0.4;

fn category_name(i: usize) -> String {
    match i {
        0 => "car".to_string(),
        1 => "pedestrian".to_string(),
        2 => "cyclist".to_string(),
        _ => format!("class{i}"),
    }
}

/// Canonical `(l, w, h)` extents per category; car-sized objects use
/// the frozen 4.0 / 1.8 / 1.6 dimensions.
pub fn category_dims(category: &str) -> [f64; 3] {
    match category {
        "car" => [4.0, 1.8, 1.6],
        "pedestrian" => [0.8, 0.6, 1.8],
        "cyclist" => [1.8, 0.6, 1.6],
        _ => [2.0, 1.0, 1.5],
    }
}

fn ratio_prior(category: &str) -> f64 {
    let d = category_dims(category);
    d[0].min(d[1]) / d[0].max(d[1])
}

const DEFAULT_INTRINSICS: IntrinsicsRepr = IntrinsicsRepr {
    fx: 500.0,
    fy: 500.0,
    cx: 320.0,
    cy: 240.0,
};

/// Side faces of the box (axis, sign) pairs in box-frame coordinates.
const SIDE_FACES: [(usize, f64); 4] = [(0, -1.0), (0, 1.0), (2, -1.0), (2, 1.0)];

/// Samples `count` points on the camera-facing side faces of the box.
/// Only faces whose outward normal points back toward the camera are
/// used, mimicking single-side visibility of a scanning sensor.
pub fn sample_visible_face_points(
    bx: &OrientedBox3D,
    count: usize,
    rng: &mut Prng,
) -> Vec<[f64; 3]> {
    let h = bx.half_extents();
    let mut visible: Vec<(usize, f64)> = Vec::new();
    for (axis, sign) in SIDE_FACES {
        let mut n_box = [0.0; 3];
        n_box[axis] = sign;
        let mut fc_box = [0.0; 3];
        fc_box[axis] = sign * h[if axis == 0 { 0 } else { 2 }];
        let fc = bx.to_world(fc_box);
        let tip = bx.to_world(n_box);
        let n_w = [
            tip[0] - bx.center[0],
            tip[1] - bx.center[1],
            tip[2] - bx.center[2],
        ];
        if n_w[0] * fc[0] + n_w[1] * fc[1] + n_w[2] * fc[2] < 0.0 {
            visible.push((axis, sign));
        }
    }
    if visible.len() > 2 {
        visible.truncate(2);
    }
    if visible.is_empty() {
        // Camera inside the footprint band; fall back to the near z face.
        visible.push((2, -1.0));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (axis, sign) = visible[i % visible.len()];
        let mut p = [0.0; 3];
        p[axis] = sign * h[if axis == 0 { 0 } else { 2 }];
        let other = if axis == 0 { 2 } else { 0 };
        p[other] = rng.random_range(-1.0..1.0) * h[if other == 0 { 0 } else { 2 }];
        p[1] = rng.random_range(-1.0..1.0) * h[1];
        out.push(bx.to_world(p));
    }
    out
}

/// Deterministic synthetic dataset:
/// `feature = A . onehot(category) + B . context + noise`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<SceneSet> {
    cfg.validate()?;
    let mut rng = seeded(seed);

    // Fixed mixing maps, drawn once per dataset.
    let cat_map: Vec<Vec<f64>> = (0..cfg.n_categories)
        .map(|_| {
            normal_vec(cfg.dim_v, &mut rng)
                .into_iter()
                .map(|v| v * CATEGORY_SCALE)
                .collect()
        })
        .collect();
    let ctx_map: Vec<Vec<f64>> = (0..cfg.dim_v)
        .map(|_| {
            normal_vec(cfg.dim_c, &mut rng)
                .into_iter()
                .map(|v| v / (cfg.dim_c as f64).sqrt())
                .collect()
        })
        .collect();

    let mut ratio_priors = BTreeMap::new();
    for i in 0..cfg.n_categories {
        let name = category_name(i);
        ratio_priors.insert(name.clone(), ratio_prior(&name));
    }

    let intr = DEFAULT_INTRINSICS.typed()?;
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut next_roi_id = 0u64;
    for scene_id in 0..cfg.n_scenes {
        let context = normal_vec(cfg.dim_c, &mut rng);
        let mut rois = Vec::with_capacity(cfg.rois_per_scene);
        for _ in 0..cfg.rois_per_scene {
            let cat_idx = rng.random_range(0..cfg.n_categories);
            let category = category_name(cat_idx);
            let mut feature = vec![0.0; cfg.dim_v];
            for (d, f) in feature.iter_mut().enumerate() {
                *f = cat_map[cat_idx][d];
                for (k, c) in context.iter().enumerate() {
                    *f += ctx_map[d][k] * c;
                }
            }
            if cfg.noise_scale > 0.0 {
                for (f, n) in feature.iter_mut().zip(normal_vec(cfg.dim_v, &mut rng)) {
                    *f += cfg.noise_scale * n;
                }
            } else {
                // Keep the rng stream aligned so noise_scale only changes
                // values, not the draw sequence.
                let _ = normal_vec(cfg.dim_v, &mut rng);
            }

            let center = [
                rng.random_range(-8.0..8.0),
                rng.random_range(0.2..1.2),
                rng.random_range(8.0..30.0),
            ];
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let bx = OrientedBox3D::new(center, category_dims(&category), yaw)?;

            let mut lo = [f64::INFINITY; 2];
            let mut hi = [f64::NEG_INFINITY; 2];
            for corner in bx.corners() {
                let [u, v] = intr.project(corner);
                lo = [lo[0].min(u), lo[1].min(v)];
                hi = [hi[0].max(u), hi[1].max(v)];
            }
            let (box3d, points) = if cfg.with_3d {
                let pts = sample_visible_face_points(&bx, cfg.points_per_roi, &mut rng);
                (
                    Some([
                        center[0], center[1], center[2], bx.dims[0], bx.dims[1], bx.dims[2], yaw,
                    ]),
                    Some(pts),
                )
            } else {
                (None, None)
            };
            rois.push(RoI {
                id: next_roi_id,
                category,
                box2d: [lo[0], lo[1], hi[0], hi[1]],
                feature,
                box3d,
                points,
            });
            next_roi_id += 1;
        }
        scenes.push(Scene {
            id: scene_id as u64,
            context,
            rois,
            intrinsics: Some(DEFAULT_INTRINSICS.clone()),
        });
    }
    let set = SceneSet {
        dim_v: cfg.dim_v,
        dim_c: cfg.dim_c,
        ratio_priors,
        scenes,
    };
    set.validate()?;
    Ok(set)
}

/// Samples `batch_scenes` scenes without replacement, then up to
/// `rois_per_scene` RoIs per scene without replacement.
pub fn sample_batch(
    set: &SceneSet,
    batch_scenes: usize,
    rois_per_scene: usize,
    rng: &mut Prng,
) -> Result<Batch> {
    if batch_scenes > set.scenes.len() {
        return Err(Error::Size(format!(
            "batch of {batch_scenes} scenes from a set of {}",
            set.scenes.len()
        )));
    }
    if batch_scenes == 0 || rois_per_scene == 0 {
        return Err(Error::Size("batch dimensions must be >= 1".into()));
    }
    let scene_idx = index_sample(rng, set.scenes.len(), batch_scenes);
    let mut selections = Vec::with_capacity(batch_scenes);
    for s in scene_idx.iter() {
        let n = set.scenes[s].rois.len();
        let k = rois_per_scene.min(n);
        let rois: Vec<usize> = index_sample(rng, n, k).iter().collect();
        selections.push((s, rois));
    }
    Ok(Batch { selections })
}

/// Serializes the scene file as canonical JSON (stable field order,
/// shortest round-trip floats).
pub fn save_scene_file(set: &SceneSet, path: &Path) -> Result<()> {
    set.validate()?;
    let body = serde_json::to_string(set)?;
    std::fs::write(path, body)?;
    Ok(())
}

/// Loads and validates a scene file.
pub fn load_scene_file(path: &Path) -> Result<SceneSet> {
    let body = std::fs::read_to_string(path)?;
    let set: SceneSet =
        serde_json::from_str(&body).map_err(|e| Error::Parse(format!("scene file: {e}")))?;
    set.validate()?;
    Ok(set)
}
