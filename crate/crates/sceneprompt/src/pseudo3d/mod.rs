//! Geometric pseudo-label losses.
//!
//! Two families of box-supervision losses operate on RoI point sets and
//! oriented 3D boxes: geometric alignment / ray tracing with density
//! balancing, and 2D-projection / shape-ratio / points-to-box alignment.
//! The loss math lives on the tape (`diff`) so the stage-2 trainer can
//! differentiate through it; the plain functions here evaluate the same
//! graphs on constant inputs.
//!
//! Conventions: camera at the origin, x right, y down (vertical),
//! z forward. Box dims are `(l, w, h)` = extents along the box-frame
//! x, z, y axes; yaw rotates about the vertical axis.

pub mod diff;
pub mod oracle;
pub mod vectors;

use crate::error::{Error, Result};
use crate::numerics::tape::Tape;

pub use diff::DiffBox;

/// Oriented 3D box: center, `(l, w, h)` extents, yaw about vertical.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

impl OrientedBox3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64) -> Result<Self> {
        if dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Value(format!("box dims must be > 0, got {dims:?}")));
        }
        if !(yaw > -std::f64::consts::PI && yaw <= std::f64::consts::PI) || !yaw.is_finite() {
            return Err(Error::Value(format!("yaw must lie in (-pi, pi], got {yaw}")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite box center".into()));
        }
        Ok(OrientedBox3D { center, dims, yaw })
    }

    /// Half extents along the box-frame (x, y, z) axes.
    pub fn half_extents(&self) -> [f64; 3] {
        [self.dims[0] / 2.0, self.dims[2] / 2.0, self.dims[1] / 2.0]
    }

    /// World -> box frame.
    pub fn to_box_frame(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        [c * d[0] - s * d[2], d[1], s * d[0] + c * d[2]]
    }

    /// Box frame -> world.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * p[0] + s * p[2],
            self.center[1] + p[1],
            self.center[2] - s * p[0] + c * p[2],
        ]
    }

    /// Signed inside/outside measure in the box frame: negative inside,
    /// zero on the surface, positive outside (max slab excess).
    pub fn surface_excess(&self, p_world: [f64; 3]) -> f64 {
        let b = self.to_box_frame(p_world);
        let h = self.half_extents();
        (b[0].abs() - h[0])
            .max(b[1].abs() - h[1])
            .max(b[2].abs() - h[2])
    }

    pub fn contains(&self, p_world: [f64; 3]) -> bool {
        self.surface_excess(p_world) <= 0.0
    }

    /// Eight corners in world frame.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let h = self.half_extents();
        let mut out = [[0.0; 3]; 8];
        let mut i = 0;
        for &sx in &[-1.0, 1.0] {
            for &sy in &[-1.0, 1.0] {
                for &sz in &[-1.0, 1.0] {
                    out[i] = self.to_world([sx * h[0], sy * h[1], sz * h[2]]);
                    i += 1;
                }
            }
        }
        out
    }
}

/// Pinhole camera: `u = fx * x / z + cx`, `v = fy * y / z + cy`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Value(format!(
                "focal lengths must be > 0, got fx = {fx}, fy = {fy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ]
    }
}

/// RoI points in the camera frame (camera origin at zero).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f64; 3]>,
}

impl PointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Result<[f64; 3]> {
        if self.points.is_empty() {
            return Err(Error::EmptyPointSet("centroid of empty set".into()));
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let m = self.points.len() as f64;
        Ok([c[0] / m, c[1] / m, c[2] / m])
    }
}

/// Per-point neighborhood counts within radius `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityWeights {
    pub weights: Vec<u64>,
    pub radius: f64,
}

impl DensityWeights {
    /// Counts, for each point, the neighbors strictly within `radius`.
    pub fn compute(points: &PointSet, radius: f64) -> Result<Self> {
        if radius < 0.0 {
            return Err(Error::Value(format!("density radius must be >= 0, got {radius}")));
        }
        let n = points.len();
        let mut weights = vec![0u64; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d2: f64 = (0..3)
                    .map(|k| (points.points[i][k] - points.points[j][k]).powi(2))
                    .sum();
                if d2.sqrt() < radius {
                    weights[i] += 1;
                }
            }
        }
        Ok(DensityWeights { weights, radius })
    }

    /// Effective divisor: isolated points (count 0) weigh as 1.
    pub fn effective(&self, i: usize) -> f64 {
        self.weights[i].max(1) as f64
    }
}

/// Balancing weights for the projection/ratio/alignment loss family.
/// `lambda4` scales a score term that belongs to detector heads outside
/// this crate; it is carried for configuration completeness but unused
/// by `gga_total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GGAWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for GGAWeights {
    fn default() -> Self {
        GGAWeights {
            lambda1: 0.3,
            lambda2: 0.1,
            lambda3: 0.1,
            lambda4: 5.0,
        }
    }
}

impl GGAWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Value(format!("GGA weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Nearest intersection (t >= 0) of the ray `origin -> target` with the
/// box surface, in world coordinates. `None` when the ray misses.
pub fn ray_box_intersect(
    origin: [f64; 3],
    target: [f64; 3],
    bx: &OrientedBox3D,
) -> Result<Option<[f64; 3]>> {
    if origin == target {
        return Err(Error::Geometry("degenerate ray: origin equals target".into()));
    }
    let tape = Tape::new();
    let dbox = DiffBox::constant(&tape, bx);
    let o = diff::const_vec3(&tape, origin);
    let t = diff::const_vec3(&tape, target);
    let hit = diff::ray_box_entry(&dbox, &o, &t)?;
    Ok(hit.map(|p| diff::vec3_values(&p)))
}

/// Per-point and aggregate values of the alignment / ray / density loss
/// family.
#[derive(Clone, Debug)]
pub struct WeakM3dBreakdown {
    pub l_geo: Vec<f64>,
    pub l_ray: Vec<f64>,
    pub l_center: f64,
    pub l_3d: f64,
}

/// Density-balanced point-supervision total:
/// `L_3D = mean_i (1 / w_i') (L_geo_i + L_ray_i + lambda_center * L_center)`.
pub fn weakm3d_losses(
    points: &PointSet,
    bx: &OrientedBox3D,
    weights: &DensityWeights,
    lambda_center: f64,
) -> Result<WeakM3dBreakdown> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet("weakm3d losses".into()));
    }
    if weights.weights.len() != points.len() {
        return Err(Error::Dimension(format!(
            "{} density weights for {} points",
            weights.weights.len(),
            points.len()
        )));
    }
    let tape = Tape::new();
    let dbox = DiffBox::constant(&tape, bx);
    let parts = diff::weakm3d_losses_t(&tape, &dbox, &points.points, weights, lambda_center)?;
    Ok(WeakM3dBreakdown {
        l_geo: parts
            .l_geo
            .iter()
            .map(|t| t.scalar_value().expect("scalar"))
            .collect(),
        l_ray: parts
            .l_ray
            .iter()
            .map(|t| t.scalar_value().expect("scalar"))
            .collect(),
        l_center: parts.l_center.scalar_value()?,
        l_3d: parts.l_3d.scalar_value()?,
    })
}

/// Boundary projection loss: L1 between the enclosing rectangle of the
/// projected box corners and a ground-truth 2D box.
pub fn gga_bpl(bx: &OrientedBox3D, intr: &CameraIntrinsics, gt2d: [f64; 4]) -> Result<f64> {
    let tape = Tape::new();
    let dbox = DiffBox::constant(&tape, bx);
    diff::gga_bpl_t(&tape, &dbox, intr, gt2d)?.scalar_value()
}

/// Shape-ratio loss: `| min(l,w)/max(l,w) - r_prior |`.
pub fn gga_srl(bx: &OrientedBox3D, r_prior: f64) -> Result<f64> {
    let tape = Tape::new();
    let dbox = DiffBox::constant(&tape, bx);
    diff::gga_srl_t(&tape, &dbox, r_prior)?.scalar_value()
}

/// Points-to-box alignment in bird's-eye view: hinge on points escaping
/// the footprint, plus the summed distance to the nearest edge line.
pub fn gga_pal(points: &PointSet, bx: &OrientedBox3D) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet("points-to-box alignment".into()));
    }
    let tape = Tape::new();
    let dbox = DiffBox::constant(&tape, bx);
    let (p1, p2) = diff::gga_pal_t(&tape, &dbox, &points.points)?;
    Ok((p1.scalar_value()?, p2.scalar_value()?))
}

/// Weighted total over the three in-scope components.
pub fn gga_total(bpl: f64, srl: f64, pal1: f64, pal2: f64, weights: &GGAWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.lambda1 * bpl + weights.lambda2 * srl + weights.lambda3 * (pal1 + pal2))
}

#[cfg(test)]
mod tests;
