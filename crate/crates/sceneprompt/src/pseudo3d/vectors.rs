//! Geometry test-vector files: JSON records pairing boxes with rays,
//! points, or camera inputs and their expected values, replayable
//! against the geometry kernels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo3d::{
    gga_bpl, gga_pal, gga_srl, ray_box_intersect, CameraIntrinsics, OrientedBox3D, PointSet,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RayRecord {
    pub origin: [f64; 3],
    pub target: [f64; 3],
}

/// Expected outcome of one case; exactly one variant per record.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    /// Surface hit of a ray (None encodes a miss).
    Intersection(Option<[f64; 3]>),
    /// Boundary projection loss against `gt2d`.
    Bpl(f64),
    /// Shape-ratio loss against `r_prior`.
    Srl(f64),
    /// `(L_PAL1, L_PAL2)` of the point set.
    Pal([f64; 2]),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryCase {
    /// `(x, y, z, l, w, h, yaw)`.
    pub box3d: [f64; 7],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ray: Option<RayRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub points: Option<Vec<[f64; 3]>>,
    /// `(fx, fy, cx, cy)`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intrinsics: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt2d: Option<[f64; 4]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_prior: Option<f64>,
    pub expected: Expected,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tolerance: Option<f64>,
}

pub fn load_geometry_vectors(path: &Path) -> Result<Vec<GeometryCase>> {
    let body = std::fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| Error::Parse(format!("geometry vectors: {e}")))
}

pub fn save_geometry_vectors(cases: &[GeometryCase], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cases)?)?;
    Ok(())
}

/// Replays one case; returns the failure description when the kernel
/// output disagrees with the record.
pub fn run_case(case: &GeometryCase) -> Result<Option<String>> {
    let bx = OrientedBox3D::new(
        [case.box3d[0], case.box3d[1], case.box3d[2]],
        [case.box3d[3], case.box3d[4], case.box3d[5]],
        case.box3d[6],
    )?;
    let tol = case.tolerance.unwrap_or(1e-9);
    match &case.expected {
        Expected::Intersection(expect) => {
            let ray = case
                .ray
                .as_ref()
                .ok_or_else(|| Error::Parse("intersection case without a ray".into()))?;
            let got = ray_box_intersect(ray.origin, ray.target, &bx)?;
            match (got, expect) {
                (None, None) => Ok(None),
                (Some(g), Some(e)) => {
                    let gap: f64 = g
                        .iter()
                        .zip(e)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    Ok((gap > tol).then(|| format!("intersection {g:?} vs {e:?} (gap {gap:e})")))
                }
                (g, e) => Ok(Some(format!("hit/miss mismatch: {g:?} vs {e:?}"))),
            }
        }
        Expected::Bpl(expect) => {
            let intr = case
                .intrinsics
                .ok_or_else(|| Error::Parse("bpl case without intrinsics".into()))?;
            let gt2d = case
                .gt2d
                .ok_or_else(|| Error::Parse("bpl case without gt2d".into()))?;
            let got = gga_bpl(
                &bx,
                &CameraIntrinsics::new(intr[0], intr[1], intr[2], intr[3])?,
                gt2d,
            )?;
            Ok(((got - expect).abs() > tol).then(|| format!("bpl {got} vs {expect}")))
        }
        Expected::Srl(expect) => {
            let r = case
                .r_prior
                .ok_or_else(|| Error::Parse("srl case without r_prior".into()))?;
            let got = gga_srl(&bx, r)?;
            Ok(((got - expect).abs() > tol).then(|| format!("srl {got} vs {expect}")))
        }
        Expected::Pal(expect) => {
            let pts = case
                .points
                .clone()
                .ok_or_else(|| Error::Parse("pal case without points".into()))?;
            let (p1, p2) = gga_pal(&PointSet::new(pts), &bx)?;
            Ok(
                ((p1 - expect[0]).abs() > tol || (p2 - expect[1]).abs() > tol)
                    .then(|| format!("pal ({p1}, {p2}) vs {expect:?}")),
            )
        }
    }
}

/// Replays a whole file; returns per-case failures (empty = all pass).
pub fn run_geometry_vectors(path: &Path) -> Result<Vec<(usize, String)>> {
    let cases = load_geometry_vectors(path)?;
    let mut failures = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        if let Some(message) = run_case(case)? {
            failures.push((i, message));
        }
    }
    Ok(failures)
}
