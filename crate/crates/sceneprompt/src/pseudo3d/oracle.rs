//! Brute-force geometry oracle, independent of the slab intersection
//! path: marches along the ray in fixed arc-length steps and reports
//! the first inside/outside sign change.

use crate::pseudo3d::OrientedBox3D;

/// First surface crossing of the ray `origin -> target` (extended past
/// the target), located by marching with the given arc-length `step`.
/// The march may skip ahead to the box's bounding sphere, outside which
/// the containment test is constant.
pub fn ray_march_intersect(
    origin: [f64; 3],
    target: [f64; 3],
    bx: &OrientedBox3D,
    step: f64,
) -> Option<[f64; 3]> {
    let mut dir = [
        target[0] - origin[0],
        target[1] - origin[1],
        target[2] - origin[2],
    ];
    let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if len == 0.0 {
        return None;
    }
    dir.iter_mut().for_each(|v| *v /= len);
    let radius = 0.5
        * (bx.dims[0] * bx.dims[0] + bx.dims[1] * bx.dims[1] + bx.dims[2] * bx.dims[2]).sqrt();
    let to_c = [
        bx.center[0] - origin[0],
        bx.center[1] - origin[1],
        bx.center[2] - origin[2],
    ];
    let proj = to_c[0] * dir[0] + to_c[1] * dir[1] + to_c[2] * dir[2];
    let t_start = (proj - radius - step).max(0.0);
    let t_end = proj + radius + step;
    if t_end < 0.0 {
        return None;
    }
    let at = |t: f64| {
        [
            origin[0] + t * dir[0],
            origin[1] + t * dir[1],
            origin[2] + t * dir[2],
        ]
    };
    let mut prev = bx.contains(at(t_start));
    let mut t = t_start;
    while t < t_end {
        let next = t + step;
        let cur = bx.contains(at(next));
        if cur != prev {
            return Some(at(t + step / 2.0));
        }
        prev = cur;
        t = next;
    }
    None
}
