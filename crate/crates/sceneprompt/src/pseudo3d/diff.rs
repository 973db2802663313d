//! Tape-level geometry: differentiable box losses.
//!
//! Branch decisions (hit vs miss, parallel slabs, behind-camera) are
//! taken from forward values; gradients flow through the surviving
//! branch. Kinks are measure-zero under the random inputs used in
//! training and testing.

use crate::error::{Error, Result};
use crate::numerics::tape::{sum_scalars, Tape, Tensor};
use crate::pseudo3d::{CameraIntrinsics, DensityWeights, OrientedBox3D};

/// Oriented box as seven scalar tensors `(x, y, z, l, w, h, yaw)`.
#[derive(Clone, Debug)]
pub struct DiffBox {
    pub cx: Tensor,
    pub cy: Tensor,
    pub cz: Tensor,
    pub l: Tensor,
    pub w: Tensor,
    pub h: Tensor,
    pub yaw: Tensor,
}

impl DiffBox {
    pub fn constant(tape: &Tape, bx: &OrientedBox3D) -> Self {
        DiffBox {
            cx: tape.scalar(bx.center[0]),
            cy: tape.scalar(bx.center[1]),
            cz: tape.scalar(bx.center[2]),
            l: tape.scalar(bx.dims[0]),
            w: tape.scalar(bx.dims[1]),
            h: tape.scalar(bx.dims[2]),
            yaw: tape.scalar(bx.yaw),
        }
    }

    /// Splits a `[1 x 7]` row `(x, y, z, l, w, h, yaw)`.
    pub fn from_row(row: &Tensor) -> Result<Self> {
        if row.rows() != 1 || row.cols() != 7 {
            return Err(Error::Dimension(format!(
                "box row must be [1 x 7], got [{}x{}]",
                row.rows(),
                row.cols()
            )));
        }
        Ok(DiffBox {
            cx: row.elem(0, 0)?,
            cy: row.elem(0, 1)?,
            cz: row.elem(0, 2)?,
            l: row.elem(0, 3)?,
            w: row.elem(0, 4)?,
            h: row.elem(0, 5)?,
            yaw: row.elem(0, 6)?,
        })
    }

    pub fn center(&self) -> [Tensor; 3] {
        [self.cx.clone(), self.cy.clone(), self.cz.clone()]
    }

    /// Dims as plain values, for validity checks before building losses.
    pub fn dims_values(&self) -> Result<[f64; 3]> {
        Ok([
            self.l.scalar_value()?,
            self.w.scalar_value()?,
            self.h.scalar_value()?,
        ])
    }
}

pub fn const_vec3(tape: &Tape, v: [f64; 3]) -> [Tensor; 3] {
    [tape.scalar(v[0]), tape.scalar(v[1]), tape.scalar(v[2])]
}

pub fn vec3_values(v: &[Tensor; 3]) -> [f64; 3] {
    [
        v[0].scalar_value().expect("scalar"),
        v[1].scalar_value().expect("scalar"),
        v[2].scalar_value().expect("scalar"),
    ]
}

fn l1_to_const(v: &[Tensor; 3], target: [f64; 3]) -> Result<Tensor> {
    let dx = v[0].add_const(-target[0]).abs();
    let dy = v[1].add_const(-target[1]).abs();
    let dz = v[2].add_const(-target[2]).abs();
    sum_scalars(&[dx, dy, dz])
}

/// World -> box frame rotation of `(x, z)` horizontal components.
fn rotate_into_box(dbox: &DiffBox, x: &Tensor, z: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = dbox.yaw.cos();
    let s = dbox.yaw.sin();
    let bx = c.mul(x)?.sub(&s.mul(z)?)?;
    let bz = s.mul(x)?.add(&c.mul(z)?)?;
    Ok((bx, bz))
}

const PARALLEL_EPS: f64 = 1e-12;

/// Intersection of the ray `origin -> target` with the box surface,
/// nearest to the origin along the positive ray direction. Returns the
/// world-frame point, or `None` when the ray misses.
pub fn ray_box_entry(
    dbox: &DiffBox,
    origin: &[Tensor; 3],
    target: &[Tensor; 3],
) -> Result<Option<[Tensor; 3]>> {
    let dx = target[0].sub(&origin[0])?;
    let dy = target[1].sub(&origin[1])?;
    let dz = target[2].sub(&origin[2])?;
    let len2 = sum_scalars(&[dx.mul(&dx)?, dy.mul(&dy)?, dz.mul(&dz)?])?;
    if len2.scalar_value()? <= 0.0 {
        return Err(Error::Geometry("degenerate ray: zero direction".into()));
    }
    let len = len2.sqrt()?;
    let dir = [dx.div(&len)?, dy.div(&len)?, dz.div(&len)?];

    // Ray in the box frame.
    let rx = origin[0].sub(&dbox.cx)?;
    let ry = origin[1].sub(&dbox.cy)?;
    let rz = origin[2].sub(&dbox.cz)?;
    let (obx, obz) = rotate_into_box(dbox, &rx, &rz)?;
    let (dbx, dbz) = rotate_into_box(dbox, &dir[0], &dir[2])?;
    let oby = ry;
    let dby = dir[1].clone();

    let half_x = dbox.l.scale(0.5);
    let half_y = dbox.h.scale(0.5);
    let half_z = dbox.w.scale(0.5);

    let axes = [(obx, dbx, half_x), (oby, dby, half_y), (obz, dbz, half_z)];
    let mut t_enter: Option<Tensor> = None;
    let mut t_exit: Option<Tensor> = None;
    for (o, d, half) in axes {
        if d.scalar_value()?.abs() < PARALLEL_EPS {
            if o.scalar_value()?.abs() > half.scalar_value()? {
                return Ok(None);
            }
            continue;
        }
        let t1 = half.neg().sub(&o)?.div(&d)?;
        let t2 = half.sub(&o)?.div(&d)?;
        let near = t1.min2(&t2)?;
        let far = t1.max2(&t2)?;
        t_enter = Some(match t_enter {
            Some(t) => t.max2(&near)?,
            None => near,
        });
        t_exit = Some(match t_exit {
            Some(t) => t.min2(&far)?,
            None => far,
        });
    }
    let (t_enter, t_exit) = match (t_enter, t_exit) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok(None),
    };
    let enter_v = t_enter.scalar_value()?;
    let exit_v = t_exit.scalar_value()?;
    if enter_v > exit_v || exit_v < 0.0 {
        return Ok(None);
    }
    let t = if enter_v >= 0.0 { t_enter } else { t_exit };
    Ok(Some([
        origin[0].add(&t.mul(&dir[0])?)?,
        origin[1].add(&t.mul(&dir[1])?)?,
        origin[2].add(&t.mul(&dir[2])?)?,
    ]))
}

/// Tape-level pieces of the density-balanced point-supervision loss.
pub struct WeakM3dParts {
    pub l_geo: Vec<Tensor>,
    pub l_ray: Vec<Tensor>,
    pub l_center: Tensor,
    pub l_3d: Tensor,
}

/// Builds per-point alignment and ray losses plus the balanced total.
///
/// `L_geo_i` is the L1 gap between a point and the exit of the
/// center-to-point ray; `L_ray_i` the gap to the camera-nearest surface
/// hit along the camera ray (zero on a miss); `L_center` the L1
/// distance between the point centroid and the box center.
pub fn weakm3d_losses_t(
    tape: &Tape,
    dbox: &DiffBox,
    points: &[[f64; 3]],
    weights: &DensityWeights,
    lambda_center: f64,
) -> Result<WeakM3dParts> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet("weakm3d losses".into()));
    }
    let m = points.len();
    let mut centroid = [0.0; 3];
    for p in points {
        for k in 0..3 {
            centroid[k] += p[k] / m as f64;
        }
    }
    let center = dbox.center();
    let l_center = l1_to_const(&center, centroid)?;

    let cam = const_vec3(tape, [0.0, 0.0, 0.0]);
    let mut l_geo = Vec::with_capacity(m);
    let mut l_ray = Vec::with_capacity(m);
    let mut contribs = Vec::with_capacity(m);
    for (i, p) in points.iter().enumerate() {
        let target = const_vec3(tape, *p);

        let center_sep = [
            center[0].scalar_value()? - p[0],
            center[1].scalar_value()? - p[1],
            center[2].scalar_value()? - p[2],
        ];
        let degenerate = center_sep.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12;
        let geo = if degenerate {
            tape.scalar(0.0)
        } else {
            match ray_box_entry(dbox, &center, &target)? {
                Some(hit) => l1_to_const(&hit, *p)?,
                None => tape.scalar(0.0),
            }
        };
        let ray = match ray_box_entry(dbox, &cam, &target)? {
            Some(hit) => l1_to_const(&hit, *p)?,
            None => tape.scalar(0.0),
        };

        let per_point = geo
            .add(&ray)?
            .add(&l_center.scale(lambda_center))?
            .scale(1.0 / weights.effective(i));
        contribs.push(per_point);
        l_geo.push(geo);
        l_ray.push(ray);
    }
    let l_3d = sum_scalars(&contribs)?.scale(1.0 / m as f64);
    Ok(WeakM3dParts {
        l_geo,
        l_ray,
        l_center,
        l_3d,
    })
}

/// Projects the eight box corners and penalizes the L1 gap between
/// their enclosing rectangle and the ground-truth 2D box.
pub fn gga_bpl_t(
    _tape: &Tape,
    dbox: &DiffBox,
    intr: &CameraIntrinsics,
    gt2d: [f64; 4],
) -> Result<Tensor> {
    let c = dbox.yaw.cos();
    let s = dbox.yaw.sin();
    let half_x = dbox.l.scale(0.5);
    let half_y = dbox.h.scale(0.5);
    let half_z = dbox.w.scale(0.5);

    let mut us: Vec<Tensor> = Vec::with_capacity(8);
    let mut vs: Vec<Tensor> = Vec::with_capacity(8);
    let mut idx = 0;
    for &sx in &[-1.0, 1.0] {
        for &sy in &[-1.0, 1.0] {
            for &sz in &[-1.0, 1.0] {
                let bx = half_x.scale(sx);
                let by = half_y.scale(sy);
                let bz = half_z.scale(sz);
                // Box frame -> world: x = cx + c*bx + s*bz, z = cz - s*bx + c*bz.
                let wx = dbox.cx.add(&c.mul(&bx)?)?.add(&s.mul(&bz)?)?;
                let wy = dbox.cy.add(&by)?;
                let wz = dbox.cz.sub(&s.mul(&bx)?)?.add(&c.mul(&bz)?)?;
                let z = wz.scalar_value()?;
                if z <= 0.0 {
                    return Err(Error::BehindCamera(idx, z));
                }
                us.push(wx.div(&wz)?.scale(intr.fx).add_const(intr.cx));
                vs.push(wy.div(&wz)?.scale(intr.fy).add_const(intr.cy));
                idx += 1;
            }
        }
    }
    let fold =
        |items: &[Tensor], pick: fn(&Tensor, &Tensor) -> Result<Tensor>| -> Result<Tensor> {
            let mut acc = items[0].clone();
            for it in &items[1..] {
                acc = pick(&acc, it)?;
            }
            Ok(acc)
        };
    let u_min = fold(&us, |a, b| a.min2(b))?;
    let u_max = fold(&us, |a, b| a.max2(b))?;
    let v_min = fold(&vs, |a, b| a.min2(b))?;
    let v_max = fold(&vs, |a, b| a.max2(b))?;

    sum_scalars(&[
        u_min.add_const(-gt2d[0]).abs(),
        v_min.add_const(-gt2d[1]).abs(),
        u_max.add_const(-gt2d[2]).abs(),
        v_max.add_const(-gt2d[3]).abs(),
    ])
}

/// `| min(l,w)/max(l,w) - r_prior |`, symmetric in l and w.
pub fn gga_srl_t(_tape: &Tape, dbox: &DiffBox, r_prior: f64) -> Result<Tensor> {
    let [l, w, _] = dbox.dims_values()?;
    if !(l > 0.0 && w > 0.0) {
        return Err(Error::Value(format!("SRL needs l, w > 0, got l = {l}, w = {w}")));
    }
    let shorter = dbox.l.min2(&dbox.w)?;
    let longer = dbox.l.max2(&dbox.w)?;
    let ratio = shorter.div(&longer)?;
    Ok(ratio.add_const(-r_prior).abs())
}

/// Bird's-eye-view points-to-box alignment.
///
/// With `d1..d4` the point's distances to the four BEV edge lines
/// (`|x_b ∓ l/2|`, `|z_b ∓ w/2|`), a point inside the footprint has
/// every `d` at most the matching full extent, so the hinge
/// `relu(d - extent)` vanishes inside and grows linearly with the
/// escape distance. The second term sums the distance to the nearest
/// edge line.
pub fn gga_pal_t(tape: &Tape, dbox: &DiffBox, points: &[[f64; 3]]) -> Result<(Tensor, Tensor)> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet("points-to-box alignment".into()));
    }
    let mut hinge_terms = Vec::with_capacity(points.len());
    let mut min_terms = Vec::with_capacity(points.len());
    let half_x = dbox.l.scale(0.5);
    let half_z = dbox.w.scale(0.5);
    for p in points {
        let rx = tape.scalar(p[0]).sub(&dbox.cx)?;
        let rz = tape.scalar(p[2]).sub(&dbox.cz)?;
        let (bx, bz) = rotate_into_box(dbox, &rx, &rz)?;
        let d1 = bx.sub(&half_x)?.abs();
        let d2 = bx.add(&half_x)?.abs();
        let d3 = bz.sub(&half_z)?.abs();
        let d4 = bz.add(&half_z)?.abs();
        let hinge = sum_scalars(&[
            d1.sub(&dbox.l)?.relu(),
            d2.sub(&dbox.l)?.relu(),
            d3.sub(&dbox.w)?.relu(),
            d4.sub(&dbox.w)?.relu(),
        ])?;
        hinge_terms.push(hinge);
        min_terms.push(d1.min2(&d2)?.min2(&d3)?.min2(&d4)?);
    }
    Ok((sum_scalars(&hinge_terms)?, sum_scalars(&min_terms)?))
}

/// Weighted total of the in-scope components on the tape.
pub fn gga_total_t(
    bpl: &Tensor,
    srl: &Tensor,
    pal1: &Tensor,
    pal2: &Tensor,
    weights: &crate::pseudo3d::GGAWeights,
) -> Result<Tensor> {
    weights.validate()?;
    let pal = pal1.add(pal2)?.scale(weights.lambda3);
    bpl.scale(weights.lambda1)
        .add(&srl.scale(weights.lambda2))?
        .add(&pal)
}
