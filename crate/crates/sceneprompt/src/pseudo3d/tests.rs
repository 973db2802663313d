use super::*;
use crate::numerics::array::DenseArray;
use crate::numerics::gradcheck::grad_check;
use crate::numerics::param::{ParamSet, Parameter, Session};
use crate::numerics::rng::{seeded, Prng};
use rand::Rng;

fn car_box() -> OrientedBox3D {
    OrientedBox3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 2.0], 0.0).unwrap()
}

#[test]
fn axis_aligned_ray_hits_half_length_face() {
    let hit = ray_box_intersect([10.0, 0.0, 0.0], [0.0, 0.0, 0.0], &car_box())
        .unwrap()
        .expect("hit");
    for (a, b) in hit.iter().zip(&[2.0, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-12, "{hit:?}");
    }
}

#[test]
fn quarter_turn_swaps_extents() {
    let bx = OrientedBox3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 2.0], std::f64::consts::FRAC_PI_2)
        .unwrap();
    let hit = ray_box_intersect([10.0, 0.0, 0.0], [0.0, 0.0, 0.0], &bx)
        .unwrap()
        .expect("hit");
    for (a, b) in hit.iter().zip(&[1.0, 0.0, 0.0]) {
        assert!((a - b).abs() < 1e-12, "{hit:?}");
    }
}

#[test]
fn degenerate_ray_is_an_error() {
    let err = ray_box_intersect([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], &car_box()).unwrap_err();
    assert!(matches!(err, Error::Geometry(_)));
}

#[test]
fn ray_from_inside_exits_through_surface() {
    let hit = ray_box_intersect([0.0, 0.0, 0.0], [10.0, 0.0, 0.0], &car_box())
        .unwrap()
        .expect("hit");
    assert!((hit[0] - 2.0).abs() < 1e-12);
}

#[test]
fn miss_returns_none() {
    let hit = ray_box_intersect([10.0, 10.0, 10.0], [11.0, 11.0, 11.0], &car_box()).unwrap();
    assert!(hit.is_none());
}

fn random_box(rng: &mut Prng) -> OrientedBox3D {
    OrientedBox3D::new(
        [
            rng.random_range(-5.0..5.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(5.0..20.0),
        ],
        [
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..5.0),
        ],
        rng.random_range(-3.0..3.0_f64).clamp(-3.1, 3.1),
    )
    .unwrap()
}

#[test]
fn slab_intersection_matches_ray_marching() {
    let mut rng = seeded(2024);
    let mut hits = 0;
    for _ in 0..100 {
        let bx = random_box(&mut rng);
        let origin = [
            rng.random_range(-10.0..10.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-2.0..2.0),
        ];
        let target = [
            bx.center[0] + rng.random_range(-4.0..4.0),
            bx.center[1] + rng.random_range(-3.0..3.0),
            bx.center[2] + rng.random_range(-4.0..4.0),
        ];
        let fast = ray_box_intersect(origin, target, &bx).unwrap();
        let slow = oracle::ray_march_intersect(origin, target, &bx, 1e-4);
        match (fast, slow) {
            (Some(a), Some(b)) => {
                hits += 1;
                let d: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(d < 1e-3, "hit mismatch: {a:?} vs {b:?}");
            }
            (None, None) => {}
            (a, b) => panic!("hit/miss disagreement: {a:?} vs {b:?} (box {bx:?})"),
        }
    }
    assert!(hits > 20, "oracle comparison barely exercised: {hits} hits");
}

#[test]
fn intersections_lie_on_the_surface() {
    let mut rng = seeded(7);
    for _ in 0..200 {
        let bx = random_box(&mut rng);
        let origin = [0.0, 0.0, 0.0];
        let target = [
            bx.center[0] + rng.random_range(-2.0..2.0),
            bx.center[1] + rng.random_range(-1.0..1.0),
            bx.center[2] + rng.random_range(-2.0..2.0),
        ];
        if let Some(hit) = ray_box_intersect(origin, target, &bx).unwrap() {
            assert!(
                bx.surface_excess(hit).abs() < 1e-9,
                "excess {:e}",
                bx.surface_excess(hit)
            );
        }
    }
}

fn surface_points(bx: &OrientedBox3D, rng: &mut Prng, count: usize) -> Vec<[f64; 3]> {
    // Points on the two faces nearest the camera (visible sides).
    let h = bx.half_extents();
    let mut faces: Vec<([f64; 3], usize)> = Vec::new();
    for (axis, half) in [(0usize, h[0]), (2usize, h[2])] {
        for sign in [-1.0, 1.0] {
            let mut n_box = [0.0; 3];
            n_box[axis] = sign;
            let mut fc_box = [0.0; 3];
            fc_box[axis] = sign * half;
            let fc_w = bx.to_world(fc_box);
            let n_w = [
                bx.to_world(n_box)[0] - bx.center[0],
                bx.to_world(n_box)[1] - bx.center[1],
                bx.to_world(n_box)[2] - bx.center[2],
            ];
            let facing = n_w[0] * fc_w[0] + n_w[1] * fc_w[1] + n_w[2] * fc_w[2];
            faces.push(([sign, 0.0, axis as f64], usize::from(facing < 0.0)));
        }
    }
    let visible: Vec<&([f64; 3], usize)> = faces.iter().filter(|(_, vis)| *vis == 1).collect();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (desc, _) = visible[i % visible.len().max(1)];
        let (sign, axis) = (desc[0], desc[2] as usize);
        let mut p = [0.0; 3];
        p[axis] = sign * h[axis.min(2)].max(h[if axis == 0 { 0 } else { 2 }]);
        p[axis] = sign * (if axis == 0 { h[0] } else { h[2] });
        let other = if axis == 0 { 2 } else { 0 };
        p[other] = rng.random_range(-0.99..0.99) * (if other == 0 { h[0] } else { h[2] });
        p[1] = rng.random_range(-0.99..0.99) * h[1];
        out.push(bx.to_world(p));
    }
    out
}

#[test]
fn on_surface_points_zero_geo_and_ray_losses() {
    let mut rng = seeded(42);
    let bx = OrientedBox3D::new([1.0, 0.5, 12.0], [4.0, 1.8, 1.6], 0.4).unwrap();
    let pts = PointSet::new(surface_points(&bx, &mut rng, 24));
    let w = DensityWeights::compute(&pts, 0.4).unwrap();
    let out = weakm3d_losses(&pts, &bx, &w, 1.0).unwrap();
    for (g, r) in out.l_geo.iter().zip(&out.l_ray) {
        assert!(*g < 1e-9, "L_geo = {g:e}");
        assert!(*r < 1e-9, "L_ray = {r:e}");
    }
}

#[test]
fn centered_single_point_zero_center_loss() {
    let p = [0.3, -0.2, 9.0];
    let bx = OrientedBox3D::new(p, [4.0, 2.0, 1.6], 0.0).unwrap();
    let pts = PointSet::new(vec![p]);
    let w = DensityWeights::compute(&pts, 0.4).unwrap();
    let out = weakm3d_losses(&pts, &bx, &w, 1.0).unwrap();
    assert!(out.l_center.abs() < 1e-12);
}

#[test]
fn collinear_density_weights_and_balanced_total() {
    // Three collinear points spaced 0.3 m with radius 0.4: counts (1, 2, 1).
    let pts = PointSet::new(vec![[0.0, 0.0, 10.0], [0.3, 0.0, 10.0], [0.6, 0.0, 10.0]]);
    let w = DensityWeights::compute(&pts, 0.4).unwrap();
    assert_eq!(w.weights, vec![1, 2, 1]);

    let bx = OrientedBox3D::new([0.3, 0.0, 10.0], [4.0, 1.8, 1.6], 0.0).unwrap();
    let out = weakm3d_losses(&pts, &bx, &w, 1.0).unwrap();
    // Direct evaluation of the balanced sum with the counted weights.
    let mut expect = 0.0;
    for i in 0..3 {
        expect += (out.l_geo[i] + out.l_ray[i] + out.l_center) / w.weights[i] as f64;
    }
    expect /= 3.0;
    assert!((out.l_3d - expect).abs() < 1e-12);
}

#[test]
fn isolated_points_use_effective_weight_one() {
    let pts = PointSet::new(vec![[0.0, 0.0, 10.0], [5.0, 0.0, 10.0]]);
    let w = DensityWeights::compute(&pts, 0.4).unwrap();
    assert_eq!(w.weights, vec![0, 0]);
    assert_eq!(w.effective(0), 1.0);
    let bx = OrientedBox3D::new([0.0, 0.0, 10.0], [4.0, 1.8, 1.6], 0.0).unwrap();
    assert!(weakm3d_losses(&pts, &bx, &w, 1.0).unwrap().l_3d.is_finite());
}

#[test]
fn density_weights_are_permutation_invariant() {
    let mut rng = seeded(5);
    let pts: Vec<[f64; 3]> = (0..12)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(9.0..11.0),
            ]
        })
        .collect();
    let base = DensityWeights::compute(&PointSet::new(pts.clone()), 0.7).unwrap();
    let mut perm = pts.clone();
    perm.rotate_left(5);
    let rotated = DensityWeights::compute(&PointSet::new(perm), 0.7).unwrap();
    let mut expect = base.weights.clone();
    expect.rotate_left(5);
    assert_eq!(rotated.weights, expect);
}

#[test]
fn empty_point_set_is_an_error() {
    let bx = car_box();
    let pts = PointSet::new(vec![]);
    let w = DensityWeights {
        weights: vec![],
        radius: 0.4,
    };
    assert!(matches!(
        weakm3d_losses(&pts, &bx, &w, 1.0).unwrap_err(),
        Error::EmptyPointSet(_)
    ));
    assert!(matches!(
        gga_pal(&pts, &bx).unwrap_err(),
        Error::EmptyPointSet(_)
    ));
}

// ---- projection loss ----------------------------------------------------

#[test]
fn bpl_self_consistency_is_zero() {
    let bx = OrientedBox3D::new([0.5, 0.2, 12.0], [4.0, 1.8, 1.6], 0.7).unwrap();
    let intr = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
    let mut u = (f64::INFINITY, f64::NEG_INFINITY);
    let mut v = (f64::INFINITY, f64::NEG_INFINITY);
    for c in bx.corners() {
        let [pu, pv] = intr.project(c);
        u = (u.0.min(pu), u.1.max(pu));
        v = (v.0.min(pv), v.1.max(pv));
    }
    let rect = [u.0, v.0, u.1, v.1];
    let loss = gga_bpl(&bx, &intr, rect).unwrap();
    assert!(loss.abs() < 1e-12);
}

#[test]
fn bpl_unit_cube_fixture() {
    // Unit cube at (0, 0, 10), fx = fy = 100, principal point at zero.
    // Near-face corners at z = 9.5 dominate: |u| = 50 / 9.5.
    let bx = OrientedBox3D::new([0.0, 0.0, 10.0], [1.0, 1.0, 1.0], 0.0).unwrap();
    let intr = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
    let loss = gga_bpl(&bx, &intr, [-5.0, -5.0, 5.0, 5.0]).unwrap();
    let edge = 50.0 / 9.5;
    let expect = 4.0 * (edge - 5.0);
    assert!((loss - expect).abs() < 1e-10);
    assert!((loss - 1.052631).abs() < 1e-5);
}

#[test]
fn bpl_is_l1_in_the_ground_truth() {
    // Ground truth strictly above every rectangle field keeps each L1
    // term on one side, so a +1 shift in all four fields moves the loss
    // by exactly 4.
    let bx = OrientedBox3D::new([0.4, -0.1, 11.0], [3.0, 1.5, 1.4], -0.3).unwrap();
    let intr = CameraIntrinsics::new(450.0, 460.0, 300.0, 200.0).unwrap();
    let mut rect = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in bx.corners() {
        let [u, v] = intr.project(c);
        rect = [rect[0].min(u), rect[1].min(v), rect[2].max(u), rect[3].max(v)];
    }
    let gt = [rect[0] + 10.0, rect[1] + 10.0, rect[2] + 10.0, rect[3] + 10.0];
    let base = gga_bpl(&bx, &intr, gt).unwrap();
    let shifted = gga_bpl(&bx, &intr, [gt[0] + 1.0, gt[1] + 1.0, gt[2] + 1.0, gt[3] + 1.0]).unwrap();
    assert!(((shifted - base).abs() - 4.0).abs() < 1e-9);
}

#[test]
fn bpl_behind_camera_is_an_error() {
    let bx = OrientedBox3D::new([0.0, 0.0, 0.2], [1.0, 1.0, 1.0], 0.0).unwrap();
    let intr = CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
    assert!(matches!(
        gga_bpl(&bx, &intr, [0.0; 4]).unwrap_err(),
        Error::BehindCamera(_, _)
    ));
}

// ---- ratio loss -----------------------------------------------------------

#[test]
fn srl_matches_prior_and_is_symmetric() {
    let a = OrientedBox3D::new([0.0, 0.0, 10.0], [4.0, 2.0, 1.6], 0.0).unwrap();
    let b = OrientedBox3D::new([0.0, 0.0, 10.0], [2.0, 4.0, 1.6], 0.0).unwrap();
    assert!(gga_srl(&a, 0.5).unwrap().abs() < 1e-15);
    assert!(gga_srl(&b, 0.5).unwrap().abs() < 1e-15);
    let square = OrientedBox3D::new([0.0, 0.0, 10.0], [3.0, 3.0, 1.6], 0.0).unwrap();
    assert!((gga_srl(&square, 0.5).unwrap() - 0.5).abs() < 1e-15);
}

// ---- points-to-box alignment ----------------------------------------------

#[test]
fn pal_centered_point_fixture() {
    let bx = car_box();
    let pts = PointSet::new(vec![[0.0, 0.0, 0.0]]);
    let (p1, p2) = gga_pal(&pts, &bx).unwrap();
    assert_eq!(p1, 0.0);
    assert_eq!(p2, 1.0);
}

#[test]
fn pal_point_on_width_edge_has_zero_min_distance() {
    let bx = car_box(); // l = 4 (x), w = 2 (z)
    let pts = PointSet::new(vec![[0.7, 0.0, 1.0]]);
    let (_, p2) = gga_pal(&pts, &bx).unwrap();
    assert!(p2.abs() < 1e-15);
}

#[test]
fn pal_hinge_grows_one_per_meter_outside() {
    let bx = car_box();
    let pts = PointSet::new(vec![[3.0, 0.0, 0.0]]); // 1 m beyond the +x edge
    let (p1, _) = gga_pal(&pts, &bx).unwrap();
    assert!((p1 - 1.0).abs() < 1e-12);
}

#[test]
fn pal_hinge_zero_for_interior_points() {
    let mut rng = seeded(12);
    let bx = OrientedBox3D::new([1.0, 0.0, 9.0], [4.0, 2.0, 1.6], 0.8).unwrap();
    let pts: Vec<[f64; 3]> = (0..50)
        .map(|_| {
            let b = [
                rng.random_range(-0.999..0.999) * 2.0,
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.999..0.999) * 1.0,
            ];
            bx.to_world(b)
        })
        .collect();
    let (p1, _) = gga_pal(&PointSet::new(pts), &bx).unwrap();
    assert!(p1.abs() < 1e-12, "interior hinge {p1:e}");
}

#[test]
fn pal_min_distance_is_yaw_invariant() {
    let mut rng = seeded(13);
    let pts: Vec<[f64; 3]> = (0..20)
        .map(|_| {
            [
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-3.0..3.0),
            ]
        })
        .collect();
    let base_box = OrientedBox3D::new([0.4, 0.0, 0.2], [4.0, 2.0, 1.6], 0.0).unwrap();
    let (_, p2_base) = gga_pal(&PointSet::new(pts.clone()), &base_box).unwrap();
    for yaw in [0.4, 1.2, -2.0] {
        let (s, c) = f64::sin_cos(yaw);
        // Rotate points and box center together about the vertical axis.
        let rot = |p: [f64; 3]| [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]];
        let rpts: Vec<[f64; 3]> = pts.iter().map(|&p| rot(p)).collect();
        let rbox = OrientedBox3D::new(rot(base_box.center), base_box.dims, yaw).unwrap();
        let (_, p2) = gga_pal(&PointSet::new(rpts), &rbox).unwrap();
        assert!((p2 - p2_base).abs() < 1e-9, "yaw {yaw}: {p2} vs {p2_base}");
    }
}

#[test]
fn losses_translation_invariant_when_points_and_box_move_together() {
    let mut rng = seeded(14);
    let bx = OrientedBox3D::new([0.5, 0.1, 10.0], [4.0, 2.0, 1.6], 0.6).unwrap();
    let pts: Vec<[f64; 3]> = (0..10)
        .map(|_| {
            [
                bx.center[0] + rng.random_range(-3.0..3.0),
                bx.center[1] + rng.random_range(-1.0..1.0),
                bx.center[2] + rng.random_range(-3.0..3.0),
            ]
        })
        .collect();
    let shift = [1.3, -0.4, 2.2];
    let moved: Vec<[f64; 3]> = pts
        .iter()
        .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
        .collect();
    let moved_box = OrientedBox3D::new(
        [
            bx.center[0] + shift[0],
            bx.center[1] + shift[1],
            bx.center[2] + shift[2],
        ],
        bx.dims,
        bx.yaw,
    )
    .unwrap();

    let (p1a, p2a) = gga_pal(&PointSet::new(pts.clone()), &bx).unwrap();
    let (p1b, p2b) = gga_pal(&PointSet::new(moved.clone()), &moved_box).unwrap();
    assert!((p1a - p1b).abs() < 1e-9 && (p2a - p2b).abs() < 1e-9);

    let srl_a = gga_srl(&bx, 0.45).unwrap();
    let srl_b = gga_srl(&moved_box, 0.45).unwrap();
    assert!((srl_a - srl_b).abs() < 1e-12);
}

#[test]
fn total_combines_weighted_components() {
    let w = GGAWeights::default();
    assert_eq!(gga_total(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
    let t = gga_total(1.0, 1.0, 1.0, 1.0, &w).unwrap();
    assert!((t - 0.6).abs() < 1e-15);
}

#[test]
fn zero_pal_weight_removes_point_sensitivity() {
    let bx = OrientedBox3D::new([0.0, 0.0, 10.0], [4.0, 2.0, 1.6], 0.2).unwrap();
    let intr = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
    let gt = [200.0, 180.0, 420.0, 300.0];
    let weights = GGAWeights {
        lambda3: 0.0,
        ..Default::default()
    };
    let eval = |pts: &PointSet| {
        let bpl = gga_bpl(&bx, &intr, gt).unwrap();
        let srl = gga_srl(&bx, 0.45).unwrap();
        let (p1, p2) = gga_pal(pts, &bx).unwrap();
        gga_total(bpl, srl, p1, p2, &weights).unwrap()
    };
    let base = PointSet::new(vec![[0.2, 0.0, 10.0], [3.5, 0.3, 9.0]]);
    let nudged = PointSet::new(vec![[0.2 + 1e-4, 0.0, 10.0], [3.5, 0.3 + 1e-4, 9.0]]);
    assert_eq!(eval(&base), eval(&nudged));
}

// ---- gradient checks through the tape --------------------------------------

fn box_param_fixture(seed: u64) -> (ParamSet, Vec<[f64; 3]>) {
    let mut rng = seeded(seed);
    let mut params = ParamSet::new();
    let row = DenseArray::row_vector(vec![
        0.4 + rng.random_range(-0.2..0.2),
        -0.1 + rng.random_range(-0.1..0.1),
        10.0 + rng.random_range(-1.0..1.0),
        3.8,
        1.7,
        1.5,
        0.5 + rng.random_range(-0.3..0.3),
    ])
    .unwrap();
    params.insert(Parameter::new("box", row)).unwrap();
    let pts: Vec<[f64; 3]> = (0..6)
        .map(|_| {
            [
                0.4 + rng.random_range(-2.5..2.5),
                -0.1 + rng.random_range(-0.9..0.9),
                10.0 + rng.random_range(-2.5..2.5),
            ]
        })
        .collect();
    (params, pts)
}

#[test]
fn weakm3d_loss_gradients_match_finite_differences() {
    for seed in [31, 32, 33] {
        let (mut params, pts) = box_param_fixture(seed);
        let weights = DensityWeights::compute(&PointSet::new(pts.clone()), 0.4).unwrap();
        let report = grad_check(
            &mut params,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let row = sess.lease(ps, "box")?;
                let dbox = DiffBox::from_row(&row)?;
                let parts =
                    diff::weakm3d_losses_t(&sess.tape, &dbox, &pts, &weights, 1.0)?;
                parts.l_3d.backward()?;
                sess.harvest_grads(ps)?;
                parts.l_3d.scalar_value()
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(
            report.pass,
            "weakm3d grad check failed (seed {seed}): {:e}",
            report.max_rel_err()
        );
    }
}

#[test]
fn gga_loss_gradients_match_finite_differences() {
    let intr = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0).unwrap();
    for seed in [41, 42, 43] {
        let (mut params, pts) = box_param_fixture(seed);
        let weights = GGAWeights::default();
        let report = grad_check(
            &mut params,
            |ps: &mut ParamSet| {
                let mut sess = Session::new();
                let row = sess.lease(ps, "box")?;
                let dbox = DiffBox::from_row(&row)?;
                let bpl = diff::gga_bpl_t(&sess.tape, &dbox, &intr, [250.0, 200.0, 400.0, 290.0])?;
                let srl = diff::gga_srl_t(&sess.tape, &dbox, 0.45)?;
                let (p1, p2) = diff::gga_pal_t(&sess.tape, &dbox, &pts)?;
                let total = diff::gga_total_t(&bpl, &srl, &p1, &p2, &weights)?;
                total.backward()?;
                sess.harvest_grads(ps)?;
                total.scalar_value()
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(
            report.pass,
            "gga grad check failed (seed {seed}): {:e}",
            report.max_rel_err()
        );
    }
}

#[test]
fn invalid_boxes_are_rejected() {
    assert!(OrientedBox3D::new([0.0; 3], [0.0, 1.0, 1.0], 0.0).is_err());
    assert!(OrientedBox3D::new([0.0; 3], [1.0, 1.0, 1.0], 4.0).is_err());
    assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
}
