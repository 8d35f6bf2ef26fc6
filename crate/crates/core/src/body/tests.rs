use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures::{tiny_model, two_link_model};
use super::*;
use crate::autodiff::{grad_check, Tape, Tensor};
use crate::geometry::points_from_flat;

fn identity_quats(b: usize, m: usize) -> Tensor {
    Tensor::new(&[b, m, 4], (0..b * m).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect()).unwrap()
}

fn random_quats(rng: &mut ChaCha8Rng, b: usize, m: usize) -> Tensor {
    Tensor::new(&[b, m, 4], (0..b * m * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn zero_shape_gives_template() {
    let model = tiny_model(1);
    let shaped = shape_body(&Tape::new(), &Tensor::zeros(&[1, SHAPE_DIM]), &model).unwrap();
    assert_eq!(shaped.vertices.data(), model.template().data());
}

#[test]
fn shape_offsets_are_linear() {
    let model = tiny_model(2);
    let tape = Tape::new();
    let beta: Vec<f64> = (0..SHAPE_DIM).map(|k| 0.3 * k as f64 - 1.0).collect();
    let one = shape_body(&tape, &Tensor::new(&[1, SHAPE_DIM], beta.clone()).unwrap(), &model).unwrap();
    let two = shape_body(&tape, &Tensor::new(&[1, SHAPE_DIM], beta.iter().map(|b| 2.0 * b).collect()).unwrap(), &model)
        .unwrap();
    let t = model.template().data();
    for i in 0..t.len() {
        let d1 = one.vertices.data()[i] - t[i];
        let d2 = two.vertices.data()[i] - t[i];
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }
}

#[test]
fn rest_joints_match_direct_regression() {
    let model = tiny_model(3);
    let shaped = shape_body(&Tape::new(), &Tensor::zeros(&[1, SHAPE_DIM]), &model).unwrap();
    let (m, p) = (model.joint_count(), model.vertex_count());
    let (r, t) = (model.joint_regressor().data(), model.template().data());
    for j in 0..m {
        for c in 0..3 {
            let expect: f64 = (0..p).map(|v| r[j * p + v] * t[3 * v + c]).sum();
            assert!((shaped.joints.data()[3 * j + c] - expect).abs() < 1e-12);
        }
    }
    assert!(close(shaped.joints.data(), model.template_joints().data(), 1e-12));
}

#[test]
fn rejects_wrong_shape_vector() {
    let model = tiny_model(1);
    assert!(shape_body(&Tape::new(), &Tensor::zeros(&[1, 9]), &model).is_err());
}

#[test]
fn two_link_quarter_turn() {
    let model = two_link_model();
    let h = 0.5_f64.sqrt();
    let quats = Tensor::new(&[1, 2, 4], vec![1.0, 0.0, 0.0, 0.0, h, 0.0, 0.0, h]).unwrap();
    let posed = full_forward(&Tape::new(), &quats, &Tensor::zeros(&[1, SHAPE_DIM]), &model).unwrap();
    let v = posed.vertices.data();
    assert!(close(&v[6..9], &[-1.0, 1.0, 0.0], 1e-12), "{:?}", &v[6..9]);
    assert!(close(&v[9..12], &[1.0, 0.0, 0.0], 1e-12));
    assert!(close(posed.joints.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0], 1e-12));
}

#[test]
fn neutral_body_is_the_template() {
    let model = tiny_model(4);
    let posed = full_forward(&Tape::new(), &identity_quats(1, 4), &Tensor::zeros(&[1, SHAPE_DIM]), &model).unwrap();
    assert!(close(posed.vertices.data(), model.template().data(), 1e-12));
    assert!(close(posed.joints.data(), model.template_joints().data(), 1e-12));
}

#[test]
fn full_forward_gradients_match_finite_differences() {
    let model = tiny_model(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let quats = random_quats(&mut rng, 2, 4);
    let betas = Tensor::new(&[2, SHAPE_DIM], (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let wrt_pose = grad_check(
        |tape, q| {
            let posed = full_forward(tape, q, &betas, &model)?;
            tape.add(&tape.mean_all(&posed.vertices)?, &tape.mean_all(&tape.square(&posed.joints)?)?)
        },
        &quats,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(wrt_pose.passed(), "{}", wrt_pose.max_rel_error);
    let wrt_shape = grad_check(
        |tape, b| tape.mean_all(&tape.square(&full_forward(tape, &quats, b, &model)?.vertices)?),
        &betas,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(wrt_shape.passed(), "{}", wrt_shape.max_rel_error);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn root_pivots_about_rest_root(seed in any::<u64>()) {
        let model = tiny_model(seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quats = random_quats(&mut rng, 1, 4);
        let betas = Tensor::new(&[1, SHAPE_DIM], (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let posed = full_forward(&Tape::new(), &quats, &betas, &model).unwrap();
        prop_assert!(close(&posed.joints.data()[..3], &posed.rest_joints.data()[..3], 1e-12));
        // every world rotation block is a proper rotation
        for g in posed.transforms.world.data().chunks(16) {
            let r = nalgebra::Matrix3::new(g[0], g[1], g[2], g[4], g[5], g[6], g[8], g[9], g[10]);
            prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            prop_assert!(close(&g[12..], &[0.0, 0.0, 0.0, 1.0], 0.0));
        }
    }

    #[test]
    fn root_rotation_is_an_isometry(seed in any::<u64>()) {
        let model = tiny_model(seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = identity_quats(1, 4).to_vec();
        for c in q.iter_mut().take(4) {
            *c = rng.gen_range(-1.0..1.0);
        }
        let posed = full_forward(&Tape::new(), &Tensor::new(&[1, 4, 4], q).unwrap(), &Tensor::zeros(&[1, SHAPE_DIM]), &model).unwrap();
        let a = points_from_flat(posed.vertices.data());
        let b = points_from_flat(model.template().data());
        for i in 0..a.len() {
            for j in 0..i {
                prop_assert!(((a[i] - a[j]).norm() - (b[i] - b[j]).norm()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translation_covariance(seed in any::<u64>(), t in proptest::array::uniform3(-2.0..2.0f64)) {
        let model = tiny_model(seed % 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let rot = quat_to_rotmat(&tape, &random_quats(&mut rng, 1, 4)).unwrap();
        let joints = model.template_joints().reshaped(&[1, 4, 3]).unwrap();
        let points = model.template().reshaped(&[1, model.vertex_count(), 3]).unwrap();
        let shift = |x: &Tensor| {
            let data = x.data().chunks(3).flat_map(|c| [c[0] + t[0], c[1] + t[1], c[2] + t[2]]).collect();
            Tensor::new(x.shape(), data).unwrap()
        };
        let w = model.skinning_weights();
        let base = forward_kinematics(&tape, &rot, &joints, &points, w, model.tree()).unwrap();
        let moved = forward_kinematics(&tape, &rot, &shift(&joints), &shift(&points), w, model.tree()).unwrap();
        prop_assert!(close(moved.data(), shift(&base).data(), 1e-9));
    }

    #[test]
    fn identity_rotations_leave_points_in_place(seed in any::<u64>()) {
        let model = tiny_model(seed % 4);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = Tensor::new(&[2, 6, 3], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = model.vertex_weights(&[0, 1, 2, 3, 4, 5]);
        let rest = Tensor::new(&[2, 4, 3], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = forward_kinematics(&tape, &identity_rotations(2, 4), &rest, &points, &w, model.tree()).unwrap();
        prop_assert!(close(out.data(), points.data(), 1e-12));
    }
}
