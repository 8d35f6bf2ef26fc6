use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::body::fixtures::tiny_model;
use crate::body::{full_forward, quat_to_rotmat, SHAPE_DIM};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn value(r: Result<Tensor>) -> f64 {
    r.unwrap().item().unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

#[test]
fn dae_loss_examples() {
    let tape = Tape::new();
    let l = t(&[1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let zero = Tensor::zeros(&[1, 2, 3]);
    let ones = Tensor::full(&[1, 2, 3], 1.0);
    assert!((value(loss_dae(&tape, &l, &zero, &ones)) - 1.0 / 6.0).abs() < 1e-15);
    assert_eq!(value(loss_dae(&tape, &l, &l, &ones)), 0.0);
    assert_eq!(value(loss_dae(&tape, &l, &zero, &zero)), 0.0);
}

#[test]
fn phi_loss_examples() {
    let tape = Tape::new();
    let m = 3;
    let bounds = QuaternionBounds::new(vec![[0.5, -0.2, -0.2, -0.2]; m], vec![[1.0, 0.2, 0.2, 0.2]; m]).unwrap();
    let mut q = vec![0.9, 0.0, 0.1, -0.1].repeat(m);
    assert_eq!(value(loss_phi(&tape, &t(&[1, m, 4], q.clone()), &bounds)), 0.0);
    q[5] = 0.7;
    assert!((value(loss_phi(&tape, &t(&[1, m, 4], q.clone()), &bounds)) - 0.5 / (4.0 * m as f64)).abs() < 1e-15);
    let inside = tape.var(&t(&[1, m, 4], vec![0.9, 0.0, 0.1, -0.1].repeat(m)));
    let loss = loss_phi(&tape, &inside, &bounds).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(g.get(&inside).unwrap().iter().all(|&x| x == 0.0));
}

#[test]
fn beta_loss_examples() {
    let tape = Tape::new();
    assert_eq!(value(loss_beta(&tape, &Tensor::zeros(&[1, SHAPE_DIM]))), 0.0);
    assert!((value(loss_beta(&tape, &Tensor::full(&[1, SHAPE_DIM], 6.0))) - 7.0).abs() < 1e-12);
    assert!((value(loss_beta(&tape, &Tensor::full(&[1, SHAPE_DIM], 5.0))) - 5.0).abs() < 1e-12);
}

#[test]
fn joint_loss_examples_and_stop_gradient() {
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[1, 4, 3], 1.0);
    let shifted = t(&[1, 4, 3], a.data().chunks(3).flat_map(|c| [c[0] + 0.001, c[1], c[2]]).collect());
    assert_eq!(value(loss_joints(&tape, &a, &a)), 0.0);
    assert!((value(loss_joints(&tape, &a, &shifted)) - 0.001 / 3.0).abs() < 1e-12);
    let b = random(&mut rng, &[1, 4, 3], 1.0);
    assert_eq!(value(loss_joints(&tape, &a, &b)), value(loss_joints(&tape, &b, &a)));
    let teacher = tape.var(&a);
    let student = tape.var(&b);
    let loss = loss_joints(&tape, &teacher, &student).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert!(g.get(&teacher).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    assert!(g.get(&student).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn surface_loss_zero_when_landmarks_hit_patch_vertices() {
    let model = tiny_model(1);
    let tape = Tape::new();
    let index = SurfaceIndex::new(&model);
    let surface = model.template().reshaped(&[1, model.vertex_count(), 3]).unwrap();
    // pick the last vertex of every patch rather than the median
    let picks: Vec<usize> = model.landmarks().patches().iter().map(|p| *p.vertices.last().unwrap()).collect();
    let lm = tape.gather(&surface, 1, &picks).unwrap();
    assert_eq!(value(loss_surface(&tape, &lm, &surface, &index)), 0.0);
    assert!(value(loss_surface(&tape, &lm, &surface, &SurfaceIndex::hard(&model))) > 0.0);
}

#[test]
fn combined_loss_examples() {
    let tape = Tape::new();
    let one = || Some(Tensor::scalar(1.0));
    let all = LossComponents {
        dae: one(),
        beta: one(),
        phi: one(),
        joints: one(),
        surface: one(),
        unpose: one(),
    };
    let w = LossWeights::default();
    let (total, parts) = combined_loss(&tape, Objective::Full, &all, &w).unwrap();
    assert!((total.item().unwrap() - 14.2).abs() < 1e-12);
    assert_eq!(parts, [1.0, 0.1, 1.0, 0.1, 10.0, 2.0]);
    let zero = LossComponents {
        dae: Some(Tensor::scalar(0.0)),
        ..Default::default()
    };
    assert_eq!(combined_loss(&tape, Objective::Full, &zero, &w).unwrap().0.item().unwrap(), 0.0);
    let mut with_dae = all.clone();
    with_dae.dae = Some(Tensor::scalar(7.0));
    let mut without = all.clone();
    without.dae = Some(Tensor::scalar(0.0));
    let a = combined_loss(&tape, Objective::Refine, &with_dae, &w).unwrap().0.item().unwrap();
    let b = combined_loss(&tape, Objective::Refine, &without, &w).unwrap().0.item().unwrap();
    assert_eq!(a, b);
    let mut bad = all;
    bad.surface = Some(Tensor::scalar(f64::NAN));
    let err = combined_loss(&tape, Objective::Full, &bad, &w).unwrap_err();
    assert!(err.to_string().contains("surface"), "{err}");
}

#[test]
fn unpose_loss_vanishes_on_generative_round_trip() {
    let model = tiny_model(3);
    let index = SurfaceIndex::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let quats = random(&mut rng, &[2, 4, 4], 1.0);
    for (betas, tol) in [(Tensor::zeros(&[2, SHAPE_DIM]), 1e-9), (random(&mut rng, &[2, SHAPE_DIM], 2.0), f64::INFINITY)] {
        let tape = Tape::new();
        let posed = full_forward(&tape, &quats, &betas, &model).unwrap();
        let lm = tape.gather(&posed.vertices, 1, &model.landmarks().medians()).unwrap();
        let loss = value(loss_unpose(
            &tape,
            &posed.rotations,
            &posed.joints,
            &lm,
            &posed.rest_joints,
            &posed.rest_vertices,
            &model,
            &index,
        ));
        assert!(loss < tol, "{loss}");
        // the joint term is exact for any shape
        let unposed = crate::ik::unpose_joints(&tape, &posed.rotations, &posed.joints, model.tree()).unwrap();
        assert!(value(mean_abs_error(&tape, &unposed, &posed.rest_joints)) < 1e-12);
    }
}

#[test]
fn unpose_loss_joint_term_zero_for_identity_pose() {
    let model = tiny_model(2);
    let tape = Tape::new();
    let rot = crate::body::identity_rotations(1, 4);
    let rest = model.template_joints().reshaped(&[1, 4, 3]).unwrap();
    let un = crate::ik::unpose_joints(&tape, &rot, &rest, model.tree()).unwrap();
    assert!(value(mean_abs_error(&tape, &un, &rest)) < 1e-15);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let model = tiny_model(4);
    let index = SurfaceIndex::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lm = random(&mut rng, &[2, 5, 3], 0.5);
    let target = random(&mut rng, &[2, 5, 3], 0.5);
    let mask = t(&[2, 5, 3], (0..30).map(|i| if (i / 3) % 3 == 0 { 0.0 } else { 1.0 }).collect());
    let quats = random(&mut rng, &[2, 4, 4], 1.0);
    let betas = random(&mut rng, &[2, SHAPE_DIM], 7.0);
    let joints = random(&mut rng, &[2, 4, 3], 0.5);
    let bounds = QuaternionBounds::new(vec![[0.2, -0.3, -0.3, -0.3]; 4], vec![[1.0, 0.3, 0.3, 0.3]; 4]).unwrap();
    let check = |name: &str, f: &dyn Fn(&Tape, &Tensor) -> Result<Tensor>, x: &Tensor| {
        let r = grad_check(f, x, 1e-5, 1e-4).unwrap();
        assert!(r.passed() || r.skipped(), "{name}: {}", r.max_rel_error);
    };
    check("dae", &|tp, x| loss_dae(tp, &target, x, &mask), &lm);
    check("phi", &|tp, x| loss_phi(tp, x, &bounds), &quats);
    check("beta", &|tp, x| loss_beta(tp, x), &betas);
    let student = random(&mut ChaCha8Rng::seed_from_u64(9), &[2, 4, 3], 0.5);
    check("joints", &|tp, x| loss_joints(tp, &joints, x), &student);
    check("surface", &|tp, x| {
        let posed = full_forward(tp, x, &Tensor::zeros(&[2, SHAPE_DIM]), &model)?;
        loss_surface(tp, &lm, &posed.vertices, &index)
    }, &quats);
    check("unpose", &|tp, x| {
        let posed = full_forward(tp, x, &betas, &model)?;
        loss_unpose(tp, &posed.rotations, &joints, &lm, &posed.rest_joints, &posed.rest_vertices, &model, &index)
    }, &quats);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_surface_loss_never_exceeds_hard(seed in any::<u64>()) {
        let model = tiny_model(seed % 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let lm = random(&mut rng, &[2, 5, 3], 1.0);
        let surface = random(&mut rng, &[2, model.vertex_count(), 3], 1.0);
        let soft = value(loss_surface(&tape, &lm, &surface, &SurfaceIndex::new(&model)));
        let hard = value(loss_surface(&tape, &lm, &surface, &SurfaceIndex::hard(&model)));
        prop_assert!(soft >= 0.0 && soft <= hard);
    }

    #[test]
    fn point_losses_are_translation_invariant(seed in any::<u64>(), s in proptest::array::uniform3(-3.0..3.0f64)) {
        let model = tiny_model(seed % 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let shift = |x: &Tensor| t(x.shape(), x.data().chunks(3).flat_map(|c| [c[0] + s[0], c[1] + s[1], c[2] + s[2]]).collect());
        let lm = random(&mut rng, &[1, 5, 3], 1.0);
        let surface = random(&mut rng, &[1, model.vertex_count(), 3], 1.0);
        let index = SurfaceIndex::new(&model);
        let a = value(loss_surface(&tape, &lm, &surface, &index));
        let b = value(loss_surface(&tape, &shift(&lm), &shift(&surface), &index));
        prop_assert!((a - b).abs() < 1e-9);
        let j = random(&mut rng, &[1, 4, 3], 1.0);
        let k = random(&mut rng, &[1, 4, 3], 1.0);
        prop_assert!((value(loss_joints(&tape, &j, &k)) - value(loss_joints(&tape, &shift(&j), &shift(&k)))).abs() < 1e-9);
        let rot = quat_to_rotmat(&tape, &random(&mut rng, &[1, 4, 4], 1.0)).unwrap();
        let rest_j = random(&mut rng, &[1, 4, 3], 1.0);
        let u1 = value(loss_unpose(&tape, &rot, &j, &lm, &rest_j, &surface, &model, &index));
        let u2 = value(loss_unpose(&tape, &rot, &shift(&j), &shift(&lm), &shift(&rest_j), &shift(&surface), &model, &index));
        prop_assert!((u1 - u2).abs() < 1e-9);
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let bounds = QuaternionBounds::full(4);
        prop_assert!(value(loss_phi(&tape, &random(&mut rng, &[3, 4, 4], 2.0), &bounds)) >= 0.0);
        prop_assert!(value(loss_beta(&tape, &random(&mut rng, &[3, SHAPE_DIM], 8.0))) >= 0.0);
        let m = t(&[1, 2, 3], (0..6).map(|_| f64::from(rng.gen_range(0..2u8))).collect());
        prop_assert!(value(loss_dae(&tape, &random(&mut rng, &[1, 2, 3], 1.0), &random(&mut rng, &[1, 2, 3], 1.0), &m)) >= 0.0);
    }
}
