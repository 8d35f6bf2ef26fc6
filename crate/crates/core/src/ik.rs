//! Unposing: mapping posed joints and landmarks back to the rest pose
//! given per-joint rotations.

use crate::autodiff::{Tape, Tensor};
use crate::body::{
    blend_and_apply, joint_transforms, parent_offsets, propagate, repeat_joint, skin_points, BodyModel, KinematicTree,
};
use crate::error::{Error, Result};

/// Intermediate quantities of joint unposing. Tensors are batched (`b` first).
#[derive(Clone, Debug)]
pub struct UnposeWorkspace {
    /// Parent-relative offsets of the posed joints, `[b, m, 3]` (root row holds the root itself).
    pub relative: Tensor,
    /// Transposed world rotation of each joint's parent, `[b, m, 3, 3]` (identity for the root).
    pub path: Tensor,
    /// Transposed world rotation of each joint, `[b, m, 3, 3]`.
    pub unpose: Tensor,
    /// Rest-pose joints, `[b, m, 3]`.
    pub rest_joints: Tensor,
}

fn check(rotations: &Tensor, joints: &Tensor, tree: &KinematicTree) -> Result<(usize, usize)> {
    let m = tree.len();
    let b = rotations.shape().first().copied().unwrap_or(0);
    if rotations.shape() != [b, m, 3, 3] || joints.shape() != [b, m, 3] {
        return Err(Error::dim(
            "unpose",
            format!("rotations {:?}, joints {:?} for {m} joints", rotations.shape(), joints.shape()),
        ));
    }
    Ok((b, m))
}

/// Walks the tree root to leaves, rotating each parent-relative offset back
/// by the inverse world rotation of the parent and re-attaching it to the
/// already unposed parent. The root keeps its posed position.
pub fn unpose_workspace(tape: &Tape, rotations: &Tensor, posed_joints: &Tensor, tree: &KinematicTree) -> Result<UnposeWorkspace> {
    let (b, m) = check(rotations, posed_joints, tree)?;
    let transposed = tape.transpose(rotations)?;
    let root = tree.root();
    let unpose = propagate(tape, tree, tape.gather(&transposed, 1, &[root])?, |parents, level| {
        tape.matmul(&tape.gather(&transposed, 1, level)?, parents)
    })?;
    // the root's path is the identity, stored one past the last joint
    let parent_index: Vec<usize> = (0..m).map(|j| tree.parent(j).unwrap_or(m)).collect();
    let extended = tape.concat(&[&unpose, &crate::body::identity_rotations(b, 1)], 1)?;
    let path = tape.gather(&extended, 1, &parent_index)?;
    let relative = parent_offsets(tape, posed_joints, tree)?;
    let rest_joints = propagate(tape, tree, tape.gather(posed_joints, 1, &[root])?, |parents, level| {
        let k = level.len();
        let rel = tape.reshape(&tape.gather(&relative, 1, level)?, &[b, k, 3, 1])?;
        let rotated = tape.matmul(&tape.gather(&path, 1, level)?, &rel)?;
        tape.add(parents, &tape.reshape(&rotated, &[b, k, 3])?)
    })?;
    Ok(UnposeWorkspace {
        relative,
        path,
        unpose,
        rest_joints,
    })
}

/// Rest-pose joints `[b, m, 3]` from posed joints `[b, m, 3]` and rotations `[b, m, 3, 3]`.
pub fn unpose_joints(tape: &Tape, rotations: &Tensor, posed_joints: &Tensor, tree: &KinematicTree) -> Result<Tensor> {
    Ok(unpose_workspace(tape, rotations, posed_joints, tree)?.rest_joints)
}

/// Linear unposing of points `[b, k, 3]`: each point is mapped by the
/// weight-blended inverse joint transforms `G′ x + O`, with
/// `O = Jₜ − G′·J_in`.
pub fn unpose_points_linear(
    tape: &Tape,
    rotations: &Tensor,
    points: &Tensor,
    weights: &Tensor,
    posed_joints: &Tensor,
    rest_joints: &Tensor,
    tree: &KinematicTree,
) -> Result<Tensor> {
    let (b, m) = check(rotations, posed_joints, tree)?;
    let k = points.shape().get(1).copied().unwrap_or(0);
    if points.shape() != [b, k, 3] || weights.shape() != [k, m] || rest_joints.shape() != [b, m, 3] {
        return Err(Error::dim(
            "unpose_points_linear",
            format!(
                "points {:?}, weights {:?}, rest joints {:?}",
                points.shape(),
                weights.shape(),
                rest_joints.shape()
            ),
        ));
    }
    for (i, row) in weights.data().chunks(m).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!("weight row {i} sums to {s}, expected 1")));
        }
    }
    let transposed = tape.transpose(rotations)?;
    let unpose = propagate(tape, tree, tape.gather(&transposed, 1, &[tree.root()])?, |parents, level| {
        tape.matmul(&tape.gather(&transposed, 1, level)?, parents)
    })?;
    let rotated = tape.matmul(&unpose, &tape.reshape(posed_joints, &[b, m, 3, 1])?)?;
    let offsets = tape.sub(&tape.reshape(rest_joints, &[b, m, 3, 1])?, &rotated)?;
    let affine = tape.reshape(&tape.concat(&[&unpose, &offsets], 3)?, &[b, m, 12])?;
    blend_and_apply(tape, &affine, 12, points, weights)
}

/// Median-vertex template landmarks expressed in the frame of `rest_joints`:
/// the template root joint is moved onto the rest root. `[b, l, 3]`.
pub fn reference_landmarks(tape: &Tape, model: &BodyModel, rest_joints: &Tensor) -> Result<Tensor> {
    let b = rest_joints.shape()[0];
    let l = model.landmark_count();
    let root = model.tree().root();
    let tj = model.template_joints();
    let r = &tj.data()[3 * root..3 * root + 3];
    let local: Vec<f64> = model
        .template_landmarks()
        .data()
        .chunks(3)
        .flat_map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
        .collect();
    let local = Tensor::new(&[l * 3], local)?;
    let anchor = repeat_joint(tape, rest_joints, root, l)?;
    let anchor = tape.reshape(&anchor, &[b, l * 3])?;
    tape.reshape(&tape.add(&anchor, &local)?, &[b, l, 3])
}

/// Linear unposing plus a correction offset measured on the reference
/// landmarks: `unpose(L̂) + T_ref − unpose(pose(T_ref))`, where posing uses
/// the same rotations, the rest joints `Jₜ` and the landmark weights, and
/// the inner unposing uses the joints of that same pose.
pub fn unpose_landmarks_corrected(
    tape: &Tape,
    rotations: &Tensor,
    landmarks: &Tensor,
    model: &BodyModel,
    posed_joints: &Tensor,
    rest_joints: &Tensor,
) -> Result<Tensor> {
    let tree = model.tree();
    let w = model.landmark_weights();
    let linear = unpose_points_linear(tape, rotations, landmarks, w, posed_joints, rest_joints, tree)?;
    let reference = reference_landmarks(tape, model, rest_joints)?;
    // the round trip runs in the frame of its own forward pass so that only
    // the skinning error is measured, whatever frame `posed_joints` lives in
    let tf = joint_transforms(tape, rotations, rest_joints, tree)?;
    let posed_ref = skin_points(tape, &tf, &reference, w)?;
    let round_trip = unpose_points_linear(tape, rotations, &posed_ref, w, &tf.posed_joints(tape)?, rest_joints, tree)?;
    tape.add(&linear, &tape.sub(&reference, &round_trip)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::body::fixtures::{tiny_model, two_link_model};
    use crate::body::{forward_kinematics, quat_to_rotmat};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotations(tape: &Tape, rng: &mut ChaCha8Rng, b: usize, m: usize) -> Tensor {
        let q = Tensor::new(&[b, m, 4], (0..b * m * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        quat_to_rotmat(tape, &q).unwrap()
    }

    fn rest_and_posed(tape: &Tape, model: &BodyModel, rot: &Tensor, b: usize) -> (Tensor, Tensor) {
        let m = model.joint_count();
        let rest = Tensor::new(&[b, m, 3], model.template_joints().data().repeat(b)).unwrap();
        let posed = joint_transforms(tape, rot, &rest, model.tree()).unwrap().posed_joints(tape).unwrap();
        (rest, posed)
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn two_link_unposes_to_hand_computed_rest() {
        let tape = Tape::new();
        let h = 0.5_f64.sqrt();
        let rot = quat_to_rotmat(&tape, &Tensor::new(&[1, 2, 4], vec![h, 0.0, 0.0, h, 1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        // root turned a quarter about z: the child at (0,1,0) is posed at (-1,0,0)
        let posed = Tensor::new(&[1, 2, 3], vec![0.0, 0.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let rest = unpose_joints(&tape, &rot, &posed, two_link_model().tree()).unwrap();
        assert!(max_diff(&rest, &Tensor::new(&[1, 2, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap()) < 1e-12);
    }

    #[test]
    fn identity_rotations_are_a_no_op() {
        let model = tiny_model(1);
        let tape = Tape::new();
        let rot = crate::body::identity_rotations(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let joints = Tensor::new(&[2, 4, 3], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let rest = unpose_joints(&tape, &rot, &joints, model.tree()).unwrap();
        assert!(max_diff(&rest, &joints) < 1e-12);
        let pts = Tensor::new(&[2, 5, 3], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = unpose_points_linear(&tape, &rot, &pts, &model.vertex_weights(&[0, 1, 2, 3, 4]), &joints, &rest, model.tree())
            .unwrap();
        assert!(max_diff(&out, &pts) < 1e-12);
        let lm = unpose_landmarks_corrected(&tape, &rot, &pts, &model, &joints, &rest).unwrap();
        assert!(max_diff(&lm, &pts) < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_weights() {
        let model = tiny_model(1);
        let tape = Tape::new();
        let rot = crate::body::identity_rotations(1, 4);
        let j = Tensor::zeros(&[1, 4, 3]);
        let w = Tensor::full(&[2, 4], 0.3);
        let err = unpose_points_linear(&tape, &rot, &Tensor::zeros(&[1, 2, 3]), &w, &j, &j, model.tree());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = Tensor::new(&[1, 4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let joints = Tensor::new(&[1, 4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let lm = Tensor::new(&[1, 5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let f = |tape: &Tape, q: &Tensor, joints: &Tensor, lm: &Tensor| -> Result<Tensor> {
            let rot = quat_to_rotmat(tape, q)?;
            let rest = unpose_joints(tape, &rot, joints, model.tree())?;
            let out = unpose_landmarks_corrected(tape, &rot, lm, &model, joints, &rest)?;
            tape.add(&tape.mean_all(&tape.square(&out)?)?, &tape.mean_all(&tape.square(&rest)?)?)
        };
        for report in [
            grad_check(|t, x| f(t, x, &joints, &lm), &q, 1e-5, 1e-4).unwrap(),
            grad_check(|t, x| f(t, &q, x, &lm), &joints, 1e-5, 1e-4).unwrap(),
            grad_check(|t, x| f(t, &q, &joints, x), &lm, 1e-5, 1e-4).unwrap(),
        ] {
            assert!(report.passed(), "{}", report.max_rel_error);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn unposing_inverts_forward_kinematics(seed in any::<u64>()) {
            let model = tiny_model(seed % 5);
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rot = random_rotations(&tape, &mut rng, 3, 4);
            let (rest, posed) = rest_and_posed(&tape, &model, &rot, 3);
            prop_assert!(max_diff(&unpose_joints(&tape, &rot, &posed, model.tree()).unwrap(), &rest) < 1e-9);
        }

        #[test]
        fn one_hot_points_unpose_rigidly(seed in any::<u64>(), joint in 0usize..4) {
            let model = tiny_model(seed % 5);
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rot = random_rotations(&tape, &mut rng, 1, 4);
            let (rest, posed) = rest_and_posed(&tape, &model, &rot, 1);
            let mut w = vec![0.0; 8];
            w[joint] = 1.0;
            w[4 + joint] = 1.0;
            let w = Tensor::new(&[2, 4], w).unwrap();
            let pts = Tensor::new(&[1, 2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let tf = joint_transforms(&tape, &rot, &rest, model.tree()).unwrap();
            let moved = crate::body::skin_points(&tape, &tf, &pts, &w).unwrap();
            let back = unpose_points_linear(&tape, &rot, &moved, &w, &posed, &rest, model.tree()).unwrap();
            prop_assert!(max_diff(&back, &pts) < 1e-9);
        }

        #[test]
        fn correction_cancels_on_reference(seed in any::<u64>()) {
            let model = tiny_model(seed % 5);
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rot = random_rotations(&tape, &mut rng, 2, 4);
            let (rest, posed) = rest_and_posed(&tape, &model, &rot, 2);
            let reference = reference_landmarks(&tape, &model, &rest).unwrap();
            let lm = forward_kinematics(&tape, &rot, &rest, &reference, model.landmark_weights(), model.tree()).unwrap();
            let out = unpose_landmarks_corrected(&tape, &rot, &lm, &model, &posed, &rest).unwrap();
            prop_assert!(max_diff(&out, &reference) < 1e-9);
        }

        #[test]
        fn posed_frame_translation_does_not_leak(seed in any::<u64>(), t in proptest::array::uniform3(-3.0..3.0f64)) {
            let model = tiny_model(seed % 5);
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rot = random_rotations(&tape, &mut rng, 2, 4);
            let (rest, posed) = rest_and_posed(&tape, &model, &rot, 2);
            let lm = Tensor::new(&[2, 5, 3], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let shift = |x: &Tensor| Tensor::new(x.shape(), x.data().chunks(3).flat_map(|c| [c[0] + t[0], c[1] + t[1], c[2] + t[2]]).collect()).unwrap();
            let a = unpose_landmarks_corrected(&tape, &rot, &lm, &model, &posed, &rest).unwrap();
            let b = unpose_landmarks_corrected(&tape, &rot, &shift(&lm), &model, &shift(&posed), &rest).unwrap();
            prop_assert!(max_diff(&a, &b) < 1e-9);
        }

        #[test]
        fn translation_equivariance(seed in any::<u64>(), t in proptest::array::uniform3(-3.0..3.0f64)) {
            let model = tiny_model(seed % 5);
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rot = random_rotations(&tape, &mut rng, 1, 4);
            let joints = Tensor::new(&[1, 4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let lm = Tensor::new(&[1, 5, 3], (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let shift = |x: &Tensor| Tensor::new(x.shape(), x.data().chunks(3).flat_map(|c| [c[0] + t[0], c[1] + t[1], c[2] + t[2]]).collect()).unwrap();
            let run = |j: &Tensor, l: &Tensor| {
                let rest = unpose_joints(&tape, &rot, j, model.tree()).unwrap();
                (unpose_landmarks_corrected(&tape, &rot, l, &model, j, &rest).unwrap(), rest)
            };
            let (a, ra) = run(&joints, &lm);
            let (b, rb) = run(&shift(&joints), &shift(&lm));
            prop_assert!(max_diff(&shift(&a), &b) < 1e-9);
            prop_assert!(max_diff(&shift(&ra), &rb) < 1e-9);
        }
    }
}
