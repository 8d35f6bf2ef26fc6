use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

use super::model::{BodyModel, KinematicTree, SHAPE_DIM};
use super::rotation::quat_to_rotmat;

/// Rest-pose surface and joints after shape blending, `[b, p, 3]` and `[b, m, 3]`.
#[derive(Clone, Debug)]
pub struct ShapedBody {
    pub vertices: Tensor,
    pub joints: Tensor,
}

/// Per-joint homogeneous transforms for one batch of poses.
#[derive(Clone, Debug)]
pub struct JointTransforms {
    /// World transform of each joint frame, `[b, m, 4, 4]`.
    pub world: Tensor,
    /// World transform with the rest-joint offset removed, i.e. the map
    /// from rest-pose points to posed points rigidly attached to a joint.
    pub skinning: Tensor,
}

/// Output of [`full_forward`]. All tensors carry a leading batch axis.
#[derive(Clone, Debug)]
pub struct PosedBody {
    pub vertices: Tensor,
    pub joints: Tensor,
    pub rest_vertices: Tensor,
    pub rest_joints: Tensor,
    pub rotations: Tensor,
    pub transforms: JointTransforms,
}

fn batch_of(t: &Tensor, rank: usize, op: &'static str) -> Result<usize> {
    if t.rank() != rank {
        return Err(Error::dim(op, format!("expected rank {rank}, got {:?}", t.shape())));
    }
    Ok(t.shape()[0])
}

/// Blends shape offsets onto the template and regresses rest joints.
/// `betas` is `[b, 10]`.
pub fn shape_body(tape: &Tape, betas: &Tensor, model: &BodyModel) -> Result<ShapedBody> {
    let b = batch_of(betas, 2, "shape_body")?;
    if betas.shape()[1] != SHAPE_DIM {
        return Err(Error::dim(
            "shape_body",
            format!("expected {SHAPE_DIM} shape coefficients, got {:?}", betas.shape()),
        ));
    }
    let p = model.vertex_count();
    let offsets = tape.matmul(betas, model.blend_matrix())?;
    let template = model.template().reshaped(&[3 * p])?;
    let flat = tape.add(&offsets, &template)?;
    let vertices = tape.reshape(&flat, &[b, p, 3])?;
    let joints = tape.matmul(model.joint_regressor(), &vertices)?;
    Ok(ShapedBody { vertices, joints })
}

fn bottom_rows(b: usize, m: usize) -> Tensor {
    let data = (0..b * m).flat_map(|_| [0.0, 0.0, 0.0, 1.0]).collect();
    Tensor::new(&[b, m, 1, 4], data).unwrap()
}

/// `[R | t]` blocks plus the homogeneous row; `rot` is `[b, m, 3, 3]`, `trans` `[b, m, 3]`.
pub(crate) fn homogeneous(tape: &Tape, rot: &Tensor, trans: &Tensor) -> Result<Tensor> {
    let (b, m) = (rot.shape()[0], rot.shape()[1]);
    let t = tape.reshape(trans, &[b, m, 3, 1])?;
    let top = tape.concat(&[rot, &t], 3)?;
    tape.concat(&[&top, &bottom_rows(b, m)], 2)
}

pub(crate) fn identity_rotations(b: usize, m: usize) -> Tensor {
    let data = (0..b * m)
        .flat_map(|_| [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        .collect();
    Tensor::new(&[b, m, 3, 3], data).unwrap()
}

/// Offsets of every joint from its parent; the root keeps its own position.
pub(crate) fn parent_offsets(tape: &Tape, joints: &Tensor, tree: &KinematicTree) -> Result<Tensor> {
    let order = tree.topological_order();
    let root = tape.gather(joints, 1, &[tree.root()])?;
    if order.len() == 1 {
        return Ok(root);
    }
    let children = &order[1..];
    let parents: Vec<usize> = children.iter().map(|&j| tree.parent(j).unwrap()).collect();
    let rel = tape.sub(&tape.gather(joints, 1, children)?, &tape.gather(joints, 1, &parents)?)?;
    let ordered = tape.concat(&[&root, &rel], 1)?;
    tape.gather(&ordered, 1, &inverse_permutation(&order))
}

pub(crate) fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &j) in order.iter().enumerate() {
        inv[j] = pos;
    }
    inv
}

/// Propagates per-joint local values down the tree level by level:
/// `out[root] = root_value`, `out[j] = step(out[parent(j)], j)` batched per level.
pub(crate) fn propagate<F>(tape: &Tape, tree: &KinematicTree, root_value: Tensor, mut step: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    let m = tree.len();
    let mut position = vec![usize::MAX; m];
    position[tree.root()] = 0;
    let mut acc = root_value;
    let mut count = 1;
    for level in &tree.levels()[1..] {
        let parent_pos: Vec<usize> = level.iter().map(|&j| position[tree.parent(j).unwrap()]).collect();
        let parents = tape.gather(&acc, 1, &parent_pos)?;
        let values = step(&parents, level)?;
        acc = tape.concat(&[&acc, &values], 1)?;
        for &j in level {
            position[j] = count;
            count += 1;
        }
    }
    if m == 1 {
        return Ok(acc);
    }
    tape.gather(&acc, 1, &position)
}

/// Composes world transforms down the tree: child = parent ∘ local, where
/// the local transform rotates about the joint's rest position.
pub fn joint_transforms(
    tape: &Tape,
    rotations: &Tensor,
    rest_joints: &Tensor,
    tree: &KinematicTree,
) -> Result<JointTransforms> {
    let b = batch_of(rotations, 4, "joint_transforms")?;
    let m = tree.len();
    if rotations.shape() != [b, m, 3, 3] || rest_joints.shape() != [b, m, 3] {
        return Err(Error::dim(
            "joint_transforms",
            format!("rotations {:?}, joints {:?} for {m} joints", rotations.shape(), rest_joints.shape()),
        ));
    }
    let offsets = parent_offsets(tape, rest_joints, tree)?;
    let local = homogeneous(tape, rotations, &offsets)?;
    let root = tape.gather(&local, 1, &[tree.root()])?;
    let world = propagate(tape, tree, root, |parents, level| {
        tape.compose(parents, &tape.gather(&local, 1, level)?)
    })?;
    let neg = tape.scale(rest_joints, -1.0)?;
    let unrest = homogeneous(tape, &identity_rotations(b, m), &neg)?;
    let skinning = tape.compose(&world, &unrest)?;
    Ok(JointTransforms { world, skinning })
}

impl JointTransforms {
    /// Posed joint positions (translation of each world transform), `[b, m, 3]`.
    pub fn posed_joints(&self, tape: &Tape) -> Result<Tensor> {
        let s = self.world.shape();
        let flat = tape.reshape(&self.world, &[s[0], s[1], 16])?;
        tape.gather(&flat, 2, &[3, 7, 11])
    }
}

/// Blends the skinning transforms with `weights` (`[k, m]`) and applies
/// them to `points` (`[b, k, 3]`).
pub fn skin_points(tape: &Tape, transforms: &JointTransforms, points: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let s = transforms.skinning.shape();
    let (b, m) = (s[0], s[1]);
    let k = weights.shape()[0];
    if weights.shape() != [k, m] || points.shape() != [b, k, 3] {
        return Err(Error::dim(
            "skin_points",
            format!("points {:?}, weights {:?} for batch {b} and {m} joints", points.shape(), weights.shape()),
        ));
    }
    blend_and_apply(tape, &tape.reshape(&transforms.skinning, &[b, m, 16])?, 16, points, weights)
}

/// Shared tail of skinning and unposing: blends per-joint affine rows
/// (`[b, m, stride]`, first 12 entries are the 3×4 block) and applies them.
pub(crate) fn blend_and_apply(
    tape: &Tape,
    per_joint: &Tensor,
    stride: usize,
    points: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let b = per_joint.shape()[0];
    let k = weights.shape()[0];
    let blended = tape.matmul(weights, per_joint)?;
    let affine = if stride == 12 {
        blended
    } else {
        tape.gather(&blended, 2, &(0..12).collect::<Vec<_>>())?
    };
    let affine = tape.reshape(&affine, &[b, k, 3, 4])?;
    let homog = tape.concat(&[points, &Tensor::full(&[b, k, 1], 1.0)], 2)?;
    let homog = tape.reshape(&homog, &[b, k, 4, 1])?;
    let out = tape.matmul(&affine, &homog)?;
    tape.reshape(&out, &[b, k, 3])
}

/// Poses rest-pose `points` (`[b, k, 3]`) given joint rotations (`[b, m, 3, 3]`),
/// rest joints (`[b, m, 3]`) and per-point skinning weights (`[k, m]`).
pub fn forward_kinematics(
    tape: &Tape,
    rotations: &Tensor,
    rest_joints: &Tensor,
    points: &Tensor,
    weights: &Tensor,
    tree: &KinematicTree,
) -> Result<Tensor> {
    let tf = joint_transforms(tape, rotations, rest_joints, tree)?;
    skin_points(tape, &tf, points, weights)
}

/// Shape blending followed by posing of vertices and joints. `quats` is
/// `[b, m, 4]`, `betas` `[b, 10]`.
pub fn full_forward(tape: &Tape, quats: &Tensor, betas: &Tensor, model: &BodyModel) -> Result<PosedBody> {
    let m = model.joint_count();
    let b = batch_of(quats, 3, "full_forward")?;
    if quats.shape() != [b, m, 4] || betas.shape()[0] != b {
        return Err(Error::dim(
            "full_forward",
            format!("quaternions {:?} and shape {:?} for {m} joints", quats.shape(), betas.shape()),
        ));
    }
    let rotations = quat_to_rotmat(tape, quats)?;
    let shaped = shape_body(tape, betas, model)?;
    let transforms = joint_transforms(tape, &rotations, &shaped.joints, model.tree())?;
    let vertices = skin_points(tape, &transforms, &shaped.vertices, model.skinning_weights())?;
    let joints = transforms.posed_joints(tape)?;
    Ok(PosedBody {
        vertices,
        joints,
        rest_vertices: shaped.vertices,
        rest_joints: shaped.joints,
        rotations,
        transforms,
    })
}

/// Repeats joint `root` of `joints` (`[b, m, 3]`) `count` times: `[b, count, 3]`.
pub(crate) fn repeat_joint(tape: &Tape, joints: &Tensor, root: usize, count: usize) -> Result<Tensor> {
    tape.gather(joints, 1, &vec![root; count])
}

impl PosedBody {
    /// Translates every output so the rest (and hence posed) root joint sits at the origin.
    pub fn centered_on_root(&self, tape: &Tape, root: usize) -> Result<PosedBody> {
        let shift = |t: &Tensor| -> Result<Tensor> {
            let r = repeat_joint(tape, &self.rest_joints, root, t.shape()[1])?;
            tape.sub(t, &r)
        };
        Ok(PosedBody {
            vertices: shift(&self.vertices)?,
            joints: shift(&self.joints)?,
            rest_vertices: shift(&self.rest_vertices)?,
            rest_joints: shift(&self.rest_joints)?,
            rotations: self.rotations.clone(),
            transforms: self.transforms.clone(),
        })
    }
}
