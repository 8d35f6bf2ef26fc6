//! Linear-blend-skinning body model: shape blending, quaternion rotations,
//! forward kinematics and template inflation.

pub mod fixtures;
mod inflate;
mod kinematics;
mod model;
mod rotation;
pub mod toy;

pub use inflate::{inflate_template, DEFAULT_INFLATION};
pub use kinematics::{
    forward_kinematics, full_forward, joint_transforms, shape_body, skin_points, JointTransforms, PosedBody,
    ShapedBody,
};
pub(crate) use kinematics::{blend_and_apply, identity_rotations, parent_offsets, propagate, repeat_joint};
pub use model::{BodyModel, KinematicTree, SHAPE_DIM};
pub use rotation::quat_to_rotmat;

#[cfg(test)]
mod tests;
