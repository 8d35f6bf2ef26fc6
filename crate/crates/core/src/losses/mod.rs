//! Training objectives: landmark reconstruction, pose and shape
//! regularizers, joint teaching, landmark-to-surface and unposing terms.

mod bounds;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::body::BodyModel;
use crate::error::{Error, Result};
use crate::ik::{unpose_joints, unpose_landmarks_corrected};

pub use bounds::{euler_to_quat, sample_euler, EulerLimits, QuaternionBounds};

/// Shape coefficients beyond this magnitude pay an extra linear penalty.
pub const SHAPE_LIMIT: f64 = 5.0;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Masked mean absolute error, normalized by all `b·l·3` entries.
pub fn loss_dae(tape: &Tape, target: &Tensor, reconstruction: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape("loss_dae", target, reconstruction)?;
    same_shape("loss_dae", target, mask)?;
    let diff = tape.abs(&tape.sub(reconstruction, target)?)?;
    tape.mean_all(&tape.mul(&diff, mask)?)
}

/// Hinge on raw quaternions `[b, m, 4]` leaving the per-joint box.
pub fn loss_phi(tape: &Tape, quats: &Tensor, bounds: &QuaternionBounds) -> Result<Tensor> {
    let m = bounds.len();
    if quats.rank() != 3 || quats.shape()[1..] != [m, 4] {
        return Err(Error::dim("loss_phi", format!("{:?} for {m} joints", quats.shape())));
    }
    let lower = Tensor::new(&[m, 4], bounds.lower.concat())?;
    let upper = Tensor::new(&[m, 4], bounds.upper.concat())?;
    let below = tape.relu(&tape.scale(&tape.sub(quats, &lower)?, -1.0)?)?;
    let above = tape.relu(&tape.sub(quats, &upper)?)?;
    tape.mean_all(&tape.add(&below, &above)?)
}

/// `mean(max(0, |β| − 5) + |β|)` over `[b, 10]`.
pub fn loss_beta(tape: &Tape, betas: &Tensor) -> Result<Tensor> {
    let a = tape.abs(betas)?;
    let over = tape.relu(&tape.scale_shift(&a, 1.0, -SHAPE_LIMIT)?)?;
    tape.mean_all(&tape.add(&over, &a)?)
}

/// Mean absolute error between two joint sets, without stopping gradients.
pub fn mean_abs_error(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mean_abs_error", a, b)?;
    tape.mean_all(&tape.abs(&tape.sub(a, b)?)?)
}

/// Mean absolute error of posed joints against estimated joints; the
/// estimate acts as a fixed teacher and receives no gradient.
pub fn loss_joints(tape: &Tape, teacher: &Tensor, posed: &Tensor) -> Result<Tensor> {
    mean_abs_error(tape, &teacher.detach(), posed)
}

/// Flattened landmark patches, prepared once per model.
#[derive(Clone, Debug)]
pub struct SurfaceIndex {
    vertices: Arc<Vec<usize>>,
    owners: Arc<Vec<usize>>,
    sets: Arc<Vec<Vec<usize>>>,
    landmarks: usize,
}

impl SurfaceIndex {
    pub fn new(model: &BodyModel) -> Self {
        Self::from_patches(model.landmarks().patches().iter().map(|p| p.vertices.as_slice()))
    }

    /// Every landmark restricted to its median vertex.
    pub fn hard(model: &BodyModel) -> Self {
        let medians = model.landmarks().medians();
        Self::from_patches(medians.iter().map(std::slice::from_ref))
    }

    fn from_patches<'a>(patches: impl Iterator<Item = &'a [usize]>) -> Self {
        let (mut vertices, mut owners, mut sets) = (Vec::new(), Vec::new(), Vec::new());
        for (i, patch) in patches.enumerate() {
            sets.push((vertices.len()..vertices.len() + patch.len()).collect());
            vertices.extend_from_slice(patch);
            owners.extend(std::iter::repeat(i).take(patch.len()));
        }
        SurfaceIndex {
            landmarks: sets.len(),
            vertices: Arc::new(vertices),
            owners: Arc::new(owners),
            sets: Arc::new(sets),
        }
    }
}

/// Per landmark, the smallest L1 distance to any vertex of its patch;
/// averaged over landmarks and coordinates (`1/(3l)`) and over the batch.
/// `landmarks` is `[b, l, 3]`, `surface` `[b, p, 3]`.
pub fn loss_surface(tape: &Tape, landmarks: &Tensor, surface: &Tensor, index: &SurfaceIndex) -> Result<Tensor> {
    let b = landmarks.shape()[0];
    if landmarks.rank() != 3 || landmarks.shape()[1..] != [index.landmarks, 3] || surface.rank() != 3 {
        return Err(Error::dim(
            "loss_surface",
            format!("landmarks {:?}, surface {:?}", landmarks.shape(), surface.shape()),
        ));
    }
    let candidates = tape.gather_shared(surface, 1, &index.vertices)?;
    let targets = tape.gather_shared(landmarks, 1, &index.owners)?;
    let dist = tape.sum(&tape.abs(&tape.sub(&targets, &candidates)?)?, &[2])?;
    let nearest = tape.min_over_sets(&dist, index.sets.clone())?;
    debug_assert_eq!(nearest.shape(), [b, index.landmarks]);
    tape.scale(&tape.mean_all(&nearest)?, 1.0 / 3.0)
}

/// Unposing consistency: estimated joints and landmarks, unposed with the
/// predicted rotations, should match the shaped rest joints and (inflated)
/// rest surface.
pub fn loss_unpose(
    tape: &Tape,
    rotations: &Tensor,
    joints: &Tensor,
    landmarks: &Tensor,
    rest_joints: &Tensor,
    rest_surface: &Tensor,
    model: &BodyModel,
    index: &SurfaceIndex,
) -> Result<Tensor> {
    let unposed_joints = unpose_joints(tape, rotations, joints, model.tree())?;
    let joint_term = mean_abs_error(tape, &unposed_joints, rest_joints)?;
    let unposed = unpose_landmarks_corrected(tape, rotations, landmarks, model, joints, &unposed_joints)?;
    let surface_term = loss_surface(tape, &unposed, rest_surface, index)?;
    tape.add(&joint_term, &surface_term)
}

/// Balancing weights of the six loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dae: f64,
    pub beta: f64,
    pub phi: f64,
    pub joints: f64,
    pub surface: f64,
    pub unpose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dae: 1.0,
            beta: 0.1,
            phi: 1.0,
            joints: 0.1,
            surface: 10.0,
            unpose: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight '{name}' must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("dae", self.dae),
            ("beta", self.beta),
            ("phi", self.phi),
            ("joints", self.joints),
            ("surface", self.surface),
            ("unpose", self.unpose),
        ]
    }
}

/// Which objective a training stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// All six terms (end-to-end stage).
    Full,
    /// Everything except the reconstruction term (cascade stages).
    Refine,
}

/// Unweighted loss terms; `None` marks a term that was not evaluated.
#[derive(Clone, Debug, Default)]
pub struct LossComponents {
    pub dae: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub phi: Option<Tensor>,
    pub joints: Option<Tensor>,
    pub surface: Option<Tensor>,
    pub unpose: Option<Tensor>,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, Option<&Tensor>); 6] {
        [
            ("dae", self.dae.as_ref()),
            ("beta", self.beta.as_ref()),
            ("phi", self.phi.as_ref()),
            ("joints", self.joints.as_ref()),
            ("surface", self.surface.as_ref()),
            ("unpose", self.unpose.as_ref()),
        ]
    }
}

/// Weighted total plus each weighted term's value in the fixed order
/// dae, beta, phi, joints, surface, unpose (excluded or missing terms are 0).
pub fn combined_loss(
    tape: &Tape,
    objective: Objective,
    components: &LossComponents,
    weights: &LossWeights,
) -> Result<(Tensor, [f64; 6])> {
    let mut total: Option<Tensor> = None;
    let mut values = [0.0; 6];
    for (k, ((name, term), (_, w))) in components.named().into_iter().zip(weights.named()).enumerate() {
        let Some(term) = term else { continue };
        let v = term.item()?;
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss term '{name}'"), format!("value {v}")));
        }
        if w == 0.0 || (objective == Objective::Refine && name == "dae") {
            continue;
        }
        values[k] = w * v;
        let weighted = tape.scale(term, w)?;
        total = Some(match total {
            Some(t) => tape.add(&t, &weighted)?,
            None => weighted,
        });
    }
    Ok((total.unwrap_or_else(|| Tensor::scalar(0.0)), values))
}

#[cfg(test)]
mod tests;
