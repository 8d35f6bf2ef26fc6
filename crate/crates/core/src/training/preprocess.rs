use nalgebra::{Matrix3, UnitQuaternion};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{Dataset, Frame, FrameBatch};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// How frames are normalized before they reach the networks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    /// Subtract the mean of the valid landmarks.
    #[default]
    Translate,
    /// Rigid fit of the valid landmarks onto a rest-pose reference.
    Procrustes,
}

impl Preprocess {
    pub fn name(self) -> &'static str {
        match self {
            Preprocess::Translate => "translate",
            Preprocess::Procrustes => "procrustes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "translate" => Some(Preprocess::Translate),
            "procrustes" => Some(Preprocess::Procrustes),
            _ => None,
        }
    }
}

/// `x ↦ R·x + t`, mapping raw frame coordinates to network coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Rotation of the inverse map as a unit quaternion.
    pub fn inverse_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation.transpose())
    }
}

fn valid_points(points: &[[f64; 3]], valid: &[bool]) -> Vec<(usize, Vec3)> {
    points
        .iter()
        .zip(valid)
        .enumerate()
        .filter(|(_, (_, &v))| v)
        .map(|(i, (p, _))| (i, Vec3::from(*p)))
        .collect()
}

/// Transform that moves the mean of the valid landmarks to the origin.
pub fn translation_fit(points: &[[f64; 3]], valid: &[bool]) -> Option<RigidTransform> {
    let pts = valid_points(points, valid);
    if pts.is_empty() {
        return None;
    }
    let mean = pts.iter().map(|(_, p)| p).sum::<Vec3>() / pts.len() as f64;
    Some(RigidTransform {
        rotation: Matrix3::identity(),
        translation: -mean,
    })
}

/// Least-squares rotation (det +1) and translation taking the valid
/// landmarks onto the matching `reference` landmarks; no scaling.
pub fn procrustes_fit(points: &[[f64; 3]], valid: &[bool], reference: &[Vec3]) -> std::result::Result<RigidTransform, String> {
    let pts = valid_points(points, valid);
    if pts.len() < 3 {
        return Err(format!("{} valid landmarks, need at least 3", pts.len()));
    }
    let n = pts.len() as f64;
    let cp = pts.iter().map(|(_, p)| p).sum::<Vec3>() / n;
    let cr = pts.iter().map(|(i, _)| reference[*i]).sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (i, p) in &pts {
        let (a, b) = (p - cp, reference[*i] - cr);
        h += a * b.transpose();
        spread += a * a.transpose();
    }
    // the two largest principal spreads must be non-negligible
    let ev = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = ev.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err("valid landmarks are collinear".into());
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: cr - rotation * cp,
    })
}

fn fit_frame(frame: &Frame, mode: Preprocess, reference: &[Vec3], index: usize) -> Result<RigidTransform> {
    match mode {
        Preprocess::Translate => translation_fit(&frame.points, &frame.valid)
            .ok_or_else(|| Error::Data(format!("frame {index} has no valid landmarks"))),
        Preprocess::Procrustes => {
            if frame.valid_count() == 0 {
                return Err(Error::Data(format!("frame {index} has no valid landmarks")));
            }
            procrustes_fit(&frame.points, &frame.valid, reference).map_err(|e| Error::Alignment(format!("frame {index}: {e}")))
        }
    }
}

fn transform_frame(frame: &Frame, tf: &RigidTransform) -> Frame {
    let points = frame
        .points
        .iter()
        .zip(&frame.valid)
        .map(|(p, &v)| {
            if v {
                let q = tf.apply(&Vec3::from(*p));
                [q.x, q.y, q.z]
            } else {
                [0.0; 3]
            }
        })
        .collect();
    Frame {
        points,
        ..frame.clone()
    }
}

/// Normalizes every frame of a dataset; returns the transformed dataset
/// and the per-frame transforms (raw → normalized).
pub fn preprocess_dataset(data: &Dataset, mode: Preprocess, reference: &[Vec3]) -> Result<(Dataset, Vec<RigidTransform>)> {
    if mode == Preprocess::Procrustes && reference.len() != data.landmark_count() {
        return Err(Error::dim(
            "preprocess",
            format!("{} reference landmarks for {} columns", reference.len(), data.landmark_count()),
        ));
    }
    let mut frames = Vec::with_capacity(data.len());
    let mut transforms = Vec::with_capacity(data.len());
    for (i, f) in data.frames.iter().enumerate() {
        let tf = fit_frame(f, mode, reference, i)?;
        frames.push(transform_frame(f, &tf));
        transforms.push(tf);
    }
    Ok((Dataset::new(data.codes.clone(), frames)?, transforms))
}

fn batch_frames(batch: &FrameBatch) -> Result<Vec<Frame>> {
    let s = batch.landmarks.shape();
    if s.len() != 3 || s[2] != 3 || batch.mask.shape() != s {
        return Err(Error::dim("preprocess", format!("batch {s:?}, mask {:?}", batch.mask.shape())));
    }
    let l = s[1];
    (0..s[0])
        .map(|b| {
            let pts = &batch.landmarks.data()[b * l * 3..(b + 1) * l * 3];
            let mask = &batch.mask.data()[b * l * 3..(b + 1) * l * 3];
            Frame::new(
                "",
                b,
                pts.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
                mask.chunks(3).map(|c| c[0] != 0.0).collect(),
            )
        })
        .collect()
}

fn apply_to_batch(batch: &FrameBatch, mode: Preprocess, reference: &[Vec3]) -> Result<(FrameBatch, Vec<RigidTransform>)> {
    let frames = batch_frames(batch)?;
    let ds = Dataset::new(vec![String::new(); batch.landmarks.shape()[1]], frames)?;
    let (ds, tfs) = preprocess_dataset(&ds, mode, reference)?;
    Ok((FrameBatch::from_frames(&ds.frames)?, tfs))
}

/// Subtracts the mask-weighted landmark mean of every frame.
pub fn preprocess_translate(batch: &FrameBatch) -> Result<(FrameBatch, Vec<RigidTransform>)> {
    apply_to_batch(batch, Preprocess::Translate, &[])
}

/// Rigidly aligns every frame onto `reference` (`l` points).
pub fn preprocess_procrustes(batch: &FrameBatch, reference: &[Vec3]) -> Result<(FrameBatch, Vec<RigidTransform>)> {
    apply_to_batch(batch, Preprocess::Procrustes, reference)
}

/// Maps normalized landmarks `[b, l, 3]` back to raw coordinates.
pub fn restore(landmarks: &Tensor, transforms: &[RigidTransform]) -> Result<Tensor> {
    let s = landmarks.shape();
    if s.len() != 3 || s[2] != 3 || s[0] != transforms.len() {
        return Err(Error::dim("restore", format!("{s:?} with {} transforms", transforms.len())));
    }
    let l = s[1];
    let mut out = Vec::with_capacity(landmarks.len());
    for (b, tf) in transforms.iter().enumerate() {
        for c in landmarks.data()[b * l * 3..(b + 1) * l * 3].chunks(3) {
            out.extend(tf.invert(&Vec3::new(c[0], c[1], c[2])).iter());
        }
    }
    Tensor::new(s, out)
}

/// Per frame, keeps a uniformly random `round((1-τ)·n)` of the `n`
/// currently valid landmarks; the rest get mask 0 and zero coordinates.
pub fn augment_missing<R: Rng>(batch: &FrameBatch, tau: f64, rng: &mut R) -> Result<FrameBatch> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::Config(format!("missing rate {tau} must lie in [0, 1)")));
    }
    if tau == 0.0 {
        return Ok(batch.clone());
    }
    let s = batch.landmarks.shape();
    let l = s[1];
    let mut pts = batch.landmarks.to_vec();
    let mut mask = batch.mask.to_vec();
    for b in 0..s[0] {
        let valid: Vec<usize> = (0..l).filter(|&i| mask[(b * l + i) * 3] != 0.0).collect();
        let drop = valid.len() - ((1.0 - tau) * valid.len() as f64).round() as usize;
        for k in sample(rng, valid.len(), drop) {
            let at = (b * l + valid[k]) * 3;
            pts[at..at + 3].fill(0.0);
            mask[at..at + 3].fill(0.0);
        }
    }
    Ok(FrameBatch {
        landmarks: Tensor::new(s, pts)?,
        mask: Tensor::new(s, mask)?,
    })
}
