use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autodiff::{Tape, Tensor};
use crate::body::{full_forward, BodyModel, SHAPE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{face_normal, points_from_flat, vertex_normals, Vec3};
use crate::losses::{euler_to_quat, sample_euler, EulerLimits};

use super::{Dataset, Frame};

/// Sampling ranges of the synthetic frame generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub seed: u64,
    /// Shape coefficients are uniform in `[-shape_range, shape_range]`.
    pub shape_range: f64,
    /// Scales every non-root joint's Euler box about zero.
    pub pose_scale: f64,
    /// Euler box of the global (root) orientation.
    pub root_limits: EulerLimits,
    /// Global translation is uniform in `[-t, t]` on each axis.
    pub translation: f64,
    /// Landmark distance from the surface, meters.
    pub offset: [f64; 2],
    /// Probability that a landmark is reported missing.
    pub missing_rate: f64,
    /// Frames per sequence id.
    pub sequence_length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 2048,
            seed: 0,
            shape_range: 2.0,
            pose_scale: 1.0,
            root_limits: [[-0.2, 0.2], [-0.5, 0.5], [-0.2, 0.2]],
            translation: 0.5,
            offset: [0.008, 0.010],
            missing_rate: 0.0,
            sequence_length: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.sequence_length == 0 {
            return bad("frames and sequence_length must be positive".into());
        }
        if !(self.offset[0] >= 0.0 && self.offset[0] <= self.offset[1] && self.offset[1].is_finite()) {
            return bad(format!("offset range {:?} must satisfy 0 <= lo <= hi", self.offset));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate {} must lie in [0, 1)", self.missing_rate));
        }
        for (name, v) in [("shape_range", self.shape_range), ("pose_scale", self.pose_scale), ("translation", self.translation)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if self.root_limits.iter().any(|[lo, hi]| !(lo <= hi)) {
            return bad("root_limits must have lo <= hi".into());
        }
        Ok(())
    }
}

/// Generator-side truth for every frame. Kept apart from [`Dataset`] so
/// training code never sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `[n, m, 4]`.
    pub quats: Tensor,
    /// `[n, 10]`.
    pub betas: Tensor,
    /// Global translation added after posing, `[n, 3]`.
    pub translations: Tensor,
    /// Posed joints in world coordinates, `[n, m, 3]`.
    pub joints: Tensor,
    /// Posed surface in world coordinates, `[n, p, 3]`.
    pub vertices: Tensor,
    /// Every landmark before masking, `[n, l, 3]`.
    pub landmarks: Tensor,
    /// Landmarks at the same surface location on the shaped rest body, `[n, l, 3]`.
    pub rest_landmarks: Tensor,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.quats.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    const FIELDS: [&'static str; 7] = ["quats", "betas", "translations", "joints", "vertices", "landmarks", "rest_landmarks"];

    fn fields(&self) -> [&Tensor; 7] {
        [
            &self.quats,
            &self.betas,
            &self.translations,
            &self.joints,
            &self.vertices,
            &self.landmarks,
            &self.rest_landmarks,
        ]
    }

    /// Rows `indices` of every field.
    pub fn subset(&self, indices: &[usize]) -> GroundTruth {
        let pick = |t: &Tensor| {
            let row: usize = t.shape()[1..].iter().product();
            let data = indices.iter().flat_map(|&i| t.data()[i * row..(i + 1) * row].iter().copied()).collect();
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(&shape, data).expect("consistent subset")
        };
        let f = self.fields().map(pick);
        let [quats, betas, translations, joints, vertices, landmarks, rest_landmarks] = f;
        GroundTruth {
            quats,
            betas,
            translations,
            joints,
            vertices,
            landmarks,
            rest_landmarks,
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (name, t) in Self::FIELDS.iter().zip(self.fields()) {
            a.put_floats(name, t.shape(), t.to_vec());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            let (shape, data) = a.floats(name)?;
            Tensor::new(shape, data.to_vec())
        };
        let gt = GroundTruth {
            quats: get("quats")?,
            betas: get("betas")?,
            translations: get("translations")?,
            joints: get("joints")?,
            vertices: get("vertices")?,
            landmarks: get("landmarks")?,
            rest_landmarks: get("rest_landmarks")?,
        };
        let n = gt.len();
        if gt.fields().iter().any(|t| t.rank() < 2 || t.shape()[0] != n) {
            return Err(Error::Data("ground truth fields disagree on the frame count".into()));
        }
        Ok(gt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Where a landmark can be sampled: whole faces inside its patch, or, for
/// patches without a face, its vertices.
enum Site {
    Faces(Vec<usize>),
    Vertices(Vec<usize>),
}

fn landmark_sites(model: &BodyModel) -> Vec<Site> {
    model
        .landmarks()
        .patches()
        .iter()
        .map(|p| {
            let set: HashSet<usize> = p.vertices.iter().copied().collect();
            let faces: Vec<usize> = (0..model.faces().len())
                .filter(|&k| model.faces()[k].iter().all(|v| set.contains(v)))
                .collect();
            if faces.is_empty() {
                Site::Vertices(p.vertices.clone())
            } else {
                Site::Faces(faces)
            }
        })
        .collect()
}

/// Random point on a posed patch pushed along the local normal, plus the
/// matching point on the shaped rest surface.
fn place_landmark(
    site: &Site,
    faces: &[[usize; 3]],
    posed: &[Vec3],
    rest: &[Vec3],
    normals: &mut Option<(Vec<Vec3>, Vec<Vec3>)>,
    offset: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec3, Vec3)> {
    match site {
        Site::Faces(ks) => {
            let areas: Vec<f64> = ks.iter().map(|&k| face_normal(posed, &faces[k]).norm()).collect();
            let total: f64 = areas.iter().sum();
            let mut t = rng.gen::<f64>() * total;
            let mut pick = ks.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if t < *a {
                    pick = i;
                    break;
                }
                t -= a;
            }
            let f = &faces[ks[pick]];
            let [u, v] = crate::geometry::barycentric(rng);
            let at = |pts: &[Vec3]| pts[f[0]] * (1.0 - u - v) + pts[f[1]] * u + pts[f[2]] * v;
            let unit = |pts: &[Vec3]| -> Result<Vec3> {
                face_normal(pts, f)
                    .try_normalize(0.0)
                    .ok_or_else(|| Error::ModelValidation(format!("degenerate face {f:?}")))
            };
            Ok((at(posed) + unit(posed)? * offset, at(rest) + unit(rest)? * offset))
        }
        Site::Vertices(vs) => {
            let v = vs[rng.gen_range(0..vs.len())];
            if normals.is_none() {
                *normals = Some((vertex_normals(posed, faces)?, vertex_normals(rest, faces)?));
            }
            let (np, nr) = normals.as_ref().unwrap();
            Ok((posed[v] + np[v] * offset, rest[v] + nr[v] * offset))
        }
    }
}

const CHUNK: usize = 64;

/// Draws `config.frames` frames: uniform shapes, per-joint rotations from
/// `limits` (root from `config.root_limits`), a random global translation,
/// and one surface landmark per patch offset along the surface normal.
/// Each frame uses its own counter-based random stream.
pub fn synth_generate(model: &BodyModel, limits: &[EulerLimits], config: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let (m, l, p) = (model.joint_count(), model.landmark_count(), model.vertex_count());
    if limits.len() != m {
        return Err(Error::Config(format!("{} joint limits for {m} joints", limits.len())));
    }
    if model.faces().is_empty() {
        return Err(Error::Config("synthetic landmarks need a model with faces".into()));
    }
    let root = model.tree().root();
    let sites = landmark_sites(model);
    let n = config.frames;
    let mut quats = Vec::with_capacity(n * m * 4);
    let mut betas = Vec::with_capacity(n * SHAPE_DIM);
    let mut translations = Vec::with_capacity(n * 3);
    let mut rngs = Vec::with_capacity(n);
    for f in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(f as u64);
        for (j, lim) in limits.iter().enumerate() {
            let angles = if j == root {
                sample_euler(&config.root_limits, 1.0, &mut rng)
            } else {
                sample_euler(lim, config.pose_scale, &mut rng)
            };
            quats.extend(euler_to_quat(angles));
        }
        let r = config.shape_range;
        betas.extend((0..SHAPE_DIM).map(|_| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 }));
        let t = config.translation;
        translations.extend((0..3).map(|_| if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 }));
        rngs.push(rng);
    }

    let mut gt_joints = Vec::with_capacity(n * m * 3);
    let mut gt_vertices = Vec::with_capacity(n * p * 3);
    let mut gt_landmarks = Vec::with_capacity(n * l * 3);
    let mut gt_rest = Vec::with_capacity(n * l * 3);
    let mut frames = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let b = CHUNK.min(n - start);
        let tape = Tape::new();
        let q = Tensor::new(&[b, m, 4], quats[start * m * 4..(start + b) * m * 4].to_vec())?;
        let beta = Tensor::new(&[b, SHAPE_DIM], betas[start * SHAPE_DIM..(start + b) * SHAPE_DIM].to_vec())?;
        let body = full_forward(&tape, &q, &beta, model)?;
        for i in 0..b {
            let f = start + i;
            let rng = &mut rngs[f];
            let shift = Vec3::from_column_slice(&translations[3 * f..3 * f + 3]);
            let posed: Vec<Vec3> = points_from_flat(&body.vertices.data()[i * p * 3..(i + 1) * p * 3])
                .into_iter()
                .map(|v| v + shift)
                .collect();
            let rest = points_from_flat(&body.rest_vertices.data()[i * p * 3..(i + 1) * p * 3]);
            let mut normals = None;
            let mut points = Vec::with_capacity(l);
            let mut valid = Vec::with_capacity(l);
            for site in &sites {
                let [lo, hi] = config.offset;
                let d = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                let (at, at_rest) = place_landmark(site, model.faces(), &posed, &rest, &mut normals, d, rng)?;
                gt_landmarks.extend(at.iter());
                gt_rest.extend(at_rest.iter());
                points.push([at.x, at.y, at.z]);
                valid.push(!(config.missing_rate > 0.0 && rng.gen::<f64>() < config.missing_rate));
            }
            for j in body.joints.data()[i * m * 3..(i + 1) * m * 3].chunks(3) {
                gt_joints.extend((0..3).map(|c| j[c] + shift[c]));
            }
            gt_vertices.extend(posed.iter().flat_map(|v| v.iter().copied()));
            let seq = format!("synth{:04}", f / config.sequence_length);
            frames.push(Frame::new(seq, f % config.sequence_length, points, valid)?);
        }
    }
    let dataset = Dataset::new(model.landmarks().codes().map(String::from).collect(), frames)?;
    let truth = GroundTruth {
        quats: Tensor::new(&[n, m, 4], quats)?,
        betas: Tensor::new(&[n, SHAPE_DIM], betas)?,
        translations: Tensor::new(&[n, 3], translations)?,
        joints: Tensor::new(&[n, m, 3], gt_joints)?,
        vertices: Tensor::new(&[n, p, 3], gt_vertices)?,
        landmarks: Tensor::new(&[n, l, 3], gt_landmarks)?,
        rest_landmarks: Tensor::new(&[n, l, 3], gt_rest)?,
    };
    Ok((dataset, truth))
}
