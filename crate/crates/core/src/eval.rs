//! Error metrics, scan-to-model distance, temporal smoothing and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::body::{BodyModel, SHAPE_DIM};
use crate::data::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{nearest, points_from_flat, sample_surface, Vec3};
use crate::inference::Predictions;

/// Rounds of nearest-neighbor mean-offset fitting in [`scan_to_model`].
pub const ALIGN_ITERATIONS: usize = 10;

/// Default jitter threshold for [`temporal_smooth`].
pub const JITTER_THRESHOLD: f64 = 0.1;

/// Mean Euclidean distance between corresponding points.
pub fn point_set_error(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("point_set_error", format!("{} vs {} points", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::dim("point_set_error", "empty point sets"));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / pred.len() as f64)
}

/// A ground-truth scan.
#[derive(Clone, Copy, Debug)]
pub enum Scan<'a> {
    Mesh { vertices: &'a [Vec3], faces: &'a [[usize; 3]] },
    Cloud(&'a [Vec3]),
}

/// Samples scan points (by area for meshes, uniformly with replacement for
/// clouds), fits a translation moving them onto the model vertices and
/// returns the mean nearest-vertex distance after the fit.
pub fn scan_to_model<R: Rng>(scan: Scan, model: &[Vec3], samples: usize, rng: &mut R) -> Result<f64> {
    let empty = |what: &str| Err(Error::Data(format!("scan_to_model: {what} is empty")));
    if model.is_empty() {
        return empty("model vertex set");
    }
    if samples == 0 {
        return empty("sample count");
    }
    let points = match scan {
        Scan::Mesh { vertices, faces } => {
            if faces.is_empty() || vertices.is_empty() {
                return empty("scan mesh");
            }
            sample_surface(vertices, faces, samples, rng)
        }
        Scan::Cloud(cloud) => {
            if cloud.is_empty() {
                return empty("scan cloud");
            }
            (0..samples).map(|_| cloud[rng.gen_range(0..cloud.len())]).collect()
        }
    };
    let centroid = |p: &[Vec3]| p.iter().sum::<Vec3>() / p.len() as f64;
    let mut t = centroid(model) - centroid(&points);
    for _ in 0..ALIGN_ITERATIONS {
        let mut offset = Vec3::zeros();
        for p in &points {
            let q = p + t;
            offset += model[nearest(model, &q).0] - q;
        }
        t += offset / points.len() as f64;
    }
    Ok(points.iter().map(|p| nearest(model, &(p + t)).1).sum::<f64>() / points.len() as f64)
}

/// Pose and shape of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseShape {
    pub quats: Vec<[f64; 4]>,
    pub betas: [f64; SHAPE_DIM],
}

/// Replaces every frame's β with the sequence mean. With a threshold, a
/// quaternion component whose neighbors agree to within it while the frame
/// itself is further than it from their midpoint is set to the midpoint,
/// and the quaternion is renormalized. Neighbors are read from the input,
/// and each quaternion is first flipped into the hemisphere of its
/// predecessor so that sign changes do not look like jitter.
pub fn temporal_smooth(seq: &[PoseShape], threshold: Option<f64>) -> Vec<PoseShape> {
    if seq.is_empty() {
        return Vec::new();
    }
    let mut mean = [0.0; SHAPE_DIM];
    for f in seq {
        for (m, b) in mean.iter_mut().zip(&f.betas) {
            *m += b;
        }
    }
    mean.iter_mut().for_each(|m| *m /= seq.len() as f64);

    let mut input: Vec<PoseShape> = seq.to_vec();
    for t in 1..input.len() {
        for j in 0..input[t].quats.len() {
            let prev = input[t - 1].quats[j];
            let q = &mut input[t].quats[j];
            if q.iter().zip(&prev).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                q.iter_mut().for_each(|c| *c = -*c);
            }
        }
    }
    let mut out = input.clone();
    if let Some(thr) = threshold {
        for t in 1..input.len().saturating_sub(1) {
            for j in 0..input[t].quats.len() {
                let (prev, cur, next) = (input[t - 1].quats[j], input[t].quats[j], input[t + 1].quats[j]);
                let mut q = cur;
                let mut changed = false;
                for c in 0..4 {
                    let mid = 0.5 * (prev[c] + next[c]);
                    if (prev[c] - next[c]).abs() < thr && (cur[c] - mid).abs() > thr {
                        q[c] = mid;
                        changed = true;
                    }
                }
                if changed {
                    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if n > 1e-12 {
                        q.iter_mut().for_each(|c| *c /= n);
                        out[t].quats[j] = q;
                    }
                }
            }
        }
    }
    for f in &mut out {
        f.betas = mean;
    }
    out
}

impl Predictions {
    /// Applies [`temporal_smooth`] to each sequence, ordered by frame index.
    pub fn smoothed(&self, threshold: Option<f64>) -> Result<Predictions> {
        let m = self.joint_count();
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.sequences.iter().enumerate() {
            groups.entry(s).or_default().push(i);
        }
        let mut quats = self.quats.to_vec();
        let mut betas = self.betas.to_vec();
        for rows in groups.values_mut() {
            rows.sort_by_key(|&i| self.frames[i]);
            let seq: Vec<PoseShape> = rows
                .iter()
                .map(|&i| PoseShape {
                    quats: quats[i * m * 4..(i + 1) * m * 4].chunks(4).map(|q| [q[0], q[1], q[2], q[3]]).collect(),
                    betas: betas[i * SHAPE_DIM..(i + 1) * SHAPE_DIM].try_into().expect("shape row"),
                })
                .collect();
            for (&i, f) in rows.iter().zip(temporal_smooth(&seq, threshold)) {
                quats[i * m * 4..(i + 1) * m * 4].copy_from_slice(f.quats.as_flattened());
                betas[i * SHAPE_DIM..(i + 1) * SHAPE_DIM].copy_from_slice(&f.betas);
            }
        }
        Ok(Predictions {
            quats: Tensor::new(self.quats.shape(), quats)?,
            betas: Tensor::new(self.betas.shape(), betas)?,
            ..self.clone()
        })
    }
}

/// Mean errors over one group of frames, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSummary {
    pub frames: usize,
    /// Attention joints against ground-truth joints, when predicted.
    pub joints_in: Option<f64>,
    pub joints_out: f64,
    pub surface: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: ErrorSummary,
    /// Keyed by sequence id.
    pub sequences: BTreeMap<String, ErrorSummary>,
    pub scan_to_model: Option<f64>,
    pub fingerprint: Option<String>,
}

#[derive(Default)]
struct Sums {
    frames: usize,
    jin: Option<f64>,
    jout: f64,
    tout: f64,
}

impl Sums {
    fn add(&mut self, jin: Option<f64>, jout: f64, tout: f64) {
        self.frames += 1;
        self.jin = jin.map(|x| x + self.jin.unwrap_or(0.0));
        self.jout += jout;
        self.tout += tout;
    }

    fn summary(&self) -> ErrorSummary {
        let n = self.frames as f64;
        ErrorSummary {
            frames: self.frames,
            joints_in: self.jin.map(|x| x / n),
            joints_out: self.jout / n,
            surface: self.tout / n,
        }
    }
}

/// Compares predictions with ground truth frame by frame. Frames are
/// matched by position, so both must list the same frames in the same order.
pub fn evaluate(pred: &Predictions, model: &BodyModel, truth: &GroundTruth, batch_size: usize) -> Result<EvalReport> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!("{} predicted frames but {} ground-truth frames", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    let bodies = pred.bodies(model, batch_size)?;
    let (m, p) = (model.joint_count(), model.vertex_count());
    if truth.joints.shape()[1] != m || truth.vertices.shape()[1] != p {
        return Err(Error::Data("ground truth does not match the body model".into()));
    }
    let frame = |t: &Tensor, i: usize, k: usize| points_from_flat(&t.data()[i * k * 3..(i + 1) * k * 3]);
    let mut overall = Sums::default();
    let mut per: BTreeMap<String, Sums> = BTreeMap::new();
    for i in 0..pred.len() {
        let gt_joints = frame(&truth.joints, i, m);
        let jin = match &pred.attention_joints {
            Some(j) => Some(point_set_error(&frame(j, i, m), &gt_joints)?),
            None => None,
        };
        let jout = point_set_error(&frame(&bodies.joints, i, m), &gt_joints)?;
        let tout = point_set_error(&frame(&bodies.vertices, i, p), &frame(&truth.vertices, i, p))?;
        overall.add(jin, jout, tout);
        per.entry(pred.sequences[i].clone()).or_default().add(jin, jout, tout);
    }
    Ok(EvalReport {
        overall: overall.summary(),
        sequences: per.iter().map(|(k, s)| (k.clone(), s.summary())).collect(),
        scan_to_model: None,
        fingerprint: None,
    })
}

fn mm(x: Option<f64>) -> String {
    x.map(|v| format!("{:.3}", v * 1e3)).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    /// Human-readable summary in millimeters.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.overall;
        let _ = writeln!(s, "frames: {}", o.frames);
        if let Some(f) = &self.fingerprint {
            let _ = writeln!(s, "config: {f}");
        }
        let _ = writeln!(s, "J_in  mean error: {} mm", mm(o.joints_in));
        let _ = writeln!(s, "J_out mean error: {} mm", mm(Some(o.joints_out)));
        let _ = writeln!(s, "T_out mean error: {} mm", mm(Some(o.surface)));
        if let Some(d) = self.scan_to_model {
            let _ = writeln!(s, "scan-to-model:    {} mm", mm(Some(d)));
        }
        if !self.sequences.is_empty() {
            let _ = writeln!(s, "\n{:<20} {:>7} {:>10} {:>10} {:>10}", "sequence", "frames", "J_in", "J_out", "T_out");
            for (name, e) in &self.sequences {
                let _ = writeln!(
                    s,
                    "{:<20} {:>7} {:>10} {:>10} {:>10}",
                    name,
                    e.frames,
                    mm(e.joints_in),
                    mm(Some(e.joints_out)),
                    mm(Some(e.surface))
                );
            }
        }
        s
    }

    /// One row for the whole set (sequence `*`) then one per sequence.
    /// Columns are in millimeters; empty cells mean not available.
    pub fn to_csv(&self) -> String {
        let cell = |x: Option<f64>| x.map(|v| (v * 1e3).to_string()).unwrap_or_default();
        let mut s = String::from("sequence,frames,jin_mm,jout_mm,tout_mm,scan_mm,config\n");
        let fp = self.fingerprint.clone().unwrap_or_default();
        let row = |s: &mut String, name: &str, e: &ErrorSummary, scan: Option<f64>| {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{fp}",
                e.frames,
                cell(e.joints_in),
                cell(Some(e.joints_out)),
                cell(Some(e.surface)),
                cell(scan)
            );
        };
        row(&mut s, "*", &self.overall, self.scan_to_model);
        for (name, e) in &self.sequences {
            row(&mut s, name, e, None);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::fixtures::sphere_model;
    use crate::body::inflate_template;
    use crate::body::toy::{joint_limits, toy_model};
    use crate::data::{synth_generate, SynthConfig};
    use crate::geometry::{icosphere, mesh_from_obj, mesh_to_obj};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect()
    }

    #[test]
    fn point_set_error_matches_elementwise_distances() {
        let a = cloud(50, 1);
        assert_eq!(point_set_error(&a, &a).unwrap(), 0.0);
        let shifted: Vec<Vec3> = a.iter().map(|p| p + Vec3::new(0.001, 0.0, 0.0)).collect();
        assert!((point_set_error(&shifted, &a).unwrap() - 0.001).abs() < 1e-15);
        let b = cloud(50, 2);
        let mut brute = 0.0;
        for i in 0..50 {
            let d: f64 = (0..3).map(|k| (a[i][k] - b[i][k]).powi(2)).sum();
            brute += d.sqrt();
        }
        assert!((point_set_error(&a, &b).unwrap() - brute / 50.0).abs() < 1e-14);
        assert!(point_set_error(&a, &b[..49]).is_err());
    }

    #[test]
    fn scan_of_the_model_itself_is_zero_even_when_shifted() {
        let (v, _) = icosphere(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(scan_to_model(Scan::Cloud(&v), &v, 2000, &mut rng).unwrap() < 1e-15);
        let moved: Vec<Vec3> = v.iter().map(|p| p + Vec3::new(0.05, -0.03, 0.02)).collect();
        assert!(scan_to_model(Scan::Cloud(&moved), &v, 2000, &mut rng).unwrap() < 1e-12);
        assert!(scan_to_model(Scan::Cloud(&[]), &v, 10, &mut rng).is_err());
        assert!(scan_to_model(Scan::Cloud(&v), &[], 10, &mut rng).is_err());
    }

    #[test]
    fn inflated_sphere_is_offset_by_the_inflation() {
        let sphere = sphere_model(4);
        let base = points_from_flat(sphere.template().data());
        let inflated = points_from_flat(inflate_template(&sphere, 0.005).unwrap().template().data());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = scan_to_model(Scan::Cloud(&inflated), &base, 10_000, &mut rng).unwrap();
        assert!((d - 0.005).abs() < 0.005 * 0.15, "{d}");
        // area sampling also sees the in-plane distance to the nearest vertex
        let mesh = Scan::Mesh {
            vertices: &inflated,
            faces: sphere.faces(),
        };
        assert!(scan_to_model(mesh, &base, 2000, &mut rng).unwrap() > d);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn scan_distance_ignores_global_translation(tx in -2.0..2.0f64, ty in -2.0..2.0f64, tz in -2.0..2.0f64, seed in 0u64..100) {
            let (v, f) = icosphere(2);
            let scan: Vec<Vec3> = v.iter().map(|p| p * 1.02).collect();
            let t = Vec3::new(tx, ty, tz);
            let moved: Vec<Vec3> = scan.iter().map(|p| p + t).collect();
            let model_moved: Vec<Vec3> = v.iter().map(|p| p - t).collect();
            let d0 = scan_to_model(Scan::Mesh { vertices: &scan, faces: &f }, &v, 300, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let d1 = scan_to_model(Scan::Mesh { vertices: &moved, faces: &f }, &v, 300, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let d2 = scan_to_model(Scan::Mesh { vertices: &scan, faces: &f }, &model_moved, 300, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-9 && (d0 - d2).abs() < 1e-9);
        }
    }

    fn frame(q: [f64; 4], beta0: f64) -> PoseShape {
        let mut betas = [0.0; SHAPE_DIM];
        betas[0] = beta0;
        PoseShape { quats: vec![q, [1.0, 0.0, 0.0, 0.0]], betas }
    }

    #[test]
    fn smoothing_rules() {
        let id = [1.0, 0.0, 0.0, 0.0];
        let constant = vec![frame(id, 0.5); 5];
        assert_eq!(temporal_smooth(&constant, Some(0.1)), constant);

        let c = (0.5f64).sqrt();
        let base = [c, c, 0.0, 0.0];
        let mut seq = vec![frame(base, 1.0), frame(base, 2.0), frame(base, 6.0)];
        seq[1].quats[0][2] = 0.3;
        let out = temporal_smooth(&seq, Some(0.1));
        assert!(out[1].quats[0].iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(out.iter().all(|f| f.betas[0] == 3.0));
        // without the jitter rule only the shape is averaged
        let raw = temporal_smooth(&seq, None);
        assert_eq!(raw[1].quats, seq[1].quats);
        // a sign flip is the same rotation, not a spike
        let mut flipped = vec![frame(base, 0.0); 3];
        flipped[1].quats[0] = base.map(|x| -x);
        let out = temporal_smooth(&flipped, Some(0.1));
        assert_eq!(out[1].quats[0], base);
        // slow drift is left alone
        let drift: Vec<PoseShape> = (0..4).map(|t| frame([1.0, 0.05 * t as f64, 0.0, 0.0], 0.0)).collect();
        assert_eq!(temporal_smooth(&drift, Some(0.1))[1].quats, drift[1].quats);
    }

    fn truth_predictions(frames: usize) -> (BodyModel, GroundTruth, Predictions) {
        let model = toy_model().unwrap();
        let cfg = SynthConfig {
            frames,
            sequence_length: 3,
            ..SynthConfig::default()
        };
        let (data, gt) = synth_generate(&model, &joint_limits(), &cfg).unwrap();
        let root = model.tree().root();
        let translations: Vec<f64> =
            (0..frames).flat_map(|i| gt.joints.data()[(i * model.joint_count() + root) * 3..][..3].to_vec()).collect();
        let pred = Predictions {
            sequences: data.frames.iter().map(|f| f.sequence.clone()).collect(),
            frames: data.frames.iter().map(|f| f.index).collect(),
            quats: gt.quats.clone(),
            betas: gt.betas.clone(),
            translations: Tensor::new(&[frames, 3], translations).unwrap(),
            attention_joints: Some(gt.joints.clone()),
            landmarks: None,
        };
        (model, gt, pred)
    }

    #[test]
    fn ground_truth_predictions_evaluate_to_zero() {
        let (model, gt, pred) = truth_predictions(7);
        let report = evaluate(&pred, &model, &gt, 4).unwrap();
        assert_eq!(report.overall.frames, 7);
        assert_eq!(report.sequences.len(), 3);
        assert!(report.overall.joints_out < 1e-12 && report.overall.surface < 1e-12);
        assert_eq!(report.overall.joints_in, Some(0.0));
        let csv = report.to_csv();
        assert!(csv.starts_with("sequence,frames,jin_mm"));
        assert_eq!(csv.lines().count(), 1 + 1 + 3);
        assert!(report.to_text().contains("T_out mean error"));
    }

    #[test]
    fn report_does_not_depend_on_frame_order() {
        let (model, gt, mut pred) = truth_predictions(6);
        pred.betas = Tensor::new(pred.betas.shape(), pred.betas.data().iter().map(|b| b + 0.3).collect()).unwrap();
        let a = evaluate(&pred, &model, &gt, 6).unwrap();
        let order = [4, 1, 5, 0, 3, 2];
        let pick = |t: &Tensor| {
            let k = t.len() / t.shape()[0];
            let mut shape = t.shape().to_vec();
            shape[0] = order.len();
            Tensor::new(&shape, order.iter().flat_map(|&i| t.data()[i * k..(i + 1) * k].to_vec()).collect()).unwrap()
        };
        let shuffled = Predictions {
            sequences: order.iter().map(|&i| pred.sequences[i].clone()).collect(),
            frames: order.iter().map(|&i| pred.frames[i]).collect(),
            quats: pick(&pred.quats),
            betas: pick(&pred.betas),
            translations: pick(&pred.translations),
            attention_joints: pred.attention_joints.as_ref().map(pick),
            landmarks: None,
        };
        let gt_shuffled = gt.subset(&order);
        let b = evaluate(&shuffled, &model, &gt_shuffled, 4).unwrap();
        assert!((a.overall.surface - b.overall.surface).abs() < 1e-12);
        for (x, y) in a.sequences.values().zip(b.sequences.values()) {
            assert!((x.surface - y.surface).abs() < 1e-12 && x.frames == y.frames);
        }
    }

    #[test]
    fn smoothing_predictions_groups_by_sequence() {
        let (_, _, pred) = truth_predictions(6);
        let s = pred.smoothed(Some(0.1)).unwrap();
        let b = s.betas.data();
        assert_eq!(&b[0..10], &b[10..20]);
        assert_ne!(&b[0..10], &b[30..40]);
    }

    #[test]
    fn mesh_export_round_trips_exactly() {
        let (model, _, pred) = truth_predictions(2);
        let bodies = pred.bodies(&model, 2).unwrap();
        let verts = points_from_flat(&bodies.vertices.data()[..model.vertex_count() * 3]);
        let (back, faces) = mesh_from_obj(&mesh_to_obj(&verts, model.faces())).unwrap();
        assert_eq!(back, verts);
        assert_eq!(faces, model.faces());
    }
}
