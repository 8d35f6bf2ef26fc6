//! Running trained networks on raw frames and mapping the result back to
//! the frames' own coordinates.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use crate::autodiff::{Tape, Tensor};
use crate::body::{full_forward, BodyModel, SHAPE_DIM};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{points_from_flat, Vec3};
use crate::networks::{Checkpoint, Mode};
use crate::training::{preprocess_dataset, Preprocess};

/// Per-frame pose, shape, global placement and attention joints.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub sequences: Vec<String>,
    pub frames: Vec<usize>,
    /// Unit quaternions `[n, m, 4]`; the root entry carries the global orientation.
    pub quats: Tensor,
    /// `[n, 10]`.
    pub betas: Tensor,
    /// World position of the root joint, `[n, 3]`.
    pub translations: Tensor,
    /// Attention joints in world coordinates, `[n, m, 3]`.
    pub attention_joints: Option<Tensor>,
    /// Observed landmarks with reconstructions filled in, world coordinates, `[n, l, 3]`.
    pub landmarks: Option<Tensor>,
}

fn normalized(q: &[f64], index: usize) -> Result<[f64; 4]> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::DegenerateRotation { index, norm: n });
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

fn rows(t: &Tensor, i: usize) -> &[f64] {
    let row: usize = t.shape()[1..].iter().product();
    &t.data()[i * row..(i + 1) * row]
}

/// Runs every trained regressor on `data` in evaluation mode. Frames are
/// normalized with the checkpoint's preprocessing mode and the outputs are
/// mapped back through each frame's transform.
pub fn infer(checkpoint: &Checkpoint, model: &BodyModel, data: &Dataset, batch_size: usize) -> Result<Predictions> {
    let nets = &checkpoint.networks;
    let (m, l) = (model.joint_count(), model.landmark_count());
    if nets.joints != m || nets.landmarks != l || data.landmark_count() != l {
        return Err(Error::Data(format!(
            "checkpoint ({} joints, {} landmarks), model ({m}, {l}) and data ({} landmarks) disagree",
            nets.joints,
            nets.landmarks,
            data.landmark_count()
        )));
    }
    let mode = match checkpoint.meta.get("preprocess") {
        None => Preprocess::Translate,
        Some(s) => Preprocess::parse(s).ok_or_else(|| Error::Data(format!("unknown preprocessing '{s}' in checkpoint")))?,
    };
    let reference = points_from_flat(model.template_landmarks().data());
    let (pre, transforms) = preprocess_dataset(data, mode, &reference)?;
    let root = model.tree().root();
    let n = data.len();
    let (mut quats, mut betas, mut trans) = (Vec::with_capacity(n * m * 4), Vec::with_capacity(n * SHAPE_DIM), Vec::with_capacity(n * 3));
    let (mut jin, mut lms) = (Vec::with_capacity(n * m * 3), Vec::with_capacity(n * l * 3));
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = pre.batch(chunk)?;
        let tape = Tape::new();
        let pred = nets.forward(&tape, &batch.landmarks, &batch.mask, nets.psi.len(), &mut Mode::Eval, root)?;
        let (q, beta) = pred.final_pose();
        for (b, &f) in chunk.iter().enumerate() {
            let tf = &transforms[f];
            let inverse = tf.inverse_rotation();
            for (j, qj) in rows(q, b).chunks(4).enumerate() {
                let mut u = normalized(qj, f * m + j)?;
                if j == root {
                    let g = inverse * UnitQuaternion::new_unchecked(Quaternion::new(u[0], u[1], u[2], u[3]));
                    u = [g.w, g.i, g.j, g.k];
                }
                quats.extend(u);
            }
            betas.extend_from_slice(rows(beta, b));
            let r = Vec3::from_column_slice(rows(&pred.root, b));
            trans.extend(tf.invert(&r).iter());
            for p in points_from_flat(rows(&pred.joints, b)) {
                jin.extend(tf.invert(&(p + r)).iter());
            }
            for p in points_from_flat(rows(&pred.landmarks, b)) {
                lms.extend(tf.invert(&p).iter());
            }
        }
    }
    Ok(Predictions {
        sequences: data.frames.iter().map(|f| f.sequence.clone()).collect(),
        frames: data.frames.iter().map(|f| f.index).collect(),
        quats: Tensor::new(&[n, m, 4], quats)?,
        betas: Tensor::new(&[n, SHAPE_DIM], betas)?,
        translations: Tensor::new(&[n, 3], trans)?,
        attention_joints: Some(Tensor::new(&[n, m, 3], jin)?),
        landmarks: Some(Tensor::new(&[n, l, 3], lms)?),
    })
}

/// Posed joints and surface in world coordinates.
#[derive(Clone, Debug)]
pub struct WorldBodies {
    /// `[n, m, 3]`.
    pub joints: Tensor,
    /// `[n, p, 3]`.
    pub vertices: Tensor,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.quats.shape()[1]
    }

    /// Poses the model with every frame's pose and shape and places its
    /// root at the predicted translation.
    pub fn bodies(&self, model: &BodyModel, batch_size: usize) -> Result<WorldBodies> {
        let (m, p, n) = (model.joint_count(), model.vertex_count(), self.len());
        if self.joint_count() != m {
            return Err(Error::Data(format!("predictions have {} joints, model {m}", self.joint_count())));
        }
        let root = model.tree().root();
        let (mut joints, mut vertices) = (Vec::with_capacity(n * m * 3), Vec::with_capacity(n * p * 3));
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(batch_size.max(1)) {
            let pick = |t: &Tensor| -> Result<Tensor> {
                let mut shape = t.shape().to_vec();
                shape[0] = chunk.len();
                Tensor::new(&shape, chunk.iter().flat_map(|&i| rows(t, i).iter().copied()).collect())
            };
            let tape = Tape::new();
            let body = full_forward(&tape, &pick(&self.quats)?, &pick(&self.betas)?, model)?.centered_on_root(&tape, root)?;
            for (b, &f) in chunk.iter().enumerate() {
                let t = rows(&self.translations, f);
                for (k, x) in rows(&body.joints, b).iter().enumerate() {
                    joints.push(x + t[k % 3]);
                }
                for (k, x) in rows(&body.vertices, b).iter().enumerate() {
                    vertices.push(x + t[k % 3]);
                }
            }
        }
        Ok(WorldBodies {
            joints: Tensor::new(&[n, m, 3], joints)?,
            vertices: Tensor::new(&[n, p, 3], vertices)?,
        })
    }

    /// Columns: `sequence, frame`, `qJ.w..qJ.z` per joint, `betaK`, then
    /// `root.x..root.z` and `jinJ.x..jinJ.z` when present.
    pub fn write(&self, writer: impl Write) -> Result<()> {
        let m = self.joint_count();
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        let mut header = vec!["sequence".to_string(), "frame".to_string()];
        for j in 0..m {
            header.extend(["w", "x", "y", "z"].map(|c| format!("q{j}.{c}")));
        }
        header.extend((0..SHAPE_DIM).map(|k| format!("beta{k}")));
        header.extend(["x", "y", "z"].map(|c| format!("root.{c}")));
        if self.attention_joints.is_some() {
            for j in 0..m {
                header.extend(["x", "y", "z"].map(|c| format!("jin{j}.{c}")));
            }
        }
        w.write_record(&header).map_err(io)?;
        for i in 0..self.len() {
            let mut rec = vec![self.sequences[i].clone(), self.frames[i].to_string()];
            let mut push = |t: &Tensor| rec.extend(rows(t, i).iter().map(f64::to_string));
            push(&self.quats);
            push(&self.betas);
            push(&self.translations);
            if let Some(j) = &self.attention_joints {
                push(j);
            }
            w.write_record(&rec).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a table written by [`Predictions::write`]. Root and attention
    /// columns are optional; a missing root means the origin.
    pub fn read(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Data(format!("prediction header: {e}")))?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        if col("sequence") != Some(0) || col("frame") != Some(1) {
            return Err(Error::Data("prediction table must start with 'sequence,frame'".into()));
        }
        let m = (0..).take_while(|j| col(&format!("q{j}.w")).is_some()).count();
        if m == 0 {
            return Err(Error::Data("prediction table has no quaternion columns".into()));
        }
        let need = |name: String| col(&name).ok_or_else(|| Error::Data(format!("missing column '{name}'")));
        let mut q_cols = Vec::new();
        for j in 0..m {
            for c in ["w", "x", "y", "z"] {
                q_cols.push(need(format!("q{j}.{c}"))?);
            }
        }
        let b_cols = (0..SHAPE_DIM).map(|k| need(format!("beta{k}"))).collect::<Result<Vec<_>>>()?;
        let r_cols: Option<Vec<usize>> = ["x", "y", "z"].iter().map(|c| col(&format!("root.{c}"))).collect();
        let j_cols: Option<Vec<usize>> = (0..m)
            .flat_map(|j| ["x", "y", "z"].map(move |c| format!("jin{j}.{c}")))
            .map(|n| col(&n))
            .collect();
        let (mut seqs, mut frames, mut q, mut b, mut r, mut jin) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("prediction row {}: {e}", row + 1)))?;
            let num = |c: usize| -> Result<f64> {
                rec[c]
                    .parse()
                    .map_err(|_| Error::Data(format!("row {}: bad number '{}' in '{}'", row + 1, &rec[c], &header[c])))
            };
            seqs.push(rec[0].to_string());
            frames.push(rec[1].parse().map_err(|_| Error::Data(format!("row {}: bad frame index", row + 1)))?);
            for &c in &q_cols {
                q.push(num(c)?);
            }
            for &c in &b_cols {
                b.push(num(c)?);
            }
            match &r_cols {
                Some(cs) => cs.iter().try_for_each(|&c| num(c).map(|v| r.push(v)))?,
                None => r.extend([0.0; 3]),
            }
            if let Some(cs) = &j_cols {
                cs.iter().try_for_each(|&c| num(c).map(|v| jin.push(v)))?;
            }
        }
        let n = frames.len();
        Ok(Predictions {
            sequences: seqs,
            frames,
            quats: Tensor::new(&[n, m, 4], q)?,
            betas: Tensor::new(&[n, SHAPE_DIM], b)?,
            translations: Tensor::new(&[n, 3], r)?,
            attention_joints: match j_cols {
                Some(_) => Some(Tensor::new(&[n, m, 3], jin)?),
                None => None,
            },
            landmarks: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::io::BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        Self::read(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::toy::{joint_limits, toy_model};
    use crate::data::{synth_generate, SynthConfig};
    use crate::networks::{Architecture, Networks};
    use crate::training::RigidTransform;
    use nalgebra::Rotation3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn untrained(model: &BodyModel, preprocess: Preprocess) -> Checkpoint {
        let arch = Architecture {
            dae_hidden: vec![12, 6],
            atn_hidden: vec![12],
            psi_hidden: vec![12],
        };
        let nets = Networks::new(model.landmark_count(), model.joint_count(), 1, arch, &mut ChaCha8Rng::seed_from_u64(1));
        let mut ck = Checkpoint::new(nets, 0);
        ck.meta.insert("preprocess".into(), preprocess.name().into());
        ck
    }

    #[test]
    fn predictions_follow_a_rigid_motion_of_the_input() {
        let model = toy_model().unwrap();
        let cfg = SynthConfig {
            frames: 5,
            ..SynthConfig::default()
        };
        let (data, _) = synth_generate(&model, &joint_limits(), &cfg).unwrap();
        let motion = RigidTransform {
            rotation: Rotation3::from_euler_angles(0.3, 1.2, -0.7).into_inner(),
            translation: Vec3::new(1.0, -0.5, 2.0),
        };
        let mut moved = data.clone();
        for f in &mut moved.frames {
            for p in f.points.iter_mut() {
                let q = motion.apply(&Vec3::from(*p));
                *p = [q.x, q.y, q.z];
            }
        }
        let ck = untrained(&model, Preprocess::Procrustes);
        let a = infer(&ck, &model, &data, 4).unwrap().bodies(&model, 4).unwrap();
        let b = infer(&ck, &model, &moved, 4).unwrap().bodies(&model, 4).unwrap();
        for (x, y) in points_from_flat(a.vertices.data()).iter().zip(points_from_flat(b.vertices.data())) {
            assert!((motion.apply(x) - y).norm() < 1e-9);
        }
        // translate-only preprocessing still follows a pure translation
        let ck = untrained(&model, Preprocess::Translate);
        let shift = RigidTransform {
            translation: motion.translation,
            ..RigidTransform::identity()
        };
        let mut shifted = data.clone();
        for f in &mut shifted.frames {
            for p in f.points.iter_mut() {
                let q = shift.apply(&Vec3::from(*p));
                *p = [q.x, q.y, q.z];
            }
        }
        let a = infer(&ck, &model, &data, 4).unwrap();
        let b = infer(&ck, &model, &shifted, 4).unwrap();
        let (ja, jb) = (a.attention_joints.unwrap(), b.attention_joints.unwrap());
        for (x, y) in points_from_flat(ja.data()).iter().zip(points_from_flat(jb.data())) {
            assert!((shift.apply(x) - y).norm() < 1e-9);
        }
    }

    #[test]
    fn table_round_trip_and_minimal_columns() {
        let model = toy_model().unwrap();
        let cfg = SynthConfig {
            frames: 3,
            ..SynthConfig::default()
        };
        let (data, _) = synth_generate(&model, &joint_limits(), &cfg).unwrap();
        let pred = infer(&untrained(&model, Preprocess::Translate), &model, &data, 2).unwrap();
        for q in pred.quats.data().chunks(4) {
            assert!((q.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        pred.write(&mut buf).unwrap();
        let back = Predictions::read(buf.as_slice()).unwrap();
        assert_eq!(back, Predictions { landmarks: None, ..pred.clone() });

        let mut minimal = String::from("sequence,frame,q0.w,q0.x,q0.y,q0.z");
        for k in 0..10 {
            minimal.push_str(&format!(",beta{k}"));
        }
        minimal.push_str("\ns,0,1,0,0,0,0,0,0,0,0,0,0,0,0,0.5\n");
        let p = Predictions::read(minimal.as_bytes()).unwrap();
        assert_eq!(p.translations.data(), [0.0; 3]);
        assert_eq!(p.betas.data()[9], 0.5);
        assert!(p.attention_joints.is_none());
        assert!(Predictions::read("sequence,frame,beta0\n".as_bytes()).is_err());
    }
}
