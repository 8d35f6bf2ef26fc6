//! Procedurally generated 24-joint body: one tube of rings per bone,
//! blended skinning near joints and a fixed 67-landmark layout.

use crate::autodiff::Tensor;
use crate::data::{LandmarkDictionary, Patch};
use crate::error::Result;
use crate::geometry::Vec3;

use super::model::{BodyModel, KinematicTree, SHAPE_DIM};

pub const JOINT_NAMES: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub const PARENTS: [i64; 24] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

const JOINTS: [[f64; 3]; 24] = [
    [0.0, 0.92, 0.0],
    [0.09, 0.84, 0.0],
    [-0.09, 0.84, 0.0],
    [0.0, 1.02, 0.0],
    [0.1, 0.47, 0.02],
    [-0.1, 0.47, 0.02],
    [0.0, 1.14, 0.0],
    [0.1, 0.09, 0.0],
    [-0.1, 0.09, 0.0],
    [0.0, 1.27, 0.0],
    [0.1, 0.03, 0.12],
    [-0.1, 0.03, 0.12],
    [0.0, 1.47, 0.0],
    [0.07, 1.4, 0.0],
    [-0.07, 1.4, 0.0],
    [0.0, 1.6, 0.02],
    [0.18, 1.42, 0.0],
    [-0.18, 1.42, 0.0],
    [0.45, 1.42, 0.0],
    [-0.45, 1.42, 0.0],
    [0.7, 1.42, 0.0],
    [-0.7, 1.42, 0.0],
    [0.8, 1.42, 0.0],
    [-0.8, 1.42, 0.0],
];

const RING_POSITIONS: [f64; 4] = [0.1, 0.37, 0.63, 0.9];
const RING_SIZE: usize = 8;
/// Fraction of a bone, from either end, over which skinning blends into the neighbor.
const BLEND: f64 = 0.5;

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Torso,
    Leg,
    Arm,
    Head,
    Other,
}

struct Segment {
    name: &'static str,
    driver: usize,
    end_joint: Option<usize>,
    start: Vec3,
    end: Vec3,
    radius: f64,
    part: Part,
    extra_sites: usize,
}

fn joint(i: usize) -> Vec3 {
    Vec3::from(JOINTS[i])
}

fn segments() -> Vec<Segment> {
    // (child joint, name, radius, part, extra landmark sites)
    let bones: [(usize, &str, f64, Part, usize); 23] = [
        (1, "LPEL", 0.08, Part::Leg, 0),
        (2, "RPEL", 0.08, Part::Leg, 0),
        (3, "LOWB", 0.13, Part::Torso, 2),
        (4, "LTHI", 0.07, Part::Leg, 1),
        (5, "RTHI", 0.07, Part::Leg, 1),
        (6, "MIDB", 0.13, Part::Torso, 2),
        (7, "LTIB", 0.05, Part::Leg, 0),
        (8, "RTIB", 0.05, Part::Leg, 0),
        (9, "UPPB", 0.13, Part::Torso, 2),
        (10, "LANK", 0.04, Part::Leg, 0),
        (11, "RANK", 0.04, Part::Leg, 0),
        (12, "NECK", 0.05, Part::Other, 0),
        (13, "LCLA", 0.05, Part::Other, 0),
        (14, "RCLA", 0.05, Part::Other, 0),
        (15, "HNCK", 0.05, Part::Other, 0),
        (16, "LSHO", 0.05, Part::Arm, 0),
        (17, "RSHO", 0.05, Part::Arm, 0),
        (18, "LUPA", 0.045, Part::Arm, 1),
        (19, "RUPA", 0.045, Part::Arm, 1),
        (20, "LFRM", 0.035, Part::Arm, 0),
        (21, "RFRM", 0.035, Part::Arm, 0),
        (22, "LWRI", 0.03, Part::Arm, 0),
        (23, "RWRI", 0.03, Part::Arm, 0),
    ];
    let mut out: Vec<Segment> = bones
        .iter()
        .map(|&(c, name, radius, part, extra_sites)| {
            let driver = PARENTS[c] as usize;
            Segment {
                name,
                driver,
                end_joint: Some(c),
                start: joint(driver),
                end: joint(c),
                radius,
                part,
                extra_sites,
            }
        })
        .collect();
    // leaves get a closed extension driven by the leaf joint itself
    let leaves: [(usize, &str, [f64; 3], f64, Part, usize); 5] = [
        (10, "LTOE", [0.0, 0.0, 0.1], 0.035, Part::Leg, 0),
        (11, "RTOE", [0.0, 0.0, 0.1], 0.035, Part::Leg, 0),
        (15, "HEAD", [0.0, 0.2, 0.0], 0.09, Part::Head, 1),
        (22, "LFIN", [0.1, 0.0, 0.0], 0.025, Part::Arm, 0),
        (23, "RFIN", [-0.1, 0.0, 0.0], 0.025, Part::Arm, 0),
    ];
    out.extend(leaves.iter().map(|&(j, name, ext, radius, part, extra_sites)| Segment {
        name,
        driver: j,
        end_joint: None,
        start: joint(j),
        end: joint(j) + Vec3::from(ext),
        radius,
        part,
        extra_sites,
    }));
    out
}

fn ring_frame(dir: &Vec3) -> (Vec3, Vec3) {
    let reference = if dir.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let u = dir.cross(&reference).normalize();
    let v = dir.cross(&u);
    (u, v)
}

/// Builds the toy body model. Deterministic: no randomness involved.
pub fn toy_model() -> Result<BodyModel> {
    let m = PARENTS.len();
    let segs = segments();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut radial: Vec<Vec3> = Vec::new();
    let mut owner: Vec<usize> = Vec::new();
    let mut weights: Vec<Vec<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut ring_start: Vec<[usize; 4]> = Vec::new();

    for (si, seg) in segs.iter().enumerate() {
        let axis = seg.end - seg.start;
        let dir = axis.normalize();
        let (u, v) = ring_frame(&dir);
        let prev = PARENTS[seg.driver];
        let mut starts = [0; 4];
        for (r, &s) in RING_POSITIONS.iter().enumerate() {
            starts[r] = vertices.len();
            let center = seg.start + axis * s;
            let mut w = vec![0.0; m];
            let w_prev = if prev >= 0 { 0.5 * (1.0 - s / BLEND).max(0.0) } else { 0.0 };
            let w_next = if seg.end_joint.is_some() { 0.5 * ((s - 1.0 + BLEND) / BLEND).max(0.0) } else { 0.0 };
            if prev >= 0 {
                w[prev as usize] += w_prev;
            }
            if let Some(e) = seg.end_joint {
                w[e] += w_next;
            }
            w[seg.driver] += 1.0 - w_prev - w_next;
            for k in 0..RING_SIZE {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / RING_SIZE as f64;
                let dirk = u * angle.cos() + v * angle.sin();
                vertices.push(center + dirk * seg.radius);
                radial.push(dirk);
                owner.push(si);
                weights.push(w.clone());
            }
        }
        let mut push_face = |f: [usize; 3], outward: Vec3, verts: &Vec<Vec3>| {
            let n = crate::geometry::face_normal(verts, &f);
            faces.push(if n.dot(&outward) >= 0.0 { f } else { [f[0], f[2], f[1]] });
        };
        for r in 0..RING_POSITIONS.len() - 1 {
            for k in 0..RING_SIZE {
                let k1 = (k + 1) % RING_SIZE;
                let (a, b) = (starts[r] + k, starts[r] + k1);
                let (c, d) = (starts[r + 1] + k1, starts[r + 1] + k);
                let outward = radial[a] + radial[b];
                push_face([a, b, c], outward, &vertices);
                push_face([a, c, d], outward, &vertices);
            }
        }
        if seg.end_joint.is_none() {
            let tip = vertices.len();
            vertices.push(seg.end);
            radial.push(dir);
            owner.push(si);
            let mut w = vec![0.0; m];
            w[seg.driver] = 1.0;
            weights.push(w);
            let last = starts[RING_POSITIONS.len() - 1];
            for k in 0..RING_SIZE {
                push_face([last + k, last + (k + 1) % RING_SIZE, tip], dir, &vertices);
            }
        }
        ring_start.push(starts);
    }
    let p = vertices.len();

    // joint regressor: mean of the ring centers adjacent to each joint
    let mut regressor = vec![0.0; m * p];
    for j in 0..m {
        let mut rings: Vec<usize> = Vec::new();
        for (si, seg) in segs.iter().enumerate() {
            if seg.driver == j {
                rings.push(ring_start[si][0]);
            }
            if seg.end_joint == Some(j) {
                rings.push(ring_start[si][RING_POSITIONS.len() - 1]);
            }
        }
        let w = 1.0 / (rings.len() * RING_SIZE) as f64;
        for start in rings {
            for k in 0..RING_SIZE {
                regressor[j * p + start + k] = w;
            }
        }
    }

    let mut blend = vec![0.0; p * 3 * SHAPE_DIM];
    for i in 0..p {
        let x = vertices[i];
        let seg = &segs[owner[i]];
        let r = radial[i];
        let side = x.x.signum();
        let mut dirs = [Vec3::zeros(); SHAPE_DIM];
        dirs[0] = Vec3::new(0.0, 0.03 * x.y, 0.0);
        dirs[1] = r * 0.01;
        if seg.part == Part::Torso {
            dirs[2] = r * 0.015;
            dirs[7] = Vec3::new(0.0, 0.0, 0.02 * r.z.max(0.0));
        }
        if seg.part == Part::Arm {
            dirs[3] = Vec3::new(0.04 * side * ((x.x.abs() - 0.07) / 0.8), 0.0, 0.0);
            dirs[9] = r * 0.008;
        }
        if seg.part == Part::Leg {
            dirs[4] = r * 0.01;
            dirs[6] = Vec3::new(0.012 * side, 0.0, 0.0);
        }
        if x.x.abs() > 0.07 && x.y > 1.3 {
            dirs[5] = Vec3::new(0.015 * side, 0.0, 0.0);
        }
        if seg.part == Part::Head {
            dirs[8] = r * 0.012;
        }
        for (k, d) in dirs.iter().enumerate() {
            for c in 0..3 {
                blend[(i * 3 + c) * SHAPE_DIM + k] = d[c];
            }
        }
    }

    let landmarks = LandmarkDictionary::new(landmark_patches(&segs, &ring_start))?;
    BodyModel::new(
        Tensor::new(&[p, 3], crate::geometry::flat_from_points(&vertices))?,
        Tensor::new(&[p, 3, SHAPE_DIM], blend)?,
        Tensor::new(&[m, p], regressor)?,
        Tensor::new(&[p, m], weights.concat())?,
        KinematicTree::from_encoded(&PARENTS)?,
        faces,
        landmarks,
    )
}

fn landmark_patches(segs: &[Segment], ring_start: &[[usize; 4]]) -> Vec<Patch> {
    const SUFFIX: [&str; 4] = ["A", "B", "C", "D"];
    // (ring, angle) per site; the first two are on opposite sides
    const SITES: [(usize, usize); 4] = [(1, 0), (2, 4), (1, 2), (2, 6)];
    let mut out = Vec::new();
    for (si, seg) in segs.iter().enumerate() {
        for (n, &(ring, angle)) in SITES.iter().take(2 + seg.extra_sites).enumerate() {
            let at = |r: usize, k: usize| ring_start[si][r] + (k + RING_SIZE) % RING_SIZE;
            let median = at(ring, angle);
            let mut others = Vec::new();
            for r in ring - 1..=ring + 1 {
                for dk in [RING_SIZE - 1, 0, 1] {
                    others.push(at(r, angle + dk));
                }
            }
            out.push(Patch::new(format!("{}{}", seg.name, SUFFIX[n]), median, others));
        }
    }
    out
}

/// Conservative per-joint Euler-angle limits (radians, intrinsic x-y-z),
/// used to derive quaternion bounds and to sample plausible poses.
pub fn joint_limits() -> Vec<[[f64; 2]; 3]> {
    let sym = |x: f64, y: f64, z: f64| [[-x, x], [-y, y], [-z, z]];
    vec![
        sym(0.3, 0.3, 0.3),
        [[-0.9, 0.4], [-0.3, 0.3], [-0.1, 0.4]],
        [[-0.9, 0.4], [-0.3, 0.3], [-0.4, 0.1]],
        sym(0.3, 0.3, 0.2),
        [[0.0, 1.3], [-0.05, 0.05], [-0.05, 0.05]],
        [[0.0, 1.3], [-0.05, 0.05], [-0.05, 0.05]],
        sym(0.3, 0.3, 0.2),
        sym(0.4, 0.2, 0.2),
        sym(0.4, 0.2, 0.2),
        sym(0.3, 0.3, 0.2),
        sym(0.2, 0.2, 0.2),
        sym(0.2, 0.2, 0.2),
        sym(0.4, 0.5, 0.3),
        sym(0.2, 0.2, 0.2),
        sym(0.2, 0.2, 0.2),
        sym(0.3, 0.4, 0.3),
        sym(0.6, 0.8, 0.8),
        sym(0.6, 0.8, 0.8),
        [[-0.1, 0.1], [-1.5, 0.0], [-0.1, 0.1]],
        [[-0.1, 0.1], [0.0, 1.5], [-0.1, 0.1]],
        sym(0.4, 0.4, 0.4),
        sym(0.4, 0.4, 0.4),
        sym(0.2, 0.2, 0.2),
        sym(0.2, 0.2, 0.2),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{points_from_flat, vertex_normals};

    #[test]
    fn toy_model_has_expected_layout() {
        let model = toy_model().unwrap();
        assert_eq!(model.joint_count(), 24);
        assert_eq!(model.landmark_count(), 67);
        assert_eq!(model.vertex_count(), 901);
        assert_eq!(joint_limits().len(), 24);
        assert!(model.landmarks().patches().iter().all(|p| p.vertices.len() == 9));
    }

    #[test]
    fn regressed_joints_are_near_the_skeleton() {
        let joints = points_from_flat(toy_model().unwrap().template_joints().data());
        for (j, p) in joints.iter().enumerate() {
            assert!((p - joint(j)).norm() < 0.06, "joint {j} at {p:?}");
        }
    }

    #[test]
    fn normals_point_away_from_bones() {
        let model = toy_model().unwrap();
        let verts = points_from_flat(model.template().data());
        assert!(vertex_normals(&verts, model.faces()).is_ok());
    }

    #[test]
    fn archive_round_trip() {
        let model = toy_model().unwrap();
        let back = BodyModel::from_archive(&model.to_archive()).unwrap();
        assert_eq!(back.template(), model.template());
        assert_eq!(back.landmarks(), model.landmarks());
        assert_eq!(back.tree(), model.tree());
    }
}
