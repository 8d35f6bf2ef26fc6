//! Small hand-built models for tests and numeric checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{LandmarkDictionary, Patch};
use crate::geometry::{flat_from_points, icosphere};

use super::model::{BodyModel, KinematicTree, SHAPE_DIM};

/// Single-joint model on a unit icosphere with four one-ring landmark patches.
pub fn sphere_model(subdivisions: usize) -> BodyModel {
    let (vertices, faces) = icosphere(subdivisions);
    let p = vertices.len();
    let patches = (0..4)
        .map(|v| {
            let ring: Vec<usize> = faces.iter().filter(|f| f.contains(&v)).flatten().copied().collect();
            Patch::new(format!("S{v}"), v, ring)
        })
        .collect();
    BodyModel::new(
        Tensor::new(&[p, 3], flat_from_points(&vertices)).unwrap(),
        Tensor::zeros(&[p, 3, SHAPE_DIM]),
        Tensor::full(&[1, p], 1.0 / p as f64),
        Tensor::full(&[p, 1], 1.0),
        KinematicTree::new(vec![None]).unwrap(),
        faces,
        LandmarkDictionary::new(patches).unwrap(),
    )
    .unwrap()
}

/// Two joints: root at the origin, child at (0,1,0). Vertex 2 at (0,2,0)
/// follows the child, vertex 3 at (1,0,0) the root.
pub fn two_link_model() -> BodyModel {
    let template = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0];
    BodyModel::new(
        Tensor::new(&[4, 3], template).unwrap(),
        Tensor::zeros(&[4, 3, SHAPE_DIM]),
        Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
        KinematicTree::new(vec![None, Some(0)]).unwrap(),
        vec![[0, 3, 1], [1, 3, 2]],
        LandmarkDictionary::new(vec![Patch::new("TIP", 2, [1]), Patch::new("SIDE", 3, [0])]).unwrap(),
    )
    .unwrap()
}

/// Random branching 4-joint model with dense weights and blendshapes, small
/// enough for finite-difference checks.
pub fn tiny_model(seed: u64) -> BodyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, m) = (14, 4);
    let template: Vec<f64> = (0..p * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let blend: Vec<f64> = (0..p * 3 * SHAPE_DIM).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let mut regressor = Vec::with_capacity(m * p);
    for _ in 0..m {
        let row: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = row.iter().sum();
        regressor.extend(row.iter().map(|w| w / s));
    }
    let mut weights = Vec::with_capacity(p * m);
    for _ in 0..p {
        let row: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        weights.extend(row.iter().map(|w| w / s));
    }
    let faces = (0..p - 2).map(|i| [i, i + 1, i + 2]).collect();
    let patches = (0..5)
        .map(|i| Patch::new(format!("T{i}"), 2 * i, [2 * i + 1, 2 * i + 2]))
        .collect();
    BodyModel::new(
        Tensor::new(&[p, 3], template).unwrap(),
        Tensor::new(&[p, 3, SHAPE_DIM], blend).unwrap(),
        Tensor::new(&[m, p], regressor).unwrap(),
        Tensor::new(&[p, m], weights).unwrap(),
        KinematicTree::new(vec![None, Some(0), Some(1), Some(0)]).unwrap(),
        faces,
        LandmarkDictionary::new(patches).unwrap(),
    )
    .unwrap()
}
