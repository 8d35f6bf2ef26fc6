//! Finite-difference verification of every loss and of the body forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape, Tensor};
use crate::body::fixtures::tiny_model;
use crate::body::{full_forward, SHAPE_DIM};
use crate::error::{Error, Result};
use crate::losses::{loss_beta, loss_dae, loss_joints, loss_phi, loss_surface, loss_unpose, QuaternionBounds, SurfaceIndex};

/// Relative error allowed between analytic and numeric gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Redraws allowed per requested point when a draw lands on a kink.
const REDRAWS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub name: &'static str,
    /// Points compared (all differentiable).
    pub points: usize,
    /// Draws discarded because they sat on a kink.
    pub redrawn: usize,
    pub worst_rel_error: f64,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_error <= GRADIENT_TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn quats(rng: &mut ChaCha8Rng, b: usize, m: usize) -> Tensor {
    let mut data = Vec::with_capacity(b * m * 4);
    while data.len() < b * m * 4 {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if q.iter().map(|x| x * x).sum::<f64>() > 0.09 {
            data.extend(q);
        }
    }
    Tensor::raw(vec![b, m, 4], data)
}

type Check = Box<dyn Fn(&Tape, &Tensor) -> Result<Tensor>>;

/// Compares gradients at `points` random differentiable inputs per check.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    let model = tiny_model(seed % 8);
    let index = SurfaceIndex::new(&model);
    let (b, m, l) = (2, model.joint_count(), model.landmark_count());
    let bounds = QuaternionBounds::new(vec![[0.2, -0.3, -0.3, -0.3]; m], vec![[1.0, 0.3, 0.3, 0.3]; m])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["dae", "phi", "beta", "joints", "surface", "unpose", "forward/pose", "forward/shape"];
    let mut out = Vec::new();
    for name in names {
        let mut check = GradientCheck {
            name,
            points: 0,
            redrawn: 0,
            worst_rel_error: 0.0,
        };
        while check.points < points {
            let (f, x): (Check, Tensor) = match name {
                "dae" => {
                    let target = random(&mut rng, &[b, l, 3], 0.5);
                    let mask = Tensor::raw(vec![b, l, 3], (0..b * l * 3).map(|_| f64::from(rng.gen_bool(0.7) as u8)).collect());
                    (Box::new(move |t, x| loss_dae(t, &target, x, &mask)), random(&mut rng, &[b, l, 3], 0.5))
                }
                "phi" => {
                    let bounds = bounds.clone();
                    (Box::new(move |t, x| loss_phi(t, x, &bounds)), quats(&mut rng, b, m))
                }
                "beta" => (Box::new(loss_beta), random(&mut rng, &[b, SHAPE_DIM], 3.0)),
                "joints" => {
                    let teacher = random(&mut rng, &[b, m, 3], 0.5);
                    (Box::new(move |t, x| loss_joints(t, &teacher, x)), random(&mut rng, &[b, m, 3], 0.5))
                }
                "surface" => {
                    let (model, index) = (model.clone(), index.clone());
                    let lm = random(&mut rng, &[b, l, 3], 0.5);
                    let betas = random(&mut rng, &[b, SHAPE_DIM], 2.0);
                    let f = move |t: &Tape, x: &Tensor| {
                        let posed = full_forward(t, x, &betas, &model)?;
                        loss_surface(t, &lm, &posed.vertices, &index)
                    };
                    (Box::new(f), quats(&mut rng, b, m))
                }
                "unpose" => {
                    let (model, index) = (model.clone(), index.clone());
                    let lm = random(&mut rng, &[b, l, 3], 0.5);
                    let joints = random(&mut rng, &[b, m, 3], 0.5);
                    let betas = random(&mut rng, &[b, SHAPE_DIM], 2.0);
                    let f = move |t: &Tape, x: &Tensor| {
                        let posed = full_forward(t, x, &betas, &model)?;
                        loss_unpose(t, &posed.rotations, &joints, &lm, &posed.rest_joints, &posed.rest_vertices, &model, &index)
                    };
                    (Box::new(f), quats(&mut rng, b, m))
                }
                "forward/pose" => {
                    let model = model.clone();
                    let betas = random(&mut rng, &[b, SHAPE_DIM], 2.0);
                    let w = random(&mut rng, &[b, model.vertex_count(), 3], 1.0);
                    let f = move |t: &Tape, x: &Tensor| {
                        let posed = full_forward(t, x, &betas, &model)?;
                        t.sum_all(&t.mul(&posed.vertices, &w)?)
                    };
                    (Box::new(f), quats(&mut rng, b, m))
                }
                _ => {
                    let model = model.clone();
                    let q = quats(&mut rng, b, m);
                    let w = random(&mut rng, &[b, model.vertex_count(), 3], 1.0);
                    let f = move |t: &Tape, x: &Tensor| {
                        let posed = full_forward(t, &q, x, &model)?;
                        t.sum_all(&t.mul(&posed.vertices, &w)?)
                    };
                    (Box::new(f), random(&mut rng, &[b, SHAPE_DIM], 2.0))
                }
            };
            let report = grad_check(f, &x, STEP, GRADIENT_TOLERANCE)?;
            if report.skipped() {
                check.redrawn += 1;
                if check.redrawn > REDRAWS * points {
                    return Err(Error::numeric(name, "no differentiable points found"));
                }
                continue;
            }
            check.points += 1;
            check.worst_rel_error = check.worst_rel_error.max(report.max_rel_error);
        }
        out.push(check);
    }
    Ok(out)
}
