use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-joint Euler-angle box, radians, applied as intrinsic x then y then z.
pub type EulerLimits = [[f64; 2]; 3];

/// Rotation `Rx(a)·Ry(b)·Rz(c)` as a (w, x, y, z) quaternion.
pub fn euler_to_quat(angles: [f64; 3]) -> [f64; 4] {
    let q = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), angles[0])
        * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angles[1])
        * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angles[2]);
    let q = q.into_inner();
    [q.w, q.i, q.j, q.k]
}

/// Uniform sample from an Euler box, scaled about zero by `scale`.
pub fn sample_euler<R: Rng>(limits: &EulerLimits, scale: f64, rng: &mut R) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (a, [lo, hi]) in out.iter_mut().zip(limits) {
        let (lo, hi) = (lo * scale, hi * scale);
        *a = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    }
    out
}

/// Component-wise box on raw quaternion outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuaternionBounds {
    pub lower: Vec<[f64; 4]>,
    pub upper: Vec<[f64; 4]>,
}

impl QuaternionBounds {
    pub fn new(lower: Vec<[f64; 4]>, upper: Vec<[f64; 4]>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::Config(format!(
                "bounds need matching non-empty tables, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            let identity = [1.0, 0.0, 0.0, 0.0];
            for c in 0..4 {
                if !(lo[c] <= hi[c]) {
                    return Err(Error::Config(format!("joint {j}: lower bound above upper bound")));
                }
                if identity[c] < lo[c] || identity[c] > hi[c] {
                    return Err(Error::Config(format!("joint {j}: identity rotation outside bounds")));
                }
            }
        }
        Ok(QuaternionBounds { lower, upper })
    }

    /// Unconstrained box `[-1, 1]` on every component.
    pub fn full(m: usize) -> Self {
        QuaternionBounds {
            lower: vec![[-1.0; 4]; m],
            upper: vec![[1.0; 4]; m],
        }
    }

    /// Component-wise min/max of quaternions sampled from each Euler box,
    /// widened to contain the identity and every box corner. `root` gets the
    /// full `[-1, 1]` box since global orientation is unconstrained.
    pub fn from_euler_limits(limits: &[EulerLimits], root: Option<usize>, samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lower = Vec::with_capacity(limits.len());
        let mut upper = Vec::with_capacity(limits.len());
        for (j, lim) in limits.iter().enumerate() {
            if Some(j) == root {
                lower.push([-1.0; 4]);
                upper.push([1.0; 4]);
                continue;
            }
            let mut lo = [1.0_f64, 0.0, 0.0, 0.0];
            let mut hi = lo;
            let mut include = |q: [f64; 4]| {
                for c in 0..4 {
                    lo[c] = lo[c].min(q[c]);
                    hi[c] = hi[c].max(q[c]);
                }
            };
            for corner in 0..8 {
                let a = [0, 1, 2].map(|k| lim[k][(corner >> k) & 1]);
                include(euler_to_quat(a));
            }
            for _ in 0..samples {
                include(euler_to_quat(sample_euler(lim, 1.0, &mut rng)));
            }
            lower.push(lo);
            upper.push(hi);
        }
        QuaternionBounds { lower, upper }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, joint: usize, q: &[f64; 4]) -> bool {
        (0..4).all(|c| q[c] >= self.lower[joint][c] && q[c] <= self.upper[joint][c])
    }
}
