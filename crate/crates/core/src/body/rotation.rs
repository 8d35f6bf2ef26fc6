use std::sync::OnceLock;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

// Maps the 16 pairwise products q_a·q_b (a, b in w,x,y,z order) to the nine
// rotation entries of a unit quaternion, minus the identity.
fn product_map() -> &'static (Tensor, Tensor) {
    static MAP: OnceLock<(Tensor, Tensor)> = OnceLock::new();
    MAP.get_or_init(|| {
        const W: usize = 0;
        const X: usize = 1;
        const Y: usize = 2;
        const Z: usize = 3;
        let terms: [&[(usize, usize, f64)]; 9] = [
            &[(Y, Y, -2.0), (Z, Z, -2.0)],
            &[(X, Y, 2.0), (W, Z, -2.0)],
            &[(X, Z, 2.0), (W, Y, 2.0)],
            &[(X, Y, 2.0), (W, Z, 2.0)],
            &[(X, X, -2.0), (Z, Z, -2.0)],
            &[(Y, Z, 2.0), (W, X, -2.0)],
            &[(X, Z, 2.0), (W, Y, -2.0)],
            &[(Y, Z, 2.0), (W, X, 2.0)],
            &[(X, X, -2.0), (Y, Y, -2.0)],
        ];
        let mut c = vec![0.0; 16 * 9];
        for (entry, list) in terms.iter().enumerate() {
            for &(a, b, coef) in list.iter() {
                c[(a * 4 + b) * 9 + entry] += coef;
            }
        }
        let identity = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        (
            Tensor::new(&[16, 9], c).unwrap(),
            Tensor::new(&[9], identity).unwrap(),
        )
    })
}

/// Converts `[.., 4]` quaternions in (w, x, y, z) order to `[.., 3, 3]`
/// rotation matrices. Each quaternion is normalized first, so `q` and any
/// positive multiple give the same rotation, as do `q` and `-q`.
pub fn quat_to_rotmat(tape: &Tape, quats: &Tensor) -> Result<Tensor> {
    let shape = quats.shape();
    if shape.last() != Some(&4) {
        return Err(Error::dim("quat_to_rotmat", format!("expected [.., 4], got {shape:?}")));
    }
    let lead = &shape[..shape.len() - 1];
    let q = tape.quat_normalize(quats)?;
    let col = tape.reshape(&q, &[lead, &[4, 1]].concat())?;
    let row = tape.reshape(&q, &[lead, &[1, 4]].concat())?;
    let outer = tape.matmul(&col, &row)?;
    let products = tape.reshape(&outer, &[lead, &[16]].concat())?;
    let (map, identity) = product_map();
    let entries = tape.add(&tape.matmul(&products, map)?, identity)?;
    tape.reshape(&entries, &[lead, &[3, 3]].concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Quaternion, UnitQuaternion, Vector3};
    use proptest::prelude::*;

    fn rot(q: [f64; 4]) -> Vec<f64> {
        quat_to_rotmat(&Tape::new(), &Tensor::new(&[1, 4], q.to_vec()).unwrap())
            .unwrap()
            .to_vec()
    }

    fn apply(r: &[f64], v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = (0..3).map(|j| r[3 * i + j] * v[j]).sum();
        }
        out
    }

    #[test]
    fn identity_quaternion() {
        assert_eq!(rot([1.0, 0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn quarter_turn_about_x() {
        let h = 0.5_f64.sqrt();
        let out = apply(&rot([h, h, 0.0, 0.0]), [0.0, 1.0, 0.0]);
        for (a, b) in out.iter().zip([0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_quaternion() {
        let err = quat_to_rotmat(&Tape::new(), &Tensor::new(&[1, 4], vec![0.0, 1e-9, 0.0, 0.0]).unwrap());
        assert!(matches!(err, Err(Error::DegenerateRotation { .. })));
    }

    proptest! {
        #[test]
        fn double_cover_and_scale_invariance(
            w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64, s in 0.1..10.0f64
        ) {
            prop_assume!((w * w + x * x + y * y + z * z).sqrt() > 1e-3);
            let a = rot([w, x, y, z]);
            let b = rot([-w, -x, -y, -z]);
            let c = rot([s * w, s * x, s * y, s * z]);
            for i in 0..9 {
                prop_assert!((a[i] - b[i]).abs() < 1e-12);
                prop_assert!((a[i] - c[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn agrees_with_reference_conversion(
            w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64,
            v in proptest::array::uniform3(-1.0..1.0f64)
        ) {
            prop_assume!((w * w + x * x + y * y + z * z).sqrt() > 1e-3);
            let ours = apply(&rot([w, x, y, z]), v);
            let reference = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
                * Vector3::new(v[0], v[1], v[2]);
            for i in 0..3 {
                prop_assert!((ours[i] - reference[i]).abs() < 1e-12);
            }
        }
    }
}
