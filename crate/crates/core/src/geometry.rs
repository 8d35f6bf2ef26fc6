//! Plain (non-taped) triangle-mesh helpers shared by inflation, the
//! synthetic generator and the evaluation metrics.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

pub fn points_from_flat(data: &[f64]) -> Vec<Vec3> {
    data.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

pub fn flat_from_points(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Twice the area times the unit normal, following the winding order.
pub fn face_normal(vertices: &[Vec3], f: &[usize; 3]) -> Vec3 {
    (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]))
}

/// Area-weighted vertex normals. A vertex whose incident faces all have
/// zero area (or that touches no face) has no defined normal.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<Vec3>> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for f in faces {
        let n = face_normal(vertices, f);
        for &i in f {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                Ok(n / len)
            } else {
                Err(Error::ModelValidation(format!("vertex {i} has no well-defined normal")))
            }
        })
        .collect()
}

/// Samples `n` points uniformly by area over the given faces.
pub fn sample_surface<R: Rng>(vertices: &[Vec3], faces: &[[usize; 3]], n: usize, rng: &mut R) -> Vec<Vec3> {
    let mut cumulative = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for f in faces {
        total += face_normal(vertices, f).norm();
        cumulative.push(total);
    }
    (0..n)
        .map(|_| {
            let t = rng.gen::<f64>() * total;
            let k = cumulative.partition_point(|&c| c <= t).min(faces.len() - 1);
            let [a, b] = barycentric(rng);
            let f = &faces[k];
            vertices[f[0]] * (1.0 - a - b) + vertices[f[1]] * a + vertices[f[2]] * b
        })
        .collect()
}

/// Uniform barycentric weights `(a, b)` for the second and third corner.
pub fn barycentric<R: Rng>(rng: &mut R) -> [f64; 2] {
    let (mut a, mut b) = (rng.gen::<f64>(), rng.gen::<f64>());
    if a + b > 1.0 {
        a = 1.0 - a;
        b = 1.0 - b;
    }
    [a, b]
}

/// Closest point to `p` on triangle `(a, b, c)`.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Exact point-to-mesh distance by brute force over all faces.
pub fn distance_to_mesh(vertices: &[Vec3], faces: &[[usize; 3]], p: &Vec3) -> f64 {
    faces
        .iter()
        .map(|f| (closest_point_on_triangle(p, &vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) - p).norm())
        .fold(f64::INFINITY, f64::min)
}

/// Index of and distance to the nearest of `targets`.
pub fn nearest(targets: &[Vec3], query: &Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, t) in targets.iter().enumerate() {
        let d = (t - query).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Unit icosphere with `subdivisions` rounds of 4-way face splitting.
pub fn icosphere(subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vertices.push(((vertices[a] + vertices[b]) / 2.0).normalize());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (vertices, faces)
}

/// Wavefront-style text: `v x y z` lines then 1-based `f a b c` lines.
pub fn mesh_to_obj(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    for v in vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn mesh_from_obj(text: &str) -> std::result::Result<(Vec<Vec3>, Vec<[usize; 3]>), String> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .map(|t| t.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1)))
                    .collect::<std::result::Result<_, _>>()?;
                if c.len() < 3 {
                    return Err(format!("line {}: vertex needs 3 coordinates", n + 1));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                // accepts "i", "i/t" and "i/t/n" corner forms
                let idx: Vec<usize> = it
                    .map(|t| {
                        t.split('/')
                            .next()
                            .unwrap_or("")
                            .parse::<usize>()
                            .map_err(|e| format!("line {}: {e}", n + 1))
                    })
                    .collect::<std::result::Result<_, _>>()?;
                if idx.len() < 3 || idx.contains(&0) {
                    return Err(format!("line {}: bad face", n + 1));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
        return Err(format!("face {f:?} references a missing vertex"));
    }
    Ok((vertices, faces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn icosphere_is_closed_and_outward() {
        let (v, f) = icosphere(2);
        assert_eq!(v.len(), 162);
        assert_eq!(f.len(), 320);
        let normals = vertex_normals(&v, &f).unwrap();
        for (p, n) in v.iter().zip(&normals) {
            assert!(p.dot(n) > 0.99);
        }
    }

    #[test]
    fn isolated_vertex_has_no_normal() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        assert!(vertex_normals(&v, &[[0, 1, 2]]).is_err());
        assert!(vertex_normals(&v, &[[0, 1, 2], [0, 0, 3]]).is_err());
    }

    #[test]
    fn surface_samples_lie_on_faces() {
        let (v, f) = icosphere(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in sample_surface(&v, &f, 200, &mut rng) {
            let r = p.norm();
            assert!(r <= 1.0 + 1e-12 && r > 0.75);
        }
    }

    #[test]
    fn obj_round_trip_is_exact() {
        let (v, f) = icosphere(1);
        let (v2, f2) = mesh_from_obj(&mesh_to_obj(&v, &f)).unwrap();
        assert_eq!(v, v2);
        assert_eq!(f, f2);
    }

    #[test]
    fn nearest_picks_closest() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let (i, d) = nearest(&pts, &Vec3::new(0.8, 0.0, 0.0));
        assert_eq!(i, 1);
        assert!((d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn closest_point_beats_a_dense_barycentric_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = || Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        for _ in 0..200 {
            let (a, b, c, p) = (r(), r(), r(), r());
            let best = (closest_point_on_triangle(&p, &a, &b, &c) - p).norm();
            let n = 60;
            let mut grid = f64::INFINITY;
            for i in 0..=n {
                for j in 0..=n - i {
                    let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                    grid = grid.min((a * (1.0 - u - v) + b * u + c * v - p).norm());
                }
            }
            assert!(best <= grid + 1e-12);
            assert!(grid - best < 0.05);
        }
    }
}
