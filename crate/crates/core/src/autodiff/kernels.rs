//! Forward and vector-Jacobian kernels for every primitive.

use std::sync::Arc;

use super::primitive::Primitive;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Quaternions with a norm below this cannot be turned into rotations.
pub const MIN_QUAT_NORM: f64 = 1e-8;

// Products below this many multiply-adds skip the blocked GEMM.
const SMALL_GEMM: usize = 512;

/// `c = a · b (+ c if accumulate)` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                if accumulate {
                    c[i * n + j] += s;
                } else {
                    c[i * n + j] = s;
                }
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every strided element addressed by the
    // given dimensions (checked by the shape rules of the callers).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_last(shape: &[usize], name: &'static str) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&d) => Ok((shape.len() - 1, d)),
        None => Err(Error::dim(name, "rank-0 input")),
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

#[derive(Clone, Copy, Debug)]
enum MatMulLayout {
    /// `[.., n, k] x [k, p]`: the right operand is shared.
    SharedRight { rows: usize, k: usize, p: usize },
    /// `[n, k] x [.., k, p]`: the left operand is shared.
    SharedLeft { batch: usize, n: usize, k: usize, p: usize },
    /// `[.., n, k] x [.., k, p]` with equal batch extents.
    Batched { batch: usize, n: usize, k: usize, p: usize },
}

fn matmul_layout(a: &[usize], b: &[usize], op: &'static str) -> Result<(MatMulLayout, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim(op, format!("operands must be at least rank 2: {a:?} x {b:?}")));
    }
    let (n, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim(op, format!("inner extents differ: {a:?} x {b:?}")));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    if b_batch.is_empty() {
        let mut out = a.to_vec();
        *out.last_mut().unwrap() = p;
        let rows = a_batch.iter().product::<usize>() * n;
        Ok((MatMulLayout::SharedRight { rows, k, p }, out))
    } else if a_batch.is_empty() {
        let mut out = b.to_vec();
        let r = out.len();
        out[r - 2] = n;
        let batch = b_batch.iter().product();
        Ok((MatMulLayout::SharedLeft { batch, n, k, p }, out))
    } else if a_batch == b_batch {
        let mut out = a.to_vec();
        *out.last_mut().unwrap() = p;
        let batch = a_batch.iter().product();
        Ok((MatMulLayout::Batched { batch, n, k, p }, out))
    } else {
        Err(Error::dim(op, format!("batch extents differ: {a:?} x {b:?}")))
    }
}

fn matmul_forward(a: &[f64], b: &[f64], layout: MatMulLayout, out_len: usize) -> Vec<f64> {
    let mut c = vec![0.0; out_len];
    match layout {
        MatMulLayout::SharedRight { rows, k, p } => gemm(rows, k, p, a, k, 1, b, p, 1, &mut c, false),
        MatMulLayout::SharedLeft { batch, n, k, p } => {
            for t in 0..batch {
                gemm(n, k, p, a, k, 1, &b[t * k * p..], p, 1, &mut c[t * n * p..], false);
            }
        }
        MatMulLayout::Batched { batch, n, k, p } => {
            for t in 0..batch {
                gemm(
                    n,
                    k,
                    p,
                    &a[t * n * k..],
                    k,
                    1,
                    &b[t * k * p..],
                    p,
                    1,
                    &mut c[t * n * p..],
                    false,
                );
            }
        }
    }
    c
}

/// Returns `(dA, dB)` for `C = A·B` given `dC`.
fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    layout: MatMulLayout,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    match layout {
        MatMulLayout::SharedRight { rows, k, p } => {
            if let Some(ga) = ga.as_mut() {
                // dA = G · Bᵀ
                gemm(rows, p, k, g, p, 1, b, 1, p, ga, false);
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · G
                gemm(k, rows, p, a, 1, k, g, p, 1, gb, false);
            }
        }
        MatMulLayout::SharedLeft { batch, n, k, p } => {
            for t in 0..batch {
                let gt = &g[t * n * p..];
                if let Some(ga) = ga.as_mut() {
                    gemm(n, p, k, gt, p, 1, &b[t * k * p..], 1, p, ga, true);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(k, n, p, a, 1, k, gt, p, 1, &mut gb[t * k * p..], false);
                }
            }
        }
        MatMulLayout::Batched { batch, n, k, p } => {
            for t in 0..batch {
                let gt = &g[t * n * p..];
                if let Some(ga) = ga.as_mut() {
                    gemm(n, p, k, gt, p, 1, &b[t * k * p..], 1, p, &mut ga[t * n * k..], false);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(k, n, p, &a[t * n * k..], 1, k, gt, p, 1, &mut gb[t * k * p..], false);
                }
            }
        }
    }
    (ga, gb)
}

/// Outer/middle/inner extents around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_plan(shape: &[usize], axes: &[usize], op: &'static str) -> Result<(Vec<usize>, Vec<usize>)> {
    for (i, &ax) in axes.iter().enumerate() {
        if ax >= shape.len() {
            return Err(Error::dim(op, format!("axis {ax} out of range for {shape:?}")));
        }
        if axes[..i].contains(&ax) {
            return Err(Error::dim(op, format!("repeated axis {ax}")));
        }
    }
    let mut out_shape = Vec::new();
    // stride into the output for each input axis, 0 for reduced axes
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for ax in (0..shape.len()).rev() {
        if !axes.contains(&ax) {
            out_strides[ax] = stride;
            stride *= shape[ax];
        }
    }
    for (ax, &d) in shape.iter().enumerate() {
        if !axes.contains(&ax) {
            out_shape.push(d);
        }
    }
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    Ok((out_shape, out_strides))
}

/// Calls `f(input_flat, output_flat)` for every input element.
fn for_each_reduced(shape: &[usize], out_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut out = 0usize;
    for flat in 0..total {
        f(flat, out);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            out += out_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            out -= out_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(width).zip(y.chunks_mut(width)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (yi, xi) in yr.iter_mut().zip(xr) {
            *yi = (xi - max).exp();
            s += *yi;
        }
        for yi in yr.iter_mut() {
            *yi /= s;
        }
    }
    y
}

fn argmin_in(row: &[f64], set: &[usize]) -> usize {
    let mut best = set[0];
    for &k in &set[1..] {
        if row[k] < row[best] || (row[k] == row[best] && k < best) {
            best = k;
        }
    }
    best
}

fn check_arity(prim: &Primitive, inputs: &[&Tensor]) -> Result<()> {
    let want = prim.arity();
    match want {
        Some(n) if n != inputs.len() => Err(Error::dim(
            prim.name(),
            format!("expects {n} inputs, got {}", inputs.len()),
        )),
        None if inputs.is_empty() => Err(Error::dim(prim.name(), "expects at least one input")),
        _ => Ok(()),
    }
}

/// Evaluates a primitive; the result is not attached to any tape.
pub(crate) fn forward(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
    check_arity(prim, inputs)?;
    let name = prim.name();
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if !is_suffix(b.shape(), a.shape()) {
                return Err(Error::dim(
                    name,
                    format!("{:?} and {:?} (right operand must match trailing extents)", a.shape(), b.shape()),
                ));
            }
            let n = b.len();
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<f64> = match prim {
                Primitive::Add => ad.iter().enumerate().map(|(i, x)| x + bd[i % n]).collect(),
                Primitive::Sub => ad.iter().enumerate().map(|(i, x)| x - bd[i % n]).collect(),
                _ => ad.iter().enumerate().map(|(i, x)| x * bd[i % n]).collect(),
            };
            Ok(Tensor::from_parts(a.shape_arc(), data.into()))
        }
        Primitive::MatMul => {
            let (layout, out) = matmul_layout(inputs[0].shape(), inputs[1].shape(), name)?;
            let len = out.iter().product();
            Ok(Tensor::raw(out, matmul_forward(inputs[0].data(), inputs[1].data(), layout, len)))
        }
        Primitive::TransformCompose => {
            let (a, b) = (inputs[0].shape(), inputs[1].shape());
            let ok = a.len() >= 2 && a == b && a[a.len() - 2..] == [4, 4];
            if !ok {
                return Err(Error::dim(name, format!("needs matching [.., 4, 4] operands, got {a:?} and {b:?}")));
            }
            let (layout, out) = matmul_layout(a, b, name)?;
            let len = out.iter().product();
            Ok(Tensor::raw(out, matmul_forward(inputs[0].data(), inputs[1].data(), layout, len)))
        }
        Primitive::Softmax => {
            let x = inputs[0];
            let (_, w) = split_last(x.shape(), name)?;
            Ok(Tensor::from_parts(x.shape_arc(), softmax_rows(x.data(), w).into()))
        }
        Primitive::Relu => Ok(map(inputs[0], |v| v.max(0.0))),
        Primitive::Abs => Ok(map(inputs[0], f64::abs)),
        Primitive::MaxConst(c) => {
            let c = *c;
            Ok(map(inputs[0], move |v| if v > c { v } else { c }))
        }
        Primitive::ScaleShift { scale, shift } => {
            let (s, t) = (*scale, *shift);
            Ok(map(inputs[0], move |v| s * v + t))
        }
        Primitive::MinOverSets(sets) => {
            let x = inputs[0];
            let (last, k) = split_last(x.shape(), name)?;
            validate_sets(sets, k, name)?;
            let mut out_shape = x.shape()[..last].to_vec();
            out_shape.push(sets.len());
            let mut data = Vec::with_capacity(x.len() / k * sets.len());
            for row in x.data().chunks(k) {
                for set in sets.iter() {
                    data.push(row[argmin_in(row, set)]);
                }
            }
            Ok(Tensor::raw(out_shape, data))
        }
        Primitive::Sum(axes) | Primitive::Mean(axes) => {
            let x = inputs[0];
            let (out_shape, strides) = reduce_plan(x.shape(), axes, name)?;
            let out_len: usize = out_shape.iter().product();
            let mut data = vec![0.0; out_len];
            if out_len == 1 {
                data[0] = x.data().iter().sum();
            } else {
                let xd = x.data();
                for_each_reduced(x.shape(), &strides, |i, o| data[o] += xd[i]);
            }
            if matches!(prim, Primitive::Mean(_)) {
                let count = (x.len() / out_len) as f64;
                data.iter_mut().for_each(|v| *v /= count);
            }
            Ok(Tensor::raw(out_shape, data))
        }
        Primitive::Gather { axis, indices } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(Error::dim(name, format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let (outer, mid, inner) = around_axis(x.shape(), *axis);
            if let Some(bad) = indices.iter().find(|&&i| i >= mid) {
                return Err(Error::dim(name, format!("index {bad} out of range for extent {mid}")));
            }
            if indices.is_empty() {
                return Err(Error::dim(name, "empty index list"));
            }
            let mut out_shape = x.shape().to_vec();
            out_shape[*axis] = indices.len();
            let xd = x.data();
            let mut data = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &j in indices.iter() {
                    let start = (o * mid + j) * inner;
                    data.extend_from_slice(&xd[start..start + inner]);
                }
            }
            Ok(Tensor::raw(out_shape, data))
        }
        Primitive::Concat { axis } => {
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(Error::dim(name, format!("axis {axis} out of range for {first:?}")));
            }
            let mut total_mid = 0;
            for t in inputs {
                let s = t.shape();
                let same = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !same {
                    return Err(Error::dim(name, format!("{first:?} vs {s:?} along axis {axis}")));
                }
                total_mid += s[*axis];
            }
            let (outer, _, inner) = around_axis(first, *axis);
            let mut out_shape = first.to_vec();
            out_shape[*axis] = total_mid;
            let mut data = Vec::with_capacity(outer * total_mid * inner);
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Ok(Tensor::raw(out_shape, data))
        }
        Primitive::Dropout => {
            let (x, mask) = (inputs[0], inputs[1]);
            if x.shape() != mask.shape() {
                return Err(Error::dim(name, format!("mask {:?} for input {:?}", mask.shape(), x.shape())));
            }
            let data: Vec<f64> = x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
            Ok(Tensor::from_parts(x.shape_arc(), data.into()))
        }
        Primitive::QuatNormalize => {
            let x = inputs[0];
            let (_, w) = split_last(x.shape(), name)?;
            if w != 4 {
                return Err(Error::dim(name, format!("last extent must be 4, got {:?}", x.shape())));
            }
            let mut data = x.to_vec();
            for (i, q) in data.chunks_mut(4).enumerate() {
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > MIN_QUAT_NORM) {
                    return Err(Error::DegenerateRotation { index: i, norm });
                }
                q.iter_mut().for_each(|v| *v /= norm);
            }
            Ok(Tensor::from_parts(x.shape_arc(), data.into()))
        }
        Primitive::Reshape(shape) => {
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
                return Err(Error::dim(name, format!("{:?} -> {shape:?}", x.shape())));
            }
            Ok(Tensor::from_parts(shape.as_slice().into(), x.data_arc()))
        }
        Primitive::Transpose => {
            let x = inputs[0];
            if x.rank() < 2 {
                return Err(Error::dim(name, format!("rank {} input", x.rank())));
            }
            let r = x.rank();
            let (n, m) = (x.shape()[r - 2], x.shape()[r - 1]);
            let mut out_shape = x.shape().to_vec();
            out_shape.swap(r - 2, r - 1);
            Ok(Tensor::raw(out_shape, transpose_blocks(x.data(), n, m)))
        }
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_parts(x.shape_arc(), data.into())
}

fn transpose_blocks(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(n * m).zip(out.chunks_mut(n * m)) {
        for i in 0..n {
            for j in 0..m {
                dst[j * n + i] = src[i * m + j];
            }
        }
    }
    out
}

fn validate_sets(sets: &Arc<Vec<Vec<usize>>>, k: usize, name: &'static str) -> Result<()> {
    for (s, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::dim(name, format!("index set {s} is empty")));
        }
        if let Some(bad) = set.iter().find(|&&i| i >= k) {
            return Err(Error::dim(name, format!("index {bad} in set {s} out of range for extent {k}")));
        }
    }
    Ok(())
}

/// Vector-Jacobian products for every input flagged in `needs`.
pub(crate) fn backward(
    prim: &Primitive,
    inputs: &[Tensor],
    output: &Tensor,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let n = b.len();
            let sign = if matches!(prim, Primitive::Sub) { -1.0 } else { 1.0 };
            if needs[0] {
                grads[0] = Some(match prim {
                    Primitive::Mul => g.iter().enumerate().map(|(i, gi)| gi * b[i % n]).collect(),
                    _ => g.to_vec(),
                });
            }
            if needs[1] {
                let mut gb = vec![0.0; n];
                match prim {
                    Primitive::Mul => {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % n] += gi * a[i];
                        }
                    }
                    _ => {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % n] += sign * gi;
                        }
                    }
                }
                grads[1] = Some(gb);
            }
        }
        Primitive::MatMul | Primitive::TransformCompose => {
            let (layout, _) = matmul_layout(inputs[0].shape(), inputs[1].shape(), prim.name())
                .expect("shape checked in forward");
            let (ga, gb) = matmul_backward(inputs[0].data(), inputs[1].data(), g, layout, needs[0], needs[1]);
            grads[0] = ga;
            grads[1] = gb;
        }
        Primitive::Softmax => {
            let w = *inputs[0].shape().last().unwrap();
            let y = output.data();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yi), gi) in out.iter_mut().zip(yr).zip(gr) {
                    *o = yi * (gi - dot);
                }
            }
            grads[0] = Some(gx);
        }
        Primitive::Relu => {
            let x = inputs[0].data();
            grads[0] = Some(g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect());
        }
        Primitive::Abs => {
            let x = inputs[0].data();
            grads[0] = Some(
                g.iter()
                    .zip(x)
                    .map(|(gi, xi)| {
                        if *xi > 0.0 {
                            *gi
                        } else if *xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
        }
        Primitive::MaxConst(c) => {
            let x = inputs[0].data();
            grads[0] = Some(g.iter().zip(x).map(|(gi, xi)| if xi > c { *gi } else { 0.0 }).collect());
        }
        Primitive::ScaleShift { scale, .. } => {
            grads[0] = Some(g.iter().map(|gi| gi * scale).collect());
        }
        Primitive::MinOverSets(sets) => {
            let x = inputs[0].data();
            let k = *inputs[0].shape().last().unwrap();
            let s = sets.len();
            let mut gx = vec![0.0; x.len()];
            for (r, row) in x.chunks(k).enumerate() {
                for (j, set) in sets.iter().enumerate() {
                    gx[r * k + argmin_in(row, set)] += g[r * s + j];
                }
            }
            grads[0] = Some(gx);
        }
        Primitive::Sum(axes) | Primitive::Mean(axes) => {
            let shape = inputs[0].shape();
            let (_, strides) = reduce_plan(shape, axes, prim.name()).expect("checked in forward");
            let scale = if matches!(prim, Primitive::Mean(_)) {
                g.len() as f64 / inputs[0].len() as f64
            } else {
                1.0
            };
            let mut gx = vec![0.0; inputs[0].len()];
            if g.len() == 1 {
                gx.iter_mut().for_each(|v| *v = g[0] * scale);
            } else {
                for_each_reduced(shape, &strides, |i, o| gx[i] = g[o] * scale);
            }
            grads[0] = Some(gx);
        }
        Primitive::Gather { axis, indices } => {
            let (outer, mid, inner) = around_axis(inputs[0].shape(), *axis);
            let mut gx = vec![0.0; inputs[0].len()];
            let mut src = 0;
            for o in 0..outer {
                for &j in indices.iter() {
                    let start = (o * mid + j) * inner;
                    for (d, s) in gx[start..start + inner].iter_mut().zip(&g[src..src + inner]) {
                        *d += s;
                    }
                    src += inner;
                }
            }
            grads[0] = Some(gx);
        }
        Primitive::Concat { axis } => {
            let (outer, total_mid, inner) = around_axis(output.shape(), *axis);
            let mut offset = 0;
            for (t, input) in inputs.iter().enumerate() {
                let mid = input.shape()[*axis];
                if needs[t] {
                    let mut gt = Vec::with_capacity(input.len());
                    for o in 0..outer {
                        let start = (o * total_mid + offset) * inner;
                        gt.extend_from_slice(&g[start..start + mid * inner]);
                    }
                    grads[t] = Some(gt);
                }
                offset += mid;
            }
        }
        Primitive::Dropout => {
            let (x, mask) = (inputs[0].data(), inputs[1].data());
            if needs[0] {
                grads[0] = Some(g.iter().zip(mask).map(|(a, b)| a * b).collect());
            }
            if needs[1] {
                grads[1] = Some(g.iter().zip(x).map(|(a, b)| a * b).collect());
            }
        }
        Primitive::QuatNormalize => {
            let x = inputs[0].data();
            let y = output.data();
            let mut gx = vec![0.0; x.len()];
            for ((q, qn), (gq, out)) in x.chunks(4).zip(y.chunks(4)).zip(g.chunks(4).zip(gx.chunks_mut(4))) {
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = qn.iter().zip(gq).map(|(a, b)| a * b).sum();
                for i in 0..4 {
                    out[i] = (gq[i] - qn[i] * dot) / norm;
                }
            }
            grads[0] = Some(gx);
        }
        Primitive::Reshape(_) => grads[0] = Some(g.to_vec()),
        Primitive::Transpose => {
            let s = output.shape();
            let r = s.len();
            // output is [.., m, n]; transposing it back yields [.., n, m]
            grads[0] = Some(transpose_blocks(g, s[r - 2], s[r - 1]));
        }
    }
    for (i, need) in needs.iter().enumerate() {
        if !need {
            grads[i] = None;
        }
    }
    grads
}
