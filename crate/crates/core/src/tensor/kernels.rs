//! Forward and backward rules for each [`Primitive`], on flat row-major slices.
//!
//! Backward rules only see the tensors listed in the primitive's saved set
//! plus shape metadata; anything else they would need is a contract violation.

use super::primitive::Primitive;
use super::value::Element;

pub(crate) struct Forward<T> {
    pub out: Vec<T>,
    /// Auxiliary tensors created by the op (layer-norm statistics, softmax
    /// probabilities of the fused loss).
    pub aux: Vec<(Vec<usize>, Vec<T>)>,
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let deriv = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * k * x * x);
    (value, deriv)
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize, bool) {
    let m = a[a.len() - 2];
    let k = a[a.len() - 1];
    let n = b[b.len() - 1];
    let batch = a[..a.len() - 2].iter().product();
    (batch, m, k, n, b.len() == 2)
}

pub(crate) fn matmul_forward<T: Element>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = if shared_rhs { 0 } else { bi * k * n };
        for i in 0..m {
            let row = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
            for p in 0..k {
                let av = a[a_off + i * k + p];
                let brow = &b[b_off + p * n..b_off + (p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    }
    out
}

pub(crate) fn forward<T: Element>(op: &Primitive, inputs: &[(&[usize], &[T])], out_shape: &[usize]) -> Forward<T> {
    let (xs, x) = inputs[0];
    let plain = |out| Forward { out, aux: Vec::new() };
    match op {
        Primitive::Matmul => {
            let (bs, b) = inputs[1];
            let (batch, m, k, n, shared) = matmul_dims(xs, bs);
            plain(matmul_forward(x, b, batch, m, k, n, shared))
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let y = inputs[1].1;
            let ny = y.len();
            let out = x
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let b = y[i % ny];
                    match op {
                        Primitive::Add => a + b,
                        Primitive::Sub => a - b,
                        _ => a * b,
                    }
                })
                .collect();
            plain(out)
        }
        Primitive::ScaleConst(c) => {
            let c = T::of(*c);
            plain(x.iter().map(|&v| v * c).collect())
        }
        Primitive::ScaleBy => {
            let s = inputs[1].1[0];
            plain(x.iter().map(|&v| v * s).collect())
        }
        Primitive::MeanOverAxis(axis) | Primitive::SumOverAxis(axis) => {
            let (outer, len, inner) = split(xs, *axis);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            if let Primitive::MeanOverAxis(_) = op {
                let inv = T::one() / T::of(len as f64);
                out.iter_mut().for_each(|v| *v = *v * inv);
            }
            plain(out)
        }
        Primitive::SelectIndex { axis, index } => {
            let (outer, len, inner) = split(xs, *axis);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * len + index) * inner..(o * len + index + 1) * inner]);
            }
            plain(out)
        }
        Primitive::Sigmoid => plain(x.iter().map(|&v| sigmoid(v)).collect()),
        Primitive::Gelu => plain(x.iter().map(|&v| gelu_parts(v).0).collect()),
        Primitive::SoftmaxOverAxis(axis) => {
            let (outer, len, inner) = split(xs, *axis);
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for j in 0..len {
                        let e = (x[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total = total + e;
                    }
                    for j in 0..len {
                        out[idx(j)] = out[idx(j)] / total;
                    }
                }
            }
            plain(out)
        }
        Primitive::LayerNorm { eps } => {
            let width = *xs.last().unwrap();
            let rows = x.len() / width;
            let eps = T::of(*eps);
            let inv_w = T::one() / T::of(width as f64);
            let mut out = vec![T::zero(); x.len()];
            let mut means = Vec::with_capacity(rows);
            let mut vars = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &x[r * width..(r + 1) * width];
                let mean = row.iter().copied().sum::<T>() * inv_w;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
                let rstd = T::one() / (var + eps).sqrt();
                for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                    *o = (v - mean) * rstd;
                }
                means.push(mean);
                vars.push(var);
            }
            let stat_shape = if xs.len() > 1 { xs[..xs.len() - 1].to_vec() } else { vec![1] };
            Forward {
                out,
                aux: vec![(stat_shape.clone(), means), (stat_shape, vars)],
            }
        }
        Primitive::BroadcastOverAxis { axis, len } => {
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis..].iter().product();
            let mut out = Vec::with_capacity(x.len() * len);
            for o in 0..outer {
                let src = &x[o * inner..(o + 1) * inner];
                for _ in 0..*len {
                    out.extend_from_slice(src);
                }
            }
            plain(out)
        }
        Primitive::Transpose(a, b) => plain(swap_axes(x, xs, *a, *b)),
        Primitive::Reshape(_) => plain(x.to_vec()),
        Primitive::CrossEntropy(targets) => {
            let classes = xs[1];
            let mut probs = vec![T::zero(); x.len()];
            let mut total = T::zero();
            for (r, &t) in targets.iter().enumerate() {
                let row = &x[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                    *p = (v - max).exp() / sum;
                }
                total = total + (max + sum.ln() - row[t]);
            }
            let loss = total / T::of(targets.len() as f64);
            debug_assert_eq!(out_shape, &[1]);
            Forward {
                out: vec![loss],
                aux: vec![(xs.to_vec(), probs)],
            }
        }
    }
}

pub(crate) fn swap_axes<T: Copy>(x: &[T], shape: &[usize], a: usize, b: usize) -> Vec<T> {
    if a == b {
        return x.to_vec();
    }
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut src_strides = strides.clone();
    src_strides.swap(a, b);
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; rank];
    for _ in 0..x.len() {
        let offset: usize = index.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[offset]);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    out
}

/// Sums `g` (shaped like the larger operand) down to a suffix operand of `n` elements.
fn reduce_suffix<T: Element>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

/// Gradients for each input; `None` where `needs[i]` is false.
pub(crate) fn backward<T: Element>(
    op: &Primitive,
    input_shapes: &[&[usize]],
    saved: &[&[T]],
    g: &[T],
    needs: &[bool],
) -> Vec<Option<Vec<T>>> {
    let xs = input_shapes[0];
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Primitive::Matmul => {
            let (a, b) = (saved[0], saved[1]);
            let (batch, m, k, n, shared) = matmul_dims(xs, input_shapes[1]);
            let da = want(0).then(|| {
                let mut da = vec![T::zero(); a.len()];
                for bi in 0..batch {
                    let b_off = if shared { 0 } else { bi * k * n };
                    for i in 0..m {
                        let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                        for p in 0..k {
                            let brow = &b[b_off + p * n..b_off + (p + 1) * n];
                            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            da[(bi * m + i) * k + p] = dot;
                        }
                    }
                }
                da
            });
            let db = want(1).then(|| {
                let mut db = vec![T::zero(); b.len()];
                for bi in 0..batch {
                    let b_off = if shared { 0 } else { bi * k * n };
                    for i in 0..m {
                        let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                        for p in 0..k {
                            let av = a[(bi * m + i) * k + p];
                            for (d, &gv) in db[b_off + p * n..b_off + (p + 1) * n].iter_mut().zip(grow) {
                                *d = *d + av * gv;
                            }
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        Primitive::Add | Primitive::Sub => {
            let ny: usize = input_shapes[1].iter().product();
            let dx = want(0).then(|| g.to_vec());
            let dy = want(1).then(|| {
                let mut r = reduce_suffix(g, ny);
                if let Primitive::Sub = op {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                r
            });
            vec![dx, dy]
        }
        Primitive::Mul => {
            let (x, y) = (saved[0], saved[1]);
            let ny = y.len();
            let dx = want(0).then(|| g.iter().enumerate().map(|(i, &gv)| gv * y[i % ny]).collect());
            let dy = want(1).then(|| {
                let prod: Vec<T> = g.iter().zip(x).map(|(&gv, &xv)| gv * xv).collect();
                reduce_suffix(&prod, ny)
            });
            vec![dx, dy]
        }
        Primitive::ScaleConst(c) => {
            let c = T::of(*c);
            vec![want(0).then(|| g.iter().map(|&v| v * c).collect())]
        }
        Primitive::ScaleBy => {
            let (x, s) = (saved[0], saved[1][0]);
            let dx = want(0).then(|| g.iter().map(|&v| v * s).collect());
            let ds = want(1).then(|| vec![g.iter().zip(x).map(|(&gv, &xv)| gv * xv).sum()]);
            vec![dx, ds]
        }
        Primitive::MeanOverAxis(axis) | Primitive::SumOverAxis(axis) => {
            let (outer, len, inner) = split(xs, *axis);
            let scale = match op {
                Primitive::MeanOverAxis(_) => T::one() / T::of(len as f64),
                _ => T::one(),
            };
            vec![want(0).then(|| {
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        dx.extend(src.iter().map(|&v| v * scale));
                    }
                }
                dx
            })]
        }
        Primitive::SelectIndex { axis, index } => {
            let (outer, len, inner) = split(xs, *axis);
            vec![want(0).then(|| {
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    dx[(o * len + index) * inner..(o * len + index + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                dx
            })]
        }
        Primitive::Sigmoid => {
            let y = saved[0];
            vec![want(0).then(|| g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect())]
        }
        Primitive::Gelu => {
            let x = saved[0];
            vec![want(0).then(|| g.iter().zip(x).map(|(&gv, &xv)| gv * gelu_parts(xv).1).collect())]
        }
        Primitive::SoftmaxOverAxis(axis) => {
            let y = saved[0];
            let (outer, len, inner) = split(xs, *axis);
            vec![want(0).then(|| {
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                dx
            })]
        }
        Primitive::LayerNorm { eps } => {
            let (x, means, vars) = (saved[0], saved[1], saved[2]);
            let width = *xs.last().unwrap();
            let eps = T::of(*eps);
            let inv_w = T::one() / T::of(width as f64);
            vec![want(0).then(|| {
                let mut dx = vec![T::zero(); x.len()];
                for r in 0..means.len() {
                    let rstd = T::one() / (vars[r] + eps).sqrt();
                    let row = &x[r * width..(r + 1) * width];
                    let grow = &g[r * width..(r + 1) * width];
                    let xhat: Vec<T> = row.iter().map(|&v| (v - means[r]) * rstd).collect();
                    let g_mean = grow.iter().copied().sum::<T>() * inv_w;
                    let gx_mean = grow.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
                    for j in 0..width {
                        dx[r * width + j] = rstd * (grow[j] - g_mean - xhat[j] * gx_mean);
                    }
                }
                dx
            })]
        }
        Primitive::BroadcastOverAxis { axis, len } => {
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis..].iter().product();
            vec![want(0).then(|| {
                let mut dx = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..*len {
                        let src = &g[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &s) in dx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                dx
            })]
        }
        Primitive::Transpose(a, b) => {
            let mut out_shape = xs.to_vec();
            out_shape.swap(*a, *b);
            vec![want(0).then(|| swap_axes(g, &out_shape, *a, *b))]
        }
        Primitive::Reshape(_) => vec![want(0).then(|| g.to_vec())],
        Primitive::CrossEntropy(targets) => {
            let probs = saved[0];
            let classes = xs[1];
            let scale = g[0] / T::of(targets.len() as f64);
            vec![want(0).then(|| {
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * classes + t] = dx[r * classes + t] - scale;
                }
                dx
            })]
        }
    }
}
