//! Graph-building operations.
//!
//! Each function computes a forward value eagerly and registers a closure
//! that maps the output gradient onto the inputs. Shape errors are reported
//! when the graph is built, not during backward.
//!
//! Broadcasting is deliberately minimal: elementwise ops require identical
//! shapes, and only [`add_bias`], [`linear`], and [`layer_norm`] broadcast
//! over the last axis.

use super::graph::Var;
use super::tensor::{mm, mm_acc, mm_nt, mm_nt_acc, mm_tn_acc, Tensor};
use super::NnError;

const LOG_CLAMP: f64 = 1e-12;
const PROB_CLAMP: f64 = 1e-7;

fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> NnError {
    NnError::ShapeMismatch { expected: expected.into(), got: got.into() }
}

fn same_shape(a: &Var, b: &Var, op: &str) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            format!("{op} operands with equal shapes"),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Split a shape into (rows, last-axis width). Rank-0 counts as one row of
/// width 1.
fn rows_last(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&n) => (shape[..shape.len() - 1].iter().product(), n),
        None => (1, 1),
    }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add(a: &Var, b: &Var) -> Result<Var, NnError> {
    same_shape(a, b, "add")?;
    let data = a.value().iter().zip(b.value().iter()).map(|(x, y)| x + y).collect();
    let value = Tensor::new(a.shape().to_vec(), data)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(|g, parents| {
        parents[0].accum_grad(g);
        parents[1].accum_grad(g);
    })))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var, NnError> {
    same_shape(a, b, "sub")?;
    let data = a.value().iter().zip(b.value().iter()).map(|(x, y)| x - y).collect();
    let value = Tensor::new(a.shape().to_vec(), data)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(|g, parents| {
        parents[0].accum_grad(g);
        let neg = Tensor::new(g.shape().to_vec(), g.iter().map(|x| -x).collect()).unwrap();
        parents[1].accum_grad(&neg);
    })))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var, NnError> {
    same_shape(a, b, "mul")?;
    let data = a.value().iter().zip(b.value().iter()).map(|(x, y)| x * y).collect();
    let value = Tensor::new(a.shape().to_vec(), data)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(|g, parents| {
        let av = parents[0].value().data().to_vec();
        let bv = parents[1].value().data().to_vec();
        let da: Vec<f64> = g.iter().zip(&bv).map(|(gi, bi)| gi * bi).collect();
        let db: Vec<f64> = g.iter().zip(&av).map(|(gi, ai)| gi * ai).collect();
        parents[0].accum_grad(&Tensor::new(g.shape().to_vec(), da).unwrap());
        parents[1].accum_grad(&Tensor::new(g.shape().to_vec(), db).unwrap());
    })))
}

pub fn scale(a: &Var, c: f64) -> Var {
    let data = a.value().iter().map(|x| x * c).collect();
    let value = Tensor::new(a.shape().to_vec(), data).unwrap();
    Var::from_op(value, vec![a.clone()], Box::new(move |g, parents| {
        let da = Tensor::new(g.shape().to_vec(), g.iter().map(|x| x * c).collect()).unwrap();
        parents[0].accum_grad(&da);
    }))
}

/// `a [..., n] + bias [n]`, broadcasting the bias over every leading row.
pub fn add_bias(a: &Var, bias: &Var) -> Result<Var, NnError> {
    let (rows, n) = rows_last(a.shape());
    if bias.shape() != [n] {
        return Err(shape_err(format!("bias of shape [{n}]"), format!("{:?}", bias.shape())));
    }
    let mut data = a.value().data().to_vec();
    let bv = bias.value().data();
    for r in 0..rows {
        for j in 0..n {
            data[r * n + j] += bv[j];
        }
    }
    let value = Tensor::new(a.shape().to_vec(), data)?;
    Ok(Var::from_op(value, vec![a.clone(), bias.clone()], Box::new(move |g, parents| {
        parents[0].accum_grad(g);
        let mut db = vec![0.0; n];
        for r in 0..rows {
            for j in 0..n {
                db[j] += g.data()[r * n + j];
            }
        }
        parents[1].accum_grad(&Tensor::from_vec(db));
    })))
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(a: &Var) -> Var {
    let data: Vec<f64> = a.value().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    let value = Tensor::new(a.shape().to_vec(), data).unwrap();
    Var::from_op(value, vec![a.clone()], Box::new(|g, parents| {
        let x = parents[0].value().data().to_vec();
        let da: Vec<f64> = g.iter().zip(&x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
        parents[0].accum_grad(&Tensor::new(g.shape().to_vec(), da).unwrap());
    }))
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(a: &Var) -> Var {
    let y: Vec<f64> = a.value().iter().map(|&x| sigmoid_scalar(x)).collect();
    let value = Tensor::new(a.shape().to_vec(), y.clone()).unwrap();
    Var::from_op(value, vec![a.clone()], Box::new(move |g, parents| {
        let da: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
        parents[0].accum_grad(&Tensor::new(g.shape().to_vec(), da).unwrap());
    }))
}

pub fn tanh(a: &Var) -> Var {
    let y: Vec<f64> = a.value().iter().map(|&x| x.tanh()).collect();
    let value = Tensor::new(a.shape().to_vec(), y.clone()).unwrap();
    Var::from_op(value, vec![a.clone()], Box::new(move |g, parents| {
        let da: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
        parents[0].accum_grad(&Tensor::new(g.shape().to_vec(), da).unwrap());
    }))
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

pub fn reshape(a: &Var, shape: Vec<usize>) -> Result<Var, NnError> {
    let value = a.value().reshaped(shape)?;
    let orig = a.shape().to_vec();
    Ok(Var::from_op(value, vec![a.clone()], Box::new(move |g, parents| {
        parents[0].accum_grad(&g.reshaped(orig.clone()).unwrap());
    })))
}

/// Take `[start, start+len)` of the last axis.
pub fn slice_last(a: &Var, start: usize, len: usize) -> Result<Var, NnError> {
    let (rows, n) = rows_last(a.shape());
    if start + len > n {
        return Err(shape_err(
            format!("slice within last axis of width {n}"),
            format!("start {start} + len {len}"),
        ));
    }
    let src = a.value().data();
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&src[r * n + start..r * n + start + len]);
    }
    let mut shape = a.shape().to_vec();
    if shape.is_empty() {
        shape = vec![1];
    }
    *shape.last_mut().unwrap() = len;
    let value = Tensor::new(shape, data)?;
    Ok(Var::from_op(value, vec![a.clone()], Box::new(move |g, parents| {
        let full_shape = parents[0].shape().to_vec();
        let mut da = Tensor::zeros(full_shape);
        for r in 0..rows {
            let dst = &mut da.data_mut()[r * n + start..r * n + start + len];
            dst.copy_from_slice(&g.data()[r * len..(r + 1) * len]);
        }
        parents[0].accum_grad(&da);
    })))
}

/// `[a, b, c] -> [a, c, b]`. Its own inverse, so backward reuses the same
/// index map.
pub fn permute3_021(x: &Var) -> Result<Var, NnError> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(shape_err("rank-3 tensor", format!("{s:?}")));
    }
    let (a, b, c) = (s[0], s[1], s[2]);
    let value = permute3_021_tensor(x.value());
    Ok(Var::from_op(value, vec![x.clone()], Box::new(move |g, parents| {
        let mut da = vec![0.0; a * b * c];
        let gd = g.data();
        for i in 0..a {
            for k in 0..c {
                for j in 0..b {
                    da[(i * b + j) * c + k] = gd[(i * c + k) * b + j];
                }
            }
        }
        parents[0].accum_grad(&Tensor::new(vec![a, b, c], da).unwrap());
    })))
}

pub(crate) fn permute3_021_tensor(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (a, b, c) = (s[0], s[1], s[2]);
    let xd = x.data();
    let mut out = vec![0.0; a * b * c];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                out[(i * c + k) * b + j] = xd[(i * b + j) * c + k];
            }
        }
    }
    Tensor::new(vec![a, c, b], out).unwrap()
}

/// `[a, b, c, d] -> [a, c, b, d]`. Also an involution.
pub fn permute4_0213(x: &Var) -> Result<Var, NnError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("rank-4 tensor", format!("{s:?}")));
    }
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let map = move |xd: &[f64]| {
        let mut out = vec![0.0; a * b * c * d];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    let src = ((i * b + j) * c + k) * d;
                    let dst = ((i * c + k) * b + j) * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        out
    };
    let value = Tensor::new(vec![a, c, b, d], map(x.value().data()))?;
    Ok(Var::from_op(value, vec![x.clone()], Box::new(move |g, parents| {
        // Swapping axes 1 and 2 twice is the identity; apply the same map
        // with b and c exchanged.
        let gd = g.data();
        let mut da = vec![0.0; a * b * c * d];
        for i in 0..a {
            for k in 0..c {
                for j in 0..b {
                    let src = ((i * c + k) * b + j) * d;
                    let dst = ((i * b + j) * c + k) * d;
                    da[dst..dst + d].copy_from_slice(&gd[src..src + d]);
                }
            }
        }
        parents[0].accum_grad(&Tensor::new(vec![a, b, c, d], da).unwrap());
    })))
}

// ---------------------------------------------------------------------------
// Reductions and normalization
// ---------------------------------------------------------------------------

pub fn mean_all(a: &Var) -> Var {
    let n = a.value().numel() as f64;
    let value = Tensor::scalar(a.value().iter().sum::<f64>() / n);
    Var::from_op(value, vec![a.clone()], Box::new(move |g, parents| {
        let gv = g.data()[0] / n;
        parents[0].accum_grad(&Tensor::full(parents[0].shape().to_vec(), gv));
    }))
}

/// Softmax over the last axis, numerically stabilized by the row max.
pub fn softmax_last(a: &Var) -> Var {
    let (rows, n) = rows_last(a.shape());
    let mut y = a.value().data().to_vec();
    for r in 0..rows {
        softmax_row(&mut y[r * n..(r + 1) * n]);
    }
    let yt = Tensor::new(a.shape().to_vec(), y).unwrap();
    let y_cache = yt.clone();
    Var::from_op(yt, vec![a.clone()], Box::new(move |g, parents| {
        let yd = y_cache.data();
        let gd = g.data();
        let mut da = vec![0.0; gd.len()];
        for r in 0..rows {
            let ys = &yd[r * n..(r + 1) * n];
            let gs = &gd[r * n..(r + 1) * n];
            let inner: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
            for j in 0..n {
                da[r * n + j] = ys[j] * (gs[j] - inner);
            }
        }
        parents[0].accum_grad(&Tensor::new(g.shape().to_vec(), da).unwrap());
    }))
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Layer normalization over the last axis with learned scale and shift.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var, NnError> {
    let (rows, d) = rows_last(x.shape());
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err(
            format!("gamma and beta of shape [{d}]"),
            format!("{:?} and {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let xd = x.value().data();
    let gv = gamma.value().data();
    let bv = beta.value().data();
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    let mut y = vec![0.0; xd.len()];
    for r in 0..rows {
        let xs = &xd[r * d..(r + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let h = (xs[j] - mean) * istd;
            xhat[r * d + j] = h;
            y[r * d + j] = gv[j] * h + bv[j];
        }
    }
    let value = Tensor::new(x.shape().to_vec(), y)?;
    Ok(Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, parents| {
            let gd = g.data();
            let gv = parents[1].value().data();
            let mut dx = vec![0.0; gd.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for r in 0..rows {
                let gs = &gd[r * d..(r + 1) * d];
                let hs = &xhat[r * d..(r + 1) * d];
                let mut m1 = 0.0; // mean of gamma∘g
                let mut m2 = 0.0; // mean of gamma∘g∘xhat
                for j in 0..d {
                    let gg = gs[j] * gv[j];
                    m1 += gg;
                    m2 += gg * hs[j];
                    dgamma[j] += gs[j] * hs[j];
                    dbeta[j] += gs[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let gg = gs[j] * gv[j];
                    dx[r * d + j] = (gg - m1 - hs[j] * m2) * inv_std[r];
                }
            }
            parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), dx).unwrap());
            parents[1].accum_grad(&Tensor::from_vec(dgamma));
            parents[2].accum_grad(&Tensor::from_vec(dbeta));
        }),
    ))
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// `x [..., k] · wᵀ + b` with `w [n, k]`: the affine layer. Leading axes of
/// `x` are flattened into rows and restored on the output.
pub fn linear(x: &Var, w: &Var, bias: Option<&Var>) -> Result<Var, NnError> {
    let (rows, k) = rows_last(x.shape());
    if w.rank() != 2 || w.shape()[1] != k {
        return Err(shape_err(format!("weight [n, {k}]"), format!("{:?}", w.shape())));
    }
    let n = w.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(shape_err(format!("bias [{n}]"), format!("{:?}", b.shape())));
        }
    }
    let mut out = mm_nt(x.value().data(), w.value().data(), rows, k, n);
    if let Some(b) = bias {
        let bv = b.value().data();
        for r in 0..rows {
            for j in 0..n {
                out[r * n + j] += bv[j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    if shape.is_empty() {
        shape = vec![1];
    }
    *shape.last_mut().unwrap() = n;
    let value = Tensor::new(shape, out)?;

    let mut parents = vec![x.clone(), w.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Var::from_op(value, parents, Box::new(move |g, parents| {
        let gd = g.data();
        let xv = parents[0].value().data();
        let wv = parents[1].value().data();
        // dx = g · w  ([rows,n] × [n,k])
        let dx = mm(gd, wv, rows, n, k);
        parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), dx).unwrap());
        // dw = gᵀ · x  ([n,rows] × [rows,k])
        let mut dw = vec![0.0; n * k];
        mm_tn_acc(gd, xv, rows, n, k, &mut dw);
        parents[1].accum_grad(&Tensor::new(vec![n, k], dw).unwrap());
        if has_bias {
            let mut db = vec![0.0; n];
            for r in 0..rows {
                for j in 0..n {
                    db[j] += gd[r * n + j];
                }
            }
            parents[2].accum_grad(&Tensor::from_vec(db));
        }
    })))
}

/// Plain `a [m, k] · b [k, n]`.
pub fn matmul(a: &Var, b: &Var) -> Result<Var, NnError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err(
            "matmul operands [m,k] and [k,n]",
            format!("{:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let value = Tensor::new(vec![m, n], mm(a.value().data(), b.value().data(), m, k, n))?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(move |g, parents| {
        let gd = g.data();
        let av = parents[0].value().data();
        let bv = parents[1].value().data();
        // da = g · bᵀ: da[i,p] = Σ_j g[i,j]·b[p,j], with b row-major [k,n].
        let mut da = vec![0.0; m * k];
        mm_nt_acc(gd, bv, m, n, k, &mut da);
        parents[0].accum_grad(&Tensor::new(vec![m, k], da).unwrap());
        let mut db = vec![0.0; k * n];
        mm_tn_acc(av, gd, m, k, n, &mut db); // db[p,j] = Σ_i a[i,p]·g[i,j]
        parents[1].accum_grad(&Tensor::new(vec![k, n], db).unwrap());
    })))
}

fn batch_dims(a: &Var, b: &Var, op: &str) -> Result<(usize, [usize; 2], [usize; 2]), NnError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(shape_err(
            format!("{op} operands with equal leading (batch) axes and rank ≥ 2"),
            format!("{sa:?} and {sb:?}"),
        ));
    }
    let groups = sa[..sa.len() - 2].iter().product();
    Ok((
        groups,
        [sa[sa.len() - 2], sa[sa.len() - 1]],
        [sb[sb.len() - 2], sb[sb.len() - 1]],
    ))
}

/// Batched matmul: `a [..., m, k] · b [..., k, n]` over matching leading axes.
pub fn bmm(a: &Var, b: &Var) -> Result<Var, NnError> {
    let (groups, [m, k], [kb, n]) = batch_dims(a, b, "bmm")?;
    if k != kb {
        return Err(shape_err("inner dimensions to match", format!("{k} vs {kb}")));
    }
    let mut out = vec![0.0; groups * m * n];
    for gi in 0..groups {
        mm_acc(
            &a.value().data()[gi * m * k..(gi + 1) * m * k],
            &b.value().data()[gi * k * n..(gi + 1) * k * n],
            m,
            k,
            n,
            &mut out[gi * m * n..(gi + 1) * m * n],
        );
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = m;
    shape[r - 1] = n;
    let value = Tensor::new(shape, out)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(move |g, parents| {
        let gd = g.data();
        let av = parents[0].value().data();
        let bv = parents[1].value().data();
        let mut da = vec![0.0; groups * m * k];
        let mut db = vec![0.0; groups * k * n];
        for gi in 0..groups {
            let gs = &gd[gi * m * n..(gi + 1) * m * n];
            mm_nt_acc(gs, &bv[gi * k * n..(gi + 1) * k * n], m, n, k, &mut da[gi * m * k..(gi + 1) * m * k]);
            mm_tn_acc(&av[gi * m * k..(gi + 1) * m * k], gs, m, k, n, &mut db[gi * k * n..(gi + 1) * k * n]);
        }
        parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), da).unwrap());
        parents[1].accum_grad(&Tensor::new(parents[1].shape().to_vec(), db).unwrap());
    })))
}

/// Batched `a [..., m, k] · b [..., n, k]ᵀ`: attention scores.
pub fn bmm_nt(a: &Var, b: &Var) -> Result<Var, NnError> {
    let (groups, [m, k], [n, kb]) = batch_dims(a, b, "bmm_nt")?;
    if k != kb {
        return Err(shape_err("inner dimensions to match", format!("{k} vs {kb}")));
    }
    let mut out = vec![0.0; groups * m * n];
    for gi in 0..groups {
        mm_nt_acc(
            &a.value().data()[gi * m * k..(gi + 1) * m * k],
            &b.value().data()[gi * n * k..(gi + 1) * n * k],
            m,
            k,
            n,
            &mut out[gi * m * n..(gi + 1) * m * n],
        );
    }
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = m;
    shape[r - 1] = n;
    let value = Tensor::new(shape, out)?;
    Ok(Var::from_op(value, vec![a.clone(), b.clone()], Box::new(move |g, parents| {
        let gd = g.data();
        let av = parents[0].value().data();
        let bv = parents[1].value().data();
        let mut da = vec![0.0; groups * m * k];
        let mut db = vec![0.0; groups * n * k];
        for gi in 0..groups {
            let gs = &gd[gi * m * n..(gi + 1) * m * n];
            // da = g · b  ([m,n] × [n,k])
            mm_acc(gs, &bv[gi * n * k..(gi + 1) * n * k], m, n, k, &mut da[gi * m * k..(gi + 1) * m * k]);
            // db = gᵀ · a  ([n,m] × [m,k])
            mm_tn_acc(gs, &av[gi * m * k..(gi + 1) * m * k], m, n, k, &mut db[gi * n * k..(gi + 1) * n * k]);
        }
        parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), da).unwrap());
        parents[1].accum_grad(&Tensor::new(parents[1].shape().to_vec(), db).unwrap());
    })))
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

fn conv_like_dims(x: &Var, op: &str) -> Result<(usize, usize, usize, bool), NnError> {
    match x.shape() {
        [c, l] => Ok((1, *c, *l, false)),
        [b, c, l] => Ok((*b, *c, *l, true)),
        other => Err(shape_err(format!("{op} input of rank 2 or 3"), format!("{other:?}"))),
    }
}

/// 1-D valid cross-correlation over the last axis.
///
/// `x [b, c_in, l]` (or `[c_in, l]`), `w [c_out, c_in, k]`, `bias [c_out]`;
/// output length is `(l - k) / stride + 1`.
pub fn conv1d(x: &Var, w: &Var, bias: &Var, stride: usize) -> Result<Var, NnError> {
    let (b, c_in, l, batched) = conv_like_dims(x, "conv1d")?;
    if w.rank() != 3 || w.shape()[1] != c_in {
        return Err(shape_err(format!("weight [c_out, {c_in}, k]"), format!("{:?}", w.shape())));
    }
    let c_out = w.shape()[0];
    let k = w.shape()[2];
    if bias.shape() != [c_out] {
        return Err(shape_err(format!("bias [{c_out}]"), format!("{:?}", bias.shape())));
    }
    if stride == 0 {
        return Err(NnError::InvalidArg("conv1d stride must be ≥ 1".into()));
    }
    if l < k {
        return Err(NnError::SegmentTooShort(format!(
            "conv1d needs input length ≥ kernel width {k}, got {l}"
        )));
    }
    let lo = (l - k) / stride + 1;

    let xv = x.value().data();
    let wv = w.value().data();
    let bv = bias.value().data();
    let mut out = vec![0.0; b * c_out * lo];
    for bi in 0..b {
        for co in 0..c_out {
            for t in 0..lo {
                let mut acc = bv[co];
                let x0 = t * stride;
                for ci in 0..c_in {
                    let xrow = &xv[(bi * c_in + ci) * l + x0..(bi * c_in + ci) * l + x0 + k];
                    let wrow = &wv[(co * c_in + ci) * k..(co * c_in + ci) * k + k];
                    for j in 0..k {
                        acc += wrow[j] * xrow[j];
                    }
                }
                out[(bi * c_out + co) * lo + t] = acc;
            }
        }
    }
    let shape = if batched { vec![b, c_out, lo] } else { vec![c_out, lo] };
    let value = Tensor::new(shape, out)?;
    Ok(Var::from_op(
        value,
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |g, parents| {
            let gd = g.data();
            let xv = parents[0].value().data();
            let wv = parents[1].value().data();
            let mut dx = vec![0.0; b * c_in * l];
            let mut dw = vec![0.0; c_out * c_in * k];
            let mut db = vec![0.0; c_out];
            for bi in 0..b {
                for co in 0..c_out {
                    for t in 0..lo {
                        let gv = gd[(bi * c_out + co) * lo + t];
                        db[co] += gv;
                        let x0 = t * stride;
                        for ci in 0..c_in {
                            let xoff = (bi * c_in + ci) * l + x0;
                            let woff = (co * c_in + ci) * k;
                            for j in 0..k {
                                dx[xoff + j] += gv * wv[woff + j];
                                dw[woff + j] += gv * xv[xoff + j];
                            }
                        }
                    }
                }
            }
            let dx_shape = parents[0].shape().to_vec();
            parents[0].accum_grad(&Tensor::new(dx_shape, dx).unwrap());
            parents[1].accum_grad(&Tensor::new(vec![c_out, c_in, k], dw).unwrap());
            parents[2].accum_grad(&Tensor::from_vec(db));
        }),
    ))
}

/// 1-D max pooling over the last axis. Ties resolve to the earliest index,
/// which is where the gradient is routed.
pub fn maxpool1d(x: &Var, k: usize, stride: usize) -> Result<Var, NnError> {
    let (b, c, l, batched) = conv_like_dims(x, "maxpool1d")?;
    if k == 0 || stride == 0 {
        return Err(NnError::InvalidArg("maxpool1d window and stride must be ≥ 1".into()));
    }
    if l < k {
        return Err(NnError::SegmentTooShort(format!(
            "maxpool1d needs input length ≥ window {k}, got {l}"
        )));
    }
    let lo = (l - k) / stride + 1;
    let xv = x.value().data();
    let mut out = vec![0.0; b * c * lo];
    let mut argmax = vec![0u32; b * c * lo];
    for row in 0..b * c {
        for t in 0..lo {
            let x0 = row * l + t * stride;
            let mut best = xv[x0];
            let mut best_j = 0usize;
            for j in 1..k {
                if xv[x0 + j] > best {
                    best = xv[x0 + j];
                    best_j = j;
                }
            }
            out[row * lo + t] = best;
            argmax[row * lo + t] = (t * stride + best_j) as u32;
        }
    }
    let shape = if batched { vec![b, c, lo] } else { vec![c, lo] };
    let value = Tensor::new(shape, out)?;
    Ok(Var::from_op(value, vec![x.clone()], Box::new(move |g, parents| {
        let gd = g.data();
        let mut dx = vec![0.0; b * c * l];
        for row in 0..b * c {
            for t in 0..lo {
                dx[row * l + argmax[row * lo + t] as usize] += gd[row * lo + t];
            }
        }
        parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), dx).unwrap());
    })))
}

/// Single-layer LSTM over pre-sliced timestep inputs `xs[t]` of shape
/// `[B, d_in]`.
///
/// Gate blocks are stacked in the order input/forget/cell/output, `h` rows
/// each: `w [4h, d_in]`, `u [4h, h]`, and one shared bias `b [4h]` — a single
/// bias vector per gate, not the two-bias convention some libraries use.
/// `h0`/`c0` are the `[B, h]` initial states. Returns every hidden state plus
/// the final `(h, c)`.
///
/// Built entirely from primitive ops, so its gradient comes from theirs.
pub fn lstm_forward(
    xs: &[Var],
    w: &Var,
    u: &Var,
    b: &Var,
    h0: &Var,
    c0: &Var,
) -> Result<(Vec<Var>, Var, Var), NnError> {
    if xs.is_empty() {
        return Err(NnError::InvalidArg("lstm_forward needs at least one timestep".into()));
    }
    if w.rank() != 2 || !w.shape()[0].is_multiple_of(4) {
        return Err(shape_err("lstm weight [4h, d_in]", format!("{:?}", w.shape())));
    }
    let h = w.shape()[0] / 4;
    if u.shape() != [4 * h, h] {
        return Err(shape_err(format!("lstm recurrent weight [{}, {h}]", 4 * h), format!("{:?}", u.shape())));
    }

    let mut h_t = h0.clone();
    let mut c_t = c0.clone();
    let mut hidden = Vec::with_capacity(xs.len());
    for x_t in xs {
        let gates = add(&linear(x_t, w, Some(b))?, &linear(&h_t, u, None)?)?;
        let i = sigmoid(&slice_last(&gates, 0, h)?);
        let f = sigmoid(&slice_last(&gates, h, h)?);
        let g = tanh(&slice_last(&gates, 2 * h, h)?);
        let o = sigmoid(&slice_last(&gates, 3 * h, h)?);
        c_t = add(&mul(&f, &c_t)?, &mul(&i, &g)?)?;
        h_t = mul(&o, &tanh(&c_t))?;
        hidden.push(h_t.clone());
    }
    Ok((hidden, h_t, c_t))
}

// ---------------------------------------------------------------------------
// Association ops
// ---------------------------------------------------------------------------

/// Softplus, shifted by 1e-3 and capped at `cap`: the positive-width map for
/// prior scales.
pub fn sigma_transform(x: &Var, cap: f64) -> Result<Var, NnError> {
    if !(cap > 0.0) {
        return Err(NnError::InvalidArg(format!("sigma cap must be positive, got {cap}")));
    }
    let xv = x.value().data();
    let mut y = vec![0.0; xv.len()];
    let mut dydx = vec![0.0; xv.len()];
    for (i, &v) in xv.iter().enumerate() {
        let sp = if v > 30.0 {
            v
        } else if v < -30.0 {
            v.exp()
        } else {
            v.exp().ln_1p()
        };
        let raw = sp + 1e-3;
        if raw < cap {
            y[i] = raw;
            dydx[i] = sigmoid_scalar(v);
        } else {
            y[i] = cap;
            dydx[i] = 0.0;
        }
    }
    let value = Tensor::new(x.shape().to_vec(), y)?;
    Ok(Var::from_op(value, vec![x.clone()], Box::new(move |g, parents| {
        let da: Vec<f64> = g.iter().zip(&dydx).map(|(gi, di)| gi * di).collect();
        parents[0].accum_grad(&Tensor::new(g.shape().to_vec(), da).unwrap());
    })))
}

/// Distance-kernel association: for scales `sigma [..., n]`, produce
/// `[..., n, n]` where row `i` is the normalized Gaussian kernel
/// `exp(-(j-i)²/(2σ_i²))` over positions `j`.
pub fn prior_assoc(sigma: &Var) -> Result<Var, NnError> {
    let (rows, n) = rows_last(sigma.shape());
    if sigma.rank() == 0 {
        return Err(shape_err("rank ≥ 1 sigma tensor", "scalar"));
    }
    let sv = sigma.value().data();
    let mut p = vec![0.0; rows * n * n];
    for r in 0..rows {
        for i in 0..n {
            let s = sv[r * n + i].max(1e-9);
            let row = &mut p[(r * n + i) * n..(r * n + i + 1) * n];
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                let d = j as f64 - i as f64;
                *v = (-(d * d) / (2.0 * s * s)).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    let mut shape = sigma.shape().to_vec();
    shape.push(n);
    let value = Tensor::new(shape, p.clone())?;
    Ok(Var::from_op(value, vec![sigma.clone()], Box::new(move |g, parents| {
        let gd = g.data();
        let sv = parents[0].value().data();
        let mut ds = vec![0.0; rows * n];
        for r in 0..rows {
            for i in 0..n {
                let s = sv[r * n + i].max(1e-9);
                if sv[r * n + i] < 1e-9 {
                    continue; // clamped: flat in sigma
                }
                let prow = &p[(r * n + i) * n..(r * n + i + 1) * n];
                let grow = &gd[(r * n + i) * n..(r * n + i + 1) * n];
                // dP_ij/dσ_i = P_ij/σ³ · (d_ij² − Σ_k P_ik d_ik²)
                let mut e = 0.0;
                for (kk, pv) in prow.iter().enumerate() {
                    let d = kk as f64 - i as f64;
                    e += pv * d * d;
                }
                let s3 = s * s * s;
                let mut acc = 0.0;
                for (j, (pv, gv)) in prow.iter().zip(grow).enumerate() {
                    let d = j as f64 - i as f64;
                    acc += gv * pv / s3 * (d * d - e);
                }
                ds[r * n + i] = acc;
            }
        }
        parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), ds).unwrap());
    })))
}

/// Row-wise symmetric KL divergence between two stacks of distributions over
/// the last axis; output drops that axis.
///
/// Convention: a zero mass contributes zero to its own term, and log
/// arguments are clamped at 1e-12.
pub fn skl_rows(p: &Var, q: &Var) -> Result<Var, NnError> {
    same_shape(p, q, "skl_rows")?;
    if p.rank() == 0 {
        return Err(shape_err("rank ≥ 1 distributions", "scalar"));
    }
    let (rows, n) = rows_last(p.shape());
    let pv = p.value().data();
    let qv = q.value().data();
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let ps = &pv[r * n..(r + 1) * n];
        let qs = &qv[r * n..(r + 1) * n];
        out[r] = kl_clamped(ps, qs) + kl_clamped(qs, ps);
    }
    let shape = p.shape()[..p.rank() - 1].to_vec();
    let value = Tensor::new(shape, out)?;
    Ok(Var::from_op(value, vec![p.clone(), q.clone()], Box::new(move |g, parents| {
        let gd = g.data();
        let pv = parents[0].value().data();
        let qv = parents[1].value().data();
        let mut dp = vec![0.0; pv.len()];
        let mut dq = vec![0.0; qv.len()];
        for r in 0..rows {
            let gr = gd[r];
            for j in 0..n {
                let pj = pv[r * n + j];
                let qj = qv[r * n + j];
                let lp = pj.max(LOG_CLAMP).ln();
                let lq = qj.max(LOG_CLAMP).ln();
                let mut dpj = lp - lq;
                if pj >= LOG_CLAMP {
                    dpj += 1.0 - qj / pj;
                }
                let mut dqj = lq - lp;
                if qj >= LOG_CLAMP {
                    dqj += 1.0 - pj / qj;
                }
                dp[r * n + j] = gr * dpj;
                dq[r * n + j] = gr * dqj;
            }
        }
        parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), dp).unwrap());
        parents[1].accum_grad(&Tensor::new(parents[1].shape().to_vec(), dq).unwrap());
    })))
}

fn kl_clamped(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (pj, qj) in p.iter().zip(q) {
        if *pj == 0.0 {
            continue;
        }
        acc += pj * (pj.max(LOG_CLAMP).ln() - qj.max(LOG_CLAMP).ln());
    }
    acc
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

fn check_pred_labels(pred: &Var, labels: &[f64], op: &str) -> Result<usize, NnError> {
    let n = pred.value().numel();
    if n != labels.len() {
        return Err(shape_err(
            format!("{op} labels of length {n}"),
            format!("{}", labels.len()),
        ));
    }
    if n == 0 {
        return Err(NnError::InvalidArg(format!("{op} needs at least one element")));
    }
    Ok(n)
}

/// Mean binary cross-entropy between probabilities and 0/1 labels.
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logs.
pub fn bce_loss(probs: &Var, labels: &[f64]) -> Result<Var, NnError> {
    let n = check_pred_labels(probs, labels, "bce_loss")?;
    for &y in labels {
        if y != 0.0 && y != 1.0 {
            return Err(NnError::LabelOutOfRange(y));
        }
    }
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let mut loss = 0.0;
    for (&p, &y) in probs.value().iter().zip(labels) {
        let pc = p.clamp(lo, hi);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    loss /= n as f64;
    let value = Tensor::scalar(loss);
    let labels = labels.to_vec();
    Ok(Var::from_op(value, vec![probs.clone()], Box::new(move |g, parents| {
        let gv = g.data()[0];
        let pv = parents[0].value().data();
        let mut dp = vec![0.0; pv.len()];
        for (i, (&p, &y)) in pv.iter().zip(&labels).enumerate() {
            if p > lo && p < hi {
                dp[i] = gv * (p - y) / (p * (1.0 - p)) / n as f64;
            }
            // Outside the clamp the loss is locally flat in p.
        }
        parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), dp).unwrap());
    })))
}

/// Mean squared error against fixed targets.
pub fn mse_loss(pred: &Var, targets: &[f64]) -> Result<Var, NnError> {
    let n = check_pred_labels(pred, targets, "mse_loss")?;
    let mut loss = 0.0;
    for (&p, &t) in pred.value().iter().zip(targets) {
        loss += (p - t) * (p - t);
    }
    loss /= n as f64;
    let value = Tensor::scalar(loss);
    let targets = targets.to_vec();
    Ok(Var::from_op(value, vec![pred.clone()], Box::new(move |g, parents| {
        let gv = g.data()[0];
        let pv = parents[0].value().data();
        let dp: Vec<f64> = pv
            .iter()
            .zip(&targets)
            .map(|(&p, &t)| gv * 2.0 * (p - t) / n as f64)
            .collect();
        parents[0].accum_grad(&Tensor::new(parents[0].shape().to_vec(), dp).unwrap());
    })))
}

// ---------------------------------------------------------------------------
// Plain (non-graph) information measures
// ---------------------------------------------------------------------------

fn check_distribution(x: &[f64], name: &str) -> Result<(), NnError> {
    let mut sum = 0.0;
    for &v in x {
        if v < 0.0 {
            return Err(NnError::NotADistribution(format!("{name} has negative mass {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(NnError::NotADistribution(format!("{name} sums to {sum}")));
    }
    Ok(())
}

/// `KL(p ‖ q)` with the same clamping convention as [`skl_rows`]. Both inputs
/// must be probability vectors of equal length.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, NnError> {
    if p.len() != q.len() {
        return Err(shape_err(
            "distributions of equal length",
            format!("{} vs {}", p.len(), q.len()),
        ));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_clamped(p, q))
}

/// `KL(p ‖ q) + KL(q ‖ p)`.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64, NnError> {
    Ok(kl_divergence(p, q)? + kl_divergence(q, p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Var {
        Var::leaf(Tensor::new(shape, data).unwrap(), true)
    }

    #[test]
    fn conv1d_all_ones_matches_hand_result() {
        let x = leaf(vec![1, 5], vec![1.0; 5]);
        let w = leaf(vec![1, 1, 3], vec![1.0; 3]);
        let b = leaf(vec![1], vec![0.0]);
        let y = conv1d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3]);
        assert_eq!(y.value().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn conv1d_rejects_short_input() {
        let x = leaf(vec![1, 2], vec![1.0; 2]);
        let w = leaf(vec![1, 1, 3], vec![1.0; 3]);
        let b = leaf(vec![1], vec![0.0]);
        assert!(matches!(conv1d(&x, &w, &b, 1), Err(NnError::SegmentTooShort(_))));
    }

    #[test]
    fn maxpool_window_two_stride_one() {
        let x = leaf(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = maxpool1d(&x, 2, 1).unwrap();
        assert_eq!(y.value().data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max_on_ties() {
        let x = leaf(vec![1, 3], vec![5.0, 5.0, 1.0]);
        let y = maxpool1d(&x, 2, 1).unwrap();
        assert_eq!(y.value().data(), &[5.0, 5.0]);
        mean_all(&y).backward().unwrap();
        // Window [5,5] routes to index 0, window [5,1] to index 1.
        assert_eq!(x.grad().unwrap().data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_known_row() {
        let x = leaf(vec![2], vec![0.0, 3.0f64.ln()]);
        let y = softmax_last(&x);
        assert_abs_diff_eq!(y.value().data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(y.value().data()[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_large_offsets() {
        let x = leaf(vec![2, 3], vec![1000.0, 1001.0, 1002.0, -1000.0, -999.0, -998.0]);
        let y = softmax_last(&x);
        for r in 0..2 {
            let s: f64 = y.value().data()[r * 3..(r + 1) * 3].iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_assoc_two_positions_unit_sigma() {
        let s = leaf(vec![1, 1, 2], vec![1.0, 1.0]);
        let p = prior_assoc(&s).unwrap();
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        let e = (-0.5f64).exp();
        let want0 = 1.0 / (1.0 + e);
        assert_abs_diff_eq!(p.value().data()[0], want0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.value().data()[1], 1.0 - want0, epsilon = 1e-12);
        // Row for i=1 mirrors it.
        assert_abs_diff_eq!(p.value().data()[3], want0, epsilon = 1e-12);
        assert_abs_diff_eq!(want0, 0.62246, epsilon = 1e-5);
    }

    #[test]
    fn prior_rows_are_distributions() {
        let s = leaf(vec![2, 3, 7], (0..42).map(|i| 0.1 + (i % 5) as f64).collect());
        let p = prior_assoc(&s).unwrap();
        let n = 7;
        for r in 0..p.value().numel() / n {
            let row = &p.value().data()[r * n..(r + 1) * n];
            let sum: f64 = row.iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn kl_of_point_mass_vs_uniform_pair_is_ln2() {
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(kl, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn kl_rejects_non_distributions() {
        assert!(matches!(
            kl_divergence(&[0.9, 0.3], &[0.5, 0.5]),
            Err(NnError::NotADistribution(_))
        ));
        assert!(matches!(
            kl_divergence(&[1.2, -0.2], &[0.5, 0.5]),
            Err(NnError::NotADistribution(_))
        ));
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_zero_on_equal() {
        let p = [0.2, 0.3, 0.5];
        let q = [0.4, 0.4, 0.2];
        let a = symmetric_kl(&p, &q).unwrap();
        let b = symmetric_kl(&q, &p).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        assert_abs_diff_eq!(symmetric_kl(&p, &p).unwrap(), 0.0, epsilon = 1e-15);
        assert!(a > 0.0);
    }

    #[test]
    fn skl_rows_matches_plain_fn() {
        let p = leaf(vec![2, 3], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]);
        let q = leaf(vec![2, 3], vec![0.3, 0.3, 0.4, 0.5, 0.25, 0.25]);
        let out = skl_rows(&p, &q).unwrap();
        assert_eq!(out.shape(), &[2]);
        for r in 0..2 {
            let want = symmetric_kl(
                &p.value().data()[r * 3..(r + 1) * 3],
                &q.value().data()[r * 3..(r + 1) * 3],
            )
            .unwrap();
            assert_abs_diff_eq!(out.value().data()[r], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let p = leaf(vec![2], vec![0.5, 0.5]);
        let l = bce_loss(&p, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(l.value().item().unwrap(), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn bce_rejects_bad_labels() {
        let p = leaf(vec![1], vec![0.5]);
        assert!(matches!(bce_loss(&p, &[0.5]), Err(NnError::LabelOutOfRange(_))));
    }

    #[test]
    fn bce_is_finite_at_saturated_probabilities() {
        let p = leaf(vec![2], vec![0.0, 1.0]);
        let l = bce_loss(&p, &[1.0, 0.0]).unwrap();
        assert!(l.value().item().unwrap().is_finite());
        l.backward().unwrap();
        assert!(p.grad().unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn mse_simple_value() {
        let p = leaf(vec![2], vec![1.0, 3.0]);
        let l = mse_loss(&p, &[0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(l.value().item().unwrap(), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn linear_matches_manual_affine() {
        let x = leaf(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = leaf(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let b = leaf(vec![2], vec![10.0, -10.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.value().data(), &[8.0, -7.0, 8.0, -2.5]);
    }

    #[test]
    fn linear_flattens_leading_axes() {
        let x = leaf(vec![2, 2, 3], (0..12).map(|i| i as f64).collect());
        let w = leaf(vec![4, 3], (0..12).map(|i| (i as f64) * 0.1).collect());
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4]);
    }

    #[test]
    fn permutes_are_involutions() {
        let x = leaf(vec![2, 3, 4], (0..24).map(|i| i as f64).collect());
        let twice = permute3_021(&permute3_021(&x).unwrap()).unwrap();
        assert_eq!(twice.value().data(), x.value().data());

        let x4 = leaf(vec![2, 3, 4, 5], (0..120).map(|i| i as f64).collect());
        let twice4 = permute4_0213(&permute4_0213(&x4).unwrap()).unwrap();
        assert_eq!(twice4.value().data(), x4.value().data());
    }

    #[test]
    fn layer_norm_zero_mean_unit_scale() {
        let x = leaf(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let g = leaf(vec![4], vec![1.0; 4]);
        let b = leaf(vec![4], vec![0.0; 4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let mean: f64 = y.value().iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        let var: f64 = y.value().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn sigma_transform_caps_and_floors() {
        let x = leaf(vec![3], vec![-40.0, 0.0, 40.0]);
        let y = sigma_transform(&x, 15.0).unwrap();
        let d = y.value().data();
        assert!(d[0] >= 1e-3 && d[0] < 2e-3);
        assert_abs_diff_eq!(d[1], 2.0f64.ln() + 1e-3, epsilon = 1e-12);
        assert_eq!(d[2], 15.0);
    }

    #[test]
    fn bmm_nt_matches_matmul_per_group() {
        let a = leaf(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect());
        let b = leaf(vec![2, 4, 3], (0..24).map(|i| i as f64 * 0.25 - 2.0).collect());
        let y = bmm_nt(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4]);
        for g in 0..2 {
            for i in 0..2 {
                for j in 0..4 {
                    let mut want = 0.0;
                    for k in 0..3 {
                        want += a.value().data()[(g * 2 + i) * 3 + k]
                            * b.value().data()[(g * 4 + j) * 3 + k];
                    }
                    assert_abs_diff_eq!(
                        y.value().data()[(g * 2 + i) * 4 + j],
                        want,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn lstm_all_zero_parameters_gives_zero_hidden_states() {
        let h = 3;
        let xs: Vec<Var> = (0..4).map(|_| leaf(vec![2, 2], vec![0.7; 4])).collect();
        let w = leaf(vec![4 * h, 2], vec![0.0; 4 * h * 2]);
        let u = leaf(vec![4 * h, h], vec![0.0; 4 * h * h]);
        let b = leaf(vec![4 * h], vec![0.0; 4 * h]);
        let h0 = Var::constant(Tensor::zeros(vec![2, h]));
        let c0 = Var::constant(Tensor::zeros(vec![2, h]));
        let (hs, h_t, _) = lstm_forward(&xs, &w, &u, &b, &h0, &c0).unwrap();
        assert_eq!(hs.len(), 4);
        // With zero gates, o = 0.5 and c stays 0, so h = 0.5·tanh(0) = 0.
        assert!(hs.iter().all(|h| h.value().data().iter().all(|&v| v == 0.0)));
        assert!(h_t.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_scalar_recurrence_matches_hand_formula() {
        // d_in = h = 1, T = 2: the whole recurrence fits in scalar arithmetic.
        let (wi, wf, wg, wo) = (0.3, -0.2, 0.5, 0.7);
        let (ui, uf, ug, uo) = (0.1, 0.4, -0.6, 0.2);
        let (bi, bf, bg, bo) = (0.05, -0.1, 0.2, 0.0);
        let xs_v = [0.9, -1.3];

        let xs: Vec<Var> = xs_v.iter().map(|&v| leaf(vec![1, 1], vec![v])).collect();
        let w = leaf(vec![4, 1], vec![wi, wf, wg, wo]);
        let u = leaf(vec![4, 1], vec![ui, uf, ug, uo]);
        let b = leaf(vec![4], vec![bi, bf, bg, bo]);
        let h0 = Var::constant(Tensor::zeros(vec![1, 1]));
        let c0 = Var::constant(Tensor::zeros(vec![1, 1]));
        let (hs, h_t, c_t) = lstm_forward(&xs, &w, &u, &b, &h0, &c0).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for &x in &xs_v {
            let i = sig(wi * x + ui * h + bi);
            let f = sig(wf * x + uf * h + bf);
            let g = (wg * x + ug * h + bg).tanh();
            let o = sig(wo * x + uo * h + bo);
            c = f * c + i * g;
            h = o * c.tanh();
        }
        assert_abs_diff_eq!(hs[1].value().data()[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(h_t.value().data()[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(c_t.value().data()[0], c, epsilon = 1e-12);
    }

    #[test]
    fn lstm_parameter_count_at_full_width() {
        // d_in = h = 350 under the one-bias-per-gate convention.
        let w = Tensor::zeros(vec![1400, 350]);
        let u = Tensor::zeros(vec![1400, 350]);
        let b = Tensor::zeros(vec![1400]);
        assert_eq!(w.numel() + u.numel() + b.numel(), 981_400);
        assert_eq!(4 * (350 * 700 + 350), 981_400);
    }

    #[test]
    fn lstm_rejects_empty_sequence_and_bad_shapes() {
        let w = leaf(vec![8, 2], vec![0.0; 16]);
        let u = leaf(vec![8, 2], vec![0.0; 16]);
        let b = leaf(vec![8], vec![0.0; 8]);
        let h0 = Var::constant(Tensor::zeros(vec![1, 2]));
        let c0 = Var::constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(
            lstm_forward(&[], &w, &u, &b, &h0, &c0),
            Err(NnError::InvalidArg(_))
        ));
        let bad_u = leaf(vec![8, 3], vec![0.0; 24]);
        let x = leaf(vec![1, 2], vec![0.0; 2]);
        assert!(lstm_forward(&[x], &w, &bad_u, &b, &h0, &c0).is_err());
    }
}
