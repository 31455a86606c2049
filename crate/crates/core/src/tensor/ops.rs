//! Elementwise, reduction, linear-algebra and probability operations.

use super::{Backward, Element, Tensor, TensorError, TensorResult};

/// Backward rule built from a closure over saved forward values.
struct ClosureBackward<F> {
    name: &'static str,
    f: F,
}

impl<T, F> Backward<T> for ClosureBackward<F>
where
    T: Element,
    F: Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>>,
{
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        (self.f)(inputs, output, grad)
    }
}

pub(crate) fn record<T, F>(name: &'static str, shape: Vec<usize>, data: Vec<T>, inputs: &[&Tensor<T>], f: F) -> Tensor<T>
where
    T: Element,
    F: Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + 'static,
{
    Tensor::from_op(shape, data, inputs, ClosureBackward { name, f })
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_axis<T: Element>(op: &'static str, x: &Tensor<T>) -> TensorResult<(usize, usize)> {
    let k = *x.shape().last().ok_or_else(|| TensorError::Config {
        op,
        msg: "needs at least one dimension".into(),
    })?;
    if k == 0 {
        return Err(TensorError::Config {
            op,
            msg: "last axis is empty".into(),
        });
    }
    Ok((x.numel() / k, k))
}

fn check_temperature(op: &'static str, tau: f64) -> TensorResult<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(TensorError::Param {
            op,
            msg: format!("temperature must be positive and finite, got {tau}"),
        });
    }
    Ok(())
}

fn grad_if<T: Element>(t: &Tensor<T>, f: impl FnOnce() -> Vec<T>) -> Option<Vec<T>> {
    t.requires_grad().then(f)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(record("add", a.shape().to_vec(), data, &[a, b], |inp, _, g| {
        vec![grad_if(&inp[0], || g.to_vec()), grad_if(&inp[1], || g.to_vec())]
    }))
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    Ok(record("sub", a.shape().to_vec(), data, &[a, b], |inp, _, g| {
        vec![
            grad_if(&inp[0], || g.to_vec()),
            grad_if(&inp[1], || g.iter().map(|&v| -v).collect()),
        ]
    }))
}

/// Elementwise product.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Ok(record("mul", a.shape().to_vec(), data, &[a, b], |inp, _, g| {
        let ga = grad_if(&inp[0], || g.iter().zip(inp[1].data().iter()).map(|(&g, &y)| g * y).collect());
        let gb = grad_if(&inp[1], || g.iter().zip(inp[0].data().iter()).map(|(&g, &x)| g * x).collect());
        vec![ga, gb]
    }))
}

pub fn scale<T: Element>(a: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::c(s);
    let data = a.data().iter().map(|&x| x * s).collect();
    record("scale", a.shape().to_vec(), data, &[a], move |_, _, g| {
        vec![Some(g.iter().map(|&v| v * s).collect())]
    })
}

pub fn add_scalar<T: Element>(a: &Tensor<T>, s: f64) -> Tensor<T> {
    let s = T::c(s);
    let data = a.data().iter().map(|&x| x + s).collect();
    record("add_scalar", a.shape().to_vec(), data, &[a], |_, _, g| vec![Some(g.to_vec())])
}

/// Sum of all elements, as a scalar.
pub fn sum<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let total = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
    let n = a.numel();
    record("sum", Vec::new(), vec![total], &[a], move |_, _, g| vec![Some(vec![g[0]; n])])
}

/// Mean of all elements, as a scalar.
pub fn mean<T: Element>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.numel();
    let total = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
    let inv = T::one() / T::c(n as f64);
    record("mean", Vec::new(), vec![total * inv], &[a], move |_, _, g| vec![Some(vec![g[0] * inv; n])])
}

pub fn reshape<T: Element>(a: &Tensor<T>, shape: &[usize]) -> TensorResult<Tensor<T>> {
    if super::numel(shape) != a.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "reshape",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let data = a.to_vec();
    Ok(record("reshape", shape.to_vec(), data, &[a], |_, _, g| vec![Some(g.to_vec())]))
}

/// Collapses everything after the leading (batch) axis.
pub fn flatten<T: Element>(a: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let n = *a.shape().first().ok_or_else(|| TensorError::Config {
        op: "flatten",
        msg: "needs a batch axis".into(),
    })?;
    let rest = if n == 0 { 0 } else { a.numel() / n };
    reshape(a, &[n, rest])
}

fn matrix_dims<T: Element>(op: &'static str, a: &Tensor<T>) -> TensorResult<(usize, usize)> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Config {
            op,
            msg: format!("expected a matrix, got shape {s:?}"),
        }),
    }
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (r, c) = matrix_dims("transpose", a)?;
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    drop(src);
    Ok(record("transpose", vec![c, r], out, &[a], move |_, _, g| {
        let mut gi = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                gi[i * c + j] = g[j * r + i];
            }
        }
        vec![Some(gi)]
    }))
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        &a.data(),
        k as isize,
        1,
        &b.data(),
        n as isize,
        1,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    Ok(record("matmul", vec![m, n], out, &[a, b], move |inp, _, g| {
        let ga = grad_if(&inp[0], || {
            // g · bᵀ
            let mut ga = vec![T::zero(); m * k];
            T::gemm(m, n, k, T::one(), g, n as isize, 1, &inp[1].data(), 1, n as isize, T::zero(), &mut ga, k as isize, 1);
            ga
        });
        let gb = grad_if(&inp[1], || {
            // aᵀ · g
            let mut gb = vec![T::zero(); k * n];
            T::gemm(k, m, n, T::one(), &inp[0].data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
            gb
        });
        vec![ga, gb]
    }))
}

/// Adds a per-column bias `[f]` to every row of `[n, f]`.
pub fn add_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (n, f) = matrix_dims("add_bias", x)?;
    if bias.shape() != [f] {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let data = x.data().chunks(f.max(1)).flat_map(|row| row.iter().zip(b.iter()).map(|(&v, &bb)| v + bb)).collect();
    drop(b);
    Ok(record("add_bias", vec![n, f], data, &[x, bias], move |inp, _, g| {
        let gx = grad_if(&inp[0], || g.to_vec());
        let gb = grad_if(&inp[1], || {
            let mut gb = vec![T::zero(); f];
            for row in g.chunks(f.max(1)) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
            }
            gb
        });
        vec![gx, gb]
    }))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    record("relu", x.shape().to_vec(), data, &[x], |inp, _, g| {
        let xd = inp[0].data();
        vec![Some(g.iter().zip(xd.iter()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect())]
    })
}

/// `max(slope·x, x)`; the derivative at exactly zero is `slope`.
pub fn leaky_relu<T: Element>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::c(slope);
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { v * s }).collect();
    record("leaky_relu", x.shape().to_vec(), data, &[x], move |inp, _, g| {
        let xd = inp[0].data();
        vec![Some(g.iter().zip(xd.iter()).map(|(&g, &v)| if v > T::zero() { g } else { g * s }).collect())]
    })
}

fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
fn log_sigmoid_scalar<T: Element>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    record("sigmoid", x.shape().to_vec(), data, &[x], |_, y, g| {
        vec![Some(g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect())]
    })
}

pub fn log_sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| log_sigmoid_scalar(v)).collect();
    record("log_sigmoid", x.shape().to_vec(), data, &[x], |inp, _, g| {
        let xd = inp[0].data();
        vec![Some(g.iter().zip(xd.iter()).map(|(&g, &v)| g * sigmoid_scalar(-v)).collect())]
    })
}

fn softmax_rows<T: Element>(x: &[T], rows: usize, k: usize, tau: T) -> Vec<T> {
    let mut out = vec![T::zero(); rows * k];
    for r in 0..rows {
        let row = &x[r * k..(r + 1) * k];
        let o = &mut out[r * k..(r + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = ((v - max) / tau).exp();
            total = total + *oi;
        }
        o.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

/// Softmax of `x / tau` along the last axis.
pub fn softmax<T: Element>(x: &Tensor<T>, tau: f64) -> TensorResult<Tensor<T>> {
    check_temperature("softmax", tau)?;
    let (rows, k) = last_axis("softmax", x)?;
    let t = T::c(tau);
    let data = softmax_rows(&x.data(), rows, k, t);
    Ok(record("softmax", x.shape().to_vec(), data, &[x], move |_, y, g| {
        let mut gx = vec![T::zero(); rows * k];
        for r in 0..rows {
            let ys = &y[r * k..(r + 1) * k];
            let gs = &g[r * k..(r + 1) * k];
            let dot = ys.iter().zip(gs).fold(T::zero(), |a, (&y, &g)| a + y * g);
            for j in 0..k {
                gx[r * k + j] = ys[j] * (gs[j] - dot) / t;
            }
        }
        vec![Some(gx)]
    }))
}

/// Log-softmax of `x / tau` along the last axis.
pub fn log_softmax<T: Element>(x: &Tensor<T>, tau: f64) -> TensorResult<Tensor<T>> {
    check_temperature("log_softmax", tau)?;
    let (rows, k) = last_axis("log_softmax", x)?;
    let t = T::c(tau);
    let xd = x.data();
    let mut data = vec![T::zero(); rows * k];
    for r in 0..rows {
        let row = &xd[r * k..(r + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().fold(T::zero(), |a, &v| a + ((v - max) / t).exp()).ln();
        for j in 0..k {
            data[r * k + j] = (row[j] - max) / t - lse;
        }
    }
    drop(xd);
    Ok(record("log_softmax", x.shape().to_vec(), data, &[x], move |_, y, g| {
        let mut gx = vec![T::zero(); rows * k];
        for r in 0..rows {
            let gs = &g[r * k..(r + 1) * k];
            let total = gs.iter().fold(T::zero(), |a, &v| a + v);
            for j in 0..k {
                gx[r * k + j] = (gs[j] - y[r * k + j].exp() * total) / t;
            }
        }
        vec![Some(gx)]
    }))
}

/// Shannon entropy (nats) of probability vectors along the last axis;
/// `0·ln 0` is taken as 0 and contributes a zero gradient.
pub fn entropy<T: Element>(p: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (rows, k) = last_axis("entropy", p)?;
    let pd = p.data();
    let tol = T::c(1e-5);
    let mut data = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &pd[r * k..(r + 1) * k];
        if let Some(bad) = row.iter().find(|v| **v < T::zero() || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "entropy",
                msg: format!("probability entry {bad} is negative"),
            });
        }
        let total = row.iter().fold(T::zero(), |a, &v| a + v);
        if (total - T::one()).abs() > tol {
            return Err(TensorError::Domain {
                op: "entropy",
                msg: format!("row {r} sums to {total}, not 1"),
            });
        }
        data[r] = -row.iter().filter(|v| **v > T::zero()).fold(T::zero(), |a, &v| a + v * v.ln());
    }
    drop(pd);
    let shape = p.shape()[..p.ndim() - 1].to_vec();
    Ok(record("entropy", shape, data, &[p], move |inp, _, g| {
        let pd = inp[0].data();
        let mut gp = vec![T::zero(); rows * k];
        for r in 0..rows {
            for j in 0..k {
                let v = pd[r * k + j];
                if v > T::zero() {
                    gp[r * k + j] = -(v.ln() + T::one()) * g[r];
                }
            }
        }
        vec![Some(gp)]
    }))
}

/// Entropy of `softmax(x / tau)` along the last axis, fused so the gradient
/// stays finite when probabilities underflow.
pub fn softmax_entropy<T: Element>(x: &Tensor<T>, tau: f64) -> TensorResult<Tensor<T>> {
    check_temperature("softmax_entropy", tau)?;
    let (rows, k) = last_axis("softmax_entropy", x)?;
    let t = T::c(tau);
    let xd = x.data();
    let p = softmax_rows(&xd, rows, k, t);
    let mut data = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &xd[r * k..(r + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let z: Vec<T> = row.iter().map(|&v| (v - max) / t).collect();
        let lse = z.iter().fold(T::zero(), |a, &v| a + v.exp()).ln();
        let zbar = z.iter().zip(&p[r * k..(r + 1) * k]).fold(T::zero(), |a, (&z, &p)| a + z * p);
        data[r] = lse - zbar;
    }
    drop(xd);
    let shape = x.shape()[..x.ndim() - 1].to_vec();
    Ok(record("softmax_entropy", shape, data, &[x], move |inp, _, g| {
        let xd = inp[0].data();
        let mut gx = vec![T::zero(); rows * k];
        for r in 0..rows {
            let ps = &p[r * k..(r + 1) * k];
            let zs: Vec<T> = xd[r * k..(r + 1) * k].iter().map(|&v| v / t).collect();
            let zbar = zs.iter().zip(ps).fold(T::zero(), |a, (&z, &p)| a + z * p);
            for j in 0..k {
                gx[r * k + j] = -g[r] * ps[j] * (zs[j] - zbar) / t;
            }
        }
        vec![Some(gx)]
    }))
}

/// Selects `x[i, index[i]]` from each row of `[n, k]`.
pub fn pick<T: Element>(x: &Tensor<T>, index: &[usize]) -> TensorResult<Tensor<T>> {
    let (n, k) = matrix_dims("pick", x)?;
    if index.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "pick",
            lhs: x.shape().to_vec(),
            rhs: vec![index.len()],
        });
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= k) {
        return Err(TensorError::Param {
            op: "pick",
            msg: format!("index {bad} out of range for {k} columns"),
        });
    }
    let xd = x.data();
    let data = index.iter().enumerate().map(|(i, &j)| xd[i * k + j]).collect();
    drop(xd);
    let index = index.to_vec();
    Ok(record("pick", vec![n], data, &[x], move |_, _, g| {
        let mut gx = vec![T::zero(); n * k];
        for (i, &j) in index.iter().enumerate() {
            gx[i * k + j] = g[i];
        }
        vec![Some(gx)]
    }))
}

/// Concatenates `[n, a]` and `[n, b]` along columns.
pub fn concat_cols<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (n, ca) = matrix_dims("concat_cols", a)?;
    let (nb, cb) = matrix_dims("concat_cols", b)?;
    if n != nb {
        return Err(TensorError::ShapeMismatch {
            op: "concat_cols",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let w = ca + cb;
    let mut data = Vec::with_capacity(n * w);
    {
        let (ad, bd) = (a.data(), b.data());
        for i in 0..n {
            data.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
    }
    Ok(record("concat_cols", vec![n, w], data, &[a, b], move |inp, _, g| {
        let ga = grad_if(&inp[0], || (0..n).flat_map(|i| g[i * w..i * w + ca].to_vec()).collect());
        let gb = grad_if(&inp[1], || (0..n).flat_map(|i| g[i * w + ca..(i + 1) * w].to_vec()).collect());
        vec![ga, gb]
    }))
}

/// Per-class means of the rows of `[n, d]`: row `c` of the result averages
/// every row `i` with `labels[i] == c`. Every class must occur.
pub fn segment_mean<T: Element>(x: &Tensor<T>, labels: &[usize], classes: usize) -> TensorResult<Tensor<T>> {
    let (n, d) = matrix_dims("segment_mean", x)?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "segment_mean",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(TensorError::Param {
                op: "segment_mean",
                msg: format!("label {l} out of range for {classes} classes"),
            });
        }
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(TensorError::Param {
            op: "segment_mean",
            msg: format!("class {empty} has no members"),
        });
    }
    let xd = x.data();
    let mut out = vec![T::zero(); classes * d];
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..d {
            out[l * d + j] = out[l * d + j] + xd[i * d + j];
        }
    }
    drop(xd);
    for c in 0..classes {
        let inv = T::one() / T::c(counts[c] as f64);
        out[c * d..(c + 1) * d].iter_mut().for_each(|v| *v = *v * inv);
    }
    let labels = labels.to_vec();
    Ok(record("segment_mean", vec![classes, d], out, &[x], move |_, _, g| {
        let mut gx = vec![T::zero(); n * d];
        for (i, &l) in labels.iter().enumerate() {
            let inv = T::one() / T::c(counts[l] as f64);
            for j in 0..d {
                gx[i * d + j] = g[l * d + j] * inv;
            }
        }
        vec![Some(gx)]
    }))
}

/// Scales every row of `[r, d]` to unit Euclidean norm.
pub fn l2_normalize_rows<T: Element>(x: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (r, d) = matrix_dims("l2_normalize_rows", x)?;
    let xd = x.data();
    let mut norms = vec![T::zero(); r];
    let mut out = vec![T::zero(); r * d];
    for i in 0..r {
        let row = &xd[i * d..(i + 1) * d];
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if !(norm > T::zero()) {
            return Err(TensorError::Domain {
                op: "l2_normalize_rows",
                msg: format!("row {i} has zero norm"),
            });
        }
        norms[i] = norm;
        for j in 0..d {
            out[i * d + j] = row[j] / norm;
        }
    }
    drop(xd);
    Ok(record("l2_normalize_rows", vec![r, d], out, &[x], move |_, y, g| {
        let mut gx = vec![T::zero(); r * d];
        for i in 0..r {
            let ys = &y[i * d..(i + 1) * d];
            let gs = &g[i * d..(i + 1) * d];
            let dot = ys.iter().zip(gs).fold(T::zero(), |a, (&y, &g)| a + y * g);
            for j in 0..d {
                gx[i * d + j] = (gs[j] - ys[j] * dot) / norms[i];
            }
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_small() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&id, &m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&a, &b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = matmul(&t(&[4, 5], &a), &t(&[5, 3], &b)).unwrap().to_vec();
        let want = naive_matmul(&a, &b, 4, 5, 3);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1e-12) + 1e-15);
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 3], &[0.0; 6])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn relu_and_leaky_values() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).to_vec(), vec![0.0, 0.0, 2.0]);
        let y = leaky_relu(&t(&[1], &[-1.0]), 0.2).to_vec();
        assert!((y[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn relu_grad_at_zero_is_zero_leaky_is_slope() {
        let x = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
        sum(&relu(&x)).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
        let x = Tensor::<f64>::param(&[1], vec![0.0]).unwrap();
        sum(&leaky_relu(&x, 0.2)).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.2]);
    }

    #[test]
    fn softmax_uniform_for_constant_rows() {
        for tau in [0.1, 1.0, 7.0] {
            let y = softmax(&t(&[4], &[3.0; 4]), tau).unwrap().to_vec();
            assert!(y.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn softmax_large_temperature_is_nearly_uniform() {
        let y = softmax(&t(&[4], &[2.0, -9.0, 30.0, 0.5]), 1e6).unwrap().to_vec();
        assert!(y.iter().all(|v| (v - 0.25).abs() <= 1e-3));
    }

    #[test]
    fn softmax_matches_reference() {
        let x = [2.0, 1.0, 0.0, -1.0];
        let e: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let y = softmax(&Tensor::<f32>::from_f64(&[4], &x).unwrap(), 1.0).unwrap().to_f64_vec();
        for (a, b) in y.iter().zip(e.iter().map(|v| v / z)) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        assert!(matches!(softmax(&t(&[2], &[0.0, 1.0]), 0.0), Err(TensorError::Param { .. })));
        assert!(matches!(softmax(&t(&[2], &[0.0, 1.0]), -1.0), Err(TensorError::Param { .. })));
    }

    #[test]
    fn softmax_does_not_overflow() {
        let y = softmax(&Tensor::<f32>::from_f64(&[3], &[1000.0, 0.0, -1000.0]).unwrap(), 0.25).unwrap().to_vec();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn entropy_identities() {
        assert_eq!(entropy(&t(&[3], &[0.0, 1.0, 0.0])).unwrap().item(), 0.0);
        let h = entropy(&t(&[4], &[0.25; 4])).unwrap().item();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(entropy(&t(&[2], &[-0.1, 1.1])), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn entropy_of_softmax_matches_reference() {
        let x = [2.0f64, 1.0, 0.0, -1.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let want: f64 = -x.iter().map(|v| v.exp() / z).map(|p| p * p.ln()).sum::<f64>();
        let p = softmax(&Tensor::<f32>::from_f64(&[4], &x).unwrap(), 1.0).unwrap();
        let got = entropy(&p).unwrap().item() as f64;
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        let fused = softmax_entropy(&t(&[4], &x), 1.0).unwrap().item();
        assert!((fused - want).abs() <= 1e-12);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let y = log_sigmoid(&t(&[3], &[-800.0, 0.0, 800.0])).to_vec();
        assert!((y[0] + 800.0).abs() < 1e-9);
        assert!((y[1] + 2f64.ln()).abs() < 1e-15);
        assert!(y[2] <= 0.0 && y[2] > -1e-300);
    }

    #[test]
    fn segment_mean_and_errors() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0]);
        let m = segment_mean(&x, &[0, 0, 1], 2).unwrap().to_vec();
        assert_eq!(m, vec![2.0, 3.0, 10.0, 20.0]);
        assert!(segment_mean(&x, &[0, 0, 0], 2).is_err());
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        assert!(l2_normalize_rows(&t(&[1, 2], &[0.0, 0.0])).is_err());
        let y = l2_normalize_rows(&t(&[1, 2], &[3.0, 4.0])).unwrap().to_vec();
        assert_eq!(y, vec![0.6, 0.8]);
    }
}
