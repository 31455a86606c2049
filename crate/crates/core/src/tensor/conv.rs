//! 2-D convolution (cross-correlation) and max pooling over NCHW tensors.

use super::ops::record;
use super::{Element, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: 1, padding: 0 }
    }
}

fn nchw<T: Element>(op: &'static str, x: &Tensor<T>) -> TensorResult<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(TensorError::Config {
            op,
            msg: format!("expected an NCHW tensor, got shape {s:?}"),
        }),
    }
}

/// Output extent of a sliding window, or `None` when it does not tile the
/// padded input exactly.
pub fn window_extent(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    window_out("window", len, k, stride, pad).ok()
}

/// Output extent of a sliding window, or an error when the window does not
/// tile the padded input exactly.
pub(crate) fn window_out(op: &'static str, len: usize, k: usize, stride: usize, pad: usize) -> TensorResult<usize> {
    if stride == 0 {
        return Err(TensorError::Config {
            op,
            msg: "stride must be positive".into(),
        });
    }
    let padded = len + 2 * pad;
    if padded < k {
        return Err(TensorError::Config {
            op,
            msg: format!("window {k} larger than padded extent {padded}"),
        });
    }
    if (padded - k) % stride != 0 {
        return Err(TensorError::Config {
            op,
            msg: format!("extent {len} with padding {pad} is not tiled by window {k} at stride {stride}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[c, h, w]` into `[c·kh·kw, ho·wo]`.
    fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let hw = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                img[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adds the columns back onto an image gradient (adjoint of `im2col`).
    fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let hw = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let idx = (ci * self.h + iy as usize) * self.w + ix as usize;
                            img[idx] = img[idx] + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [n, c, h, w]` with `weight: [f, c, kh, kw]`
/// plus a per-filter `bias: [f]`.
pub fn conv2d<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, params: Conv2dParams) -> TensorResult<Tensor<T>> {
    let [n, c, h, w] = nchw("conv2d", x)?;
    let [f, wc, kh, kw] = nchw("conv2d", weight)?;
    if wc != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if bias.shape() != [f] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let ho = window_out("conv2d", h, kh, params.stride, params.padding)?;
    let wo = window_out("conv2d", w, kw, params.stride, params.padding)?;
    let geo = Geometry {
        c,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        stride: params.stride,
        pad: params.padding,
    };
    let (rows, hw) = (geo.rows(), geo.cols());
    let img_len = c * h * w;

    let mut out = vec![T::zero(); n * f * hw];
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut cols = vec![T::zero(); rows * hw];
        for s in 0..n {
            geo.im2col(&xd[s * img_len..(s + 1) * img_len], &mut cols);
            let o = &mut out[s * f * hw..(s + 1) * f * hw];
            for fi in 0..f {
                o[fi * hw..(fi + 1) * hw].iter_mut().for_each(|v| *v = bd[fi]);
            }
            T::gemm(f, rows, hw, T::one(), &wd, rows as isize, 1, &cols, hw as isize, 1, T::one(), o, hw as isize, 1);
        }
    }

    Ok(record("conv2d", vec![n, f, ho, wo], out, &[x, weight, bias], move |inp, _, g| {
        let (xt, wt, bt) = (&inp[0], &inp[1], &inp[2]);
        let xd = xt.data();
        let wd = wt.data();
        let mut gx = xt.requires_grad().then(|| vec![T::zero(); n * img_len]);
        let mut gw = wt.requires_grad().then(|| vec![T::zero(); f * rows]);
        let mut gb = bt.requires_grad().then(|| vec![T::zero(); f]);
        let mut cols = vec![T::zero(); rows * hw];
        let mut gcols = vec![T::zero(); rows * hw];
        for s in 0..n {
            let gs = &g[s * f * hw..(s + 1) * f * hw];
            if let Some(gb) = gb.as_mut() {
                for fi in 0..f {
                    gb[fi] = gb[fi] + gs[fi * hw..(fi + 1) * hw].iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            if let Some(gw) = gw.as_mut() {
                geo.im2col(&xd[s * img_len..(s + 1) * img_len], &mut cols);
                // gw += g_s · colsᵀ
                T::gemm(f, hw, rows, T::one(), gs, hw as isize, 1, &cols, 1, hw as isize, T::one(), gw, rows as isize, 1);
            }
            if let Some(gx) = gx.as_mut() {
                // gcols = wᵀ · g_s
                T::gemm(rows, f, hw, T::one(), &wd, 1, rows as isize, gs, hw as isize, 1, T::zero(), &mut gcols, hw as isize, 1);
                geo.col2im(&gcols, &mut gx[s * img_len..(s + 1) * img_len]);
            }
        }
        vec![gx, gw, gb]
    }))
}

/// Max pooling with a square window. Ties route the gradient to the first
/// maximal element in row-major window order.
pub fn maxpool2d<T: Element>(x: &Tensor<T>, size: usize, stride: usize) -> TensorResult<Tensor<T>> {
    let [n, c, h, w] = nchw("maxpool2d", x)?;
    if size == 0 {
        return Err(TensorError::Config {
            op: "maxpool2d",
            msg: "window size must be positive".into(),
        });
    }
    let ho = window_out("maxpool2d", h, size, stride, 0)?;
    let wo = window_out("maxpool2d", w, size, stride, 0)?;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = xd[best];
                argmax[o] = best;
            }
        }
    }
    drop(xd);
    let len = x.numel();
    Ok(record("maxpool2d", vec![n, c, ho, wo], out, &[x], move |_, _, g| {
        let mut gx = vec![T::zero(); len];
        for (o, &src) in argmax.iter().enumerate() {
            gx[src] = gx[src] + g[o];
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sum;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn naive_conv(x: &[f64], wt: &[f64], b: &[f64], n: usize, c: usize, h: usize, w: usize, f: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * f * ho * wo];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[fi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((ni * c + ci) * h + iy as usize) * w + ix as usize] * wt[((fi * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((ni * f + fi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d(&x, &w, &b, Conv2dParams::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f32>::zeros(&[2, 3, 5, 5]);
        let w = Tensor::<f32>::full(&[4, 3, 3, 3], 0.7);
        let b = Tensor::<f32>::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = conv2d(&x, &w, &b, Conv2dParams { stride: 1, padding: 1 }).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 5]);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[(i / 25) % 4]);
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, c, h, w, f, k) = (2, 3, 8, 8, 4, 3);
        let xv = rand_vec(&mut rng, n * c * h * w);
        let wv = rand_vec(&mut rng, f * c * k * k);
        let bv = rand_vec(&mut rng, f);
        let y = conv2d(
            &Tensor::<f64>::from_f64(&[n, c, h, w], &xv).unwrap(),
            &Tensor::from_f64(&[f, c, k, k], &wv).unwrap(),
            &Tensor::from_f64(&[f], &bv).unwrap(),
            Conv2dParams { stride: 1, padding: 1 },
        )
        .unwrap();
        let want = naive_conv(&xv, &wv, &bv, n, c, h, w, f, k, 1, 1);
        for (a, b) in y.to_vec().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn non_integral_output_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 6, 6]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        let err = conv2d(&x, &w, &b, Conv2dParams { stride: 2, padding: 0 }).unwrap_err();
        assert!(matches!(err, TensorError::Config { .. }));
        assert!(matches!(maxpool2d(&Tensor::<f32>::zeros(&[1, 1, 5, 5]), 2, 2), Err(TensorError::Config { .. })));
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().to_vec(), vec![4.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_element() {
        let x = Tensor::<f64>::param(&[1, 1, 4, 4], vec![3.0; 16]).unwrap();
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![3.0; 4]);
        sum(&y).backward().unwrap();
        let g = x.grad().unwrap();
        let firsts = [0, 2, 8, 10];
        for (i, v) in g.iter().enumerate() {
            assert_eq!(*v, if firsts.contains(&i) { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let xv = rand_vec(&mut rng, 16);
        let y = maxpool2d(&Tensor::<f64>::from_f64(&[1, 1, 4, 4], &xv).unwrap(), 2, 2).unwrap().to_vec();
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..2 {
                    for kx in 0..2 {
                        m = m.max(xv[(oy * 2 + ky) * 4 + ox * 2 + kx]);
                    }
                }
                assert_eq!(y[oy * 2 + ox], m);
            }
        }
    }
}
