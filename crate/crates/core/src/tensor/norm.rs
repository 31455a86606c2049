use super::ops::record;
use super::{Element, Tensor, TensorError, TensorResult};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

/// Per-channel batch normalization of an NCHW tensor.
///
/// `running_mean` / `running_var` are plain (non-differentiable) tensors of
/// shape `[c]` updated in place in train mode with momentum
/// [`BN_MOMENTUM`]; the running variance uses the unbiased estimate.
pub fn batchnorm2d<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: BatchNormMode,
) -> TensorResult<Tensor<T>> {
    let (n, c, hw) = match *x.shape() {
        [n, c, h, w] => (n, c, h * w),
        ref s => {
            return Err(TensorError::Config {
                op: "batchnorm2d",
                msg: format!("expected an NCHW tensor, got shape {s:?}"),
            })
        }
    };
    for p in [gamma, beta, running_mean, running_var] {
        if p.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm2d",
                lhs: x.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    if mode == BatchNormMode::Train && n < 2 {
        return Err(TensorError::Param {
            op: "batchnorm2d",
            msg: format!("train mode needs a batch of at least 2, got {n}"),
        });
    }
    let eps = T::c(BN_EPS);
    let count = n * hw;
    let xd = x.data();

    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut acc = T::zero();
                for s in 0..n {
                    acc = xd[(s * c + ci) * hw..(s * c + ci + 1) * hw].iter().fold(acc, |a, &v| a + v);
                }
                let m = acc / T::c(count as f64);
                let mut sq = T::zero();
                for s in 0..n {
                    sq = xd[(s * c + ci) * hw..(s * c + ci + 1) * hw].iter().fold(sq, |a, &v| a + (v - m) * (v - m));
                }
                mean[ci] = m;
                var[ci] = sq / T::c(count as f64);
            }
            let mom = T::c(BN_MOMENTUM);
            let unbias = T::c(count as f64 / (count as f64 - 1.0));
            let mut rm = running_mean.data_mut();
            let mut rv = running_var.data_mut();
            for ci in 0..c {
                rm[ci] = (T::one() - mom) * rm[ci] + mom * mean[ci];
                rv[ci] = (T::one() - mom) * rv[ci] + mom * var[ci] * unbias;
            }
            (mean, var)
        }
        BatchNormMode::Eval => (running_mean.to_vec(), running_var.to_vec()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    {
        let gd = gamma.data();
        let bd = beta.data();
        for s in 0..n {
            for ci in 0..c {
                let range = (s * c + ci) * hw..(s * c + ci + 1) * hw;
                for i in range {
                    xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                    out[i] = gd[ci] * xhat[i] + bd[ci];
                }
            }
        }
    }
    drop(xd);

    Ok(record("batchnorm2d", x.shape().to_vec(), out, &[x, gamma, beta], move |inp, _, g| {
        let gd = inp[1].data();
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for s in 0..n {
            for ci in 0..c {
                for i in (s * c + ci) * hw..(s * c + ci + 1) * hw {
                    ggamma[ci] = ggamma[ci] + g[i] * xhat[i];
                    gbeta[ci] = gbeta[ci] + g[i];
                }
            }
        }
        let gx = inp[0].requires_grad().then(|| {
            let mut gx = vec![T::zero(); g.len()];
            let m = T::c(count as f64);
            for ci in 0..c {
                let scale = gd[ci] * inv_std[ci];
                for s in 0..n {
                    for i in (s * c + ci) * hw..(s * c + ci + 1) * hw {
                        gx[i] = match mode {
                            // dx = γ·inv_std/m · (m·g − Σg − x̂·Σ(g·x̂))
                            BatchNormMode::Train => scale * (m * g[i] - gbeta[ci] - xhat[i] * ggamma[ci]) / m,
                            BatchNormMode::Eval => scale * g[i],
                        };
                    }
                }
            }
            gx
        });
        vec![
            gx,
            inp[1].requires_grad().then_some(ggamma),
            inp[2].requires_grad().then_some(gbeta),
        ]
    }))
}
