use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the group gradient to this global L2 norm when exceeded.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Bias-corrected Adam over one parameter group.
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    params: Vec<Tensor<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, config: AdamConfig) -> Result<Self> {
        if let Some(p) = params.iter().find(|p| !p.requires_grad()) {
            return Err(Error::Param(format!("tensor {} with shape {:?} does not require gradients", p.id(), p.shape())));
        }
        let m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Ok(Adam {
            config,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update from the accumulated gradients; parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self) {
        self.step += 1;
        let c = self.config;
        let grads: Vec<Option<Vec<T>>> = self.params.iter().map(|p| p.grad()).collect();
        let clip = c.clip_norm.and_then(|max| {
            let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
            (norm > max).then(|| T::c(max / norm))
        });
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let bc1 = T::c(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::c(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::c(c.lr), T::c(c.eps));
        for (i, p) in self.params.iter().enumerate() {
            let mut data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let mut g = grads[i].as_ref().map_or(T::zero(), |g| g[j]);
                if let Some(s) = clip {
                    g = g * s;
                }
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mul, sum};

    #[test]
    fn first_step_on_unit_gradient() {
        let x = Tensor::<f64>::param(&[], vec![0.5]).unwrap();
        let mut opt = Adam::new(vec![x.clone()], AdamConfig::default()).unwrap();
        sum(&x).backward().unwrap();
        opt.step();
        let want = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((x.item() - want).abs() <= 1e-10);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let x = Tensor::<f32>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut opt = Adam::new(vec![x.clone()], AdamConfig::default()).unwrap();
        opt.zero_grad();
        opt.step();
        assert_eq!(x.to_vec(), vec![1.0, 2.0, 3.0]);
        opt.step();
        assert_eq!(x.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn groups_are_independent() {
        let a = Tensor::<f64>::param(&[], vec![1.0]).unwrap();
        let b = Tensor::<f64>::param(&[], vec![1.0]).unwrap();
        let mut oa = Adam::new(vec![a.clone()], AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let mut ob = Adam::new(vec![b.clone()], AdamConfig { lr: 0.01, ..Default::default() }).unwrap();
        sum(&a).backward().unwrap();
        sum(&b).backward().unwrap();
        oa.step();
        assert_eq!(b.item(), 1.0);
        ob.step();
        assert!((1.0 - a.item() - 0.1).abs() < 1e-6);
        assert!((1.0 - b.item() - 0.01).abs() < 1e-6);
        ob.zero_grad();
        assert!(a.grad().unwrap()[0] != 0.0);
    }

    #[test]
    fn convex_quadratic_converges() {
        let x = Tensor::<f64>::param(&[4], vec![3.0, -2.0, 1.5, 0.5]).unwrap();
        let w = Tensor::<f64>::from_f64(&[4], &[1.0, 2.0, 0.5, 3.0]).unwrap();
        let loss = || sum(&mul(&mul(&x, &x).unwrap(), &w).unwrap());
        let start = loss().item();
        let mut opt = Adam::new(vec![x.clone()], AdamConfig { lr: 0.05, ..Default::default() }).unwrap();
        for _ in 0..500 {
            opt.zero_grad();
            loss().backward().unwrap();
            opt.step();
        }
        assert!(loss().item() * 100.0 <= start, "{} vs {start}", loss().item());
    }

    #[test]
    fn clipping_bounds_first_update() {
        let x = Tensor::<f64>::param(&[], vec![0.0]).unwrap();
        let mut opt = Adam::new(vec![x.clone()], AdamConfig { clip_norm: Some(0.5), ..Default::default() }).unwrap();
        sum(&crate::tensor::scale(&x, 100.0)).backward().unwrap();
        opt.step();
        assert!((x.item() + 1e-3).abs() < 1e-6);
    }

    #[test]
    fn constant_tensors_rejected() {
        assert!(Adam::new(vec![Tensor::<f32>::zeros(&[2])], AdamConfig::default()).is_err());
    }
}
