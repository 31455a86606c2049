//! Registry of finite-difference gradient checks over every differentiable
//! op, layer and loss, run in 64-bit precision on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::disc::{Activation, Discriminator, DiscriminatorSpec, Fusion};
use crate::error::Result;
use crate::losses::{domain_loss_d, domain_loss_e, entropy_transfer, metric_ce, semantic_total, similarity, supervised_ce, total_objective, SemanticConfig};
use crate::nn::{Mode, Network, NetworkSpec};
use crate::tensor::record;
use crate::tensor::{self as t, grad_check_params, BatchNormMode, Conv2dParams, GradCheckReport, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-4;
pub const INSTANCES: usize = 10;

type Run = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;

pub struct Case {
    pub name: &'static str,
    run: Run,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE && self.checked > 0
    }
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn constant(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ r ⊙ y` with fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> t::TensorResult<Tensor<f64>> {
    Ok(t::sum(&t::mul(y, r)?))
}

fn check<F>(f: F, params: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    grad_check_params(f, params, EPS)
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], op: impl Fn(&Tensor<f64>) -> t::TensorResult<Tensor<f64>>) -> Result<GradCheckReport> {
    let x = param(rng, shape, -2.0, 2.0);
    let out_shape = op(&x)?.shape().to_vec();
    let r = constant(rng, &out_shape);
    check(|| Ok(project(&op(&x)?, &r)?), &[x.clone()])
}

fn binary(rng: &mut ChaCha8Rng, a: &[usize], b: &[usize], op: impl Fn(&Tensor<f64>, &Tensor<f64>) -> t::TensorResult<Tensor<f64>>) -> Result<GradCheckReport> {
    let x = param(rng, a, -2.0, 2.0);
    let y = param(rng, b, -2.0, 2.0);
    let r = constant(rng, op(&x, &y)?.shape());
    check(|| Ok(project(&op(&x, &y)?, &r)?), &[x.clone(), y.clone()])
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).map(|i| i % k).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.gen_range(0..=i));
    }
    l
}

fn conv_case(rng: &mut ChaCha8Rng, stride: usize, padding: usize) -> Result<GradCheckReport> {
    let x = param(rng, &[2, 2, 5, 5], -1.0, 1.0);
    let w = param(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = param(rng, &[3], -1.0, 1.0);
    let p = Conv2dParams { stride, padding };
    let r = constant(rng, t::conv2d(&x, &w, &b, p)?.shape());
    check(|| Ok(project(&t::conv2d(&x, &w, &b, p)?, &r)?), &[x.clone(), w.clone(), b.clone()])
}

fn batchnorm_case(rng: &mut ChaCha8Rng, mode: BatchNormMode) -> Result<GradCheckReport> {
    let x = param(rng, &[3, 2, 2, 2], -2.0, 2.0);
    let g = param(rng, &[2], 0.5, 1.5);
    let b = param(rng, &[2], -0.5, 0.5);
    let rm = Tensor::new(&[2], vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).unwrap();
    let rv = Tensor::new(&[2], vec![rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)]).unwrap();
    let r = constant(rng, &[3, 2, 2, 2]);
    check(
        || Ok(project(&t::batchnorm2d(&x, &g, &b, &rm, &rv, mode)?, &r)?),
        &[x.clone(), g.clone(), b.clone()],
    )
}

fn disc_case(rng: &mut ChaCha8Rng, fusion: Fusion, activation: Activation) -> Result<GradCheckReport> {
    let spec = DiscriminatorSpec {
        tap_widths: vec![4, 3, 2],
        hidden: vec![5],
        gamma: rng.gen_range(0.05..1.0),
        fusion,
        activation,
    };
    let d = Discriminator::<f64>::build(&spec, rng.gen())?;
    let taps: Vec<Tensor<f64>> = spec.tap_widths.iter().map(|&w| param(rng, &[3, w], -1.0, 1.0)).collect();
    let r = constant(rng, &[3]);
    let mut params = d.parameters();
    params.extend(taps.iter().cloned());
    check(|| Ok(project(&d.forward(&taps)?, &r)?), &params)
}

fn network_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let net = Network::<f64>::build(&NetworkSpec::compact(8, 2, 4, 3), rng.gen())?;
    let x = param(rng, &[4, 1, 8, 8], -1.0, 1.0);
    let y = labels(rng, 4, 3);
    let mut params = net.parameters();
    params.push(x.clone());
    check(|| supervised_ce(&net.logits(&x, Mode::Train)?, &y), &params)
}

fn faulty_square(x: &Tensor<f64>) -> Tensor<f64> {
    let data = x.data().iter().map(|v| v * v).collect();
    // wrong on purpose: d(x²)/dx is 2x
    record("faulty_square", x.shape().to_vec(), data, &[x], |inp, _, g| {
        vec![Some(inp[0].data().iter().zip(g).map(|(x, g)| x * g).collect())]
    })
}

macro_rules! case {
    ($name:expr, $body:expr) => {
        Case { name: $name, run: $body }
    };
}

/// Every registered check.
pub fn registry() -> Vec<Case> {
    vec![
        case!("add", |r| binary(r, &[3, 4], &[3, 4], t::add)),
        case!("sub", |r| binary(r, &[3, 4], &[3, 4], t::sub)),
        case!("mul", |r| binary(r, &[3, 4], &[3, 4], t::mul)),
        case!("scale", |r| {
            let s = r.gen_range(-3.0..3.0);
            unary(r, &[5], move |x| Ok(t::scale(x, s)))
        }),
        case!("add_scalar", |r| unary(r, &[5], |x| Ok(t::add_scalar(x, 0.7)))),
        case!("sum", |r| unary(r, &[2, 3], |x| Ok(t::sum(x)))),
        case!("mean", |r| unary(r, &[2, 3], |x| Ok(t::mean(x)))),
        case!("reshape", |r| unary(r, &[2, 6], |x| t::reshape(x, &[3, 4]))),
        case!("flatten", |r| unary(r, &[2, 2, 3], t::flatten)),
        case!("transpose", |r| unary(r, &[3, 5], t::transpose)),
        case!("matmul", |r| binary(r, &[3, 4], &[4, 2], t::matmul)),
        case!("add_bias", |r| binary(r, &[4, 3], &[3], t::add_bias)),
        case!("relu", |r| unary(r, &[12], |x| Ok(t::relu(x)))),
        case!("leaky_relu", |r| unary(r, &[12], |x| Ok(t::leaky_relu(x, 0.2)))),
        case!("sigmoid", |r| unary(r, &[8], |x| Ok(t::sigmoid(x)))),
        case!("log_sigmoid", |r| unary(r, &[8], |x| Ok(t::log_sigmoid(x)))),
        case!("softmax", |r| {
            let tau = r.gen_range(0.5..4.0);
            unary(r, &[3, 5], move |x| t::softmax(x, tau))
        }),
        case!("log_softmax", |r| {
            let tau = r.gen_range(0.5..4.0);
            unary(r, &[3, 5], move |x| t::log_softmax(x, tau))
        }),
        case!("entropy", |r| unary(r, &[3, 5], |x| t::entropy(&t::softmax(x, 1.0)?))),
        case!("softmax_entropy", |r| {
            let tau = r.gen_range(0.25..8.0);
            unary(r, &[3, 5], move |x| t::softmax_entropy(x, tau))
        }),
        case!("pick", |r| {
            let idx = labels(r, 4, 3);
            unary(r, &[4, 3], move |x| t::pick(x, &idx))
        }),
        case!("concat_cols", |r| binary(r, &[3, 2], &[3, 4], t::concat_cols)),
        case!("segment_mean", |r| {
            let idx = labels(r, 7, 3);
            unary(r, &[7, 4], move |x| t::segment_mean(x, &idx, 3))
        }),
        case!("l2_normalize_rows", |r| unary(r, &[3, 4], t::l2_normalize_rows)),
        case!("conv2d", |r| conv_case(r, 1, 1)),
        case!("conv2d_strided", |r| conv_case(r, 2, 0)),
        case!("maxpool2d", |r| unary(r, &[2, 2, 4, 4], |x| t::maxpool2d(x, 2, 2))),
        case!("batchnorm2d_train", |r| batchnorm_case(r, BatchNormMode::Train)),
        case!("batchnorm2d_eval", |r| batchnorm_case(r, BatchNormMode::Eval)),
        case!("network", network_case),
        case!("discriminator_sum", |r| disc_case(r, Fusion::Sum, Activation::Relu)),
        case!("discriminator_concat", |r| disc_case(r, Fusion::Concat, Activation::LeakyRelu(0.2))),
        case!("supervised_ce", |r| {
            let y = labels(r, 6, 5);
            let x = param(r, &[6, 5], -3.0, 3.0);
            check(|| supervised_ce(&x, &y), &[x.clone()])
        }),
        case!("domain_loss_d", |r| {
            let (s, g) = (param(r, &[5], -4.0, 4.0), param(r, &[7], -4.0, 4.0));
            check(|| domain_loss_d(&s, &g), &[s.clone(), g.clone()])
        }),
        case!("domain_loss_e", |r| {
            let (s, g) = (param(r, &[5], -4.0, 4.0), param(r, &[7], -4.0, 4.0));
            check(|| domain_loss_e(&s, &g), &[s.clone(), g.clone()])
        }),
        case!("similarity", |r| {
            let (q, s) = (param(r, &[4, 6], -1.0, 1.0), param(r, &[5, 6], -1.0, 1.0));
            let w = constant(r, &[4, 5]);
            check(|| Ok(project(&similarity(&q, &s)?, &w)?), &[q.clone(), s.clone()])
        }),
        case!("entropy_transfer", |r| {
            let (q, s) = (param(r, &[4, 6], -1.0, 1.0), param(r, &[5, 6], -1.0, 1.0));
            let tau = r.gen_range(0.5..4.0);
            check(|| entropy_transfer(&q, &s, tau), &[q.clone(), s.clone()])
        }),
        case!("metric_ce", |r| {
            let (q, s) = (param(r, &[6, 4], -1.0, 1.0), param(r, &[3, 4], -1.0, 1.0));
            let y = labels(r, 6, 3);
            check(|| metric_ce(&q, &y, &s, 1.0), &[q.clone(), s.clone()])
        }),
        case!("semantic_total", |r| {
            let src = param(r, &[5, 4], -1.0, 1.0);
            let lab = param(r, &[10, 4], -1.0, 1.0);
            let unl = param(r, &[6, 4], -1.0, 1.0);
            let y = labels(r, 10, 5);
            check(|| Ok(semantic_total(&src, &lab, &y, &unl, 5, SemanticConfig::default())?.total), &[src.clone(), lab.clone(), unl.clone()])
        }),
        case!("total_objective", |r| {
            let (a, b) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
            let logits = param(r, &[4, 3], -2.0, 2.0);
            let (s, g) = (param(r, &[4], -2.0, 2.0), param(r, &[4], -2.0, 2.0));
            let (q, p) = (param(r, &[4, 3], -1.0, 1.0), param(r, &[3, 3], -1.0, 1.0));
            let y = labels(r, 4, 3);
            check(
                || {
                    let sup = supervised_ce(&logits, &y)?;
                    let dt = domain_loss_e(&s, &g)?;
                    let st = entropy_transfer(&q, &p, 2.0)?;
                    total_objective(&sup, &dt, &st, a, b)
                },
                &[logits.clone(), s.clone(), g.clone(), q.clone(), p.clone()],
            )
        }),
    ]
}

/// An op with a deliberately wrong backward rule, for testing the checker.
pub fn faulty_fixture() -> Case {
    case!("faulty_square", |r| unary(r, &[6], |x| Ok(faulty_square(x))))
}

impl Case {
    /// Runs `INSTANCES` seeded instances and merges their reports.
    pub fn run(&self, seed: u64) -> Result<CaseReport> {
        let mut merged = GradCheckReport::empty();
        for i in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            merged.merge(&(self.run)(&mut rng)?);
        }
        Ok(CaseReport {
            name: self.name,
            instances: INSTANCES,
            max_rel_error: merged.max_rel_error,
            checked: merged.checked,
            excluded: merged.excluded.len(),
        })
    }
}
