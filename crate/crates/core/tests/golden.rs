//! Logits of freshly built networks on a fixed input, recorded once.

use xfer_core::nn::{Mode, Network, NetworkSpec};
use xfer_core::Tensor;

fn logits(spec: &NetworkSpec) -> Vec<f32> {
    let net: Network = Network::build(spec, 7).unwrap();
    let (h, w) = (spec.input[1], spec.input[2]);
    let x: Vec<f32> = (0..2 * h * w).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    net.logits(&Tensor::new(&[2, 1, h, w], x).unwrap(), Mode::Eval).unwrap().to_vec()
}

fn assert_close(got: &[f32], want: &[f32]) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-6, "{got:?}");
    }
}

#[test]
fn digits32_golden_logits() {
    assert_close(
        &logits(&NetworkSpec::digits_embedding(5)),
        &[0.0042760335, -0.016344616, 0.011211414, -0.021499533, -0.0365879, 0.0033067532, -0.015366556, 0.011034782, -0.019527841, -0.035083123],
    );
}

#[test]
fn lenet28_golden_logits() {
    assert_close(
        &logits(&NetworkSpec::lenet(10)),
        &[
            -0.052788187, 0.0549747, 0.0125245685, 0.00092331413, 0.030468304, 0.022692325, -0.018152988, 0.08471914, 0.02795413, -0.017001769, -0.053156912, 0.033132605, 0.0026021646, -0.006348477,
            0.044195395, 0.008139344, -0.017533028, 0.07880615, 0.02551318, 0.0031910427,
        ],
    );
}
