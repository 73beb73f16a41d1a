//! Reverse-mode differentiation on the tape, checked against finite
//! differences.

use fullsleepnet::layers::{conv_block_forward, ConvBlockParams};
use fullsleepnet::tensor::{grad_check, grad_check_report};
use fullsleepnet::{Result, Tape, Tensor};

fn main() -> Result<()> {
    // y = sum(tanh(w * x)), dy/dw = sum(x * (1 - tanh^2(w x)))
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0])?);
    let x = tape.constant(vec![3], vec![1.0, 2.0, -0.5])?;
    let wx = tape.mul(w, x)?;
    let t = tape.tanh(wx)?;
    let y = tape.sum(t)?;
    let grads = tape.backward(y)?;
    println!("y = {:.6}", tape.scalar(y)?);
    println!("dy/dw = {:?}", grads.get(w).unwrap());

    let quadratic = grad_check(
        |tape, p| {
            let sq = tape.mul(p[0], p[0])?;
            tape.sum(sq)
        },
        &[Tensor::new(vec![1], vec![3.0])?],
        1e-5,
    )?;
    println!("w^2 at 3: relative error {quadratic:.2e}");

    // A convolution block: two same-padded convolutions, ReLU, max pooling.
    let params = vec![
        Tensor::new(
            vec![32, 1],
            (0..32).map(|i| (i as f64 * 0.7).sin()).collect(),
        )?,
        Tensor::new(
            vec![5, 1, 4],
            (0..20)
                .map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0)
                .collect(),
        )?,
        Tensor::new(vec![4], vec![0.1, -0.1, 0.05, 0.0])?,
        Tensor::new(
            vec![3, 4, 4],
            (0..48)
                .map(|i| ((i * 5 % 13) as f64 - 6.0) / 15.0)
                .collect(),
        )?,
        Tensor::new(vec![4], vec![0.0; 4])?,
    ];
    let report = grad_check_report(
        |tape, p| {
            let block = ConvBlockParams {
                kernels_large: p[1],
                bias_large: p[2],
                kernels_small: p[3],
                bias_small: p[4],
            };
            let y = conv_block_forward(tape, p[0], &block)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        },
        &params,
        1e-5,
        None,
        0,
    )?;
    println!(
        "conv block: {} probes, max error {:.2e}, {} crossed a ReLU or pooling kink (one-sided error {:.2e})",
        report.probes, report.max_error, report.kink_probes, report.max_one_sided_error
    );
    Ok(())
}
