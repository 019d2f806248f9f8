//! Inputs shared by the benchmarks.

use guidedquant::hessian::plain_hessian;
use guidedquant::model::gen_dataset;
use guidedquant::scalar_quant::rtn_quantize;
use guidedquant::{ChannelQuantState, LayerCalibration, LossKind, Matrix};

/// A damped Gram Hessian over `d` inputs, a `d×c` weight block with
/// Gaussian entries and RTN starting states with `2^bits` levels.
pub fn cd_instance(d: usize, c: usize, bits: u32, seed: u64) -> (Matrix, Matrix, Vec<ChannelQuantState>) {
    let x = gen_dataset(seed, 2 * d, d, 1, LossKind::SquaredError)
        .expect("dataset")
        .inputs;
    let n = x.rows();
    let calib = LayerCalibration::new(0, x, Matrix::zeros(n, 1)).expect("calibration");
    let h = plain_hessian(&calib, 1e-2).expect("hessian").hessians.remove(0);
    let w = gen_dataset(seed + 1, d, c, 1, LossKind::SquaredError)
        .expect("weights")
        .inputs;
    let states = rtn_quantize(&w, bits, seed).expect("rtn").channels;
    (h, w, states)
}
