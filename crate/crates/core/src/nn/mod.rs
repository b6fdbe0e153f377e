//! Minimal differentiable building blocks shared by SR models and detectors.

mod graph;
mod optim;
mod params;

pub use graph::{ConvGeom, Graph, NodeId};
pub use optim::{clip_global_norm, Adam};
pub use params::{Gradients, Initializer, ParamId, ParamSet};

use ndarray::{Array1, ArrayD, IxDyn};

/// Registers a conv layer's weight `[k, k, c_in, c_out]` and bias.
pub fn add_conv(
    params: &mut ParamSet,
    init: &mut Initializer,
    name: &str,
    kernel: usize,
    c_in: usize,
    c_out: usize,
    gain: f64,
) -> (ParamId, ParamId) {
    let w = init.he(&[kernel, kernel, c_in, c_out], kernel * kernel * c_in, gain);
    let w = params.insert(format!("{name}.weight"), w);
    let b = params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
    (w, b)
}

/// Registers a transposed conv layer: weight `[k, k, c_out, c_in]`, bias `[c_out]`.
pub fn add_conv_transpose(
    params: &mut ParamSet,
    init: &mut Initializer,
    name: &str,
    kernel: usize,
    stride: usize,
    c_in: usize,
    c_out: usize,
    gain: f64,
) -> (ParamId, ParamId) {
    // Each output pixel sees about k^2 / stride^2 taps per input channel.
    let fan_in = (kernel * kernel * c_in / (stride * stride)).max(1);
    let w = init.he(&[kernel, kernel, c_out, c_in], fan_in, gain);
    let w = params.insert(format!("{name}.weight"), w);
    let b = params.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c_out])));
    (w, b)
}

pub fn add_prelu(params: &mut ParamSet, name: &str, channels: usize) -> ParamId {
    params.insert(format!("{name}.alpha"), Array1::from_elem(channels, 0.25).into_dyn())
}
