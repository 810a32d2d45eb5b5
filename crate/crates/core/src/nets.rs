//! Network layouts shared by the backbone, curiosity modules and policy.

use alloc::vec;
use alloc::vec::Vec;

use crate::diff::LayerSpec;
use crate::error::Result;

/// `(kernel, stride)` of the three convolutions. On 36x36 inputs the
/// spatial extent goes 36 -> 9 -> 4 -> 2.
pub const CONV_GEOMETRY: [(usize, usize); 3] = [(4, 4), (3, 2), (3, 1)];

pub const SMALL_CHANNELS: [usize; 3] = [8, 16, 16];
pub const BACKBONE_CHANNELS: [usize; 3] = [16, 32, 32];
pub const HIDDEN: usize = 128;

/// conv-relu x3 followed by flatten.
pub fn conv_stack(in_channels: usize, channels: [usize; 3]) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut c_in = in_channels;
    for (&(kernel, stride), &c_out) in CONV_GEOMETRY.iter().zip(&channels) {
        specs.push(LayerSpec::Conv2d {
            in_channels: c_in,
            out_channels: c_out,
            kernel,
            stride,
        });
        specs.push(LayerSpec::Relu);
        c_in = c_out;
    }
    specs.push(LayerSpec::Flatten);
    specs
}

/// Per-sample output shape of a layer stack.
pub fn output_shape(input: &[usize], specs: &[LayerSpec]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, s) in specs.iter().enumerate() {
        shape = s.output_shape(i, &shape)?;
    }
    Ok(shape)
}

pub fn flat_features(input: &[usize], specs: &[LayerSpec]) -> Result<usize> {
    Ok(output_shape(input, specs)?.iter().product())
}

/// Pool -> instance norm -> 2-layer MLP, mapping a feature map to a vector.
pub fn neck(feature_shape: [usize; 3], pool_window: usize, embedding_dim: usize) -> Vec<LayerSpec> {
    let pooled = feature_shape[0] * (feature_shape[1] / pool_window) * (feature_shape[2] / pool_window);
    vec![
        LayerSpec::SpatialMeanPool { window: pool_window },
        LayerSpec::InstanceNorm,
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: pooled,
            outputs: HIDDEN,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: HIDDEN,
            outputs: embedding_dim,
        },
    ]
}

/// Gains for orthogonal init: `sqrt(2)` for every parametric layer.
pub fn relu_gains(specs: &[LayerSpec]) -> Vec<f64> {
    let n = specs
        .iter()
        .filter(|s| matches!(s, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. }))
        .count();
    vec![core::f64::consts::SQRT_2; n]
}
