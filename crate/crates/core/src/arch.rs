//! Reference architectures.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layer::LayerSpec;
use crate::tensor::Shape;

/// Layer list plus the default internal-classifier attach points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_shape: Shape,
    pub n_y: usize,
    pub layers: Vec<LayerSpec>,
    pub attach_indices: Vec<usize>,
}

/// Six 3x3 convolution blocks and a pooled linear classifier, with an
/// internal classifier after each of the first five blocks (six exits).
///
/// Block 1 uses stride 2; blocks 2 and 4 end with 2x2 max pooling, so a
/// 32x32 input reaches the last block at 4x4.
pub fn small_convnet(input_shape: Shape, n_y: usize, widths: [usize; 6]) -> ArchSpec {
    let conv = |i, o, stride| LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride,
        padding: 1,
    };
    let [w1, w2, w3, w4, w5, w6] = widths;
    let layers = vec![
        conv(input_shape.c, w1, 2),
        LayerSpec::Relu, // 1
        conv(w1, w2, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2, // 4
        conv(w2, w3, 1),
        LayerSpec::Relu, // 6
        conv(w3, w4, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2, // 9
        conv(w4, w5, 1),
        LayerSpec::Relu, // 11
        conv(w5, w6, 1),
        LayerSpec::Relu,
        LayerSpec::GlobalAvgPool,
        LayerSpec::Linear {
            in_features: w6,
            out_features: n_y,
        },
    ];
    ArchSpec {
        name: "small-convnet".into(),
        input_shape,
        n_y,
        layers,
        attach_indices: vec![1, 4, 6, 9, 11],
    }
}
