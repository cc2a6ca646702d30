//! Named split architectures.

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, NetworkSpec, SplitModelSpec};

pub const PRESET_NAMES: [&str; 3] = ["tiny-mlp", "tiny-conv2", "tiny-conv1d"];

fn conv(channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        channels,
        kernel,
        stride,
        padding,
    }
}

fn conv1d(channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv1d {
        channels,
        kernel,
        stride,
        padding,
    }
}

/// Builds preset `name` for samples shaped `input_shape` and `classes` outputs.
///
/// * `tiny-mlp`: flatten, dense 64, relu | dense C.
/// * `tiny-conv2`: two 3x3 conv+relu on the client | pool, conv, pool, conv, dense.
///   Needs `[C, H, W]` input with H and W divisible by 4.
/// * `tiny-conv1d`: two conv1d+relu on the client | two strided conv1d, dense.
///   Needs `[C, L]` input.
pub fn preset(name: &str, input_shape: &[usize], classes: usize) -> Result<SplitModelSpec> {
    let (layers, split) = match name {
        "tiny-mlp" => (
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: classes },
            ],
            3,
        ),
        "tiny-conv2" => {
            if input_shape.len() != 3
                || !input_shape[1].is_multiple_of(4)
                || !input_shape[2].is_multiple_of(4)
            {
                return Err(Error::config(
                    "model.preset",
                    format!(
                        "tiny-conv2 needs [C, H, W] with H, W divisible by 4, got {input_shape:?}"
                    ),
                ));
            }
            (
                vec![
                    conv(4, 3, 1, 1),
                    LayerSpec::Relu,
                    conv(4, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d { size: 2 },
                    conv(8, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::MaxPool2d { size: 2 },
                    conv(8, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: classes },
                ],
                4,
            )
        }
        "tiny-conv1d" => {
            if input_shape.len() != 2 {
                return Err(Error::config(
                    "model.preset",
                    format!("tiny-conv1d needs [C, L] input, got {input_shape:?}"),
                ));
            }
            (
                vec![
                    conv1d(4, 5, 1, 2),
                    LayerSpec::Relu,
                    conv1d(4, 5, 1, 2),
                    LayerSpec::Relu,
                    conv1d(8, 5, 2, 2),
                    LayerSpec::Relu,
                    conv1d(8, 5, 2, 2),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: classes },
                ],
                4,
            )
        }
        other => {
            return Err(Error::config(
                "model.preset",
                format!("unknown preset `{other}`, expected one of {PRESET_NAMES:?}"),
            ))
        }
    };
    SplitModelSpec::new(NetworkSpec::new(input_shape.to_vec(), layers), split)
        .map_err(|e| Error::config("model.preset", e.to_string()))
}
