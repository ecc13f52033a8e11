use super::Tensor;
use crate::error::{config, Result};
use rand::Rng;

/// One stage of a feed-forward stack.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2x2,
    Flatten,
    Dropout { rate: f64 },
    Softmax,
}

/// Trainable parameters of a Dense or Conv2d layer.
///
/// Dense weights are `[inputs, outputs]`; conv kernels are
/// `[kernel_h, kernel_w, c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// `(weight shape, bias shape)` for parameterised layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![inputs, outputs], vec![outputs])),
            LayerSpec::Conv2d { kernel_h, kernel_w, c_in, c_out, .. } => {
                Some((vec![kernel_h, kernel_w, c_in, c_out], vec![c_out]))
            }
            _ => None,
        }
    }

    /// Output sample shape for a given input sample shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let name = self.name();
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return config("dense layer with zero width");
                }
                if input != [inputs] {
                    return config(format!("dense expects input [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d { kernel_h, kernel_w, c_in, c_out, stride, padding } => {
                if kernel_h == 0 || kernel_w == 0 || c_out == 0 || stride == 0 {
                    return config("conv2d with zero kernel, channel count or stride");
                }
                let [h, w, c] = input else {
                    return config(format!("conv2d expects an [H, W, C] input, got {input:?}"));
                };
                if *c != c_in {
                    return config(format!("conv2d expects {c_in} input channels, got {c}"));
                }
                if h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
                    return config(format!("conv2d kernel {kernel_h}x{kernel_w} larger than padded input {input:?}"));
                }
                Ok(vec![
                    (h + 2 * padding - kernel_h) / stride + 1,
                    (w + 2 * padding - kernel_w) / stride + 1,
                    c_out,
                ])
            }
            LayerSpec::MaxPool2x2 => {
                let [h, w, c] = input else {
                    return config(format!("{name} expects an [H, W, C] input, got {input:?}"));
                };
                if *h < 2 || *w < 2 {
                    return config(format!("{name} input {input:?} smaller than the window"));
                }
                Ok(vec![h / 2, w / 2, *c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return config(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return config(format!("softmax expects a vector input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub(crate) fn init_params<R: Rng>(&self, rng: &mut R) -> Option<LayerParams> {
        let (wshape, bshape) = self.param_shapes()?;
        let (fan_in, fan_out) = match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv2d { kernel_h, kernel_w, c_in, c_out, .. } => {
                (kernel_h * kernel_w * c_in, kernel_h * kernel_w * c_out)
            }
            _ => unreachable!(),
        };
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = wshape.iter().product();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-s..=s)).collect();
        Some(LayerParams {
            weight: Tensor::from_raw(wshape, w),
            bias: Tensor::zeros(bshape),
        })
    }
}
