//! Binary model file: magic, version, layer table, little-endian `f64`
//! weight blocks, CRC-32 trailer.

use super::layer::{LayerParams, LayerSpec};
use super::{Model, Tensor};
use crate::binio::{Reader, Writer};
use crate::error::{format, Result};
use std::path::Path;

const MAGIC: &[u8; 8] = b"UDNNMODL";

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_POOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;
const TAG_DROPOUT: u8 = 6;
const TAG_SOFTMAX: u8 = 7;

pub(crate) fn write_model(w: &mut Writer, model: &Model) {
    w.u64(model.seed());
    w.usizes(model.input_shape());
    w.usize(model.layers().len());
    for layer in model.layers() {
        match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                w.u8(TAG_DENSE);
                w.usize(inputs);
                w.usize(outputs);
            }
            LayerSpec::Conv2d { kernel_h, kernel_w, c_in, c_out, stride, padding } => {
                w.u8(TAG_CONV);
                for v in [kernel_h, kernel_w, c_in, c_out, stride, padding] {
                    w.usize(v);
                }
            }
            LayerSpec::Relu => w.u8(TAG_RELU),
            LayerSpec::MaxPool2x2 => w.u8(TAG_POOL),
            LayerSpec::Flatten => w.u8(TAG_FLATTEN),
            LayerSpec::Dropout { rate } => {
                w.u8(TAG_DROPOUT);
                w.f64(rate);
            }
            LayerSpec::Softmax => w.u8(TAG_SOFTMAX),
        }
    }
    for p in model.params().iter().flatten() {
        w.f64s(p.weight.data());
        w.f64s(p.bias.data());
    }
}

pub(crate) fn read_model(r: &mut Reader<'_>) -> Result<Model> {
    let seed = r.u64()?;
    let input_shape = r.usizes()?;
    let n_layers = r.len_prefix(1)?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let layer = match r.u8()? {
            TAG_DENSE => LayerSpec::Dense { inputs: r.usize()?, outputs: r.usize()? },
            TAG_CONV => LayerSpec::Conv2d {
                kernel_h: r.usize()?,
                kernel_w: r.usize()?,
                c_in: r.usize()?,
                c_out: r.usize()?,
                stride: r.usize()?,
                padding: r.usize()?,
            },
            TAG_RELU => LayerSpec::Relu,
            TAG_POOL => LayerSpec::MaxPool2x2,
            TAG_FLATTEN => LayerSpec::Flatten,
            TAG_DROPOUT => LayerSpec::Dropout { rate: r.f64()? },
            TAG_SOFTMAX => LayerSpec::Softmax,
            t => return format(format!("model: layer {i} has unknown tag {t}")),
        };
        layers.push(layer);
    }
    let mut params = Vec::with_capacity(n_layers);
    for (i, layer) in layers.iter().enumerate() {
        let Some((wshape, bshape)) = layer.param_shapes() else {
            params.push(None);
            continue;
        };
        let mut block = |shape: Vec<usize>, what: &str| -> Result<Tensor> {
            let expected: usize = shape.iter().product();
            let declared = r.usize()?;
            if declared != expected {
                return format(format!(
                    "model: layer {i} ({}) declares {declared} {what} values, expected {expected}",
                    layer.name()
                ));
            }
            let data = r.f64s_exact(declared)?;
            Tensor::new(shape, data).map_err(|e| crate::Error::Format(e.to_string()))
        };
        let weight = block(wshape, "weight")?;
        let bias = block(bshape, "bias")?;
        params.push(Some(LayerParams { weight, bias }));
    }
    Model::from_parts(input_shape, layers, params, seed).map_err(|e| crate::Error::Format(format!("model: {e}")))
}

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut w = Writer::new(MAGIC);
    write_model(&mut w, model);
    w.finish()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes, MAGIC, "model")?;
    let m = read_model(&mut r)?;
    r.finish()?;
    Ok(m)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mnist_reference_layers;

    fn model() -> Model {
        Model::new(vec![28, 28, 1], mnist_reference_layers(), 42).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.udm");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(m, back);
        let x = Tensor::filled(vec![2, 28, 28, 1], 0.25);
        let a = m.forward(&x, false).unwrap().output;
        let b = back.forward(&x, false).unwrap().output;
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let mut bytes = model_to_bytes(&model());
        bytes[0] ^= 0xff;
        assert!(matches!(model_from_bytes(&bytes), Err(crate::Error::Format(_))));
    }

    #[test]
    fn truncated_and_flipped_files_are_format_errors() {
        let bytes = model_to_bytes(&model());
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() / 2]), Err(crate::Error::Format(_))));
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        let err = model_from_bytes(&flipped).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn mismatched_weight_count_names_layer() {
        let layers = vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 4, outputs: 2 }];
        let m = Model::new(vec![2, 2, 1], layers, 0).unwrap();
        let mut w = Writer::new(MAGIC);
        w.u64(0);
        w.usizes(&[2, 2, 1]);
        w.usize(2);
        w.u8(TAG_FLATTEN);
        w.u8(TAG_DENSE);
        w.usize(4);
        w.usize(2);
        let p = m.params()[1].as_ref().unwrap();
        w.f64s(&p.weight.data()[..6]);
        w.f64s(p.bias.data());
        let err = model_from_bytes(&w.finish()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, crate::Error::Format(_)));
        assert!(msg.contains("layer 1 (dense)") && msg.contains("declares 6"), "{msg}");
    }
}
