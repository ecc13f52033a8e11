use super::layer::{LayerParams, LayerSpec};
use super::linalg::gemm;
use super::{argmax, Tensor};
use crate::error::{config, Result};
use crate::SeededRng;
use rand::Rng;

/// Samples per im2col block; bounds the patch buffer for large batches.
const CONV_CHUNK: usize = 32;

/// Ordered layer stack with its weights.
///
/// Immutable once built: training and mutation return new models, so a
/// `&Model` can be shared freely across scoring threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    shapes: Vec<Vec<usize>>,
    seed: u64,
}

/// Output of [`Model::forward`]; `activations[i]` is the output of layer `i`.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub activations: Option<Vec<Tensor>>,
}

/// Enables stochastic dropout for a forward pass.
///
/// `Dropout` layers are identity unless a mode is supplied. The optional
/// `dense_input_dropout` drops inputs of every Dense layer, which lets the
/// dropout-uncertainty detector perturb models trained without dropout.
pub struct StochasticMode<'a> {
    pub rng: &'a mut SeededRng,
    pub dense_input_dropout: Option<f64>,
}

/// Per-layer state retained for backpropagation.
pub(crate) struct Trace {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Tensor>,
    pub pool_argmax: Vec<Option<Vec<usize>>>,
    /// Inverted-dropout multipliers of `Dropout` layers.
    pub dropout: Vec<Option<Vec<f64>>>,
    /// Multipliers applied to Dense inputs.
    pub dense_in: Vec<Option<Vec<f64>>>,
}

/// Conv(5x5, 1->16) -> ReLU -> MaxPool -> Conv(5x5, 16->32) -> ReLU -> MaxPool
/// -> Flatten -> Dense(128) -> ReLU -> Dense(10) -> Softmax, for 28x28x1 input.
pub fn mnist_reference_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { kernel_h: 5, kernel_w: 5, c_in: 1, c_out: 16, stride: 1, padding: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { kernel_h: 5, kernel_w: 5, c_in: 16, c_out: 32, stride: 1, padding: 2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 7 * 7 * 32, outputs: 128 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 128, outputs: 10 },
        LayerSpec::Softmax,
    ]
}

fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return config(format!("invalid input shape {input_shape:?}"));
    }
    if layers.is_empty() {
        return config("model has no layers");
    }
    let mut shapes = Vec::with_capacity(layers.len());
    let mut cur = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        cur = layer
            .output_shape(&cur)
            .map_err(|e| crate::Error::Config(format!("layer {i} ({}): {e}", layer.name())))?;
        shapes.push(cur.clone());
    }
    if cur.len() != 1 || cur[0] < 2 {
        return config(format!("final layer must emit a class vector of length >= 2, got {cur:?}"));
    }
    Ok(shapes)
}

impl Model {
    /// Builds a model with seeded Glorot-uniform initialisation.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let mut rng = crate::seeded_rng(seed);
        let params = layers.iter().map(|l| l.init_params(&mut rng)).collect();
        Ok(Model { input_shape, layers, params, shapes, seed })
    }

    /// Builds a model from explicit weights, validating every shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams>>,
        seed: u64,
    ) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        if params.len() != layers.len() {
            return config(format!("{} parameter slots for {} layers", params.len(), layers.len()));
        }
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return config(format!(
                            "layer {i} ({}): weight {:?} / bias {:?}, expected {ws:?} / {bs:?}",
                            layer.name(),
                            p.weight.shape(),
                            p.bias.shape()
                        ));
                    }
                }
                (Some(_), None) => return config(format!("layer {i} ({}) is missing weights", layer.name())),
                (None, Some(_)) => return config(format!("layer {i} ({}) takes no weights", layer.name())),
            }
        }
        Ok(Model { input_shape, layers, params, shapes, seed })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    /// Output sample shape of layer `i`.
    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Seed used for initialisation (provenance only).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    pub fn dense_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], LayerSpec::Dense { .. }))
            .collect()
    }

    pub fn first_dense(&self) -> Option<usize> {
        self.dense_layers().first().copied()
    }

    /// Layer whose output feeds the final Dense layer (the "last hidden layer").
    pub fn last_hidden_layer(&self) -> Option<usize> {
        let last = *self.dense_layers().last()?;
        last.checked_sub(1)
    }

    /// Indices of post-nonlinearity layers (ReLU and the final Softmax).
    pub fn activation_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], LayerSpec::Relu | LayerSpec::Softmax))
            .collect()
    }

    /// Indices of hidden ReLU / MaxPool outputs, in layer order.
    pub fn hidden_feature_layers(&self) -> Vec<usize> {
        let last_dense = self.dense_layers().last().copied().unwrap_or(self.layers.len());
        (0..last_dense)
            .filter(|&i| matches!(self.layers[i], LayerSpec::Relu | LayerSpec::MaxPool2x2))
            .collect()
    }

    pub(crate) fn to_batch(&self, batch: &Tensor) -> Result<Tensor> {
        self.to_batch_at(0, batch)
    }

    /// Normalises `batch` to `[N, ...shape]` for the input of layer `start`.
    fn to_batch_at(&self, start: usize, batch: &Tensor) -> Result<Tensor> {
        let expected: &[usize] = if start == 0 { &self.input_shape } else { &self.shapes[start - 1] };
        if batch.shape() == expected {
            let mut shape = vec![1];
            shape.extend_from_slice(expected);
            return batch.clone().reshape(shape);
        }
        if batch.shape().len() == expected.len() + 1 && batch.sample_shape() == expected {
            return Ok(batch.clone());
        }
        config(format!(
            "batch shape {:?} does not match expected sample shape {expected:?}",
            batch.shape()
        ))
    }

    /// Deterministic forward pass. With `record`, every layer output is kept.
    pub fn forward(&self, batch: &Tensor, record: bool) -> Result<ForwardOutput> {
        let input = self.to_batch(batch)?;
        let (output, trace) = self.run(0, input, None, record);
        Ok(ForwardOutput {
            output,
            activations: trace.map(|mut t| t.acts.split_off(1)),
        })
    }

    /// Forward pass with dropout sampled from `mode`.
    pub fn forward_stochastic(&self, batch: &Tensor, record: bool, mode: &mut StochasticMode<'_>) -> Result<ForwardOutput> {
        if let Some(rate) = mode.dense_input_dropout {
            if !(0.0..1.0).contains(&rate) {
                return config(format!("dropout rate {rate} outside [0, 1)"));
            }
        }
        let input = self.to_batch(batch)?;
        let (output, trace) = self.run(0, input, Some(mode), record);
        Ok(ForwardOutput {
            output,
            activations: trace.map(|mut t| t.acts.split_off(1)),
        })
    }

    /// Runs layers `start..` on a batch shaped like the input of layer `start`.
    pub fn forward_from(&self, start: usize, batch: &Tensor) -> Result<Tensor> {
        if start >= self.layers.len() {
            return config(format!("layer index {start} out of range"));
        }
        let input = self.to_batch_at(start, batch)?;
        Ok(self.run(start, input, None, false).0)
    }

    /// Runs layers `0..end` and returns the output of layer `end - 1`.
    pub fn forward_until(&self, end: usize, batch: &Tensor) -> Result<Tensor> {
        if end == 0 || end > self.layers.len() {
            return config(format!("layer count {end} out of range"));
        }
        let mut x = self.to_batch(batch)?;
        for i in 0..end {
            x = self.apply(i, &x, None, None);
        }
        Ok(x)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(batch, false)?.output;
        Ok(out.samples().map(argmax).collect())
    }

    /// Predicted labels and class probabilities, processed in blocks to bound memory.
    pub fn predict_chunked(&self, batch: &Tensor, chunk: usize) -> Result<(Vec<usize>, Tensor)> {
        let batch = self.to_batch(batch)?;
        let n = batch.batch();
        let mut labels = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n * self.classes());
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let out = self.run(0, batch.slice_batch(start, end), None, false).0;
            labels.extend(out.samples().map(argmax));
            probs.extend_from_slice(out.data());
            start = end;
        }
        Ok((labels, Tensor::from_raw(vec![n, self.classes()], probs)))
    }

    pub(crate) fn run(
        &self,
        start: usize,
        input: Tensor,
        mut mode: Option<&mut StochasticMode<'_>>,
        keep: bool,
    ) -> (Tensor, Option<Trace>) {
        let n_layers = self.layers.len();
        let mut trace = keep.then(|| Trace {
            acts: Vec::with_capacity(n_layers + 1),
            pool_argmax: vec![None; n_layers],
            dropout: vec![None; n_layers],
            dense_in: vec![None; n_layers],
        });
        let mut x = input;
        for i in start..n_layers {
            let next = self.apply(i, &x, mode.as_deref_mut(), trace.as_mut());
            if let Some(t) = trace.as_mut() {
                t.acts.push(std::mem::replace(&mut x, next));
            } else {
                x = next;
            }
        }
        if let Some(t) = trace.as_mut() {
            t.acts.push(x.clone());
        }
        (x, trace)
    }

    fn apply(&self, i: usize, x: &Tensor, mode: Option<&mut StochasticMode<'_>>, trace: Option<&mut Trace>) -> Tensor {
        let n = x.batch();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&self.shapes[i]);
        match self.layers[i] {
            LayerSpec::Dense { inputs, outputs } => {
                let p = self.params[i].as_ref().unwrap();
                let dropped;
                let xin = match mode.and_then(|m| m.dense_input_dropout.map(|r| (m, r))) {
                    Some((m, rate)) if rate > 0.0 => {
                        let mask = dropout_mask(m.rng, x.len(), rate);
                        dropped = x.data().iter().zip(&mask).map(|(a, b)| a * b).collect::<Vec<_>>();
                        if let Some(t) = trace {
                            t.dense_in[i] = Some(mask);
                        }
                        &dropped[..]
                    }
                    _ => x.data(),
                };
                let mut out = Vec::with_capacity(n * outputs);
                for _ in 0..n {
                    out.extend_from_slice(p.bias.data());
                }
                gemm(n, inputs, outputs, xin, false, p.weight.data(), false, 1.0, &mut out);
                Tensor::from_raw(out_shape, out)
            }
            LayerSpec::Conv2d { .. } => conv_forward(&self.layers[i], self.params[i].as_ref().unwrap(), x, out_shape),
            LayerSpec::Relu => Tensor::from_raw(out_shape, x.data().iter().map(|&v| v.max(0.0)).collect()),
            LayerSpec::MaxPool2x2 => {
                let (out, idx) = maxpool_forward(x, &self.shapes[i]);
                if let Some(t) = trace {
                    t.pool_argmax[i] = Some(idx);
                }
                Tensor::from_raw(out_shape, out)
            }
            LayerSpec::Flatten => Tensor::from_raw(out_shape, x.data().to_vec()),
            LayerSpec::Dropout { rate } => match mode {
                Some(m) if rate > 0.0 => {
                    let mask = dropout_mask(m.rng, x.len(), rate);
                    let out = x.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
                    if let Some(t) = trace {
                        t.dropout[i] = Some(mask);
                    }
                    Tensor::from_raw(out_shape, out)
                }
                _ => Tensor::from_raw(out_shape, x.data().to_vec()),
            },
            LayerSpec::Softmax => {
                let mut out = x.data().to_vec();
                let c = self.shapes[i][0];
                for row in out.chunks_exact_mut(c) {
                    softmax_in_place(row);
                }
                Tensor::from_raw(out_shape, out)
            }
        }
    }
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1 / (1 - rate)`.
pub(crate) fn dropout_mask(rng: &mut SeededRng, len: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
    pub c_out: usize,
}

impl ConvGeom {
    pub fn new(spec: &LayerSpec, in_shape: &[usize]) -> Self {
        let LayerSpec::Conv2d { kernel_h, kernel_w, c_in, c_out, stride, padding } = *spec else {
            unreachable!("not a conv layer")
        };
        let (h, w) = (in_shape[0], in_shape[1]);
        ConvGeom {
            h,
            w,
            c: c_in,
            kh: kernel_h,
            kw: kernel_w,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kernel_h) / stride + 1,
            wo: (w + 2 * padding - kernel_w) / stride + 1,
            c_out,
        }
    }

    pub fn k(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn rows(&self) -> usize {
        self.ho * self.wo
    }

    /// Patch matrix of one HWC sample: `rows() x k()`, zero outside the image.
    pub fn im2col(&self, x: &[f64], out: &mut [f64]) {
        let k = self.k();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut out[(oy * self.wo + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let dst = &mut row[(ky * self.kw + kx) * self.c..][..self.c];
                        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                            dst.fill(0.0);
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * self.c;
                            dst.copy_from_slice(&x[src..src + self.c]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a patch-gradient matrix back onto an HWC sample gradient.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let k = self.k();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.kw + kx) * self.c..][..self.c];
                        let dst = (iy as usize * self.w + ix as usize) * self.c;
                        for (d, s) in dx[dst..dst + self.c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(spec: &LayerSpec, p: &LayerParams, x: &Tensor, out_shape: Vec<usize>) -> Tensor {
    let g = ConvGeom::new(spec, x.sample_shape());
    let n = x.batch();
    let (k, rows) = (g.k(), g.rows());
    let mut out = vec![0.0; n * rows * g.c_out];
    let mut patches = vec![0.0; CONV_CHUNK.min(n) * rows * k];
    let mut start = 0;
    while start < n {
        let end = (start + CONV_CHUNK).min(n);
        let m = end - start;
        for s in 0..m {
            g.im2col(x.sample(start + s), &mut patches[s * rows * k..(s + 1) * rows * k]);
        }
        let dst = &mut out[start * rows * g.c_out..end * rows * g.c_out];
        for r in dst.chunks_exact_mut(g.c_out) {
            r.copy_from_slice(p.bias.data());
        }
        gemm(m * rows, k, g.c_out, &patches[..m * rows * k], false, p.weight.data(), false, 1.0, dst);
        start = end;
    }
    Tensor::from_raw(out_shape, out)
}

/// Returns pooled values and, per output, the flat in-sample index of the winner.
fn maxpool_forward(x: &Tensor, out_sample: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_shape = x.sample_shape();
    let (w, c) = (in_shape[1], in_shape[2]);
    let (ho, wo) = (out_sample[0], out_sample[1]);
    let mut out = Vec::with_capacity(x.batch() * ho * wo * c);
    let mut idx = Vec::with_capacity(out.capacity());
    for s in x.samples() {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best_i = ((2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = s[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if s[j] > best {
                            best = s[j];
                            best_i = j;
                        }
                    }
                    out.push(best);
                    idx.push(best_i);
                }
            }
        }
    }
    (out, idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_relu_identity() -> Model {
        let layers = vec![LayerSpec::Dense { inputs: 2, outputs: 2 }, LayerSpec::Relu];
        let params = vec![
            Some(LayerParams {
                weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                bias: Tensor::zeros(vec![2]),
            }),
            None,
        ];
        Model::from_parts(vec![2], layers, params, 0).unwrap()
    }

    #[test]
    fn identity_dense_then_relu() {
        let m = dense_relu_identity();
        let out = m.forward(&Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), false).unwrap();
        assert_eq!(out.output.data(), &[1.0, 0.0]);
        assert_eq!(out.output.shape(), &[1, 2]);
    }

    #[test]
    fn maxpool_on_one_to_sixteen() {
        let m = Model::from_parts(
            vec![4, 4, 1],
            vec![LayerSpec::MaxPool2x2, LayerSpec::Flatten, LayerSpec::Softmax],
            vec![None, None, None],
            0,
        )
        .unwrap();
        let x = Tensor::new(vec![4, 4, 1], (1..=16).map(f64::from).collect()).unwrap();
        let acts = m.forward(&x, true).unwrap().activations.unwrap();
        assert_eq!(acts[0].data(), &[6.0, 8.0, 14.0, 16.0]);
        assert_eq!(acts.len(), 3);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = Model::from_parts(vec![4], vec![LayerSpec::Softmax], vec![None], 0).unwrap();
        let x = Tensor::new(vec![3, 4], vec![1e3, -1e3, 0.5, 2.0, 0.0, 0.0, 0.0, 0.0, -7.0, 3.0, 1e-9, 800.0]).unwrap();
        let out = m.forward(&x, false).unwrap().output;
        for row in out.samples() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let m = dense_relu_identity();
        let err = m.forward(&Tensor::zeros(vec![3]), false).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
        let err = Model::new(
            vec![28, 28, 1],
            vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 100, outputs: 10 }],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 1"));
    }

    #[test]
    fn reference_architecture_shapes() {
        let m = Model::new(vec![28, 28, 1], mnist_reference_layers(), 1).unwrap();
        assert_eq!(m.classes(), 10);
        assert_eq!(m.layer_shape(5), &[7, 7, 32]);
        assert_eq!(m.parameter_count(), 416 + 12_832 + 200_832 + 1_290);
        assert_eq!(m.last_hidden_layer(), Some(8));
        assert_eq!(m.activation_layers(), vec![1, 4, 8, 10]);
        assert_eq!(m.hidden_feature_layers(), vec![1, 2, 4, 5, 8]);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let spec = LayerSpec::Conv2d { kernel_h: 3, kernel_w: 2, c_in: 2, c_out: 3, stride: 2, padding: 1 };
        let m = Model::new(vec![5, 4, 2], vec![spec.clone(), LayerSpec::Flatten, LayerSpec::Softmax], 3).unwrap();
        let mut rng = crate::seeded_rng(9);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![5, 4, 2], x).unwrap();
        let out = m.forward(&x, true).unwrap().activations.unwrap()[0].clone();
        let p = m.params()[0].as_ref().unwrap();
        let w = p.weight.data();
        let (ho, wo) = (3, 3);
        assert_eq!(out.sample_shape(), &[ho, wo, 3]);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..3 {
                    let mut acc = p.bias.data()[co];
                    for ky in 0..3 {
                        for kx in 0..2 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x.data()[(iy as usize * 4 + ix as usize) * 2 + ci]
                                    * w[((ky * 2 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = out.data()[(oy * wo + ox) * 3 + co];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn forward_from_first_dense_matches_full_pass() {
        let m = Model::new(vec![28, 28, 1], mnist_reference_layers(), 5).unwrap();
        let mut rng = crate::seeded_rng(2);
        let x = Tensor::new(vec![2, 28, 28, 1], (0..2 * 784).map(|_| rng.random::<f64>()).collect()).unwrap();
        let full = m.forward(&x, false).unwrap().output;
        let fd = m.first_dense().unwrap();
        let trunk = m.forward_until(fd, &x).unwrap();
        let head = m.forward_from(fd, &trunk).unwrap();
        assert_eq!(full, head);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::new(vec![28, 28, 1], mnist_reference_layers(), 5).unwrap();
        let x = Tensor::filled(vec![1, 28, 28, 1], 0.3);
        let a = m.forward(&x, false).unwrap().output;
        let b = m.forward(&x, false).unwrap().output;
        assert_eq!(a.data(), b.data());
    }
}
