use super::layer::{LayerParams, LayerSpec};
use super::linalg::gemm;
use super::model::{ConvGeom, Model, Trace};
use super::Tensor;
use crate::error::{input, Result};

/// Cross-entropy gradients for one batch.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// Same layout as [`Model::params`].
    pub params: Vec<Option<LayerParams>>,
    /// d(loss)/d(input), shaped like the (batched) input.
    pub input: Tensor,
    /// Mean softmax cross-entropy over the batch.
    pub loss: f64,
}

impl Model {
    /// Mean softmax cross-entropy loss and its gradients with respect to every
    /// weight and to the input batch.
    ///
    /// A trailing `Softmax` layer is folded into the loss; without one, the
    /// final outputs are treated as logits.
    pub fn gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
        let x = self.to_batch(batch)?;
        self.check_labels(x.batch(), labels)?;
        let (_, trace) = self.run(0, x, None, true);
        Ok(self.backward(&trace.unwrap(), labels, true))
    }

    pub(crate) fn check_labels(&self, n: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != n {
            return input(format!("{} labels for a batch of {n}", labels.len()));
        }
        let c = self.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return input(format!("label {bad} out of range for {c} classes"));
        }
        Ok(())
    }

    pub(crate) fn backward(&self, trace: &Trace, labels: &[usize], want_input: bool) -> Gradients {
        let layers = self.layers();
        let n_layers = layers.len();
        let folds_softmax = matches!(layers[n_layers - 1], LayerSpec::Softmax);
        let top = if folds_softmax { n_layers - 1 } else { n_layers };
        let logits = &trace.acts[top];
        let n = logits.batch();
        let c = logits.sample_len();

        let mut loss = 0.0;
        let mut grad = vec![0.0; n * c];
        for (i, row) in logits.samples().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                grad[i * c + j] = ((row[j] - lse).exp() - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        loss /= n as f64;

        let mut params: Vec<Option<LayerParams>> = vec![None; n_layers];
        let mut dy = Tensor::from_raw(logits.shape().to_vec(), grad);
        for i in (0..top).rev() {
            if i == 0 && !want_input && !layers[0].has_params() {
                dy = Tensor::zeros(trace.acts[0].shape().to_vec());
                break;
            }
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            let (dx, dp) = self.layer_backward(i, x, y, &dy, trace, i > 0 || want_input);
            params[i] = dp;
            dy = dx.unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        }
        Gradients { params, input: dy, loss }
    }

    fn layer_backward(
        &self,
        i: usize,
        x: &Tensor,
        y: &Tensor,
        dy: &Tensor,
        trace: &Trace,
        want_dx: bool,
    ) -> (Option<Tensor>, Option<LayerParams>) {
        let n = x.batch();
        let xs = x.shape().to_vec();
        match self.layers()[i] {
            LayerSpec::Dense { inputs, outputs } => {
                let p = self.params()[i].as_ref().unwrap();
                let masked;
                let xin = match &trace.dense_in[i] {
                    Some(mask) => {
                        masked = x.data().iter().zip(mask).map(|(a, b)| a * b).collect::<Vec<_>>();
                        &masked[..]
                    }
                    None => x.data(),
                };
                let mut dw = vec![0.0; inputs * outputs];
                gemm(inputs, n, outputs, xin, true, dy.data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; outputs];
                for row in dy.samples() {
                    for (b, g) in db.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                let dx = want_dx.then(|| {
                    let mut dx = vec![0.0; n * inputs];
                    gemm(n, outputs, inputs, dy.data(), false, p.weight.data(), true, 0.0, &mut dx);
                    if let Some(mask) = &trace.dense_in[i] {
                        for (d, m) in dx.iter_mut().zip(mask) {
                            *d *= m;
                        }
                    }
                    Tensor::from_raw(xs, dx)
                });
                let dp = LayerParams {
                    weight: Tensor::from_raw(p.weight.shape().to_vec(), dw),
                    bias: Tensor::from_raw(vec![outputs], db),
                };
                (dx, Some(dp))
            }
            LayerSpec::Conv2d { .. } => {
                let p = self.params()[i].as_ref().unwrap();
                let g = ConvGeom::new(&self.layers()[i], x.sample_shape());
                let (k, rows, co) = (g.k(), g.rows(), g.c_out);
                let mut dw = vec![0.0; k * co];
                let mut db = vec![0.0; co];
                let mut dx = want_dx.then(|| vec![0.0; x.len()]);
                let mut patches = vec![0.0; rows * k];
                let mut dcols = vec![0.0; rows * k];
                for s in 0..n {
                    let dys = dy.sample(s);
                    g.im2col(x.sample(s), &mut patches);
                    gemm(k, rows, co, &patches, true, dys, false, 1.0, &mut dw);
                    for r in dys.chunks_exact(co) {
                        for (b, v) in db.iter_mut().zip(r) {
                            *b += v;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, co, k, dys, false, p.weight.data(), true, 0.0, &mut dcols);
                        let per = x.sample_len();
                        g.col2im(&dcols, &mut dx[s * per..(s + 1) * per]);
                    }
                }
                let dp = LayerParams {
                    weight: Tensor::from_raw(p.weight.shape().to_vec(), dw),
                    bias: Tensor::from_raw(vec![co], db),
                };
                (dx.map(|d| Tensor::from_raw(xs, d)), Some(dp))
            }
            LayerSpec::Relu => {
                let dx = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                (Some(Tensor::from_raw(xs, dx)), None)
            }
            LayerSpec::MaxPool2x2 => {
                let idx = trace.pool_argmax[i].as_ref().expect("pool trace");
                let per_in = x.sample_len();
                let per_out = y.sample_len();
                let mut dx = vec![0.0; x.len()];
                for s in 0..n {
                    for j in 0..per_out {
                        dx[s * per_in + idx[s * per_out + j]] += dy.data()[s * per_out + j];
                    }
                }
                (Some(Tensor::from_raw(xs, dx)), None)
            }
            LayerSpec::Flatten => (Some(Tensor::from_raw(xs, dy.data().to_vec())), None),
            LayerSpec::Dropout { .. } => {
                let dx = match &trace.dropout[i] {
                    Some(mask) => dy.data().iter().zip(mask).map(|(a, b)| a * b).collect(),
                    None => dy.data().to_vec(),
                };
                (Some(Tensor::from_raw(xs, dx)), None)
            }
            LayerSpec::Softmax => {
                let c = y.sample_len();
                let mut dx = vec![0.0; x.len()];
                for s in 0..n {
                    let ys = y.sample(s);
                    let g = dy.sample(s);
                    let inner: f64 = ys.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[s * c + j] = ys[j] * (g[j] - inner);
                    }
                }
                (Some(Tensor::from_raw(xs, dx)), None)
            }
        }
    }
}
