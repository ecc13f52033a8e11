use super::layer::LayerParams;
use super::model::{Model, StochasticMode};
use super::{argmax, Tensor};
use crate::data::LabeledDataset;
use crate::error::{config, input, Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Mini-batch SGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    #[serde(default)]
    pub lr_decay: Option<f64>,
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.02,
            momentum: 0.9,
            lr_decay: Some(0.5),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return config("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return config("batch size must be >= 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return config(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return config(format!("lr decay {d} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub learning_rate: f64,
}

pub type TrainHistory = Vec<EpochStats>;

/// Trains a copy of `model` with momentum SGD on softmax cross-entropy.
///
/// Shuffle order and dropout masks derive from `config.seed`, so equal
/// inputs reproduce bit-identical weights. A zero learning rate is accepted
/// and leaves the weights untouched.
pub fn train_sgd(model: &Model, dataset: &LabeledDataset, config: &TrainConfig) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return input("training set is empty");
    }
    if dataset.images().sample_shape() != model.input_shape() {
        return crate::error::config(format!(
            "dataset sample shape {:?} does not match model input {:?}",
            dataset.images().sample_shape(),
            model.input_shape()
        ));
    }
    model.check_labels(dataset.len(), dataset.labels())?;

    let mut model = model.clone();
    let mut velocity: Vec<Option<LayerParams>> = model
        .params()
        .iter()
        .map(|p| {
            p.as_ref().map(|p| LayerParams {
                weight: Tensor::zeros(p.weight.shape().to_vec()),
                bias: Tensor::zeros(p.bias.shape().to_vec()),
            })
        })
        .collect();
    let mut rng = crate::seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut lr = config.learning_rate;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = dataset.images().select(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels()[i]).collect();
            let mut mode = StochasticMode { rng: &mut rng, dense_input_dropout: None };
            let (out, trace) = model.run(0, x, Some(&mut mode), true);
            correct += out.samples().zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
            let grads = model.backward(&trace.unwrap(), &labels, false);
            if !grads.loss.is_finite() {
                return Err(Error::Training { epoch, message: format!("loss became {}", grads.loss) });
            }
            loss_sum += grads.loss * chunk.len() as f64;
            if lr == 0.0 {
                continue;
            }
            for ((p, v), g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grads.params) {
                let (Some(p), Some(v), Some(g)) = (p.as_mut(), v.as_mut(), g.as_ref()) else {
                    continue;
                };
                sgd_step(p.weight.data_mut(), v.weight.data_mut(), g.weight.data(), lr, config.momentum);
                sgd_step(p.bias.data_mut(), v.bias.data_mut(), g.bias.data(), lr, config.momentum);
            }
        }
        let loss = loss_sum / dataset.len() as f64;
        if !loss.is_finite() || model.params().iter().flatten().any(|p| !p.weight.all_finite()) {
            return Err(Error::Training { epoch, message: "weights became non-finite".into() });
        }
        history.push(EpochStats {
            epoch,
            loss,
            accuracy: correct as f64 / dataset.len() as f64,
            learning_rate: lr,
        });
        if let Some(d) = config.lr_decay {
            lr *= d;
        }
    }
    Ok((model, history))
}

fn sgd_step(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
}
