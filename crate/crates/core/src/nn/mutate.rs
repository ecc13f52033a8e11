use super::Model;
use crate::error::{config, Result};
use rand_distr::{Distribution, Normal};

/// Gaussian Fuzzing of fully-connected weights.
///
/// For each Dense layer independently, i.i.d. noise with mean
/// `mean(W) * r_mu` and variance `max|W| * r_delta` is added to the weight
/// matrix. Biases and non-Dense layers are left untouched; `model` itself is
/// not modified.
pub fn mutate_fc_gaussian(model: &Model, r_mu: f64, r_delta: f64, seed: u64) -> Result<Model> {
    if !(r_delta >= 0.0) || !r_delta.is_finite() {
        return config(format!("r_delta must be finite and >= 0, got {r_delta}"));
    }
    if !r_mu.is_finite() {
        return config(format!("r_mu must be finite, got {r_mu}"));
    }
    let dense = model.dense_layers();
    if dense.is_empty() {
        return config("model has no Dense layer to mutate");
    }
    let mut out = model.clone();
    let mut rng = crate::seeded_rng(seed);
    for &i in &dense {
        let w = out.params_mut()[i].as_mut().unwrap().weight.data_mut();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let max_abs = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let shift = mean * r_mu;
        let std = (max_abs * r_delta).sqrt();
        if std == 0.0 {
            if shift != 0.0 {
                w.iter_mut().for_each(|v| *v += shift);
            }
            continue;
        }
        let normal = Normal::new(shift, std).expect("finite std");
        for v in w.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mnist_reference_layers, LayerSpec};

    fn small() -> Model {
        Model::new(
            vec![6, 6, 1],
            vec![
                LayerSpec::Conv2d { kernel_h: 3, kernel_w: 3, c_in: 1, c_out: 2, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 72, outputs: 8 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 8, outputs: 3 },
                LayerSpec::Softmax,
            ],
            3,
        )
        .unwrap()
    }

    #[test]
    fn zero_factors_leave_weights_identical() {
        let m = small();
        let mutated = mutate_fc_gaussian(&m, 0.0, 0.0, 1).unwrap();
        assert_eq!(m, mutated);
    }

    #[test]
    fn zero_variance_shifts_by_layer_mean() {
        let m = small();
        let mutated = mutate_fc_gaussian(&m, 1.0, 0.0, 1).unwrap();
        for i in m.dense_layers() {
            let w = m.params()[i].as_ref().unwrap().weight.data();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let w2 = mutated.params()[i].as_ref().unwrap().weight.data();
            for (a, b) in w.iter().zip(w2) {
                assert_eq!(*b, *a + mean);
            }
        }
    }

    #[test]
    fn conv_weights_and_biases_untouched() {
        let m = small();
        let mutated = mutate_fc_gaussian(&m, 1.0, 0.65, 7).unwrap();
        for (i, (a, b)) in m.params().iter().zip(mutated.params()).enumerate() {
            let (Some(a), Some(b)) = (a, b) else { continue };
            assert_eq!(a.bias, b.bias);
            if !matches!(m.layers()[i], LayerSpec::Dense { .. }) {
                assert_eq!(a.weight, b.weight);
            } else {
                assert_ne!(a.weight, b.weight);
            }
        }
    }

    #[test]
    fn negative_r_delta_rejected() {
        assert!(matches!(mutate_fc_gaussian(&small(), 1.0, -0.1, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn conv_only_model_rejected() {
        let m = Model::new(
            vec![4, 4, 1],
            vec![
                LayerSpec::Conv2d { kernel_h: 2, kernel_w: 2, c_in: 1, c_out: 2, stride: 2, padding: 0 },
                LayerSpec::Flatten,
                LayerSpec::Softmax,
            ],
            0,
        )
        .unwrap();
        assert!(mutate_fc_gaussian(&m, 1.0, 0.3, 0).is_err());
    }

    /// Monte-Carlo moments of the noise on the 200k-weight hidden layer.
    #[test]
    fn noise_moments_match_configuration() {
        let m = Model::new(vec![28, 28, 1], mnist_reference_layers(), 1).unwrap();
        let (r_mu, r_delta) = (1.0, 0.3);
        let mutated = mutate_fc_gaussian(&m, r_mu, r_delta, 99).unwrap();
        let i = m.dense_layers()[0];
        let w = m.params()[i].as_ref().unwrap().weight.data();
        let w2 = mutated.params()[i].as_ref().unwrap().weight.data();
        let diffs: Vec<f64> = w.iter().zip(w2).take(10_000).map(|(a, b)| b - a).collect();
        let mean_w = w.iter().sum::<f64>() / w.len() as f64;
        let var_target = w.iter().fold(0.0f64, |a, v| a.max(v.abs())) * r_delta;
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - mean_w * r_mu).abs() < 3.0 * (var_target / n).sqrt());
        // Var of the sample variance for a Gaussian is 2 sigma^4 / (n - 1).
        assert!((var - var_target).abs() < 3.0 * (2.0 * var_target * var_target / (n - 1.0)).sqrt());
    }
}
