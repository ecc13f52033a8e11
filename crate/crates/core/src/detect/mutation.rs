//! Model mutation: Gaussian-fuzzed ensembles, label-change rates and the
//! two-stage SPRT workflow.

use super::sprt::{SprtConfig, SprtState, Stage};
use crate::error::{config, input, Result};
use crate::nn::{argmax, mutate_fc_gaussian, Model, Tensor};
use crate::derive_seed;
use serde::{Deserialize, Serialize};

/// Smallest change-rate threshold produced by calibration.
pub const MIN_SIGMA_H: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct MutationEnsemble {
    stage: Stage,
    r_mu: f64,
    r_delta: f64,
    seed: u64,
    models: Vec<Model>,
}

/// `n` independent mutants of `base`; member `i` uses `derive_seed(seed, i)`.
pub fn build_ensemble(base: &Model, stage: Stage, r_mu: f64, r_delta: f64, n: usize, seed: u64) -> Result<MutationEnsemble> {
    if n < 1 {
        return config("ensemble size must be at least 1");
    }
    let models = (0..n)
        .map(|i| mutate_fc_gaussian(base, r_mu, r_delta, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MutationEnsemble { stage, r_mu, r_delta, seed, models })
}

impl MutationEnsemble {
    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn factors(&self) -> (f64, f64) {
        (self.r_mu, self.r_delta)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    /// Same members in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        for &i in order {
            if i >= self.len() || std::mem::replace(&mut seen[i], true) {
                return input("ensemble order is not a permutation");
            }
        }
        if order.len() != self.len() {
            return input("ensemble order is not a permutation");
        }
        Ok(MutationEnsemble { models: order.iter().map(|&i| self.models[i].clone()).collect(), ..self.clone() })
    }
}

/// Label-change rate of a single sample: the share of members whose
/// prediction differs from `base_pred`.
pub fn mm_score(ensemble: &MutationEnsemble, x: &Tensor, base_pred: usize) -> Result<f64> {
    if ensemble.is_empty() {
        return config("empty ensemble");
    }
    let mut z = 0;
    for m in ensemble.models() {
        let p = m.predict(x)?;
        if p.len() != 1 {
            return input("mm_score expects a single sample");
        }
        z += usize::from(p[0] != base_pred);
    }
    Ok(z as f64 / ensemble.len() as f64)
}

/// Shared convolutional trunk of a batch, i.e. the input of the first Dense
/// layer. Mutation only touches Dense layers, so all members share it.
fn trunk(base: &Model, batch: &Tensor) -> Result<(usize, Tensor)> {
    let Some(fd) = base.first_dense() else {
        return config("model has no Dense layer");
    };
    let t = if fd == 0 { base.to_batch(batch)? } else { base.forward_until(fd, batch)? };
    Ok((fd, t))
}

fn check_members(base: &Model, ensemble: &MutationEnsemble) -> Result<()> {
    if ensemble.is_empty() {
        return config("empty ensemble");
    }
    for m in ensemble.models() {
        if m.layers() != base.layers() || m.input_shape() != base.input_shape() {
            return config("ensemble member architecture differs from the base model");
        }
    }
    Ok(())
}

/// Per-sample, per-member change flags `[sample][member]` for a batch.
pub fn change_matrix(base: &Model, ensemble: &MutationEnsemble, batch: &Tensor) -> Result<Vec<Vec<bool>>> {
    check_members(base, ensemble)?;
    let (fd, t) = trunk(base, batch)?;
    let base_pred: Vec<usize> = base.forward_from(fd, &t)?.samples().map(argmax).collect();
    let mut out = vec![Vec::with_capacity(ensemble.len()); base_pred.len()];
    for m in ensemble.models() {
        let out_m = m.forward_from(fd, &t)?;
        for (row, (probs, &b)) in out.iter_mut().zip(out_m.samples().zip(&base_pred)) {
            row.push(argmax(probs) != b);
        }
    }
    Ok(out)
}

/// Label-change rates `z / n` for every sample of a batch.
pub fn mm_scores(base: &Model, ensemble: &MutationEnsemble, batch: &Tensor) -> Result<Vec<f64>> {
    let n = ensemble.len() as f64;
    Ok(change_matrix(base, ensemble, batch)?
        .into_iter()
        .map(|row| row.iter().filter(|&&c| c).count() as f64 / n)
        .collect())
}

/// Threshold calibrated from clean change rates. Stage I: `mean + 2 std`;
/// stage II: half the clean mean. Floored at [`MIN_SIGMA_H`].
pub fn calibrate_sigma_h(stage: Stage, clean_rates: &[f64]) -> Result<f64> {
    if clean_rates.is_empty() {
        return input("no clean change rates to calibrate from");
    }
    let n = clean_rates.len() as f64;
    let mean = clean_rates.iter().sum::<f64>() / n;
    let var = clean_rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let s = match stage {
        Stage::I => mean + 2.0 * var.sqrt(),
        Stage::II => 0.5 * mean,
    };
    Ok(s.clamp(MIN_SIGMA_H, 1.0 - MIN_SIGMA_H))
}

/// SPRT config around `sigma_h`, shrinking `delta` to half the admissible
/// bound when the requested width does not fit.
pub fn sprt_config_for(sigma_h: f64, alpha: f64, beta: f64, delta: f64, n_max: usize) -> Result<SprtConfig> {
    let bound = sigma_h.min(1.0 - sigma_h);
    let delta = if delta < bound { delta } else { 0.5 * bound };
    let cfg = SprtConfig { alpha, beta, delta, sigma_h, n_max };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MmVerdict {
    Adversarial,
    Backdoor,
    Normal,
}

/// Stage I on `ens_1`; if not flagged as an AE, stage II on `ens_2`.
/// Members are evaluated lazily and each stage stops at its SPRT decision.
pub fn mm_two_stage(
    base: &Model,
    x: &Tensor,
    ens_1: &MutationEnsemble,
    ens_2: &MutationEnsemble,
    cfg_1: &SprtConfig,
    cfg_2: &SprtConfig,
) -> Result<MmVerdict> {
    check_members(base, ens_1)?;
    check_members(base, ens_2)?;
    let (fd, t) = trunk(base, x)?;
    if t.batch() != 1 {
        return input("mm_two_stage expects a single sample");
    }
    let base_pred = argmax(base.forward_from(fd, &t)?.data());
    let run = |ens: &MutationEnsemble, cfg: &SprtConfig, stage: Stage| -> Result<bool> {
        let cfg = SprtConfig { n_max: cfg.n_max.min(ens.len()), ..*cfg };
        let mut state = SprtState::new(cfg, stage)?;
        for m in ens.models() {
            let changed = argmax(m.forward_from(fd, &t)?.data()) != base_pred;
            if state.push(changed).is_some() {
                break;
            }
        }
        Ok(state.outcome().malicious)
    };
    if run(ens_1, cfg_1, Stage::I)? {
        return Ok(MmVerdict::Adversarial);
    }
    if run(ens_2, cfg_2, Stage::II)? {
        return Ok(MmVerdict::Backdoor);
    }
    Ok(MmVerdict::Normal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use proptest::prelude::*;

    fn base() -> Model {
        Model::new(
            vec![6, 6, 1],
            vec![
                LayerSpec::Conv2d { kernel_h: 3, kernel_w: 3, c_in: 1, c_out: 2, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 72, outputs: 12 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 12, outputs: 4 },
                LayerSpec::Softmax,
            ],
            9,
        )
        .unwrap()
    }

    fn probe(n: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::seeded_rng(seed);
        Tensor::new(vec![n, 6, 6, 1], (0..n * 36).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_factors_give_zero_scores() {
        let b = base();
        let e = build_ensemble(&b, Stage::I, 0.0, 0.0, 5, 1).unwrap();
        assert!(e.models().iter().all(|m| m.params() == b.params()));
        assert!(mm_scores(&b, &e, &probe(7, 0)).unwrap().iter().all(|&s| s == 0.0));
        let x = probe(1, 3);
        assert_eq!(mm_score(&e, &x, b.predict(&x).unwrap()[0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_size_rejected() {
        assert!(matches!(build_ensemble(&base(), Stage::I, 1.0, 0.3, 0, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn members_are_distinct_and_deterministic() {
        let b = base();
        let e1 = build_ensemble(&b, Stage::I, 1.0, 0.3, 6, 42).unwrap();
        let e2 = build_ensemble(&b, Stage::I, 1.0, 0.3, 6, 42).unwrap();
        let x = probe(4, 1);
        for (m1, m2) in e1.models().iter().zip(e2.models()) {
            assert_eq!(m1.forward(&x, false).unwrap().output, m2.forward(&x, false).unwrap().output);
        }
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(e1.models()[i].params(), e1.models()[j].params());
            }
        }
    }

    #[test]
    fn batch_scores_match_single_sample_scores() {
        let b = base();
        let e = build_ensemble(&b, Stage::II, 1.0, 2.0, 20, 5).unwrap();
        let x = probe(6, 2);
        let batch = mm_scores(&b, &e, &x).unwrap();
        let preds = b.predict(&x).unwrap();
        for i in 0..6 {
            let xi = x.slice_batch(i, i + 1);
            assert_eq!(batch[i], mm_score(&e, &xi, preds[i]).unwrap());
        }
    }

    #[test]
    fn calibration_and_delta_shrink() {
        let s = calibrate_sigma_h(Stage::I, &[0.0, 0.1, 0.2]).unwrap();
        assert!((s - (0.1 + 2.0 * (0.02f64 / 3.0).sqrt())).abs() < 1e-12);
        assert_eq!(calibrate_sigma_h(Stage::II, &[0.0, 0.0]).unwrap(), MIN_SIGMA_H);
        let c = sprt_config_for(0.05, 0.05, 0.05, 0.1, 100).unwrap();
        assert_eq!(c.delta, 0.025);
    }

    #[test]
    fn two_stage_follows_forced_sequences() {
        let b = base();
        let x = probe(1, 8);
        let stable = build_ensemble(&b, Stage::I, 0.0, 0.0, 30, 1).unwrap();
        let cfg = SprtConfig { alpha: 0.05, beta: 0.05, delta: 0.05, sigma_h: 0.2, n_max: 30 };
        // No member ever changes: stage I passes, stage II flags a backdoor.
        assert_eq!(mm_two_stage(&b, &x, &stable, &stable, &cfg, &cfg).unwrap(), MmVerdict::Backdoor);
        // A bias-only model whose mutants always flip: stage I flags an AE.
        let mut flip = b.clone();
        let last = *b.dense_layers().last().unwrap();
        let pred = b.predict(&x).unwrap()[0];
        {
            let p = flip.params_mut()[last].as_mut().unwrap();
            p.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
            p.bias.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i == (pred + 1) % 4 { 1.0 } else { 0.0 });
        }
        let ens = MutationEnsemble { stage: Stage::I, r_mu: 0.0, r_delta: 0.0, seed: 0, models: vec![flip; 30] };
        assert_eq!(mm_two_stage(&b, &x, &ens, &stable, &cfg, &cfg).unwrap(), MmVerdict::Adversarial);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn score_in_unit_interval_and_permutation_invariant(seed in 0u64..500) {
            let b = base();
            let e = build_ensemble(&b, Stage::I, 1.0, 1.5, 8, seed).unwrap();
            let x = probe(5, seed);
            let s = mm_scores(&b, &e, &x).unwrap();
            prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
            let p = e.permuted(&[7, 3, 5, 1, 0, 2, 6, 4]).unwrap();
            prop_assert_eq!(s, mm_scores(&b, &p, &x).unwrap());
        }
    }
}
