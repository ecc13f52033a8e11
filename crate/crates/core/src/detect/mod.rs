//! Detectors of adversarial and backdoor examples. Each exposes an offline
//! fit and an online continuous score; [`DetectorState`] wraps them behind a
//! single fitted, serialisable handle.

mod activation_space;
mod auxiliary;
mod features;
mod kde;
mod lid;
mod mutation;
mod sprt;

pub use activation_space::{
    as_fit, as_labels, as_loglik, loglik_from_labels, AsLayer, AsModel, AsParams, Knn, Pca, EXACT_PCA_MAX_DIM, P_CLAMP,
};
pub use auxiliary::{bu_dropout_score, region_based_predict, squeeze, squeeze_score, BuParams, RegionParams, RegionVote, Squeezer};
pub use kde::{kde_fit, kde_log_score, kde_log_value, kde_score, kde_value, KdeModel, KdeParams};
pub use lid::{lid_fit, lid_from_distances, lid_score, LidConfig, LidParams, LID_MAX};
pub use mutation::{
    build_ensemble, calibrate_sigma_h, change_matrix, mm_score, mm_scores, mm_two_stage, sprt_config_for, MmVerdict,
    MutationEnsemble, MIN_SIGMA_H,
};
pub use sprt::{log_ratio, sprt_decide, SprtConfig, SprtDecision, SprtOutcome, SprtState, Stage};

use crate::binio::{Reader, Writer};
use crate::data::LabeledDataset;
use crate::error::{config, format, input, Error, Result};
use crate::nn::{read_model, write_model, Model, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

const STATE_MAGIC: &[u8; 8] = b"UDDETECT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorId {
    #[serde(rename = "mm1")]
    MmI,
    #[serde(rename = "mm2")]
    MmII,
    #[serde(rename = "as")]
    As,
    #[serde(rename = "kde")]
    Kde,
    #[serde(rename = "lid")]
    Lid,
    #[serde(rename = "bu")]
    Bu,
    #[serde(rename = "region")]
    Region,
    #[serde(rename = "fs")]
    Squeeze,
}

impl DetectorId {
    pub const ALL: [DetectorId; 8] = [
        DetectorId::MmI,
        DetectorId::MmII,
        DetectorId::As,
        DetectorId::Kde,
        DetectorId::Lid,
        DetectorId::Bu,
        DetectorId::Region,
        DetectorId::Squeeze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorId::MmI => "mm1",
            DetectorId::MmII => "mm2",
            DetectorId::As => "as",
            DetectorId::Kde => "kde",
            DetectorId::Lid => "lid",
            DetectorId::Bu => "bu",
            DetectorId::Region => "region",
            DetectorId::Squeeze => "fs",
        }
    }

    pub fn from_name(name: &str) -> Option<DetectorId> {
        Self::ALL.into_iter().find(|d| d.name() == name)
    }

    pub fn orientation(self) -> Orientation {
        match self {
            DetectorId::MmI | DetectorId::Lid | DetectorId::Squeeze => Orientation::HigherIsMalicious,
            DetectorId::MmII | DetectorId::As | DetectorId::Kde | DetectorId::Bu | DetectorId::Region => {
                Orientation::LowerIsMalicious
            }
        }
    }

    fn code(self) -> u8 {
        Self::ALL.iter().position(|&d| d == self).unwrap() as u8
    }

    fn from_code(c: u8) -> Option<DetectorId> {
        Self::ALL.get(c as usize).copied()
    }
}

impl std::fmt::Display for DetectorId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    #[serde(rename = "higher")]
    HigherIsMalicious,
    #[serde(rename = "lower")]
    LowerIsMalicious,
}

impl Orientation {
    /// Maps a score so that larger always means more suspicious.
    pub fn normalise(self, score: f64) -> f64 {
        match self {
            Orientation::HigherIsMalicious => score,
            Orientation::LowerIsMalicious => -score,
        }
    }

    pub fn flipped(self) -> Orientation {
        match self {
            Orientation::HigherIsMalicious => Orientation::LowerIsMalicious,
            Orientation::LowerIsMalicious => Orientation::HigherIsMalicious,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Malicious,
    Benign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub detector: DetectorId,
    pub score: f64,
    pub orientation: Orientation,
    pub verdict: Option<Verdict>,
}

/// Mutation and SPRT parameters for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmParams {
    pub r_mu: f64,
    pub r_delta: f64,
    #[serde(default = "default_ensemble")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_error_rate")]
    pub alpha: f64,
    #[serde(default = "default_error_rate")]
    pub beta: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Change-rate threshold; calibrated from clean samples when absent.
    #[serde(default)]
    pub sigma_h: Option<f64>,
}

fn default_ensemble() -> usize {
    100
}

fn default_error_rate() -> f64 {
    0.05
}

fn default_delta() -> f64 {
    0.1
}

impl MmParams {
    pub fn stage_i() -> Self {
        MmParams { r_mu: 1.0, r_delta: 0.3, n: 100, seed: 0, alpha: 0.05, beta: 0.05, delta: 0.1, sigma_h: None }
    }

    pub fn stage_ii() -> Self {
        MmParams { r_delta: 0.65, ..Self::stage_i() }
    }
}

/// Parameters for every detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorParams {
    pub mm_stage1: MmParams,
    pub mm_stage2: MmParams,
    pub activation_space: AsParams,
    pub kde: KdeParams,
    pub lid: LidParams,
    pub bu: BuParams,
    pub region: RegionParams,
    pub squeeze: Squeezer,
    /// Clean false-positive rate used to place verdict thresholds.
    pub threshold_fpr: f64,
    /// Clean samples used for calibration when the caller gives none.
    pub calibration_samples: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            mm_stage1: MmParams::stage_i(),
            mm_stage2: MmParams::stage_ii(),
            activation_space: AsParams::default(),
            kde: KdeParams::default(),
            lid: LidParams::default(),
            bu: BuParams::default(),
            region: RegionParams::default(),
            squeeze: Squeezer::default(),
            threshold_fpr: 0.05,
            calibration_samples: 500,
        }
    }
}

#[derive(Clone, Debug)]
enum Fitted {
    Mm { params: MmParams, ensemble: MutationEnsemble, sprt: SprtConfig },
    As(AsModel),
    Kde(KdeModel),
    Lid(LidConfig),
    Bu(BuParams),
    Region(RegionParams),
    Squeeze(Squeezer),
}

/// A fitted detector bound to the classifier it guards.
#[derive(Clone, Debug)]
pub struct DetectorState {
    id: DetectorId,
    model: Model,
    fitted: Fitted,
    /// Verdict threshold on the raw score (non-mutation detectors).
    threshold: Option<f64>,
}

fn stage_of(id: DetectorId) -> Stage {
    if id == DetectorId::MmI {
        Stage::I
    } else {
        Stage::II
    }
}

/// Empirical `q`-quantile (nearest rank, lower).
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let i = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[i]
}

impl DetectorState {
    /// Fits detector `id`. `calibration` holds clean inputs used to place the
    /// SPRT threshold / verdict threshold; when `None`, the first
    /// `calibration_samples` training images are used.
    pub fn fit(
        id: DetectorId,
        model: &Model,
        train: &LabeledDataset,
        calibration: Option<&Tensor>,
        params: &DetectorParams,
    ) -> Result<DetectorState> {
        if !(params.threshold_fpr > 0.0 && params.threshold_fpr < 1.0) {
            return config(format!("threshold_fpr must lie in (0, 1), got {}", params.threshold_fpr));
        }
        if train.is_empty() {
            return input("training set is empty");
        }
        let fallback;
        let calib = match calibration {
            Some(c) => c,
            None => {
                fallback = train.images().slice_batch(0, params.calibration_samples.clamp(1, train.len()));
                &fallback
            }
        };
        let fitted = match id {
            DetectorId::MmI | DetectorId::MmII => {
                let p = if id == DetectorId::MmI { &params.mm_stage1 } else { &params.mm_stage2 };
                let stage = stage_of(id);
                let ensemble = build_ensemble(model, stage, p.r_mu, p.r_delta, p.n, p.seed)?;
                let sigma_h = match p.sigma_h {
                    Some(s) => s,
                    None => calibrate_sigma_h(stage, &mm_scores(model, &ensemble, calib)?)?,
                };
                let sprt = sprt_config_for(sigma_h, p.alpha, p.beta, p.delta, p.n)?;
                Fitted::Mm { params: p.clone(), ensemble, sprt }
            }
            DetectorId::As => Fitted::As(as_fit(model, train, &params.activation_space)?),
            DetectorId::Kde => Fitted::Kde(kde_fit(model, train, &params.kde)?),
            DetectorId::Lid => Fitted::Lid(lid_fit(model, train, &params.lid)?),
            DetectorId::Bu => {
                if !(0.0..1.0).contains(&params.bu.rate) || params.bu.passes == 0 {
                    return config("bu: rate must lie in [0, 1) and passes must be positive");
                }
                Fitted::Bu(params.bu.clone())
            }
            DetectorId::Region => {
                if !(params.region.radius >= 0.0) || params.region.m == 0 {
                    return config("region: radius must be >= 0 and m positive");
                }
                Fitted::Region(params.region.clone())
            }
            DetectorId::Squeeze => {
                params.squeeze.validate()?;
                Fitted::Squeeze(params.squeeze)
            }
        };
        let mut state = DetectorState { id, model: model.clone(), fitted, threshold: None };
        if !matches!(state.fitted, Fitted::Mm { .. }) {
            let clean = state.score(calib)?;
            let q = match id.orientation() {
                Orientation::HigherIsMalicious => 1.0 - params.threshold_fpr,
                Orientation::LowerIsMalicious => params.threshold_fpr,
            };
            state.threshold = Some(quantile(&clean, q));
        }
        Ok(state)
    }

    pub fn id(&self) -> DetectorId {
        self.id
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    /// SPRT configuration of a mutation detector.
    pub fn sprt(&self) -> Option<&SprtConfig> {
        match &self.fitted {
            Fitted::Mm { sprt, .. } => Some(sprt),
            _ => None,
        }
    }

    pub fn ensemble(&self) -> Option<&MutationEnsemble> {
        match &self.fitted {
            Fitted::Mm { ensemble, .. } => Some(ensemble),
            _ => None,
        }
    }

    pub fn as_model(&self) -> Option<&AsModel> {
        match &self.fitted {
            Fitted::As(a) => Some(a),
            _ => None,
        }
    }

    /// Continuous scores, oriented per [`DetectorId::orientation`]. KDE is
    /// reported as log density.
    pub fn score(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let m = &self.model;
        let scores = match &self.fitted {
            Fitted::Mm { ensemble, .. } => mm_scores(m, ensemble, batch)?,
            Fitted::As(a) => as_loglik(m, a, batch)?,
            Fitted::Kde(k) => kde_log_score(m, k, batch)?,
            Fitted::Lid(l) => lid_score(m, l, batch)?,
            Fitted::Bu(p) => bu_dropout_score(m, batch, p.rate, p.passes, p.seed)?,
            Fitted::Region(p) => region_based_predict(m, batch, p.radius, p.m, p.seed)?.into_iter().map(|v| v.agreement).collect(),
            Fitted::Squeeze(s) => squeeze_score(m, batch, s)?,
        };
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Score(format!("{}: non-finite score for sample {i}", self.id)));
        }
        Ok(scores)
    }

    /// Scores plus verdicts: SPRT for mutation detectors, the calibrated
    /// threshold otherwise.
    pub fn score_with_verdicts(&self, batch: &Tensor) -> Result<Vec<(f64, Option<Verdict>)>> {
        let to_verdict = |b: bool| if b { Verdict::Malicious } else { Verdict::Benign };
        match &self.fitted {
            Fitted::Mm { ensemble, sprt, .. } => {
                let rows = change_matrix(&self.model, ensemble, batch)?;
                rows.iter()
                    .map(|row| {
                        let score = row.iter().filter(|&&c| c).count() as f64 / row.len() as f64;
                        let out = sprt_decide(row, sprt, stage_of(self.id))?;
                        Ok((score, Some(to_verdict(out.malicious))))
                    })
                    .collect()
            }
            _ => {
                let scores = self.score(batch)?;
                let o = self.id.orientation();
                Ok(scores
                    .into_iter()
                    .map(|s| {
                        let v = self.threshold.map(|t| to_verdict(o.normalise(s) > o.normalise(t)));
                        (s, v)
                    })
                    .collect())
            }
        }
    }

    pub fn records(&self, ids: &[String], batch: &Tensor) -> Result<Vec<ScoreRecord>> {
        let scored = self.score_with_verdicts(batch)?;
        if ids.len() != scored.len() {
            return input(format!("{} sample ids for {} samples", ids.len(), scored.len()));
        }
        Ok(ids
            .iter()
            .zip(scored)
            .map(|(id, (score, verdict))| ScoreRecord {
                sample_id: id.clone(),
                detector: self.id,
                score,
                orientation: self.id.orientation(),
                verdict,
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(STATE_MAGIC);
        w.u8(self.id.code());
        write_model(&mut w, &self.model);
        match self.threshold {
            Some(t) => {
                w.u8(1);
                w.f64(t);
            }
            None => w.u8(0),
        }
        match &self.fitted {
            Fitted::Mm { params, sprt, .. } => {
                w.str(&json(params));
                w.str(&json(sprt));
            }
            Fitted::As(a) => {
                w.usize(a.layers().len());
                for l in a.layers() {
                    w.usize(l.layer);
                    w.usize(l.pca.dim());
                    w.f64s(l.pca.mean());
                    w.f64s(l.pca.basis());
                    w.f64s(l.pca.variances());
                    let (corpus, labels, classes) = l.knn.parts();
                    w.usize(l.knn.k());
                    w.usize(classes);
                    w.f64s(corpus);
                    w.usizes(labels);
                }
                w.f64s(a.switch_probs());
            }
            Fitted::Kde(k) => {
                w.usize(k.layer());
                w.usize(k.dim());
                w.f64(k.sigma());
                w.usize(k.classes());
                for t in 0..k.classes() {
                    w.f64s(k.bank(t));
                }
            }
            Fitted::Lid(l) => {
                w.usize(l.k());
                w.usizes(l.layers());
                w.usizes(l.dims());
                w.usize(l.classes());
                for pos in 0..l.layers().len() {
                    for t in 0..l.classes() {
                        w.f64s(l.pool(pos, t));
                    }
                }
            }
            Fitted::Bu(p) => w.str(&json(p)),
            Fitted::Region(p) => w.str(&json(p)),
            Fitted::Squeeze(s) => w.str(&json(s)),
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DetectorState> {
        let mut r = Reader::new(bytes, STATE_MAGIC, "detector state")?;
        let code = r.u8()?;
        let id = DetectorId::from_code(code).ok_or_else(|| Error::Format(format!("detector state: unknown detector {code}")))?;
        let model = read_model(&mut r)?;
        let threshold = match r.u8()? {
            0 => None,
            1 => Some(r.f64()?),
            f => return format(format!("detector state: bad threshold flag {f}")),
        };
        fn parse<T: serde::de::DeserializeOwned>(r: &mut Reader<'_>) -> Result<T> {
            serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("detector state: {e}")))
        }
        let fitted = match id {
            DetectorId::MmI | DetectorId::MmII => {
                let params: MmParams = parse(&mut r)?;
                let sprt: SprtConfig = parse(&mut r)?;
                sprt.validate().map_err(|e| Error::Format(format!("detector state: {e}")))?;
                let ensemble = build_ensemble(&model, stage_of(id), params.r_mu, params.r_delta, params.n, params.seed)?;
                Fitted::Mm { params, ensemble, sprt }
            }
            DetectorId::As => {
                let n = r.usize()?;
                if n > 4096 {
                    return format("detector state: implausible layer count");
                }
                let mut layers = Vec::with_capacity(n);
                for _ in 0..n {
                    let layer = r.usize()?;
                    let dim = r.usize()?;
                    let mean = r.f64s()?;
                    let basis = r.f64s()?;
                    let variances = r.f64s()?;
                    let pca = Pca::from_parts(dim, mean, basis, variances)?;
                    let k = r.usize()?;
                    let classes = r.usize()?;
                    let corpus = r.f64s()?;
                    let labels = r.usizes()?;
                    let knn = Knn::new(corpus, pca.components(), labels, classes, k)
                        .map_err(|e| Error::Format(format!("detector state: {e}")))?;
                    layers.push(AsLayer { layer, pca, knn });
                }
                Fitted::As(AsModel::from_parts(layers, r.f64s()?)?)
            }
            DetectorId::Kde => {
                let layer = r.usize()?;
                let dim = r.usize()?;
                let sigma = r.f64()?;
                let classes = r.usize()?;
                if classes > 1 << 16 {
                    return format("detector state: implausible class count");
                }
                let banks = (0..classes).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
                Fitted::Kde(KdeModel::from_parts(layer, dim, sigma, banks)?)
            }
            DetectorId::Lid => {
                let k = r.usize()?;
                let layers = r.usizes()?;
                let dims = r.usizes()?;
                let classes = r.usize()?;
                if classes > 1 << 16 || layers.len() != dims.len() {
                    return format("detector state: inconsistent lid header");
                }
                let mut pools = Vec::with_capacity(layers.len());
                for _ in 0..layers.len() {
                    pools.push((0..classes).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?);
                }
                Fitted::Lid(LidConfig::new(k, layers, dims, pools).map_err(|e| Error::Format(format!("detector state: {e}")))?)
            }
            DetectorId::Bu => Fitted::Bu(parse(&mut r)?),
            DetectorId::Region => Fitted::Region(parse(&mut r)?),
            DetectorId::Squeeze => Fitted::Squeeze(parse(&mut r)?),
        };
        r.finish()?;
        Ok(DetectorState { id, model, fitted, threshold })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DetectorState> {
        DetectorState::from_bytes(&std::fs::read(path)?)
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serialisable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SynthConfig};
    use crate::nn::{train_sgd, LayerSpec, TrainConfig};

    fn setup() -> (Model, LabeledDataset) {
        let ds = synth_blobs(&SynthConfig { n_per_class: 40, classes: 3, side: 8, spread: 0.1, seed: 2 }).unwrap();
        let m = Model::new(
            vec![8, 8, 1],
            vec![
                LayerSpec::Conv2d { kernel_h: 3, kernel_w: 3, c_in: 1, c_out: 4, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 64, outputs: 16 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 16, outputs: 3 },
                LayerSpec::Softmax,
            ],
            5,
        )
        .unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 16, learning_rate: 0.05, momentum: 0.9, lr_decay: None, seed: 1 };
        (train_sgd(&m, &ds, &cfg).unwrap().0, ds)
    }

    fn params() -> DetectorParams {
        let mut p = DetectorParams::default();
        p.mm_stage1.n = 10;
        p.mm_stage2.n = 10;
        p.activation_space.components = 5;
        p.activation_space.fit_samples = 100;
        p.activation_space.pca_samples = 50;
        p.lid.k = 5;
        p.lid.pool_cap = 30;
        p.bu.passes = 8;
        p.region.m = 10;
        p.calibration_samples = 40;
        p
    }

    #[test]
    fn orientation_registry() {
        use Orientation::*;
        let expect = [
            (DetectorId::MmI, HigherIsMalicious),
            (DetectorId::MmII, LowerIsMalicious),
            (DetectorId::As, LowerIsMalicious),
            (DetectorId::Kde, LowerIsMalicious),
            (DetectorId::Lid, HigherIsMalicious),
            (DetectorId::Bu, LowerIsMalicious),
            (DetectorId::Squeeze, HigherIsMalicious),
            (DetectorId::Region, LowerIsMalicious),
        ];
        for (d, o) in expect {
            assert_eq!(d.orientation(), o);
            assert_eq!(DetectorId::from_name(d.name()), Some(d));
        }
    }

    #[test]
    fn every_detector_round_trips_and_scores_identically() {
        let (m, ds) = setup();
        let p = params();
        let x = ds.images().slice_batch(0, 12);
        for id in DetectorId::ALL {
            let s = DetectorState::fit(id, &m, &ds, None, &p).unwrap_or_else(|e| panic!("{id}: {e}"));
            let scores = s.score(&x).unwrap();
            assert_eq!(scores.len(), 12);
            let back = DetectorState::from_bytes(&s.to_bytes()).unwrap();
            assert_eq!(back.score(&x).unwrap(), scores, "{id}");
            assert_eq!(back.to_bytes(), s.to_bytes(), "{id}");
            let ids: Vec<String> = (0..12).map(|i| format!("n:{i}")).collect();
            let recs = back.records(&ids, &x).unwrap();
            assert!(recs.iter().all(|r| r.verdict.is_some() && r.orientation == id.orientation()));
        }
    }

    #[test]
    fn corrupted_state_rejected() {
        let (m, ds) = setup();
        let s = DetectorState::fit(DetectorId::Kde, &m, &ds, None, &params()).unwrap();
        let mut b = s.to_bytes();
        let n = b.len();
        b[n / 2] ^= 0x40;
        assert!(DetectorState::from_bytes(&b).is_err());
        assert!(DetectorState::from_bytes(&b[..n - 3]).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let (m, ds) = setup();
        for id in [DetectorId::MmI, DetectorId::As, DetectorId::Lid] {
            let a = DetectorState::fit(id, &m, &ds, None, &params()).unwrap();
            let b = DetectorState::fit(id, &m, &ds, None, &params()).unwrap();
            assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }

    #[test]
    fn quantile_nearest_rank() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.95), 4.0);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.0), 1.0);
    }
}
