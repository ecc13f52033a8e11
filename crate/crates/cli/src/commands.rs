use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde_json::json;
use unidetect_core::attacks::{attack_success_rate, fgsm, make_backdoor_examples, save_attack_batch, AttackBatch};
use unidetect_core::data::{load_archive, poison_dataset, save_dataset, Archive, LabeledDataset};
use unidetect_core::detect::{DetectorId, DetectorState};
use unidetect_core::eval::{emit_report, evaluate, read_scores_csv, time_detector, ReportFormat, TimingEntry, BENIGN_POPULATION};
use unidetect_core::nn::{load_model, save_model, train_sgd, Model, Tensor};
use unidetect_core::seeded_rng;

use crate::config::{DatasetConfig, RunConfig, Splits};
use crate::{AttackArg, Cli, CliError, Command};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match &cli.command {
        Command::Train => train(&cfg),
        Command::Attack { kind, model } => attack(&cfg, *kind, model),
        Command::Fit { model, detectors } => fit(&cfg, model, detectors),
        Command::Detect { states, samples, population } => detect(&cfg, states, samples, population.as_deref()),
        Command::Evaluate { scores, detectors } => eval(&cfg, scores, detectors),
        Command::Bench { model, detectors } => bench(&cfg, model, detectors),
    }
}

fn dataset_name(cfg: &RunConfig) -> &'static str {
    match cfg.dataset {
        DatasetConfig::Mnist { .. } => "mnist",
        DatasetConfig::Synthetic { .. } => "synthetic",
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(unidetect_core::Error::from)?;
    Ok(&cfg.out_dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| unidetect_core::Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(unidetect_core::Error::from)?;
    Ok(())
}

fn accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64, CliError> {
    let (pred, _) = model.predict_chunked(ds.images(), 256)?;
    Ok(pred.iter().zip(ds.labels()).filter(|(p, l)| p == l).count() as f64 / ds.len() as f64)
}

/// Test rows in seeded random order.
fn test_order(cfg: &RunConfig, splits: &Splits) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splits.test.len()).collect();
    order.shuffle(&mut seeded_rng(cfg.seed));
    order
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let splits = cfg.load_splits()?;
    let init = cfg.init_model(&splits)?;
    let trigger = cfg.trigger()?;
    let train_set = match cfg.poison_config() {
        Some(p) => poison_dataset(&splits.train, &trigger, &p)?,
        None => splits.train.clone(),
    };
    let start = Instant::now();
    let (model, history) = train_sgd(&init, &train_set, &cfg.train)?;
    let secs = start.elapsed().as_secs_f64();
    let test_accuracy = accuracy(&model, &splits.test)?;
    let mut report = json!({
        "dataset": dataset_name(cfg),
        "parameters": model.parameter_count(),
        "test_accuracy": test_accuracy,
        "epochs": history.len(),
    });
    println!("test accuracy {test_accuracy:.4} after {} epochs ({secs:.0} s)", history.len());
    if let Some(p) = &cfg.poison {
        let be = make_backdoor_examples(&splits.test, &trigger, p.target)?;
        let success = attack_success_rate(&model, &be)?;
        println!("backdoor success {success:.4} on {} trigger-stamped test images", be.len());
        report["backdoor_target"] = json!(p.target);
        report["backdoor_success"] = json!(success);
    }

    let mut csv = String::from("epoch,loss,accuracy,learning_rate\n");
    for h in &history {
        let _ = writeln!(csv, "{},{},{},{}", h.epoch, h.loss, h.accuracy, h.learning_rate);
    }
    let dir = out_dir(cfg)?;
    save_model(&model, &dir.join("model.udnn"))?;
    std::fs::write(dir.join("history.csv"), csv).map_err(unidetect_core::Error::from)?;
    write_json(&dir.join("train_report.json"), &report)?;
    println!("wrote {}", dir.join("model.udnn").display());
    Ok(())
}

fn remap(batch: &mut AttackBatch, order: &[usize]) {
    for i in batch.source_indices.iter_mut() {
        *i = order[*i];
    }
}

fn attack(cfg: &RunConfig, kind: AttackArg, model_path: &Path) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let splits = cfg.load_splits()?;
    let order = test_order(cfg, &splits);
    let n = cfg.attack.samples;
    match kind {
        AttackArg::Clean => {
            let ds = splits.test.subset(&order[..n.min(order.len())])?;
            let dir = out_dir(cfg)?;
            let path = dir.join(format!("{BENIGN_POPULATION}.uds"));
            save_dataset(&ds, &path)?;
            println!("wrote {} clean samples to {}", ds.len(), path.display());
            Ok(())
        }
        AttackArg::Fgsm => {
            let shuffled = splits.test.subset(&order)?;
            let (mut batch, report) = fgsm(&model, shuffled.images(), shuffled.labels(), cfg.attack.epsilon)?;
            if batch.is_empty() {
                eprintln!("warning: FGSM with epsilon {} retained no adversarial examples", cfg.attack.epsilon);
                return Err(CliError::EmptyYield(format!(
                    "empty FGSM yield: 0 of {} correctly classified inputs were flipped",
                    report.correct
                )));
            }
            batch.truncate(n);
            remap(&mut batch, &order);
            let success = attack_success_rate(&model, &batch)?;
            let summary = json!({
                "kind": "fgsm",
                "epsilon": cfg.attack.epsilon,
                "attempted": report.attempted,
                "correct": report.correct,
                "retained": report.retained,
                "yield_rate": report.yield_rate,
                "written": batch.len(),
                "success_rate": success,
            });
            write_attack(cfg, &batch, &summary)
        }
        AttackArg::Backdoor => {
            let target = cfg
                .poison
                .as_ref()
                .map(|p| p.target)
                .ok_or_else(|| CliError::Config("backdoor attack needs a [poison] block with the target".into()))?;
            let shuffled = splits.test.subset(&order)?;
            let mut batch = make_backdoor_examples(&shuffled, &cfg.trigger()?, target)?;
            batch.truncate(n);
            remap(&mut batch, &order);
            let success = attack_success_rate(&model, &batch)?;
            let summary = json!({ "kind": "backdoor", "target": target, "written": batch.len(), "success_rate": success });
            write_attack(cfg, &batch, &summary)
        }
    }
}

fn write_attack(cfg: &RunConfig, batch: &AttackBatch, summary: &serde_json::Value) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let name = batch.kind.name();
    save_attack_batch(batch, &dir.join(format!("{name}.uds")))?;
    write_json(&dir.join(format!("attack_{name}.json")), summary)?;
    println!("{}", serde_json::to_string(summary).unwrap_or_default());
    Ok(())
}

fn fit(cfg: &RunConfig, model_path: &Path, detectors: &[DetectorId]) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let splits = cfg.load_splits()?;
    let mut states = Vec::new();
    for &id in detectors {
        let start = Instant::now();
        let state = DetectorState::fit(id, &model, &splits.train, None, &cfg.detectors)?;
        println!("fitted {id} in {:.1} s", start.elapsed().as_secs_f64());
        states.push(state);
    }
    let dir = out_dir(cfg)?;
    for s in &states {
        s.save(&dir.join(format!("{}.udstate", s.id())))?;
    }
    Ok(())
}

fn load_samples(path: &Path, population: Option<&str>) -> Result<(String, Tensor), CliError> {
    let (default, images) = match load_archive(path)? {
        Archive::Dataset(ds) => (BENIGN_POPULATION.to_string(), ds.images().clone()),
        Archive::Attack(b) => (b.kind.name().to_string(), b.examples()?),
    };
    let pop = population.map_or(default, str::to_string);
    if pop.is_empty() || pop.contains(':') {
        return Err(CliError::Config(format!("population name '{pop}' must be non-empty and free of ':'")));
    }
    Ok((pop, images))
}

fn detect(cfg: &RunConfig, state_paths: &[PathBuf], samples: &Path, population: Option<&str>) -> Result<(), CliError> {
    let (pop, images) = load_samples(samples, population)?;
    let ids: Vec<String> = (0..images.batch()).map(|i| format!("{pop}:{i}")).collect();
    let mut outputs = Vec::new();
    for p in state_paths {
        let state = DetectorState::load(p)?;
        let records = state.records(&ids, &images)?;
        outputs.push((format!("scores_{}_{pop}.csv", state.id()), records));
    }
    let dir = out_dir(cfg)?;
    for (name, records) in &outputs {
        emit_report(records, ReportFormat::Csv, &dir.join(name))?;
        println!("wrote {} scores to {}", records.len(), dir.join(name).display());
    }
    Ok(())
}

fn eval(cfg: &RunConfig, paths: &[PathBuf], detectors: &[DetectorId]) -> Result<(), CliError> {
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_scores_csv(p)?);
    }
    let wanted: Vec<DetectorId> = if detectors.is_empty() {
        DetectorId::ALL.into_iter().filter(|d| records.iter().any(|r| r.detector == *d)).collect()
    } else {
        detectors.to_vec()
    };
    let report = evaluate(&records, dataset_name(cfg), &wanted, cfg.to_json())?;
    print!("{}", report.auc_table());
    let dir = out_dir(cfg)?;
    report.write_json(&dir.join("eval.json"))?;
    emit_report(&records, ReportFormat::PlotData, &dir.join("plot_data.json"))?;
    Ok(())
}

fn bench(cfg: &RunConfig, model_path: &Path, detectors: &[DetectorId]) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let splits = cfg.load_splits()?;
    let order = test_order(cfg, &splits);
    let b = &cfg.bench;
    let batch = splits.test.images().select(&order[..b.batch.clamp(1, order.len())])?;
    let inference = time_detector(|x: &Tensor| Ok(vec![0.0; model.predict(x)?.len()]), &batch, b.warmup, b.repeats)?;
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    println!("{:<10} {:>12} {:>12}", "detector", "mean ms", "median ms");
    println!("{:<10} {:>12.3} {:>12.3}", "inference", inference.mean_ms, inference.median_ms);
    for &id in detectors {
        let start = Instant::now();
        let state = DetectorState::fit(id, &model, &splits.train, None, &cfg.detectors)?;
        let fit_s = start.elapsed().as_secs_f64();
        let t = time_detector(|x: &Tensor| state.score(x), &batch, b.warmup, b.repeats)?;
        println!("{:<10} {:>12.3} {:>12.3}", id.name(), t.mean_ms, t.median_ms);
        rows.push(json!({ "detector": id, "fit_seconds": fit_s }));
        timing.push(TimingEntry { dataset: dataset_name(cfg).to_string(), detector: id, mean_ms: t.mean_ms, median_ms: t.median_ms });
    }
    let report = json!({
        "samples_per_call": batch.batch(),
        "inference_ms": { "mean": inference.mean_ms, "median": inference.median_ms },
        "timing": timing,
        "fit": rows,
    });
    write_json(&out_dir(cfg)?.join("bench.json"), &report)
}
