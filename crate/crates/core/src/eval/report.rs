//! Score CSVs, JSON reports and plot-data text files.

use super::roc::{auc, roc, tpr_at_fpr};
use crate::detect::{DetectorId, ScoreRecord};
use crate::error::{input, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Population name of clean samples in sample ids (`normal:<n>`).
pub const BENIGN_POPULATION: &str = "normal";

const TPR_FPR_GRID: [f64; 3] = [0.01, 0.05, 0.1];

/// Population prefix of a sample id (`"be:17"` gives `"be"`).
pub fn population_of(sample_id: &str) -> &str {
    sample_id.split_once(':').map_or(sample_id, |(p, _)| p)
}

pub fn write_scores_csv(records: &[ScoreRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return input("no score records to write");
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let records = r
        .deserialize()
        .collect::<std::result::Result<Vec<ScoreRecord>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if let Some(bad) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Format(format!("{}: non-finite score for {}", path.display(), bad.sample_id)));
    }
    Ok(records)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub dataset: String,
    pub attack: String,
    pub detector: DetectorId,
    pub auc: f64,
    pub malicious: usize,
    pub benign: usize,
    /// `(fpr, tpr)` pairs.
    pub tpr_at_fpr: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub dataset: String,
    pub detector: DetectorId,
    pub mean_ms: f64,
    pub median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub entries: Vec<EvalEntry>,
    pub timing: Vec<TimingEntry>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn auc_of(&self, attack: &str, detector: DetectorId) -> Option<f64> {
        self.entries.iter().find(|e| e.attack == attack && e.detector == detector).map(|e| e.auc)
    }

    /// Attack × detector AUC matrix as aligned text.
    pub fn auc_table(&self) -> String {
        let attacks: BTreeSet<&str> = self.entries.iter().map(|e| e.attack.as_str()).collect();
        let detectors: BTreeSet<DetectorId> = self.entries.iter().map(|e| e.detector).collect();
        let mut s = format!("{:<10}", "attack");
        for d in &detectors {
            s.push_str(&format!("{:>9}", d.name()));
        }
        s.push('\n');
        for a in &attacks {
            s.push_str(&format!("{a:<10}"));
            for &d in &detectors {
                match self.auc_of(a, d) {
                    Some(v) => s.push_str(&format!("{v:>9.4}")),
                    None => s.push_str(&format!("{:>9}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// AUC of every malicious population against `normal`, per detector.
/// Each detector in `detectors` must have records for every population.
pub fn evaluate(records: &[ScoreRecord], dataset: &str, detectors: &[DetectorId], config: serde_json::Value) -> Result<EvalReport> {
    if records.is_empty() {
        return input("no score records to evaluate");
    }
    let mut by: BTreeMap<(DetectorId, &str), Vec<f64>> = BTreeMap::new();
    for r in records {
        by.entry((r.detector, population_of(&r.sample_id))).or_default().push(r.score);
    }
    let populations: BTreeSet<&str> = by.keys().map(|k| k.1).collect();
    if !populations.contains(BENIGN_POPULATION) {
        return input(format!("no '{BENIGN_POPULATION}' samples among the records"));
    }
    let mut entries = Vec::new();
    for &d in detectors {
        for &p in &populations {
            if !by.contains_key(&(d, p)) {
                return input(format!("detector '{d}' has no scores for population '{p}'"));
            }
        }
        let benign = &by[&(d, BENIGN_POPULATION)];
        for &p in populations.iter().filter(|&&p| p != BENIGN_POPULATION) {
            let mal = &by[&(d, p)];
            let curve = roc(mal, benign, d.orientation())?;
            entries.push(EvalEntry {
                dataset: dataset.to_string(),
                attack: p.to_string(),
                detector: d,
                auc: auc(&curve),
                malicious: mal.len(),
                benign: benign.len(),
                tpr_at_fpr: TPR_FPR_GRID.iter().map(|&f| (f, tpr_at_fpr(&curve, f))).collect(),
            });
        }
    }
    Ok(EvalReport { schema_version: REPORT_SCHEMA_VERSION, entries, timing: Vec::new(), config })
}

/// Empirical CDF as `(x, F(x))` at each distinct value; ends at 1.
pub fn cdf_points(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let f = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = f,
            _ => out.push((*x, f)),
        }
    }
    out
}

/// Share of samples whose label switches between each pair of consecutive
/// layers, from `[sample][layer]` label sequences.
pub fn switching_rates(labels: &[Vec<usize>]) -> Vec<f64> {
    let Some(first) = labels.first() else { return Vec::new() };
    let pairs = first.len().saturating_sub(1);
    (0..pairs)
        .map(|i| labels.iter().filter(|l| l[i] != l[i + 1]).count() as f64 / labels.len() as f64)
        .collect()
}

/// One named point list of a figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub figure: String,
    pub series: String,
    pub points: Vec<(f64, f64)>,
}

/// Writes series as `# figure=<f> series=<s>` headers followed by `x y` lines.
pub fn write_plot_series(series: &[PlotSeries], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in series {
        writeln!(f, "# figure={} series={}", s.figure, s.series)?;
        for (x, y) in &s.points {
            writeln!(f, "{x} {y}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    PlotData,
}

#[derive(Serialize)]
struct JsonRecords<'a> {
    schema_version: u32,
    records: &'a [ScoreRecord],
}

/// Writes `records` to `path`. Plot data holds one CDF per detector and
/// population, and one ROC per detector and malicious population.
pub fn emit_report(records: &[ScoreRecord], format: ReportFormat, path: &Path) -> Result<()> {
    if records.is_empty() {
        return input("no score records to emit");
    }
    match format {
        ReportFormat::Csv => write_scores_csv(records, path),
        ReportFormat::Json => {
            let body = JsonRecords { schema_version: REPORT_SCHEMA_VERSION, records };
            let text = serde_json::to_string_pretty(&body).map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(path, text + "\n")?;
            Ok(())
        }
        ReportFormat::PlotData => {
            let mut by: BTreeMap<(DetectorId, &str), Vec<f64>> = BTreeMap::new();
            for r in records {
                by.entry((r.detector, population_of(&r.sample_id))).or_default().push(r.score);
            }
            let mut series = Vec::new();
            for ((d, p), scores) in &by {
                series.push(PlotSeries { figure: format!("cdf-{d}"), series: p.to_string(), points: cdf_points(scores) });
            }
            for ((d, p), scores) in &by {
                if *p == BENIGN_POPULATION {
                    continue;
                }
                if let Some(benign) = by.get(&(*d, BENIGN_POPULATION)) {
                    let curve = roc(scores, benign, d.orientation())?;
                    series.push(PlotSeries {
                        figure: format!("roc-{d}"),
                        series: p.to_string(),
                        points: curve.points.iter().map(|q| (q.fpr, q.tpr)).collect(),
                    });
                }
            }
            write_plot_series(&series, path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Verdict;

    fn records() -> Vec<ScoreRecord> {
        let mut v = Vec::new();
        for (i, s) in [0.1, 0.2, 0.3].iter().enumerate() {
            v.push(ScoreRecord {
                sample_id: format!("normal:{i}"),
                detector: DetectorId::Lid,
                score: *s,
                orientation: DetectorId::Lid.orientation(),
                verdict: None,
            });
        }
        for (i, s) in [0.25, 0.9].iter().enumerate() {
            v.push(ScoreRecord {
                sample_id: format!("be:{i}"),
                detector: DetectorId::Lid,
                score: *s,
                orientation: DetectorId::Lid.orientation(),
                verdict: Some(Verdict::Malicious),
            });
        }
        v
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let mut r = records();
        r[0].score = 0.1 + 0.2;
        write_scores_csv(&r, &p).unwrap();
        assert_eq!(read_scores_csv(&p).unwrap(), r);
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("sample_id,detector,score,orientation,verdict\n"));
    }

    #[test]
    fn empty_records_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotData] {
            assert!(matches!(emit_report(&[], f, &dir.path().join("x")), Err(Error::Input(_))));
        }
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let r = records();
        let p = Path::new("/nonexistent-dir/for/sure/out.csv");
        assert!(matches!(emit_report(&r, ReportFormat::Json, p), Err(Error::Io(_))));
        assert!(matches!(emit_report(&r, ReportFormat::Csv, p), Err(Error::Io(_))));
    }

    #[test]
    fn evaluate_and_missing_detector() {
        let r = records();
        let rep = evaluate(&r, "synth", &[DetectorId::Lid], serde_json::json!({})).unwrap();
        // Pairs: 0.25 beats 0.1, 0.2; 0.9 beats all three -> 5/6.
        assert!((rep.auc_of("be", DetectorId::Lid).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        match evaluate(&r, "synth", &[DetectorId::Lid, DetectorId::Kde], serde_json::json!({})) {
            Err(Error::Input(m)) => assert!(m.contains("kde"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(rep.auc_table().contains("lid"));
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one() {
        let c = cdf_points(&[3.0, 1.0, 2.0, 2.0, 5.0]);
        assert!(c.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        assert_eq!(c.last().unwrap().1, 1.0);
        assert_eq!(c[1], (2.0, 0.6));
    }

    #[test]
    fn plot_data_contains_cdf_and_roc() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plot.txt");
        emit_report(&records(), ReportFormat::PlotData, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("# figure=cdf-lid series=normal"));
        assert!(text.contains("# figure=roc-lid series=be"));
    }

    #[test]
    fn switching_rates_per_pair() {
        let l = vec![vec![1, 1, 2], vec![0, 1, 1], vec![3, 3, 3], vec![2, 2, 2]];
        assert_eq!(switching_rates(&l), vec![0.25, 0.25]);
    }
}
