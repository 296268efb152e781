//! Evaluation metrics (binary ACC/F1 on the sign of the score, MAE, Pearson
//! CORR) and the tabular evaluation report with its CSV and JSON encodings.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Metric tuple for one prediction set. ACC and F1 are percentages; CORR is
/// `None` when either side has zero variance (undefined rather than NaN).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricValues {
    pub acc: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: Option<f64>,
}

/// Scores are binarized at zero: non-negative counts as the positive class.
/// F1 is the support-weighted average over the two classes.
pub fn metrics(preds: &[f64], labels: &[f64]) -> Result<MetricValues> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "metrics length mismatch: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("metrics on empty prediction set".into()));
    }
    let n = preds.len() as f64;
    let pos = |v: f64| v >= 0.0;

    let correct = preds.iter().zip(labels).filter(|(p, l)| pos(**p) == pos(**l)).count();
    let acc = 100.0 * correct as f64 / n;

    let mut f1 = 0.0;
    for class_pos in [true, false] {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| pos(**p) == class_pos && pos(**l) == class_pos)
            .count() as f64;
        let pred_c = preds.iter().filter(|p| pos(**p) == class_pos).count() as f64;
        let true_c = labels.iter().filter(|l| pos(**l) == class_pos).count() as f64;
        let precision = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
        let recall = if true_c > 0.0 { tp / true_c } else { 0.0 };
        let class_f1 =
            if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        f1 += (true_c / n) * class_f1;
    }

    let mae = preds.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / n;

    let mean_p = preds.iter().sum::<f64>() / n;
    let mean_l = labels.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_l = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        cov += (p - mean_p) * (l - mean_l);
        var_p += (p - mean_p) * (p - mean_p);
        var_l += (l - mean_l) * (l - mean_l);
    }
    let corr = if var_p == 0.0 || var_l == 0.0 { None } else { Some(cov / (var_p * var_l).sqrt()) };

    Ok(MetricValues { acc, f1: 100.0 * f1, mae, corr })
}

// ── Report ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    /// Available-modality set as a string ("a,t"), or "avg".
    pub scenario: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EvalReport {
    /// Key/value metadata echoed as comment lines ahead of the CSV header.
    pub meta: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn push(&mut self, dataset: &str, method: &str, scenario: &str, values: MetricValues) {
        self.rows.push(ReportRow {
            dataset: dataset.into(),
            method: method.into(),
            scenario: scenario.into(),
            values,
        });
    }

    /// Appends one "avg" row per (dataset, method) in first-appearance order,
    /// averaging each metric arithmetically over that method's scenario rows.
    /// The averaged CORR is defined only when every scenario CORR was.
    pub fn append_method_averages(&mut self) {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            if r.scenario == "avg" {
                continue;
            }
            let key = (r.dataset.clone(), r.method.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        for (dataset, method) in keys {
            let group: Vec<&ReportRow> = self
                .rows
                .iter()
                .filter(|r| r.dataset == dataset && r.method == method && r.scenario != "avg")
                .collect();
            let n = group.len() as f64;
            let acc = group.iter().map(|r| r.values.acc).sum::<f64>() / n;
            let f1 = group.iter().map(|r| r.values.f1).sum::<f64>() / n;
            let mae = group.iter().map(|r| r.values.mae).sum::<f64>() / n;
            let corr = if group.iter().all(|r| r.values.corr.is_some()) {
                Some(group.iter().map(|r| r.values.corr.unwrap()).sum::<f64>() / n)
            } else {
                None
            };
            self.rows.push(ReportRow {
                dataset,
                method,
                scenario: "avg".into(),
                values: MetricValues { acc, f1, mae, corr },
            });
        }
    }
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt_corr(v: Option<f64>) -> String {
    match v {
        Some(c) => fmt4(c),
        None => "NA".into(),
    }
}

/// Serializes the report: `# key = value` metadata lines, the fixed header
/// `dataset,method,scenario,acc,f1,mae,corr`, then one row per entry with
/// four decimal places. Byte-stable for identical reports.
pub fn emit(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (k, v) in &report.meta {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "method", "scenario", "acc", "f1", "mae", "corr"])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in &report.rows {
        w.write_record([
            r.dataset.as_str(),
            r.method.as_str(),
            r.scenario.as_str(),
            &fmt4(r.values.acc),
            &fmt4(r.values.f1),
            &fmt4(r.values.mae),
            &fmt_corr(r.values.corr),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    out.push_str(&String::from_utf8(body).expect("csv is utf8"));
    std::fs::write(path, out)?;
    Ok(())
}

/// JSON mirror of the same report.
pub fn emit_json(report: &EvalReport, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, body)?;
    Ok(())
}

/// Parses a file produced by [`emit`].
pub fn parse(path: &Path) -> Result<EvalReport> {
    let raw = std::fs::read_to_string(path)?;
    let mut meta = Vec::new();
    let mut body = String::new();
    for line in raw.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let mut rows = Vec::new();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    for record in reader.records() {
        let record = record.map_err(|e| Error::DataLoad(format!("report parse: {e}")))?;
        if record.len() != 7 {
            return Err(Error::DataLoad(format!(
                "report row has {} fields, expected 7",
                record.len()
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::DataLoad(format!("bad number '{s}': {e}")))
        };
        let corr = if &record[6] == "NA" { None } else { Some(f(&record[6])?) };
        rows.push(ReportRow {
            dataset: record[0].to_string(),
            method: record[1].to_string(),
            scenario: record[2].to_string(),
            values: MetricValues { acc: f(&record[3])?, f1: f(&record[4])?, mae: f(&record[5])?, corr },
        });
    }
    Ok(EvalReport { meta, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let labels = [1.5, -2.0, 0.5, -0.25];
        let m = metrics(&labels, &labels).unwrap();
        assert_eq!(m.acc, 100.0);
        assert_eq!(m.f1, 100.0);
        assert_eq!(m.mae, 0.0);
        assert!((m.corr.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_hand_computation() {
        let m = metrics(&[1.0, -1.0], &[2.0, -0.5]).unwrap();
        assert_eq!(m.acc, 100.0);
        assert_eq!(m.f1, 100.0);
        assert!((m.mae - 0.75).abs() < 1e-12);
        assert!((m.corr.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anti_correlated_predictions() {
        let labels = [2.0, -1.0, 1.0, -2.0];
        let preds: Vec<f64> = labels.iter().map(|v| -v).collect();
        let m = metrics(&preds, &labels).unwrap();
        assert!((m.corr.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_corr_is_undefined_marker() {
        let m = metrics(&[1.0, 1.0, 1.0], &[0.5, -0.5, 1.5]).unwrap();
        assert!(m.corr.is_none());
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        assert!(matches!(metrics(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn acc_f1_invariant_under_sign_preserving_monotone_transform() {
        let preds = [1.2, -0.3, 0.4, -2.0, 0.9, -0.1];
        let labels = [1.0, -1.0, -0.5, -1.5, 2.0, 0.3];
        let cubed: Vec<f64> = preds.iter().map(|p: &f64| p.powi(3)).collect();
        let base = metrics(&preds, &labels).unwrap();
        let xf = metrics(&cubed, &labels).unwrap();
        assert_eq!(base.acc, xf.acc);
        assert_eq!(base.f1, xf.f1);
        // MAE and CORR are not invariant under the same transform.
        assert!((base.mae - xf.mae).abs() > 1e-6);
        assert!((base.corr.unwrap() - xf.corr.unwrap()).abs() > 1e-6);
    }

    #[test]
    fn corr_invariant_under_positive_affine_transform() {
        let preds = [1.2, -0.3, 0.4, -2.0, 0.9];
        let labels = [1.0, -1.0, -0.5, -1.5, 2.0];
        let scaled: Vec<f64> = preds.iter().map(|p| 2.5 * p + 3.0).collect();
        let base = metrics(&preds, &labels).unwrap();
        let xf = metrics(&scaled, &labels).unwrap();
        assert!((base.corr.unwrap() - xf.corr.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn avg_rows_are_arithmetic_means() {
        let mut report = EvalReport::default();
        for (i, scen) in ["a", "v", "t", "a,v", "a,t", "v,t"].iter().enumerate() {
            report.push(
                "synthetic",
                "LB",
                scen,
                MetricValues {
                    acc: 60.0 + i as f64,
                    f1: 50.0 + 2.0 * i as f64,
                    mae: 1.0 + 0.1 * i as f64,
                    corr: Some(0.5 + 0.01 * i as f64),
                },
            );
        }
        report.append_method_averages();
        let avg = report.rows.last().unwrap();
        assert_eq!(avg.scenario, "avg");
        assert!((avg.values.acc - 62.5).abs() < 1e-9);
        assert!((avg.values.f1 - 55.0).abs() < 1e-9);
        assert!((avg.values.mae - 1.25).abs() < 1e-9);
        assert!((avg.values.corr.unwrap() - 0.525).abs() < 1e-9);
    }

    #[test]
    fn empty_report_emits_header_only() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("report.csv");
        emit(&EvalReport::default(), &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body, "dataset,method,scenario,acc,f1,mae,corr\n");
    }

    #[test]
    fn row_round_trips_exactly() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("report.csv");
        let mut report = EvalReport::default();
        report.meta.push(("epsilon".into(), "0.3".into()));
        report.push(
            "synthetic",
            "MS",
            "a,t",
            MetricValues { acc: 64.6400, f1: 67.8000, mae: 1.2345, corr: Some(0.4321) },
        );
        report.push("synthetic", "MS", "t", MetricValues { acc: 70.0, f1: 71.0, mae: 0.5, corr: None });
        emit(&report, &path).unwrap();
        let back = parse(&path).unwrap();
        assert_eq!(back.meta, report.meta);
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[0].scenario, "a,t");
        assert_eq!(back.rows[0].values.acc, 64.64);
        assert_eq!(back.rows[1].values.corr, None);
    }

    #[test]
    fn table_shaped_fixture_round_trips() {
        // Format fixture in the published table's shape; not a reproduction.
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("fixture.csv");
        let mut report = EvalReport::default();
        report.push(
            "MOSI",
            "ProMMA",
            "avg",
            MetricValues { acc: 78.04, f1: 77.50, mae: 0.9123, corr: Some(0.5678) },
        );
        emit(&report, &path).unwrap();
        let back = parse(&path).unwrap();
        let row = &back.rows[0];
        assert_eq!((row.dataset.as_str(), row.method.as_str(), row.scenario.as_str()), ("MOSI", "ProMMA", "avg"));
        assert_eq!(row.values.acc, 78.04);
        assert_eq!(row.values.f1, 77.50);
        assert_eq!(row.values.mae, 0.9123);
        assert_eq!(row.values.corr, Some(0.5678));
    }

    #[test]
    fn emit_is_byte_stable() {
        let tmp = tempfile::tempdir().unwrap();
        let (p1, p2) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
        let mut report = EvalReport::default();
        report.meta.push(("tau".into(), "0.1".into()));
        report.push("synthetic", "ProMMA", "v,t", MetricValues { acc: 81.0, f1: 80.5, mae: 0.7, corr: Some(0.8) });
        emit(&report, &p1).unwrap();
        emit(&report, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
