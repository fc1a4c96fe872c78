//! Aggregation over seeds and report files (JSON, CSV, markdown).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::{PipelineConfig, Variant};
use super::eval::SeedEval;

/// One variant aggregated over seeds. `sd` is the sample standard
/// deviation and is absent with fewer than two seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub metric: String,
    pub mean: f64,
    pub sd: Option<f64>,
    pub accuracy_mean: Option<f64>,
    pub accuracy_sd: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub k: usize,
    pub distinct_min: usize,
    /// Mean over seeds of the mean single-draw loss.
    pub single_draw_mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub config: PipelineConfig,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub ensemble: Option<EnsembleSummary>,
    pub per_seed: Vec<SeedEval>,
    /// Wall-clock seconds per stage in the producing process. Not part of
    /// the reproducible content; see [`EvalReport::without_timings`].
    pub timings: BTreeMap<String, f64>,
}

/// Paths written by [`EvalReport::emit`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub markdown: PathBuf,
}

fn mean_sd(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() >= 2).then(|| (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

impl EvalReport {
    pub fn aggregate(config: &PipelineConfig, evals: &[SeedEval], timings: BTreeMap<String, f64>) -> Result<Self> {
        if evals.is_empty() {
            return Err(Error::InvalidArgument("no seed evaluations to aggregate".into()));
        }
        let classification = evals[0].metrics.iter().any(|m| m.metrics.accuracy.is_some());
        let metric = if classification { "ce" } else { "mse" }.to_string();
        let mut rows = Vec::new();
        for v in config.variants() {
            let mut losses = Vec::new();
            let mut accs = Vec::new();
            for e in evals {
                let m = e.get(v).ok_or_else(|| Error::MissingArtifact {
                    variant: v.name().into(),
                    artifact: format!("metrics for seed {}", e.seed),
                })?;
                losses.push(m.loss);
                accs.extend(m.accuracy);
            }
            let (mean, sd) = mean_sd(&losses);
            let (accuracy_mean, accuracy_sd) = if accs.len() == losses.len() && !accs.is_empty() {
                let (m, s) = mean_sd(&accs);
                (Some(m), s)
            } else {
                (None, None)
            };
            rows.push(ReportRow {
                variant: v,
                metric: metric.clone(),
                mean,
                sd,
                accuracy_mean,
                accuracy_sd,
                seeds: losses.len(),
            });
        }
        let stats: Vec<_> = evals.iter().filter_map(|e| e.ensemble.as_ref()).collect();
        let ensemble = (stats.len() == evals.len()).then(|| EnsembleSummary {
            k: stats[0].k,
            distinct_min: stats.iter().map(|s| s.distinct_min).min().unwrap_or(0),
            single_draw_mean_loss: stats.iter().map(|s| s.single_draw_mean_loss).sum::<f64>() / stats.len() as f64,
        });
        Ok(Self {
            config_hash: config.hash(),
            config: config.clone(),
            metric,
            seeds: evals.iter().map(|e| e.seed).collect(),
            rows,
            ensemble,
            per_seed: evals.to_vec(),
            timings,
        })
    }

    pub fn row(&self, v: Variant) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// The report with timings removed: the part that must be identical
    /// across reruns.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "metric", "mean", "sd", "accuracy_mean", "accuracy_sd", "seeds", "config_hash"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.name().to_string(),
                r.metric.clone(),
                r.mean.to_string(),
                opt(r.sd),
                opt(r.accuracy_mean),
                opt(r.accuracy_sd),
                r.seeds.to_string(),
                self.config_hash.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let classification = self.metric == "ce";
        let pm = |m: f64, s: Option<f64>, scale: f64, prec: usize| match s {
            Some(s) => format!("{:.prec$} ± {:.prec$}", m * scale, s * scale),
            None => format!("{:.prec$}", m * scale),
        };
        let mut out = String::new();
        let _ = writeln!(out, "# {} evaluation\n", self.config.name);
        let _ = writeln!(out, "config hash: `{}`\n", self.config_hash);
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "seeds: {}\n", seeds.join(", "));
        if classification {
            let _ = writeln!(out, "| variant | test CE | accuracy (%) |\n|---|---|---|");
        } else {
            let _ = writeln!(out, "| variant | test MSE |\n|---|---|");
        }
        for r in &self.rows {
            if classification {
                let acc = r.accuracy_mean.map_or("-".into(), |a| pm(a, r.accuracy_sd, 100.0, 2));
                let _ = writeln!(out, "| {} | {} | {} |", r.variant, pm(r.mean, r.sd, 1.0, 4), acc);
            } else {
                let _ = writeln!(out, "| {} | {} |", r.variant, pm(r.mean, r.sd, 1.0, 4));
            }
        }
        if let Some(e) = &self.ensemble {
            let _ = writeln!(
                out,
                "\nensemble: k = {}, mean single-draw {} = {:.4}, fewest distinct draws per sample = {}",
                e.k, self.metric, e.single_draw_mean_loss, e.distinct_min
            );
        }
        if !self.timings.is_empty() {
            let _ = writeln!(out, "\nstage wall-clock (s, this process):");
            for (k, v) in &self.timings {
                let _ = writeln!(out, "- {k}: {v:.1}");
            }
        }
        out
    }

    /// Writes `report.json`, `report.csv` and `report.md` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<ReportFiles> {
        fs::create_dir_all(dir)?;
        let files = ReportFiles {
            json: dir.join("report.json"),
            csv: dir.join("report.csv"),
            markdown: dir.join("report.md"),
        };
        fs::write(&files.json, serde_json::to_vec_pretty(self)?)?;
        fs::write(&files.csv, self.to_csv()?)?;
        fs::write(&files.markdown, self.to_markdown())?;
        Ok(files)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Parses a report CSV back into rows and the embedded config hash.
pub fn read_report_csv(text: &str) -> Result<(Vec<ReportRow>, String)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut hash = String::new();
    let parse = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number `{s}`"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { parse(s).map(Some) } };
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 8 {
            return Err(Error::Format(format!("report row has {} fields", rec.len())));
        }
        let variant: Variant = serde_json::from_value(serde_json::Value::String(rec[0].to_string()))?;
        hash = rec[7].to_string();
        rows.push(ReportRow {
            variant,
            metric: rec[1].to_string(),
            mean: parse(&rec[2])?,
            sd: opt(&rec[3])?,
            accuracy_mean: opt(&rec[4])?,
            accuracy_sd: opt(&rec[5])?,
            seeds: rec[6].parse().map_err(|_| Error::Format("bad seed count".into()))?,
        });
    }
    Ok((rows, hash))
}
