//! Read-only views over finished run directories: comparison tables and
//! per-panel plot series.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::metrics::CycleRecord;
use crate::rundir::{Manifest, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    F1,
    Guidance,
    Entropy,
    Depth,
}

impl Panel {
    pub const ALL: [Panel; 4] = [Panel::F1, Panel::Guidance, Panel::Entropy, Panel::Depth];

    pub fn name(self) -> &'static str {
        match self {
            Panel::F1 => "f1",
            Panel::Guidance => "guidance",
            Panel::Entropy => "entropy",
            Panel::Depth => "depth",
        }
    }

    /// CSV column for the panel's value.
    pub fn column(self) -> &'static str {
        match self {
            Panel::F1 => "verifier_f1",
            Panel::Guidance => "trigger_rate",
            Panel::Entropy => "mean_entropy",
            Panel::Depth => "mean_redirect_length",
        }
    }

    pub fn parse(s: &str) -> Result<Panel> {
        Panel::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Panel::ALL.iter().map(|p| p.name()).collect();
            Error::usage(format!("unknown panel {s:?}; valid panels: {}", names.join(", ")))
        })
    }

    fn value(self, r: &CycleRecord) -> Option<f64> {
        match self {
            Panel::F1 => r.verifier_f1,
            Panel::Guidance => Some(r.trigger_rate),
            Panel::Entropy => Some(r.mean_entropy),
            Panel::Depth => r.mean_redirect_length,
        }
    }
}

/// `(cycle, value)` pairs, skipping cycles where the value is undefined.
pub fn panel_series(records: &[CycleRecord], panel: Panel) -> Vec<(u64, f64)> {
    records.iter().filter_map(|r| panel.value(r).map(|v| (r.cycle, v))).collect()
}

pub fn series_csv(panel: Panel, series: &[(u64, f64)]) -> String {
    let mut out = format!("cycle,{}\n", panel.column());
    for (c, v) in series {
        writeln!(out, "{c},{v}").expect("string write");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run: PathBuf,
    pub label: String,
    pub seed: u64,
    pub pass_at_1: f64,
    /// Mean over cycles where any candidate was redirected.
    pub csr: Option<f64>,
    /// Last cycle's value.
    pub verifier_f1: Option<f64>,
    /// `pass_at_1` minus the reference run's.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// The first run named, which deltas are measured against.
    pub reference: PathBuf,
    /// Sorted by pass@1, best first.
    pub rows: Vec<ComparisonRow>,
}

fn label(m: &Manifest) -> String {
    m.preset.clone().unwrap_or_else(|| format!("{:?}", m.algo))
}

pub fn compare_runs(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::usage("compare needs at least two run directories"));
    }
    let mut loaded = Vec::with_capacity(dirs.len());
    for d in dirs {
        let rd = RunDir::new(d);
        let manifest = rd.read_manifest()?;
        let records = rd.read_metrics()?;
        loaded.push((d.clone(), manifest, records));
    }
    let eval = &loaded[0].1.eval_digest;
    if let Some((d, m, _)) = loaded.iter().find(|(_, m, _)| &m.eval_digest != eval) {
        return Err(Error::usage(format!(
            "{} was evaluated on a different eval set ({}) than {} ({}); refusing to compare",
            d.display(),
            &m.eval_digest[..12],
            loaded[0].0.display(),
            &eval[..12]
        )));
    }
    let reference = loaded[0].1.final_eval.pass_at_1;
    let mut rows: Vec<ComparisonRow> = loaded
        .into_iter()
        .map(|(run, m, records)| {
            let csrs: Vec<f64> = records.iter().filter_map(|r| r.csr).collect();
            ComparisonRow {
                label: label(&m),
                seed: m.seed,
                pass_at_1: m.final_eval.pass_at_1,
                csr: (!csrs.is_empty()).then(|| csrs.iter().sum::<f64>() / csrs.len() as f64),
                verifier_f1: records.last().and_then(|r| r.verifier_f1),
                delta: m.final_eval.pass_at_1 - reference,
                run,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.pass_at_1.total_cmp(&a.pass_at_1).then_with(|| a.run.cmp(&b.run)));
    Ok(Comparison { reference: dirs[0].clone(), rows })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let header = ["run", "label", "seed", "pass@1", "delta", "csr", "f1"];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.run.display().to_string(),
                    r.label.clone(),
                    r.seed.to_string(),
                    format!("{:.4}", r.pass_at_1),
                    format!("{:+.4}", r.delta),
                    cell(r.csr),
                    cell(r.verifier_f1),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|row| row[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", padded.join("  ").trim_end()).expect("string write");
        };
        line(header.to_vec(), &mut out);
        for row in &body {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        writeln!(out, "delta is pass@1 minus {}", self.reference.display()).expect("string write");
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["run", "label", "seed", "pass_at_1", "delta", "csr", "verifier_f1"])
            .and_then(|_| {
                self.rows.iter().try_for_each(|r| {
                    w.write_record([
                        r.run.display().to_string(),
                        r.label.clone(),
                        r.seed.to_string(),
                        r.pass_at_1.to_string(),
                        r.delta.to_string(),
                        opt(r.csr),
                        opt(r.verifier_f1),
                    ])
                })
            })
            .map_err(|e| Error::usage(format!("csv: {e}")))?;
        let bytes = w.into_inner().map_err(|e| Error::usage(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}
