//! Per-cycle measurements and their serialized forms.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GenKey, GeneratorPolicy};
use crate::redirection::RedirectEvent;
use crate::transcript::StepVerdict;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
/// F1 treats a step judged INCORRECT as the positive class.
pub const F1_POSITIVE_CLASS: &str = "INCORRECT_STEP";

/// F1 of flagged steps against the oracle, pooled over every step. `oracle`
/// holds the local-correctness labels (`true` means the step is correct).
/// With no positives predicted or present the verifier made no mistake and
/// the score is 1.
pub fn verifier_f1(predicted: &[Vec<StepVerdict>], oracle: &[Vec<bool>]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::usage("verifier_f1 needs at least one trajectory"));
    }
    if predicted.len() != oracle.len() || predicted.iter().zip(oracle).any(|(p, o)| p.len() != o.len()) {
        return Err(Error::usage("predicted and oracle verdicts differ in shape"));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, o) in predicted.iter().zip(oracle) {
        for (v, correct) in p.iter().zip(o) {
            match (!v.is_correct(), !correct) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Fraction of redirected candidates with at least one successful
/// rollout over any of their anchors. `None` without candidates.
/// Events are keyed by `(pass, candidate)`.
pub fn correction_success_rate<'a>(events: impl IntoIterator<Item = (u64, &'a RedirectEvent)>) -> Option<f64> {
    let mut rescued: BTreeMap<(u64, usize), bool> = BTreeMap::new();
    for (pass, e) in events {
        *rescued.entry((pass, e.candidate)).or_insert(false) |= e.outcomes.iter().any(|&o| o == 1);
    }
    if rescued.is_empty() {
        return None;
    }
    Some(rescued.values().filter(|&&r| r).count() as f64 / rescued.len() as f64)
}

pub fn trigger_rate(selected: usize, evaluated: usize) -> f64 {
    if evaluated == 0 {
        0.0
    } else {
        selected as f64 / evaluated as f64
    }
}

pub fn mean_entropy(pol: &GeneratorPolicy, keys: &[GenKey]) -> Result<f64> {
    pol.policy_entropy(keys)
}

/// Mean step count over successful redirected rollouts.
pub fn mean_redirect_length<'a>(events: impl IntoIterator<Item = &'a RedirectEvent>) -> Option<f64> {
    let (mut total, mut n) = (0usize, 0usize);
    for e in events {
        let wins = e.outcomes.iter().filter(|&&o| o == 1).count();
        total += wins * e.steps;
        n += wins;
    }
    (n > 0).then(|| total as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: u64,
    pub pass_at_1: f64,
    /// Absent when the run has no verifier.
    pub verifier_f1: Option<f64>,
    /// Absent when no candidate was redirected this cycle.
    pub csr: Option<f64>,
    pub trigger_rate: f64,
    pub mean_entropy: f64,
    pub mean_redirect_length: Option<f64>,
    pub skipped_candidates: u64,
}

impl CycleRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("cycle record serializes")
    }
}

pub const CSV_HEADER: &str =
    "cycle,pass_at_1,verifier_f1,csr,trigger_rate,mean_entropy,mean_redirect_length,skipped_candidates";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(mut w: W, records: &[CycleRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.cycle,
            r.pass_at_1,
            opt(r.verifier_f1),
            opt(r.csr),
            r.trigger_rate,
            r.mean_entropy,
            opt(r.mean_redirect_length),
            r.skipped_candidates
        )?;
    }
    Ok(())
}
