//! Tabular categorical policies for the generator and the verifier.
//!
//! Both are key-indexed logit tables: the generator picks a residue in
//! `[0, M)` for each step given `(op, operand, previous value)`, the
//! verifier picks a verdict for each step given the step it is looking at
//! and a final verdict given a summary of its own step verdicts.
//!
//! A generator key may carry a critique code (redirection contexts only).
//! Such keys are stored as residual offsets on top of the plain key, so a
//! fresh critique key samples exactly like its plain counterpart.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::env::{OpKind, Query};
use crate::error::{Error, Result};
use crate::rng;
use crate::transcript::{FinalVerdict, RedirectionSample, StepVerdict, Trajectory, Verification};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonCode {
    WrongValue,
    SkippedOperand,
    SignError,
    OffByModulus,
}

impl ReasonCode {
    pub const ALL: [ReasonCode; 4] = [
        ReasonCode::WrongValue,
        ReasonCode::SkippedOperand,
        ReasonCode::SignError,
        ReasonCode::OffByModulus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::WrongValue => "WRONG_VALUE",
            ReasonCode::SkippedOperand => "SKIPPED_OPERAND",
            ReasonCode::SignError => "SIGN_ERROR",
            ReasonCode::OffByModulus => "OFF_BY_MODULUS",
        }
    }

    pub fn parse(s: &str) -> Option<ReasonCode> {
        ReasonCode::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

// ---------------------------------------------------------------------------
// Softmax helpers

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just under 1; fall back to the last nonzero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// d KL(softmax(c/T) || softmax(r/T)) / d c.
fn kl_gradient(current: &[f64], reference: &[f64], temperature: f64) -> Vec<f64> {
    let lp = log_softmax(current, temperature);
    let lq = log_softmax(reference, temperature);
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(p, (a, b))| p * (a - b)).sum();
    p.iter()
        .zip(lp.iter().zip(&lq))
        .map(|(p, (a, b))| p * (a - b - kl) / temperature)
        .collect()
}

// ---------------------------------------------------------------------------
// Gradients

/// Sparse partials, one dense row per touched key.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator<K: Ord> {
    rows: BTreeMap<K, Vec<f64>>,
}

impl<K: Ord> Default for GradientAccumulator<K> {
    fn default() -> Self {
        GradientAccumulator { rows: BTreeMap::new() }
    }
}

impl<K: Ord + Clone> GradientAccumulator<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_row(&mut self, key: &K, row: &[f64], scale: f64) {
        let entry = self
            .rows
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; row.len()]);
        for (e, r) in entry.iter_mut().zip(row) {
            *e += scale * r;
        }
    }

    pub fn add(&mut self, key: &K, width: usize, index: usize, value: f64) {
        let entry = self.rows.entry(key.clone()).or_insert_with(|| vec![0.0; width]);
        entry[index] += value;
    }

    pub fn merge_scaled(&mut self, other: &GradientAccumulator<K>, scale: f64) {
        for (k, row) in &other.rows {
            self.add_row(k, row, scale);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn get(&self, key: &K) -> Option<&[f64]> {
        self.rows.get(key).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&K, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.rows.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
}

// ---------------------------------------------------------------------------
// Logit tables

/// Key-indexed logits with a shared bias row. Missing keys read as zeros
/// (plus bias). The reference copy is frozen at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable<K: Ord> {
    width: usize,
    bias: Vec<f64>,
    weights: BTreeMap<K, Vec<f64>>,
    reference: BTreeMap<K, Vec<f64>>,
}

impl<K: Ord + Clone + Serialize + DeserializeOwned> LogitTable<K> {
    fn new(width: usize, bias: Vec<f64>) -> Self {
        debug_assert_eq!(bias.len(), width);
        LogitTable {
            width,
            bias,
            weights: BTreeMap::new(),
            reference: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn raw(&self, key: &K) -> Option<&Vec<f64>> {
        self.weights.get(key)
    }

    fn add_into(&self, key: &K, out: &mut [f64], reference: bool) {
        let table = if reference { &self.reference } else { &self.weights };
        if let Some(row) = table.get(key) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r;
            }
        }
    }

    fn logits(&self, key: &K) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.add_into(key, &mut out, false);
        out
    }

    fn reference_logits(&self, key: &K) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.add_into(key, &mut out, true);
        out
    }

    fn add_row(&mut self, key: &K, delta: &[f64]) {
        let row = self
            .weights
            .entry(key.clone())
            .or_insert_with(|| vec![0.0; delta.len()]);
        for (w, d) in row.iter_mut().zip(delta) {
            *w += d;
        }
    }

    fn set_row(&mut self, key: K, row: Vec<f64>) {
        self.weights.insert(key, row);
    }

    fn freeze_reference(&mut self) {
        self.reference = self.weights.clone();
    }

    fn write_rows<W: Write>(&self, w: &mut W, weights_tag: &str, reference_tag: &str) -> Result<()> {
        for (tag, table) in [(weights_tag, &self.weights), (reference_tag, &self.reference)] {
            for (k, row) in table {
                let line = json!({ "record": tag, "key": k, "logits": row });
                writeln!(w, "{line}").map_err(|e| Error::io("<checkpoint>", e))?;
            }
        }
        Ok(())
    }

    fn read_row(&mut self, rec: &Value, reference: bool) -> Result<()> {
        let key: K = serde_json::from_value(rec["key"].clone()).map_err(|e| Error::json("checkpoint key", e))?;
        let row: Vec<f64> =
            serde_json::from_value(rec["logits"].clone()).map_err(|e| Error::json("checkpoint logits", e))?;
        if row.len() != self.width {
            return Err(Error::config(format!(
                "checkpoint row has {} logits, expected {}",
                row.len(),
                self.width
            )));
        }
        if reference {
            self.reference.insert(key, row);
        } else {
            self.weights.insert(key, row);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GenKey {
    pub op_kind: OpKind,
    pub operand: u32,
    pub prev_value: u32,
    pub critique: Option<ReasonCode>,
}

impl GenKey {
    pub fn plain(op_kind: OpKind, operand: u32, prev_value: u32) -> Self {
        GenKey {
            op_kind,
            operand,
            prev_value,
            critique: None,
        }
    }

    pub fn base(&self) -> GenKey {
        GenKey {
            critique: None,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpRates {
    pub add: f64,
    pub sub: f64,
    pub mul: f64,
}

impl OpRates {
    pub fn get(&self, kind: OpKind) -> f64 {
        match kind {
            OpKind::Add => self.add,
            OpKind::Sub => self.sub,
            OpKind::Mul => self.mul,
        }
    }
}

/// Shape of the starting generator: most keys lean toward the right
/// residue, a seeded fraction carry a systematic misconception that
/// greedy decoding follows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInit {
    pub correct_logit: f64,
    pub misconception_rate: OpRates,
    pub misconception_logit: f64,
    pub misconceived_correct_logit: f64,
    pub seed: u64,
}

impl GeneratorInit {
    /// All-zero logits.
    pub fn uniform() -> Self {
        GeneratorInit {
            correct_logit: 0.0,
            misconception_rate: OpRates {
                add: 0.0,
                sub: 0.0,
                mul: 0.0,
            },
            misconception_logit: 0.0,
            misconceived_correct_logit: 0.0,
            seed: 0,
        }
    }
}

/// The residue a misconceived key prefers: sign confusion for `ADD`/`SUB`,
/// adding instead of multiplying for `MUL`.
pub fn misconceived_value(key: &GenKey, modulus: u32) -> u32 {
    let correct = key.op_kind.apply(key.prev_value, key.operand, modulus);
    let wrong = match key.op_kind {
        OpKind::Add => OpKind::Sub.apply(key.prev_value, key.operand, modulus),
        OpKind::Sub | OpKind::Mul => OpKind::Add.apply(key.prev_value, key.operand, modulus),
    };
    if wrong == correct {
        (correct + 1) % modulus
    } else {
        wrong
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPolicy {
    modulus: u32,
    temperature: f64,
    table: LogitTable<GenKey>,
}

impl GeneratorPolicy {
    pub fn uniform(modulus: u32, temperature: f64) -> Self {
        GeneratorPolicy {
            modulus,
            temperature,
            table: LogitTable::new(modulus as usize, vec![0.0; modulus as usize]),
        }
    }

    pub fn pretrained(modulus: u32, temperature: f64, init: &GeneratorInit) -> Self {
        let mut pol = Self::uniform(modulus, temperature);
        let m = modulus as usize;
        for op_kind in OpKind::ALL {
            for operand in 0..modulus {
                for prev in 0..modulus {
                    let key = GenKey::plain(op_kind, operand, prev);
                    let correct = op_kind.apply(prev, operand, modulus) as usize;
                    let mut r = rng::rng_for(&[
                        rng::label::INIT,
                        init.seed,
                        op_kind as u64,
                        operand as u64,
                        prev as u64,
                    ]);
                    let mut row = vec![0.0; m];
                    if r.gen::<f64>() < init.misconception_rate.get(op_kind) {
                        row[misconceived_value(&key, modulus) as usize] = init.misconception_logit;
                        row[correct] = init.misconceived_correct_logit;
                    } else {
                        row[correct] = init.correct_logit;
                    }
                    pol.table.set_row(key, row);
                }
            }
        }
        pol.table.freeze_reference();
        pol
    }

    /// Puts `strength` on the correct residue of every plain key.
    pub fn oracle(modulus: u32, temperature: f64, strength: f64) -> Self {
        let init = GeneratorInit {
            correct_logit: strength,
            ..GeneratorInit::uniform()
        };
        Self::pretrained(modulus, temperature, &init)
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) {
        self.temperature = temperature;
    }

    pub fn table(&self) -> &LogitTable<GenKey> {
        &self.table
    }

    /// Logits at `key`; critique keys add their residual to the plain row.
    pub fn logits(&self, key: &GenKey) -> Vec<f64> {
        let mut out = self.table.logits(&key.base());
        if key.critique.is_some() {
            self.table.add_into(key, &mut out, false);
        }
        out
    }

    pub fn reference_logits(&self, key: &GenKey) -> Vec<f64> {
        let mut out = self.table.reference_logits(&key.base());
        if key.critique.is_some() {
            self.table.add_into(key, &mut out, true);
        }
        out
    }

    pub fn probs(&self, key: &GenKey) -> Vec<f64> {
        softmax(&self.logits(key), self.temperature)
    }

    /// Raw stored row (plain logits or critique residual).
    pub fn row(&self, key: &GenKey) -> Option<&[f64]> {
        self.table.raw(key).map(Vec::as_slice)
    }

    pub fn step_key(q: &Query, claims: &[u32], t: usize, critique: Option<ReasonCode>) -> GenKey {
        let op = q.ops[t - 1];
        GenKey {
            op_kind: op.op_kind,
            operand: op.operand,
            prev_value: q.prev_value(claims, t),
            critique,
        }
    }

    fn check(&self, q: &Query, ctx: Option<&RedirectionSample>) -> Result<usize> {
        if q.modulus != self.modulus {
            return Err(Error::usage(format!(
                "policy alphabet {} does not cover modulus {}",
                self.modulus, q.modulus
            )));
        }
        match ctx {
            None => Ok(1),
            Some(c) => {
                if c.anchor < 1 || c.anchor > q.steps() || c.prefix_claims.len() != c.anchor - 1 {
                    return Err(Error::usage(format!(
                        "redirection anchor {} with {} prefix claims on a {}-step query",
                        c.anchor,
                        c.prefix_claims.len(),
                        q.steps()
                    )));
                }
                Ok(c.anchor)
            }
        }
    }

    fn generate(
        &self,
        q: &Query,
        ctx: Option<&RedirectionSample>,
        mut pick: impl FnMut(&GenKey) -> u32,
    ) -> Result<Trajectory> {
        let start = self.check(q, ctx)?;
        let mut claims: Vec<u32> = ctx.map(|c| c.prefix_claims.clone()).unwrap_or_default();
        for t in start..=q.steps() {
            let critique = ctx.filter(|_| t == start).and_then(|c| c.critique);
            let key = Self::step_key(q, &claims, t, critique);
            claims.push(pick(&key));
        }
        Trajectory::new(q.id.clone(), claims)
    }

    /// Samples a trajectory. With a redirection context the verified prefix
    /// is copied and sampling resumes at the anchor, whose key carries the
    /// critique when one is attached.
    pub fn sample_trajectory(&self, q: &Query, seed: u64, ctx: Option<&RedirectionSample>) -> Result<Trajectory> {
        let mut r = rng::rng_for(&[seed]);
        self.generate(q, ctx, |key| sample_index(&self.probs(key), &mut r) as u32)
    }

    pub fn greedy_trajectory(&self, q: &Query, ctx: Option<&RedirectionSample>) -> Result<Trajectory> {
        self.generate(q, ctx, |key| argmax(&self.logits(key)) as u32)
    }

    /// Keys and claims of the freshly generated steps of `y`.
    pub fn generated_steps(
        &self,
        q: &Query,
        y: &Trajectory,
        ctx: Option<&RedirectionSample>,
    ) -> Result<Vec<(GenKey, u32)>> {
        let start = self.check(q, ctx)?;
        if y.steps() != q.steps() {
            return Err(Error::usage(format!(
                "trajectory has {} steps, query has {}",
                y.steps(),
                q.steps()
            )));
        }
        Ok((start..=q.steps())
            .map(|t| {
                let critique = ctx.filter(|_| t == start).and_then(|c| c.critique);
                (Self::step_key(q, &y.step_claims, t, critique), y.step_claims[t - 1])
            })
            .collect())
    }

    /// Adds `weight * d log p(claim | key) / d logits` for one step.
    pub(crate) fn accumulate_step(&self, key: &GenKey, claim: u32, weight: f64, acc: &mut GradientAccumulator<GenKey>) -> f64 {
        let lp = log_softmax(&self.logits(key), self.temperature);
        let row: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(a, l)| ((a == claim as usize) as u8 as f64 - l.exp()) / self.temperature)
            .collect();
        acc.add_row(&key.base(), &row, weight);
        if key.critique.is_some() {
            acc.add_row(key, &row, weight);
        }
        lp[claim as usize]
    }

    pub fn logprob_and_grad(
        &self,
        q: &Query,
        y: &Trajectory,
        ctx: Option<&RedirectionSample>,
    ) -> Result<(f64, GradientAccumulator<GenKey>)> {
        let mut acc = GradientAccumulator::new();
        let mut total = 0.0;
        for (key, claim) in self.generated_steps(q, y, ctx)? {
            if claim >= self.modulus {
                return Err(Error::usage(format!("claim {claim} outside the action alphabet")));
            }
            total += self.accumulate_step(&key, claim, 1.0, &mut acc);
        }
        Ok((total, acc))
    }

    /// Mean per-key entropy at the current parameters.
    pub fn policy_entropy(&self, keys: &[GenKey]) -> Result<f64> {
        if keys.is_empty() {
            return Err(Error::usage("policy_entropy needs at least one key"));
        }
        Ok(keys.iter().map(|k| entropy(&self.probs(k))).sum::<f64>() / keys.len() as f64)
    }

    /// Gradient ascent step `lr * (grad - kl * dKL(current || reference))`,
    /// with the KL restricted to keys present in `grad`.
    pub fn apply_update(&mut self, grad: &GradientAccumulator<GenKey>, lr: f64, kl: f64) -> Result<()> {
        check_rates(lr, kl)?;
        let mut delta: BTreeMap<GenKey, Vec<f64>> = grad.iter().map(|(k, r)| (*k, r.clone())).collect();
        if kl > 0.0 {
            for key in grad.keys() {
                let g = kl_gradient(&self.logits(key), &self.reference_logits(key), self.temperature);
                let mut targets = vec![*key];
                if key.critique.is_some() {
                    targets.push(key.base());
                }
                for target in targets {
                    let row = delta.entry(target).or_insert_with(|| vec![0.0; g.len()]);
                    row.iter_mut().zip(&g).for_each(|(d, gi)| *d -= kl * gi);
                }
            }
        }
        for (key, row) in delta {
            let step: Vec<f64> = row.iter().map(|d| lr * d).collect();
            self.table.add_row(&key, &step);
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = json!({
            "record": "header",
            "role": "generator",
            "modulus": self.modulus,
            "alphabet_size": self.table.width,
            "temperature": self.temperature,
        });
        writeln!(w, "{header}").map_err(|e| Error::io("<checkpoint>", e))?;
        self.table.write_rows(&mut w, "weights", "reference")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = checkpoint_records(r)?.into_iter();
        let header = lines.next().ok_or_else(|| Error::config("empty checkpoint"))?;
        expect_header(&header, "generator")?;
        let modulus = header["modulus"].as_u64().ok_or_else(|| Error::config("header lacks modulus"))? as u32;
        let temperature = header["temperature"]
            .as_f64()
            .ok_or_else(|| Error::config("header lacks temperature"))?;
        let mut pol = Self::uniform(modulus, temperature);
        for rec in lines {
            match rec["record"].as_str() {
                Some("weights") => pol.table.read_row(&rec, false)?,
                Some("reference") => pol.table.read_row(&rec, true)?,
                other => return Err(Error::config(format!("unknown generator record {other:?}"))),
            }
        }
        Ok(pol)
    }
}

fn check_rates(lr: f64, kl: f64) -> Result<()> {
    if !(lr > 0.0) || !(kl >= 0.0) {
        return Err(Error::usage(format!("need learning_rate > 0 and kl >= 0, got {lr}, {kl}")));
    }
    Ok(())
}

fn checkpoint_records<R: BufRead>(r: R) -> Result<Vec<Value>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<checkpoint>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(format!("checkpoint line {}", i + 1), e))?);
    }
    Ok(out)
}

fn expect_header(header: &Value, role: &str) -> Result<()> {
    if header["record"] != "header" || header["role"] != role {
        return Err(Error::config(format!("expected a {role} checkpoint header")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Verifier

/// What the verifier sees when judging one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VerKey {
    pub op_kind: OpKind,
    pub operand: u32,
    pub prev_claim: u32,
    pub claim: u32,
}

/// Summary of the step verdicts that conditions the final verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FinalKey {
    pub any_flagged: bool,
}

impl FinalKey {
    pub fn from_verdicts(verdicts: &[StepVerdict]) -> Self {
        FinalKey {
            any_flagged: verdicts.iter().any(|v| !v.is_correct()),
        }
    }
}

pub const STEP_VERDICTS: usize = 1 + ReasonCode::ALL.len();
pub const FINAL_VERDICTS: usize = 2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifierGradient {
    pub step: GradientAccumulator<VerKey>,
    pub final_: GradientAccumulator<FinalKey>,
}

impl VerifierGradient {
    pub fn merge_scaled(&mut self, other: &VerifierGradient, scale: f64) {
        self.step.merge_scaled(&other.step, scale);
        self.final_.merge_scaled(&other.final_, scale);
    }

    pub fn is_empty(&self) -> bool {
        self.step.is_empty() && self.final_.is_empty()
    }
}

/// Shape of the starting verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierInit {
    /// Logit bias on the CORRECT step verdict.
    pub correct_prior: f64,
    /// Initial pull of the final verdict toward "flagged means INCORRECT".
    pub final_coupling: f64,
    pub detection_rate: f64,
    pub detection_logit: f64,
    pub seed: u64,
}

impl Default for VerifierInit {
    fn default() -> Self {
        VerifierInit {
            correct_prior: 16f64.ln(),
            final_coupling: 0.0,
            detection_rate: 0.0,
            detection_logit: 0.0,
            seed: 0,
        }
    }
}

/// The reason code a wrong claim most resembles.
pub fn likely_reason(key: &VerKey, modulus: u32) -> ReasonCode {
    let flipped = match key.op_kind {
        OpKind::Add => Some(OpKind::Sub),
        OpKind::Sub => Some(OpKind::Add),
        OpKind::Mul => None,
    };
    if key.claim == key.prev_claim {
        ReasonCode::SkippedOperand
    } else if flipped.is_some_and(|k| k.apply(key.prev_claim, key.operand, modulus) == key.claim) {
        ReasonCode::SignError
    } else {
        ReasonCode::WrongValue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifierPolicy {
    modulus: u32,
    temperature: f64,
    step_table: LogitTable<VerKey>,
    final_table: LogitTable<FinalKey>,
}

impl VerifierPolicy {
    /// `correct_prior` is a logit bias on the CORRECT step verdict.
    pub fn new(modulus: u32, temperature: f64, correct_prior: f64) -> Self {
        let mut bias = vec![0.0; STEP_VERDICTS];
        bias[0] = correct_prior;
        VerifierPolicy {
            modulus,
            temperature,
            step_table: LogitTable::new(STEP_VERDICTS, bias),
            final_table: LogitTable::new(FINAL_VERDICTS, vec![0.0; FINAL_VERDICTS]),
        }
    }

    /// A verifier that already catches some wrong steps: each locally wrong
    /// key is detected with probability `detection_rate`, putting
    /// `detection_logit` on its reason code.
    pub fn pretrained(modulus: u32, temperature: f64, init: &VerifierInit) -> Self {
        let mut v = Self::new(modulus, temperature, init.correct_prior).with_final_coupling(init.final_coupling);
        if init.detection_rate <= 0.0 {
            return v;
        }
        for op_kind in OpKind::ALL {
            for operand in 0..modulus {
                for prev_claim in 0..modulus {
                    for claim in 0..modulus {
                        let key = VerKey { op_kind, operand, prev_claim, claim };
                        if op_kind.apply(prev_claim, operand, modulus) == claim {
                            continue;
                        }
                        let mut r = rng::rng_for(&[
                            rng::label::INIT,
                            init.seed,
                            op_kind as u64,
                            operand as u64,
                            prev_claim as u64,
                            claim as u64,
                        ]);
                        if r.gen::<f64>() < init.detection_rate {
                            let mut row = vec![0.0; STEP_VERDICTS];
                            row[1 + likely_reason(&key, modulus).index()] = init.detection_logit;
                            v.step_table.set_row(key, row);
                        }
                    }
                }
            }
        }
        v.step_table.freeze_reference();
        v
    }

    /// Starts the final head leaning toward INCORRECT when a step is
    /// flagged and toward CORRECT otherwise, by `strength` logits.
    pub fn with_final_coupling(mut self, strength: f64) -> Self {
        self.final_table.set_row(FinalKey { any_flagged: false }, vec![strength, 0.0]);
        self.final_table.set_row(FinalKey { any_flagged: true }, vec![0.0, strength]);
        self.final_table.freeze_reference();
        self
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn step_key(q: &Query, y: &Trajectory, t: usize) -> VerKey {
        let op = q.ops[t - 1];
        VerKey {
            op_kind: op.op_kind,
            operand: op.operand,
            prev_claim: q.prev_value(&y.step_claims, t),
            claim: y.step_claims[t - 1],
        }
    }

    pub fn step_logits(&self, key: &VerKey) -> Vec<f64> {
        self.step_table.logits(key)
    }

    pub fn final_logits(&self, key: &FinalKey) -> Vec<f64> {
        self.final_table.logits(key)
    }

    fn check(&self, q: &Query, y: &Trajectory) -> Result<()> {
        if y.steps() != q.steps() {
            return Err(Error::usage(format!(
                "trajectory has {} steps, query has {}",
                y.steps(),
                q.steps()
            )));
        }
        if q.modulus != self.modulus {
            return Err(Error::usage("verifier modulus mismatch"));
        }
        Ok(())
    }

    fn verify(
        &self,
        q: &Query,
        y: &Trajectory,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> Result<Verification> {
        self.check(q, y)?;
        let verdicts: Vec<StepVerdict> = (1..=q.steps())
            .map(|t| {
                let i = pick(&self.step_logits(&Self::step_key(q, y, t)));
                StepVerdict::from_index(i).expect("index within verdict alphabet")
            })
            .collect();
        let fin = FinalVerdict::from_index(pick(&self.final_logits(&FinalKey::from_verdicts(&verdicts))));
        Ok(Verification::new(verdicts, fin))
    }

    pub fn sample_verification(&self, q: &Query, y: &Trajectory, seed: u64) -> Result<Verification> {
        let mut r = rng::rng_for(&[seed]);
        let temperature = self.temperature;
        self.verify(q, y, |logits| sample_index(&softmax(logits, temperature), &mut r))
    }

    pub fn greedy_verification(&self, q: &Query, y: &Trajectory) -> Result<Verification> {
        self.verify(q, y, argmax)
    }

    pub fn logprob_and_grad(&self, q: &Query, y: &Trajectory, v: &Verification) -> Result<(f64, VerifierGradient)> {
        self.check(q, y)?;
        if v.step_verdicts.len() != q.steps() {
            return Err(Error::usage("verification step count mismatch"));
        }
        let mut grad = VerifierGradient::default();
        let mut total = 0.0;
        let tau = self.temperature;
        let mut term = |logits: Vec<f64>, chosen: usize| -> (f64, Vec<f64>) {
            let lp = log_softmax(&logits, tau);
            let row = lp
                .iter()
                .enumerate()
                .map(|(a, l)| ((a == chosen) as u8 as f64 - l.exp()) / tau)
                .collect();
            total += lp[chosen];
            (lp[chosen], row)
        };
        for (t, verdict) in (1..=q.steps()).zip(&v.step_verdicts) {
            let key = Self::step_key(q, y, t);
            let (_, row) = term(self.step_logits(&key), verdict.index());
            grad.step.add_row(&key, &row, 1.0);
        }
        let fkey = FinalKey::from_verdicts(&v.step_verdicts);
        let (_, row) = term(self.final_logits(&fkey), v.final_verdict.index());
        grad.final_.add_row(&fkey, &row, 1.0);
        Ok((total, grad))
    }

    pub fn apply_update(&mut self, grad: &VerifierGradient, lr: f64, kl: f64) -> Result<()> {
        check_rates(lr, kl)?;
        update_table(&mut self.step_table, &grad.step, lr, kl, self.temperature);
        update_table(&mut self.final_table, &grad.final_, lr, kl, self.temperature);
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = json!({
            "record": "header",
            "role": "verifier",
            "modulus": self.modulus,
            "alphabet_size": STEP_VERDICTS,
            "final_alphabet_size": FINAL_VERDICTS,
            "temperature": self.temperature,
            "correct_prior": self.step_table.bias[0],
        });
        writeln!(w, "{header}").map_err(|e| Error::io("<checkpoint>", e))?;
        self.step_table.write_rows(&mut w, "step", "step_reference")?;
        self.final_table.write_rows(&mut w, "final", "final_reference")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = checkpoint_records(r)?.into_iter();
        let header = lines.next().ok_or_else(|| Error::config("empty checkpoint"))?;
        expect_header(&header, "verifier")?;
        let field = |name: &str| header[name].as_f64().ok_or_else(|| Error::config(format!("header lacks {name}")));
        let mut pol = Self::new(field("modulus")? as u32, field("temperature")?, field("correct_prior")?);
        for rec in lines {
            match rec["record"].as_str() {
                Some("step") => pol.step_table.read_row(&rec, false)?,
                Some("step_reference") => pol.step_table.read_row(&rec, true)?,
                Some("final") => pol.final_table.read_row(&rec, false)?,
                Some("final_reference") => pol.final_table.read_row(&rec, true)?,
                other => return Err(Error::config(format!("unknown verifier record {other:?}"))),
            }
        }
        Ok(pol)
    }
}

fn update_table<K: Ord + Clone + Serialize + DeserializeOwned>(
    table: &mut LogitTable<K>,
    grad: &GradientAccumulator<K>,
    lr: f64,
    kl: f64,
    temperature: f64,
) {
    let updates: Vec<(K, Vec<f64>)> = grad
        .iter()
        .map(|(key, row)| {
            let mut d = row.clone();
            if kl > 0.0 {
                let g = kl_gradient(&table.logits(key), &table.reference_logits(key), temperature);
                d.iter_mut().zip(&g).for_each(|(d, gi)| *d -= kl * gi);
            }
            (key.clone(), d.iter().map(|x| lr * x).collect())
        })
        .collect();
    for (key, step) in updates {
        table.add_row(&key, &step);
    }
}
