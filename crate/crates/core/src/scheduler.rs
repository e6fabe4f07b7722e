//! The interleaved training loop: `f_G` generator steps with a verifier
//! step after every `f_G / f_V` of them, then `f_R` redirection passes once
//! the verifier has warmed up.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::env::{self, DifficultyConfig, Query};
use crate::error::{Error, Result};
use crate::grpo::{
    alpha_schedule, generator_update, mixed_advantages, outcome_advantages, step_advantages, verifier_update,
    Advantages, GroupOrigin, MixedAdvantageConfig, RolloutGroup, VerificationGroup,
};
use crate::metrics::{self, CycleRecord};
use crate::policy::{GenKey, GeneratorInit, GeneratorPolicy, OpRates, VerifierInit, VerifierPolicy, FINAL_VERDICTS, STEP_VERDICTS};
use crate::redirection::{
    redirection_update, run_redirection, select_candidates, RedirectEvent, RedirectionStrategy, VerifiedGroup,
};
use crate::rng::{self, label};
use crate::transcript::{trigger, FinalVerdict, StepVerdict, Trajectory, Verification};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Algo {
    Stride,
    GrpoOnly,
    Tango,
    SinglePointNoGuide,
    SinglePointGuide,
    MultiPointNoGuide,
    StridePlusStepReward,
}

impl Algo {
    pub fn uses_verifier(self) -> bool {
        self != Algo::GrpoOnly
    }

    pub fn redirection(self) -> Option<RedirectionStrategy> {
        let (multi_point, guided) = match self {
            Algo::GrpoOnly | Algo::Tango => return None,
            Algo::Stride | Algo::StridePlusStepReward => (true, true),
            Algo::SinglePointNoGuide => (false, false),
            Algo::SinglePointGuide => (false, true),
            Algo::MultiPointNoGuide => (true, false),
        };
        Some(RedirectionStrategy { multi_point, guided })
    }

    /// Phase I mixes verifier step rewards into the advantages.
    pub fn step_rewards(self) -> bool {
        matches!(self, Algo::Tango | Algo::StridePlusStepReward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "f_G")]
    pub f_g: u32,
    #[serde(rename = "f_V")]
    pub f_v: u32,
    #[serde(rename = "f_R")]
    pub f_r: u32,
    /// Verifier steps before redirection starts.
    pub verifier_warmup_steps: u64,
    pub total_cycles: u64,
    pub group_size: usize,
    /// Queries per generator or verifier step.
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_verifier: f64,
    pub beta_kl: f64,
    pub epsilon: f64,
    pub algo: Algo,
    pub seed: u64,
    /// Seeds the train/eval query sets, kept apart from `seed` so runs with
    /// different seeds share data.
    pub data_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub difficulty: DifficultyConfig,
    pub temperature: f64,
    pub generator_init: GeneratorInit,
    pub verifier_init: VerifierInit,
    pub mixed_advantage: MixedAdvantageConfig,
    pub freeze_verifier_after: Option<u64>,
    pub adversarial_verifier: bool,
    /// Divide the redirection gradient by the Phase-I batch (`batch_size`
    /// times `group_size`) instead of by the redirected rollout count.
    pub redirect_batch_normalized: bool,
    /// Stop cleanly once the generator stream has gone through this many epochs.
    pub max_epochs: Option<u64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            f_g: 9,
            f_v: 3,
            f_r: 1,
            verifier_warmup_steps: 40,
            total_cycles: 40,
            group_size: 5,
            batch_size: 32,
            lr_generator: 1e-6,
            lr_verifier: 1e-6,
            beta_kl: 0.001,
            epsilon: 1e-4,
            algo: Algo::Stride,
            seed: 0,
            data_seed: 2024,
            train_size: 500,
            eval_size: 200,
            difficulty: DifficultyConfig::default(),
            temperature: 1.0,
            generator_init: GeneratorInit::uniform(),
            verifier_init: VerifierInit::default(),
            mixed_advantage: MixedAdvantageConfig::default(),
            freeze_verifier_after: None,
            adversarial_verifier: false,
            redirect_batch_normalized: false,
            max_epochs: None,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.f_g == 0 || self.f_v == 0 || self.f_r == 0 {
            return bad(format!("f_G, f_V, f_R must be positive, got {}/{}/{}", self.f_g, self.f_v, self.f_r));
        }
        if self.f_g % self.f_v != 0 {
            return bad(format!("f_G = {} is not a multiple of f_V = {}", self.f_g, self.f_v));
        }
        if self.group_size < 2 {
            return bad(format!("group_size {} < 2", self.group_size));
        }
        if self.batch_size == 0 || self.train_size == 0 || self.eval_size == 0 {
            return bad("batch_size, train_size and eval_size must be positive".into());
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_verifier", self.lr_verifier),
            ("epsilon", self.epsilon),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return bad(format!("beta_kl must be >= 0, got {}", self.beta_kl));
        }
        let vi = &self.verifier_init;
        if ![vi.correct_prior, vi.final_coupling, vi.detection_logit].iter().all(|x| x.is_finite()) {
            return bad("verifier init logits must be finite".into());
        }
        if !(0.0..=1.0).contains(&vi.detection_rate) {
            return bad(format!("detection_rate must lie in [0, 1], got {}", vi.detection_rate));
        }
        let r = &self.generator_init.misconception_rate;
        if [r.add, r.sub, r.mul].iter().any(|x| !(0.0..=1.0).contains(x)) {
            return bad("misconception rates must lie in [0, 1]".into());
        }
        self.difficulty.validate()?;
        self.mixed_advantage.validate()?;
        if !self.algo.uses_verifier() && (self.adversarial_verifier || self.freeze_verifier_after.is_some()) {
            return bad(format!("{:?} has no verifier to freeze or replace", self.algo));
        }
        if self.max_epochs == Some(0) {
            return bad("max_epochs must be positive".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        rng::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Settings that make a tabular run move within a few dozen cycles.
pub fn desk_config() -> ScheduleConfig {
    ScheduleConfig {
        verifier_warmup_steps: 12,
        lr_generator: 6.0,
        lr_verifier: 20.0,
        redirect_batch_normalized: true,
        mixed_advantage: MixedAdvantageConfig {
            alpha_initial: 0.3,
            ..MixedAdvantageConfig::default()
        },
        verifier_init: VerifierInit {
            final_coupling: 8.0,
            detection_rate: 0.5,
            detection_logit: 4.0,
            seed: 29,
            ..VerifierInit::default()
        },
        generator_init: GeneratorInit {
            correct_logit: 2.0,
            misconception_rate: OpRates {
                add: 0.25,
                sub: 0.25,
                mul: 0.25,
            },
            misconception_logit: 3.0,
            misconceived_correct_logit: 0.0,
            seed: 17,
        },
        ..ScheduleConfig::default()
    }
}

pub const PRESETS: [&str; 10] = [
    "stride",
    "grpo",
    "tango",
    "single-point",
    "single-point-guided",
    "multi-point-unguided",
    "stride-step-reward",
    "frozen-verifier@S",
    "adversarial-verifier",
    "paper-reference",
];

pub fn preset(name: &str) -> Result<ScheduleConfig> {
    let base = desk_config();
    let with = |algo| ScheduleConfig { algo, ..base.clone() };
    let cfg = match name {
        "stride" => with(Algo::Stride),
        "grpo" => with(Algo::GrpoOnly),
        "tango" => with(Algo::Tango),
        "single-point" => with(Algo::SinglePointNoGuide),
        "single-point-guided" => with(Algo::SinglePointGuide),
        "multi-point-unguided" => with(Algo::MultiPointNoGuide),
        "stride-step-reward" => with(Algo::StridePlusStepReward),
        "adversarial-verifier" => ScheduleConfig {
            adversarial_verifier: true,
            ..with(Algo::Stride)
        },
        "paper-reference" => ScheduleConfig::default(),
        other => match other.strip_prefix("frozen-verifier@") {
            Some(s) => {
                let steps = s
                    .parse::<u64>()
                    .map_err(|_| Error::config(format!("frozen-verifier@S needs an integer S, got {s:?}")))?;
                ScheduleConfig {
                    freeze_verifier_after: Some(steps),
                    ..with(Algo::Stride)
                }
            }
            None => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        },
    };
    Ok(cfg)
}

/// Epoch-shuffled indices into a dataset, sampled without replacement
/// within an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStream {
    seed: u64,
    stream: u64,
    len: usize,
    epoch: u64,
    pos: usize,
    max_epochs: Option<u64>,
    #[serde(skip)]
    order: Vec<usize>,
}

impl QueryStream {
    pub fn new(seed: u64, stream: u64, len: usize, max_epochs: Option<u64>) -> Self {
        QueryStream {
            seed,
            stream,
            len,
            epoch: 0,
            pos: 0,
            max_epochs,
            order: Vec::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn order(&mut self) -> &[usize] {
        if self.order.len() != self.len {
            let mut order: Vec<usize> = (0..self.len).collect();
            order.shuffle(&mut rng::rng_for(&[self.seed, label::SHUFFLE, self.stream, self.epoch]));
            self.order = order;
        }
        &self.order
    }

    pub fn next_batch(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.len == 0 {
            return Err(Error::EndOfData);
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.len {
                if self.max_epochs.is_some_and(|m| self.epoch + 1 >= m) {
                    return Err(Error::EndOfData);
                }
                self.epoch += 1;
                self.pos = 0;
                self.order.clear();
            }
            let pos = self.pos;
            let i = self.order()[pos];
            out.push(i);
            self.pos += 1;
        }
        Ok(out)
    }
}

const G_STREAM: u64 = 1;
const V_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub g_steps: u64,
    pub v_steps: u64,
    /// Redirection phase records, executed or held back by warmup.
    pub r_phases: u64,
    pub r_executed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: GeneratorPolicy,
    pub verifier: Option<VerifierPolicy>,
    pub cycle: u64,
    pub counters: PhaseCounters,
    pub g_stream: QueryStream,
    pub v_stream: QueryStream,
    pub records: Vec<CycleRecord>,
}

impl TrainState {
    pub fn initial(cfg: &ScheduleConfig, train_len: usize) -> Self {
        let m = cfg.difficulty.modulus;
        TrainState {
            generator: GeneratorPolicy::pretrained(m, cfg.temperature, &cfg.generator_init),
            verifier: cfg
                .algo
                .uses_verifier()
                .then(|| {
                    VerifierPolicy::pretrained(m, cfg.temperature, &cfg.verifier_init)
                }),
            cycle: 0,
            counters: PhaseCounters::default(),
            g_stream: QueryStream::new(cfg.seed, G_STREAM, train_len, cfg.max_epochs),
            v_stream: QueryStream::new(cfg.seed, V_STREAM, train_len, None),
            records: Vec::new(),
        }
    }
}

/// Receives event-log records.
pub trait EventSink {
    fn record(&mut self, event: Value) -> Result<()>;
}

impl EventSink for Vec<Value> {
    fn record(&mut self, event: Value) -> Result<()> {
        self.push(event);
        Ok(())
    }
}

pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _: Value) -> Result<()> {
        Ok(())
    }
}

/// Either the verifier policy or the uniform-random stand-in.
#[derive(Clone, Copy)]
pub enum Verdicts<'a> {
    Policy(&'a VerifierPolicy),
    Uniform,
}

impl Verdicts<'_> {
    pub fn for_run<'a>(cfg: &ScheduleConfig, verifier: Option<&'a VerifierPolicy>) -> Option<Verdicts<'a>> {
        if cfg.adversarial_verifier {
            Some(Verdicts::Uniform)
        } else {
            verifier.map(Verdicts::Policy)
        }
    }

    pub fn verify(&self, q: &Query, y: &Trajectory, seed: u64) -> Result<Verification> {
        match self {
            Verdicts::Policy(v) => v.sample_verification(q, y, seed),
            Verdicts::Uniform => {
                let mut r = rng::rng_for(&[seed]);
                let steps = (0..y.steps())
                    .map(|_| StepVerdict::from_index(r.gen_range(0..STEP_VERDICTS)).expect("in range"))
                    .collect();
                Ok(Verification::new(steps, FinalVerdict::from_index(r.gen_range(0..FINAL_VERDICTS))))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decode {
    Greedy,
    Sample { k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Greedy decoding.
    pub pass_at_1: f64,
    pub pass_at_k: Option<f64>,
    /// Mean per-sample success under `Sample`.
    pub sample_accuracy: Option<f64>,
}

pub fn evaluate(pol: &GeneratorPolicy, eval_set: &[Query], decode: Decode) -> Result<EvalReport> {
    if eval_set.is_empty() {
        return Err(Error::usage("empty evaluation set"));
    }
    let n = eval_set.len();
    let mut greedy_hits = 0usize;
    for q in eval_set {
        let y = pol.greedy_trajectory(q, None)?;
        greedy_hits += env::outcome_correct(q, y.final_answer) as usize;
    }
    let mut report = EvalReport {
        n,
        pass_at_1: greedy_hits as f64 / n as f64,
        pass_at_k: None,
        sample_accuracy: None,
    };
    if let Decode::Sample { k, seed } = decode {
        if k == 0 {
            return Err(Error::usage("SAMPLE@K needs K >= 1"));
        }
        let (mut any, mut total) = (0usize, 0usize);
        for (i, q) in eval_set.iter().enumerate() {
            let mut hit = false;
            for j in 0..k {
                let y = pol.sample_trajectory(q, rng::mix(&[seed, label::EVAL, i as u64, j as u64]), None)?;
                let ok = env::outcome_correct(q, y.final_answer);
                total += ok as usize;
                hit |= ok;
            }
            any += hit as usize;
        }
        report.pass_at_k = Some(any as f64 / n as f64);
        report.sample_accuracy = Some(total as f64 / (n * k) as f64);
    }
    Ok(report)
}

/// F1 of the verdict source on one sampled trajectory per evaluation query.
pub fn evaluate_verifier(
    verdicts: Verdicts<'_>,
    pol: &GeneratorPolicy,
    eval_set: &[Query],
    seed: u64,
) -> Result<f64> {
    let mut predicted = Vec::with_capacity(eval_set.len());
    let mut oracle = Vec::with_capacity(eval_set.len());
    for (i, q) in eval_set.iter().enumerate() {
        let y = pol.sample_trajectory(q, rng::mix(&[seed, label::EVAL, i as u64, 0]), None)?;
        let v = verdicts.verify(q, &y, rng::mix(&[seed, label::EVAL, i as u64, 1]))?;
        oracle.push(env::oracle_step_labels(q, &y)?);
        predicted.push(v.step_verdicts);
    }
    metrics::verifier_f1(&predicted, &oracle)
}

/// Everything a cycle needs besides the mutable state.
pub struct RunData<'a> {
    pub cfg: &'a ScheduleConfig,
    pub train: &'a [Query],
    pub eval: &'a [Query],
}

fn generator_step(
    state: &mut TrainState,
    data: &RunData<'_>,
    phase1: &mut Vec<RolloutGroup>,
    visited: &mut BTreeSet<GenKey>,
    sink: &mut dyn EventSink,
) -> Result<()> {
    let cfg = data.cfg;
    let step = state.counters.g_steps;
    let batch = state.g_stream.next_batch(cfg.batch_size)?;
    let verdicts = Verdicts::for_run(cfg, state.verifier.as_ref()).filter(|_| cfg.algo.step_rewards());
    let alpha = alpha_schedule(&cfg.mixed_advantage, step);
    let mut groups = Vec::with_capacity(batch.len());
    for (j, &qi) in batch.iter().enumerate() {
        let q = &data.train[qi];
        let ys = (0..cfg.group_size)
            .map(|k| {
                let s = rng::mix(&[cfg.seed, label::GEN_STEP, step, j as u64, k as u64]);
                state.generator.sample_trajectory(q, s, None)
            })
            .collect::<Result<Vec<_>>>()?;
        for y in &ys {
            for (key, _) in state.generator.generated_steps(q, y, None)? {
                visited.insert(key);
            }
        }
        let mut group = RolloutGroup::scored(q.clone(), ys, GroupOrigin::Phase1, None)?;
        let outcome = outcome_advantages(&group.rewards(), cfg.epsilon)?;
        group.advantages = Some(match verdicts {
            Some(src) => {
                let rewards = group
                    .rollouts
                    .iter()
                    .enumerate()
                    .map(|(k, r)| {
                        let s = rng::mix(&[cfg.seed, label::GEN_VERIFY, step, j as u64, k as u64]);
                        let v = src.verify(q, &r.trajectory, s)?;
                        Ok(v.step_verdicts.iter().map(|&x| trigger(x) as f64).collect())
                    })
                    .collect::<Result<Vec<Vec<f64>>>>()?;
                let step_adv = step_advantages(&rewards, cfg.epsilon)?;
                Advantages::PerStep(mixed_advantages(&outcome, &step_adv, alpha)?)
            }
            None => Advantages::PerRollout(outcome),
        });
        groups.push(group);
    }
    let touched = generator_update(&mut state.generator, &groups, cfg.lr_generator, cfg.beta_kl)?;
    let rollouts = (groups.len() * cfg.group_size) as f64;
    let successes: usize = groups.iter().map(RolloutGroup::successes).sum();
    sink.record(json!({
        "event": "g_step",
        "cycle": state.cycle,
        "step": step,
        "queries": groups.len(),
        "mean_reward": successes as f64 / rollouts,
        "zero_signal_groups": groups.iter().filter(|g| g.zero_signal()).count(),
        "touched_keys": touched,
    }))?;
    state.counters.g_steps += 1;
    phase1.extend(groups);
    Ok(())
}

fn verifier_step(state: &mut TrainState, data: &RunData<'_>, sink: &mut dyn EventSink) -> Result<()> {
    let cfg = data.cfg;
    let step = state.counters.v_steps;
    let batch = state.v_stream.next_batch(cfg.batch_size)?;
    let frozen = cfg.adversarial_verifier || cfg.freeze_verifier_after.is_some_and(|s| step >= s);
    let verdicts = Verdicts::for_run(cfg, state.verifier.as_ref()).expect("verifier step without a verifier");
    let mut groups = Vec::with_capacity(batch.len());
    for (j, &qi) in batch.iter().enumerate() {
        let q = &data.train[qi];
        let y = state
            .generator
            .sample_trajectory(q, rng::mix(&[cfg.seed, label::VER_STEP, step, j as u64, u64::MAX]), None)?;
        let vs = (0..cfg.group_size)
            .map(|k| verdicts.verify(q, &y, rng::mix(&[cfg.seed, label::VER_STEP, step, j as u64, k as u64])))
            .collect::<Result<Vec<_>>>()?;
        groups.push(VerificationGroup::scored(q.clone(), y, vs)?);
    }
    let touched = if frozen {
        0
    } else {
        let v = state.verifier.as_mut().expect("co-trained verifier");
        verifier_update(v, &groups, cfg.lr_verifier, cfg.beta_kl, cfg.epsilon)?
    };
    let total: usize = groups.iter().map(|g| g.rewards.len()).sum();
    let rewarded: usize = groups.iter().flat_map(|g| &g.rewards).map(|&r| r as usize).sum();
    sink.record(json!({
        "event": "v_step",
        "cycle": state.cycle,
        "step": step,
        "frozen": frozen,
        "mean_reward": rewarded as f64 / total as f64,
        "touched_keys": touched,
    }))?;
    state.counters.v_steps += 1;
    Ok(())
}

#[derive(Default)]
struct RedirectStats {
    evaluated: usize,
    selected: usize,
    skipped: u64,
    events: Vec<(u64, RedirectEvent)>,
}

fn redirection_pass(
    state: &mut TrainState,
    data: &RunData<'_>,
    pass: u32,
    phase1: &[RolloutGroup],
    stats: &mut RedirectStats,
    sink: &mut dyn EventSink,
) -> Result<()> {
    let cfg = data.cfg;
    let strategy = cfg.algo.redirection().expect("redirection pass for an algo without one");
    let executed = state.counters.v_steps >= cfg.verifier_warmup_steps;
    let mut record = json!({
        "event": "r_phase",
        "cycle": state.cycle,
        "pass": pass,
        "executed": executed,
    });
    if executed {
        let verdicts = Verdicts::for_run(cfg, state.verifier.as_ref()).expect("redirection without a verifier");
        let verified = phase1
            .iter()
            .enumerate()
            .map(|(j, g)| {
                let verification = if g.all_failed() {
                    let s = rng::mix(&[cfg.seed, label::REDIRECT_VERIFY, state.cycle, pass as u64, j as u64]);
                    Some(verdicts.verify(&g.query, &g.rollouts[0].trajectory, s)?)
                } else {
                    None
                };
                Ok(VerifiedGroup {
                    group: g.clone(),
                    verification,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let candidates = select_candidates(&verified);
        let seed = rng::mix(&[cfg.seed, label::REDIRECT, state.cycle, pass as u64]);
        let batch = run_redirection(&state.generator, &candidates, strategy, cfg.group_size, cfg.epsilon, seed)?;
        let normalizer = cfg.redirect_batch_normalized.then_some(cfg.batch_size * cfg.group_size);
        let touched = redirection_update(&mut state.generator, &batch, cfg.lr_generator, cfg.beta_kl, normalizer)?;
        for e in &batch.events {
            sink.record(json!({
                "event": "redirect",
                "cycle": state.cycle,
                "pass": pass,
                "query_id": e.query_id,
                "t_star": e.t_star,
                "anchor": e.anchor,
                "kind": e.kind,
                "outcomes": e.outcomes,
            }))?;
        }
        let all_fail_groups = phase1.iter().filter(|g| g.all_failed()).count();
        let obj = record.as_object_mut().expect("object");
        obj.insert("all_fail_groups".into(), json!(all_fail_groups));
        obj.insert("candidates".into(), json!(candidates.len()));
        obj.insert("skipped".into(), json!(batch.skipped));
        obj.insert("groups".into(), json!(batch.groups.len()));
        obj.insert("touched_keys".into(), json!(touched));
        stats.evaluated += phase1.len();
        stats.selected += candidates.len();
        stats.skipped += batch.skipped as u64;
        stats.events.extend(batch.events.into_iter().map(|e| (pass as u64, e)));
        state.counters.r_executed += 1;
    }
    sink.record(record)?;
    state.counters.r_phases += 1;
    Ok(())
}

/// Runs one full cycle and appends its record to `state.records`.
pub fn run_cycle(state: &mut TrainState, data: &RunData<'_>, sink: &mut dyn EventSink) -> Result<CycleRecord> {
    let cfg = data.cfg;
    let interval = cfg.f_g / cfg.f_v;
    let mut phase1 = Vec::new();
    let mut visited = BTreeSet::new();
    for i in 1..=cfg.f_g {
        generator_step(state, data, &mut phase1, &mut visited, sink)?;
        if cfg.algo.uses_verifier() && i % interval == 0 {
            verifier_step(state, data, sink)?;
        }
    }
    let mut stats = RedirectStats::default();
    if cfg.algo.redirection().is_some() {
        for pass in 0..cfg.f_r {
            redirection_pass(state, data, pass, &phase1, &mut stats, sink)?;
        }
    }

    let keys: Vec<GenKey> = visited.into_iter().collect();
    let eval_seed = rng::mix(&[cfg.seed, label::EVAL, state.cycle]);
    let record = CycleRecord {
        cycle: state.cycle + 1,
        pass_at_1: evaluate(&state.generator, data.eval, Decode::Greedy)?.pass_at_1,
        verifier_f1: match Verdicts::for_run(cfg, state.verifier.as_ref()) {
            Some(v) => Some(evaluate_verifier(v, &state.generator, data.eval, eval_seed)?),
            None => None,
        },
        csr: metrics::correction_success_rate(stats.events.iter().map(|(p, e)| (*p, e))),
        trigger_rate: metrics::trigger_rate(stats.selected, stats.evaluated),
        mean_entropy: metrics::mean_entropy(&state.generator, &keys)?,
        mean_redirect_length: metrics::mean_redirect_length(stats.events.iter().map(|(_, e)| e)),
        skipped_candidates: stats.skipped,
    };
    state.cycle += 1;
    state.records.push(record.clone());
    Ok(record)
}

/// Train and eval sets for a config.
pub fn build_datasets(cfg: &ScheduleConfig) -> Result<(Vec<Query>, Vec<Query>)> {
    let train = env::generate_dataset(cfg.data_seed, &cfg.difficulty, cfg.train_size)?;
    let eval = env::generate_disjoint_dataset(cfg.data_seed ^ 0x4556_414c, &cfg.difficulty, cfg.eval_size, &train)?;
    Ok((train, eval))
}

pub fn dataset_digest(queries: &[Query]) -> String {
    let mut buf = Vec::new();
    env::write_queries_jsonl(&mut buf, queries).expect("in-memory write");
    rng::sha256_hex(&buf)
}

pub fn metrics_digest(records: &[CycleRecord]) -> String {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    rng::sha256_hex(text.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: ScheduleConfig,
    pub initial_eval: EvalReport,
    pub final_eval: EvalReport,
    pub records: Vec<CycleRecord>,
    pub counters: PhaseCounters,
    /// The query stream ran out before `total_cycles`.
    pub ended_early: bool,
    pub metrics_digest: String,
    pub generator: GeneratorPolicy,
    pub verifier: Option<VerifierPolicy>,
}

impl RunReport {
    pub fn final_pass_at_1(&self) -> f64 {
        self.final_eval.pass_at_1
    }
}

/// Runs one cycle. If the query stream runs dry partway through, the
/// state goes back to where the cycle started and `true` comes back.
pub fn run_cycle_or_rewind(state: &mut TrainState, data: &RunData<'_>, sink: &mut dyn EventSink) -> Result<bool> {
    let before = state.clone();
    match run_cycle(state, data, sink) {
        Ok(_) => Ok(false),
        Err(Error::EndOfData) => {
            *state = before;
            Ok(true)
        }
        Err(e) => Err(e),
    }
}

/// Drives cycles to completion, stopping cleanly at end of data.
pub fn train_from(
    state: &mut TrainState,
    data: &RunData<'_>,
    sink: &mut dyn EventSink,
    mut after_cycle: impl FnMut(&TrainState) -> Result<()>,
) -> Result<bool> {
    while state.cycle < data.cfg.total_cycles {
        if run_cycle_or_rewind(state, data, sink)? {
            return Ok(true);
        }
        after_cycle(state)?;
    }
    Ok(false)
}

pub fn report(cfg: &ScheduleConfig, state: &TrainState, eval: &[Query], initial: EvalReport, ended_early: bool) -> Result<RunReport> {
    Ok(RunReport {
        config: cfg.clone(),
        initial_eval: initial,
        final_eval: evaluate(&state.generator, eval, Decode::Greedy)?,
        records: state.records.clone(),
        counters: state.counters,
        ended_early,
        metrics_digest: metrics_digest(&state.records),
        generator: state.generator.clone(),
        verifier: state.verifier.clone(),
    })
}

/// In-memory run over the config's own datasets.
pub fn run_training(cfg: &ScheduleConfig, sink: &mut dyn EventSink) -> Result<RunReport> {
    cfg.validate()?;
    let (train, eval) = build_datasets(cfg)?;
    run_training_on(cfg, &train, &eval, sink)
}

pub fn run_training_on(cfg: &ScheduleConfig, train: &[Query], eval: &[Query], sink: &mut dyn EventSink) -> Result<RunReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    let data = RunData { cfg, train, eval };
    let mut state = TrainState::initial(cfg, train.len());
    let initial = evaluate(&state.generator, eval, Decode::Greedy)?;
    let ended = train_from(&mut state, &data, sink, |_| Ok(()))?;
    report(cfg, &state, eval, initial, ended)
}
