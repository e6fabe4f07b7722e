//! Helpers shared by the integration test targets: random instances, the
//! transcript mutator and finite-difference gradient checks.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stride_core::env::{Op, OpKind, Query};
use stride_core::grpo::{generator_gradient, Advantages, GroupOrigin, RolloutGroup};
use stride_core::policy::{
    GenKey, GeneratorInit, GeneratorPolicy, GradientAccumulator, OpRates, ReasonCode, VerKey, VerifierGradient,
    VerifierInit, VerifierPolicy, FINAL_VERDICTS, STEP_VERDICTS,
};
use stride_core::transcript::{
    locate_fpf, render_redirection_context, FinalVerdict, RedirectionSample, StepVerdict, Trajectory, Verification,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_query(r: &mut impl Rng, max_modulus: u32, max_steps: usize) -> Query {
    let m = r.gen_range(2..=max_modulus);
    let t = r.gen_range(1..=max_steps);
    let ops = (0..t)
        .map(|_| Op::new(*OpKind::ALL.choose(r).unwrap(), r.gen_range(0..m)))
        .collect();
    Query::new(format!("r-{}", r.gen::<u32>()), m, r.gen_range(0..m), ops).unwrap()
}

pub fn random_trajectory(r: &mut impl Rng, q: &Query) -> Trajectory {
    Trajectory::new(q.id.clone(), (0..q.steps()).map(|_| r.gen_range(0..q.modulus)).collect()).unwrap()
}

pub fn random_verdict(r: &mut impl Rng, p_incorrect: f64) -> StepVerdict {
    if r.gen_bool(p_incorrect) {
        StepVerdict::Incorrect(*ReasonCode::ALL.choose(r).unwrap())
    } else {
        StepVerdict::Correct
    }
}

pub fn random_verification(r: &mut impl Rng, steps: usize) -> Verification {
    let p = r.gen_range(0.0..1.0);
    let verdicts = (0..steps).map(|_| random_verdict(r, p)).collect();
    let fin = if r.gen_bool(0.5) {
        FinalVerdict::Correct
    } else {
        FinalVerdict::Incorrect
    };
    Verification::new(verdicts, fin)
}

// ---------------------------------------------------------------------------
// Transcript mutations

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mutation {
    TagCharDelete,
    TagDelete,
    TagDuplicate,
    BoxedCharDelete,
    BadLabel,
    Truncate,
    DropStep,
    Renumber,
}

pub const MUTATIONS: [Mutation; 8] = [
    Mutation::TagCharDelete,
    Mutation::TagDelete,
    Mutation::TagDuplicate,
    Mutation::BoxedCharDelete,
    Mutation::BadLabel,
    Mutation::Truncate,
    Mutation::DropStep,
    Mutation::Renumber,
];

const TAGS: [&str; 12] = [
    "<think>",
    "</think>",
    "<step>",
    "</step>",
    "<answer>",
    "</answer>",
    "<step_verification>",
    "</step_verification>",
    "<final_verification>",
    "</final_verification>",
    "\\boxed{",
    "}",
];

fn occurrences(text: &str, pat: &str) -> Vec<usize> {
    text.match_indices(pat).map(|(i, _)| i).collect()
}

fn tag_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans: Vec<(usize, usize)> = TAGS[..10]
        .iter()
        .flat_map(|t| occurrences(text, t).into_iter().map(move |i| (i, i + t.len())))
        .collect();
    spans.sort();
    spans
}

fn boxed_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    for i in occurrences(text, "\\boxed{") {
        spans.push((i, i + "\\boxed{".len()));
        let close = i + text[i..].find('}').expect("boxed closes");
        spans.push((close, close + 1));
    }
    spans
}

fn delete_char_in(text: &str, (lo, hi): (usize, usize), r: &mut impl Rng) -> String {
    let at = r.gen_range(lo..hi);
    let mut out = text.to_string();
    out.remove(at);
    out
}

/// Applies `kind` to a rendered transcript. `None` when the text offers no
/// place for that mutation (a single-step trajectory cannot lose a step).
pub fn mutate(text: &str, kind: Mutation, r: &mut impl Rng) -> Option<String> {
    match kind {
        Mutation::TagCharDelete => {
            let spans = tag_spans(text);
            Some(delete_char_in(text, *spans.choose(r)?, r))
        }
        Mutation::TagDelete => {
            let (lo, hi) = *tag_spans(text).choose(r)?;
            Some(format!("{}{}", &text[..lo], &text[hi..]))
        }
        Mutation::TagDuplicate => {
            let (lo, hi) = *tag_spans(text).choose(r)?;
            Some(format!("{}{}", &text[..hi], &text[lo..]))
        }
        Mutation::BoxedCharDelete => {
            let spans = boxed_spans(text);
            Some(delete_char_in(text, *spans.choose(r)?, r))
        }
        Mutation::BadLabel => {
            let starts = occurrences(text, "\\boxed{");
            let i = *starts.choose(r)? + "\\boxed{".len();
            let close = i + text[i..].find('}')?;
            let junk = ["MAYBE", "correct", "", "CORRECT INCORRECT", "x", "-1", "CORRECTT"];
            Some(format!("{}{}{}", &text[..i], junk.choose(r)?, &text[close..]))
        }
        Mutation::Truncate => {
            let cut = r.gen_range(0..text.len());
            Some(text[..cut].to_string())
        }
        Mutation::DropStep => {
            let opens = occurrences(text, "<step>");
            if opens.len() < 2 {
                return None;
            }
            let lo = *opens.choose(r)?;
            let hi = lo + text[lo..].find("</step>")? + "</step>".len();
            Some(format!("{}{}", &text[..lo], &text[hi..]))
        }
        Mutation::Renumber => {
            let starts = occurrences(text, "Step ");
            let i = *starts.choose(r)? + "Step ".len();
            let end = i + text[i..].find(|c: char| !c.is_ascii_digit())?;
            let n: usize = text[i..end].parse().ok()?;
            let m = if r.gen_bool(0.5) { n + 1 + r.gen_range(0..3) } else { n.saturating_sub(1) };
            Some(format!("{}{}{}", &text[..i], m, &text[end..]))
        }
    }
}

// ---------------------------------------------------------------------------
// Policies and finite differences

pub const FD_H: f64 = 1e-5;

fn random_rates(r: &mut impl Rng) -> OpRates {
    OpRates {
        add: r.gen_range(0.0..1.0),
        sub: r.gen_range(0.0..1.0),
        mul: r.gen_range(0.0..1.0),
    }
}

/// A pretrained generator for `q`'s modulus with every key (plain and
/// critique) along `keys` nudged off its initial row.
pub fn random_generator(r: &mut impl Rng, q: &Query, keys: &[GenKey]) -> GeneratorPolicy {
    let init = GeneratorInit {
        correct_logit: r.gen_range(-2.0..3.0),
        misconception_rate: random_rates(r),
        misconception_logit: r.gen_range(-2.0..3.0),
        misconceived_correct_logit: r.gen_range(-1.0..1.0),
        seed: r.gen(),
    };
    let mut pol = GeneratorPolicy::pretrained(q.modulus, r.gen_range(0.5..2.0), &init);
    let m = q.modulus as usize;
    let mut acc = GradientAccumulator::new();
    for k in keys {
        let row: Vec<f64> = (0..m).map(|_| r.gen_range(-1.5..1.5)).collect();
        acc.add_row(k, &row, 1.0);
    }
    if !acc.is_empty() {
        pol.apply_update(&acc, 1.0, 0.0).unwrap();
    }
    pol
}

/// A redirection context on `y`, or `None` when the coin says so.
pub fn random_context(r: &mut impl Rng, q: &Query, y: &Trajectory) -> Option<RedirectionSample> {
    if r.gen_bool(0.3) {
        return None;
    }
    let mut v = random_verification(r, q.steps());
    let flag = r.gen_range(0..q.steps());
    v.step_verdicts[flag] = StepVerdict::Incorrect(*ReasonCode::ALL.choose(r).unwrap());
    let t_star = locate_fpf(&v).unwrap();
    let anchor = r.gen_range(1..=t_star);
    Some(render_redirection_context(q, y, &v, anchor, t_star, r.gen_bool(0.7)).unwrap())
}

fn nudge_generator(pol: &GeneratorPolicy, key: &GenKey, index: usize, by: f64) -> GeneratorPolicy {
    let mut out = pol.clone();
    let mut acc = GradientAccumulator::new();
    acc.add(key, pol.modulus() as usize, index, by.signum());
    out.apply_update(&acc, by.abs(), 0.0).unwrap();
    out
}

/// Largest gap between an analytic gradient and central differences of `f`,
/// over every coordinate the gradient touches plus `extra` keys it should
/// not touch.
pub fn generator_fd_gap(
    pol: &GeneratorPolicy,
    grad: &GradientAccumulator<GenKey>,
    extra: &[GenKey],
    f: impl Fn(&GeneratorPolicy) -> f64,
) -> f64 {
    let m = pol.modulus() as usize;
    let mut keys: Vec<GenKey> = grad.keys().copied().collect();
    keys.extend(extra.iter().filter(|k| grad.get(k).is_none()));
    let mut worst: f64 = 0.0;
    for key in keys {
        for a in 0..m {
            let fd = (f(&nudge_generator(pol, &key, a, FD_H)) - f(&nudge_generator(pol, &key, a, -FD_H))) / (2.0 * FD_H);
            let an = grad.get(&key).map_or(0.0, |row| row[a]);
            worst = worst.max((fd - an).abs());
        }
    }
    worst
}

/// Checks the per-trajectory log-probability gradient and the
/// advantage-weighted batch gradient on one random small instance.
pub fn generator_gradient_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let q = random_query(&mut r, 5, 3);
    let y = random_trajectory(&mut r, &q);
    let ctx = random_context(&mut r, &q, &y);
    let probe = GeneratorPolicy::uniform(q.modulus, 1.0);
    let mut keys: Vec<GenKey> = probe.generated_steps(&q, &y, ctx.as_ref()).unwrap().into_iter().map(|(k, _)| k).collect();
    keys.extend(keys.clone().iter().map(GenKey::base));
    let pol = random_generator(&mut r, &q, &keys);
    let unrelated = GenKey::plain(OpKind::Mul, q.modulus - 1, r.gen_range(0..q.modulus));

    let (_, grad) = pol.logprob_and_grad(&q, &y, ctx.as_ref()).unwrap();
    let single = generator_fd_gap(&pol, &grad, &[unrelated], |p| p.logprob_and_grad(&q, &y, ctx.as_ref()).unwrap().0);

    let k = r.gen_range(2..=4);
    let ys: Vec<Trajectory> = (0..k).map(|i| pol.sample_trajectory(&q, seed ^ i as u64, ctx.as_ref()).unwrap()).collect();
    let adv: Vec<f64> = (0..k).map(|_| r.gen_range(-2.0..2.0)).collect();
    let origin = if ctx.is_some() { GroupOrigin::Redirect } else { GroupOrigin::Phase1 };
    let mut group = RolloutGroup::scored(q.clone(), ys.clone(), origin, ctx.clone()).unwrap();
    group.advantages = Some(Advantages::PerRollout(adv.clone()));
    let groups = [group];
    let batch = generator_gradient(&pol, &groups, None).unwrap();
    let surrogate = |p: &GeneratorPolicy| {
        ys.iter()
            .zip(&adv)
            .map(|(y, a)| a * p.logprob_and_grad(&q, y, ctx.as_ref()).unwrap().0)
            .sum::<f64>()
            / k as f64
    };
    single.max(generator_fd_gap(&pol, &batch, &[unrelated], surrogate))
}

fn nudge_verifier(pol: &VerifierPolicy, target: Target, index: usize, by: f64) -> VerifierPolicy {
    let mut out = pol.clone();
    let mut g = VerifierGradient::default();
    match target {
        Target::Step(k) => g.step.add(&k, STEP_VERDICTS, index, by.signum()),
        Target::Final(k) => g.final_.add(&k, FINAL_VERDICTS, index, by.signum()),
    }
    out.apply_update(&g, by.abs(), 0.0).unwrap();
    out
}

#[derive(Clone, Copy)]
enum Target {
    Step(VerKey),
    Final(stride_core::policy::FinalKey),
}

pub fn verifier_gradient_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let q = random_query(&mut r, 5, 3);
    let y = random_trajectory(&mut r, &q);
    let v = random_verification(&mut r, q.steps());
    let init = VerifierInit {
        correct_prior: r.gen_range(-1.0..3.0),
        final_coupling: r.gen_range(0.0..4.0),
        detection_rate: r.gen_range(0.0..1.0),
        detection_logit: r.gen_range(0.0..4.0),
        seed: r.gen(),
    };
    let mut pol = VerifierPolicy::pretrained(q.modulus, r.gen_range(0.5..2.0), &init);
    let mut noise = VerifierGradient::default();
    for t in 1..=q.steps() {
        let row: Vec<f64> = (0..STEP_VERDICTS).map(|_| r.gen_range(-1.0..1.0)).collect();
        noise.step.add_row(&VerifierPolicy::step_key(&q, &y, t), &row, 1.0);
    }
    pol.apply_update(&noise, 1.0, 0.0).unwrap();

    let f = |p: &VerifierPolicy| p.logprob_and_grad(&q, &y, &v).unwrap().0;
    let (_, grad) = pol.logprob_and_grad(&q, &y, &v).unwrap();
    let mut targets: Vec<(Target, Option<Vec<f64>>)> = grad
        .step
        .iter()
        .map(|(k, row)| (Target::Step(*k), Some(row.clone())))
        .chain(grad.final_.iter().map(|(k, row)| (Target::Final(*k), Some(row.clone()))))
        .collect();
    let other = stride_core::policy::FinalKey {
        any_flagged: !v.step_verdicts.iter().any(|s| !s.is_correct()),
    };
    targets.push((Target::Final(other), None));
    let mut worst: f64 = 0.0;
    for (target, row) in targets {
        let width = match target {
            Target::Step(_) => STEP_VERDICTS,
            Target::Final(_) => FINAL_VERDICTS,
        };
        for a in 0..width {
            let fd = (f(&nudge_verifier(&pol, target, a, FD_H)) - f(&nudge_verifier(&pol, target, a, -FD_H))) / (2.0 * FD_H);
            let an = row.as_ref().map_or(0.0, |row| row[a]);
            worst = worst.max((fd - an).abs());
        }
    }
    worst
}
