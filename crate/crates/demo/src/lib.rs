//! Browser demo: small training runs, one redirection walked through step
//! by step, and the group-relative advantage formula. Every export returns
//! a JSON string; the `*_json` functions are the same thing for native
//! callers.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use stride_core::env::{generate_indexed_query, oracle_trace, outcome_correct, DifficultyConfig};
use stride_core::grpo::outcome_advantages;
use stride_core::policy::{GeneratorPolicy, VerifierPolicy};
use stride_core::rng;
use stride_core::scheduler::{preset, run_training, NullSink};
use stride_core::transcript::{
    locate_fpf, render_problem, render_redirection_context, render_trajectory, render_verification, RedirectionKind,
};

/// Caps how long one browser call can train.
const MAX_CYCLES: u64 = 60;

#[derive(Serialize)]
struct Curve {
    preset: String,
    seed: u64,
    initial_pass_at_1: f64,
    cycle: Vec<u64>,
    pass_at_1: Vec<f64>,
    verifier_f1: Vec<Option<f64>>,
    csr: Vec<Option<f64>>,
    trigger_rate: Vec<f64>,
}

/// Trains each comma-separated preset for `cycles` cycles on the desk
/// benchmark and returns the per-cycle series.
pub fn training_curves_json(presets: &str, seed: u64, cycles: u64) -> Result<String, String> {
    if cycles == 0 || cycles > MAX_CYCLES {
        return Err(format!("cycles must be in 1..={MAX_CYCLES}, got {cycles}"));
    }
    let mut curves = Vec::new();
    for name in presets.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let mut cfg = preset(name).map_err(|e| e.to_string())?;
        cfg.seed = seed;
        cfg.total_cycles = cycles;
        let report = run_training(&cfg, &mut NullSink).map_err(|e| e.to_string())?;
        let r = &report.records;
        curves.push(Curve {
            preset: name.to_string(),
            seed,
            initial_pass_at_1: report.initial_eval.pass_at_1,
            cycle: r.iter().map(|x| x.cycle).collect(),
            pass_at_1: r.iter().map(|x| x.pass_at_1).collect(),
            verifier_f1: r.iter().map(|x| x.verifier_f1).collect(),
            csr: r.iter().map(|x| x.csr).collect(),
            trigger_rate: r.iter().map(|x| x.trigger_rate).collect(),
        });
    }
    if curves.is_empty() {
        return Err("name at least one preset".into());
    }
    Ok(serde_json::to_string(&curves).expect("curves serialize"))
}

#[derive(Serialize)]
struct Anchor {
    anchor: usize,
    kind: RedirectionKind,
    critique: Option<String>,
    context: String,
    rollouts: Vec<String>,
    outcomes: Vec<u8>,
}

#[derive(Serialize)]
struct Walkthrough {
    seed: u64,
    attempts: u64,
    problem: String,
    true_values: Vec<u32>,
    trajectory: String,
    claims: Vec<u32>,
    verification: String,
    t_star: usize,
    anchors: Vec<Anchor>,
}

/// Finds a failed attempt by the starting generator that the starting
/// verifier flags, then redirects it from every anchor up to the first
/// flagged step with `k` rollouts each.
pub fn redirect_walkthrough_json(seed: u64, k: usize) -> Result<String, String> {
    if !(2..=8).contains(&k) {
        return Err(format!("k must be in 2..=8, got {k}"));
    }
    let cfg = preset("stride").map_err(|e| e.to_string())?;
    let gen = GeneratorPolicy::pretrained(cfg.difficulty.modulus, cfg.temperature, &cfg.generator_init);
    let ver = VerifierPolicy::pretrained(cfg.difficulty.modulus, cfg.temperature, &cfg.verifier_init);
    let difficulty = DifficultyConfig::default();
    for attempt in 0..500u64 {
        let q = generate_indexed_query(seed, attempt, &difficulty).map_err(|e| e.to_string())?;
        let y = gen
            .sample_trajectory(&q, rng::mix(&[seed, attempt, 1]), None)
            .map_err(|e| e.to_string())?;
        if outcome_correct(&q, y.final_answer) {
            continue;
        }
        let v = ver
            .sample_verification(&q, &y, rng::mix(&[seed, attempt, 2]))
            .map_err(|e| e.to_string())?;
        let Some(t_star) = locate_fpf(&v) else { continue };
        let mut anchors = Vec::new();
        for anchor in 1..=t_star {
            let sample = render_redirection_context(&q, &y, &v, anchor, t_star, true).map_err(|e| e.to_string())?;
            let mut rollouts = Vec::new();
            let mut outcomes = Vec::new();
            for i in 0..k {
                let z = gen
                    .sample_trajectory(&q, rng::mix(&[seed, attempt, 3, anchor as u64, i as u64]), Some(&sample))
                    .map_err(|e| e.to_string())?;
                outcomes.push(outcome_correct(&q, z.final_answer) as u8);
                rollouts.push(render_trajectory(&q, &z));
            }
            anchors.push(Anchor {
                anchor,
                kind: sample.kind,
                critique: sample.critique.map(|c| c.as_str().to_string()),
                context: sample.rendered_context,
                rollouts,
                outcomes,
            });
        }
        let walk = Walkthrough {
            seed,
            attempts: attempt + 1,
            problem: render_problem(&q),
            true_values: oracle_trace(&q).true_values,
            trajectory: render_trajectory(&q, &y),
            claims: y.step_claims.clone(),
            verification: render_verification(&v),
            t_star,
            anchors,
        };
        return Ok(serde_json::to_string(&walk).expect("walkthrough serializes"));
    }
    Err(format!("no flagged failure within 500 queries for seed {seed}"))
}

#[derive(Serialize)]
struct AdvantageTable {
    rewards: Vec<f64>,
    epsilon: f64,
    advantages: Vec<f64>,
}

/// Group-relative advantages for comma- or space-separated rewards.
pub fn advantages_json(rewards: &str, epsilon: f64) -> Result<String, String> {
    let parsed: Result<Vec<f64>, _> = rewards
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(str::parse::<f64>)
        .collect();
    let rewards = parsed.map_err(|e| format!("rewards: {e}"))?;
    let advantages = outcome_advantages(&rewards, epsilon).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&AdvantageTable {
        rewards,
        epsilon,
        advantages,
    })
    .expect("table serializes"))
}

#[wasm_bindgen]
pub fn training_curves(presets: &str, seed: u32, cycles: u32) -> Result<String, JsError> {
    training_curves_json(presets, seed as u64, cycles as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn redirect_walkthrough(seed: u32, k: u32) -> Result<String, JsError> {
    redirect_walkthrough_json(seed as u64, k as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn advantages(rewards: &str, epsilon: f64) -> Result<String, JsError> {
    advantages_json(rewards, epsilon).map_err(|e| JsError::new(&e))
}
