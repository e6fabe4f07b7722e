//! Group-relative advantages and the policy-gradient updates built on them.

use serde::{Deserialize, Serialize};

use crate::env::{outcome_correct, Query};
use crate::error::{Error, Result};
use crate::policy::{GenKey, GeneratorPolicy, GradientAccumulator, VerifierGradient, VerifierPolicy};
use crate::transcript::{FinalVerdict, RedirectionSample, Trajectory, Verification};

/// `(r - mean) / (std + epsilon)` with the population standard deviation.
/// Groups whose rewards are all equal get exact zeros.
pub fn outcome_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::usage(format!("group of {} rewards, need at least 2", rewards.len())));
    }
    if !(epsilon > 0.0) {
        return Err(Error::usage(format!("epsilon must be positive, got {epsilon}")));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedAdvantageConfig {
    pub alpha_initial: f64,
    pub alpha_decay_rate: f64,
}

impl Default for MixedAdvantageConfig {
    fn default() -> Self {
        MixedAdvantageConfig {
            alpha_initial: 0.5,
            alpha_decay_rate: std::f64::consts::LN_2 / 100.0,
        }
    }
}

impl MixedAdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_initial > 0.0 && self.alpha_initial < 1.0) || !(self.alpha_decay_rate > 0.0) {
            return Err(Error::config(format!(
                "mixed advantage needs alpha_initial in (0,1) and a positive decay rate, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

pub fn alpha_schedule(cfg: &MixedAdvantageConfig, step: u64) -> f64 {
    cfg.alpha_initial * (-cfg.alpha_decay_rate * step as f64).exp()
}

/// Per-step advantages from binary step rewards, normalized across the
/// group separately at each step position. `rewards[k][t]`.
pub fn step_advantages(rewards: &[Vec<f64>], epsilon: f64) -> Result<Vec<Vec<f64>>> {
    let steps = rewards.first().map_or(0, Vec::len);
    if rewards.iter().any(|r| r.len() != steps) {
        return Err(Error::usage("step rewards have ragged lengths"));
    }
    let mut out = vec![vec![0.0; steps]; rewards.len()];
    for t in 0..steps {
        let column: Vec<f64> = rewards.iter().map(|r| r[t]).collect();
        for (k, a) in outcome_advantages(&column, epsilon)?.into_iter().enumerate() {
            out[k][t] = a;
        }
    }
    Ok(out)
}

/// `(1 - alpha) * outcome + alpha * step`, per rollout and step.
pub fn mixed_advantages(outcome: &[f64], step: &[Vec<f64>], alpha: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::usage(format!("alpha {alpha} outside [0, 1]")));
    }
    if outcome.len() != step.len() {
        return Err(Error::usage(format!(
            "{} outcome advantages but {} step rows",
            outcome.len(),
            step.len()
        )));
    }
    Ok(outcome
        .iter()
        .zip(step)
        .map(|(&o, s)| {
            if alpha == 0.0 {
                vec![o; s.len()]
            } else if alpha == 1.0 {
                s.clone()
            } else {
                s.iter().map(|&x| (1.0 - alpha) * o + alpha * x).collect()
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroupOrigin {
    Phase1,
    Redirect,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Advantages {
    PerRollout(Vec<f64>),
    /// `[k][t]` over all steps of the trajectory.
    PerStep(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub reward: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query: Query,
    pub rollouts: Vec<Rollout>,
    pub advantages: Option<Advantages>,
    pub origin: GroupOrigin,
    /// Set for redirected groups; every rollout shares it.
    pub context: Option<RedirectionSample>,
}

impl RolloutGroup {
    /// Scores each trajectory against the query's ground truth.
    pub fn scored(
        query: Query,
        trajectories: Vec<Trajectory>,
        origin: GroupOrigin,
        context: Option<RedirectionSample>,
    ) -> Result<Self> {
        if trajectories.len() < 2 {
            return Err(Error::usage(format!("rollout group of {}, need K >= 2", trajectories.len())));
        }
        let rollouts = trajectories
            .into_iter()
            .map(|y| Rollout {
                reward: outcome_correct(&query, y.final_answer) as u8,
                trajectory: y,
            })
            .collect();
        Ok(RolloutGroup {
            query,
            rollouts,
            advantages: None,
            origin,
            context,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query.id
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward as f64).collect()
    }

    pub fn successes(&self) -> usize {
        self.rollouts.iter().filter(|r| r.reward == 1).count()
    }

    pub fn all_failed(&self) -> bool {
        self.successes() == 0
    }

    pub fn with_outcome_advantages(mut self, epsilon: f64) -> Result<Self> {
        self.advantages = Some(Advantages::PerRollout(outcome_advantages(&self.rewards(), epsilon)?));
        Ok(self)
    }

    /// True when every advantage entry is exactly zero.
    pub fn zero_signal(&self) -> bool {
        match &self.advantages {
            None => false,
            Some(Advantages::PerRollout(a)) => a.iter().all(|x| *x == 0.0),
            Some(Advantages::PerStep(a)) => a.iter().flatten().all(|x| *x == 0.0),
        }
    }
}

/// Sum of advantage-weighted score functions, divided by the total rollout
/// count. Steps with zero advantage are skipped, so they touch no keys.
/// Policy gradient summed over every generated step and divided by
/// `normalizer`, or by the rollout count when it is `None`.
pub fn generator_gradient(
    pol: &GeneratorPolicy,
    groups: &[RolloutGroup],
    normalizer: Option<usize>,
) -> Result<GradientAccumulator<GenKey>> {
    let total = normalizer.unwrap_or_else(|| groups.iter().map(|g| g.rollouts.len()).sum());
    let mut acc = GradientAccumulator::new();
    for g in groups {
        let adv = g
            .advantages
            .as_ref()
            .ok_or_else(|| Error::usage(format!("group {} has no advantages", g.query.id)))?;
        let k = g.rollouts.len();
        match adv {
            Advantages::PerRollout(a) if a.len() == k => {}
            Advantages::PerStep(a) if a.len() == k && a.iter().all(|r| r.len() == g.query.steps()) => {}
            _ => return Err(Error::usage(format!("group {} advantages do not match its shape", g.query.id))),
        }
        let first = g.context.as_ref().map_or(0, |c| c.anchor - 1);
        for (i, rollout) in g.rollouts.iter().enumerate() {
            let steps = pol.generated_steps(&g.query, &rollout.trajectory, g.context.as_ref())?;
            for (j, (key, claim)) in steps.into_iter().enumerate() {
                let w = match adv {
                    Advantages::PerRollout(a) => a[i],
                    Advantages::PerStep(a) => a[i][first + j],
                };
                if w != 0.0 {
                    pol.accumulate_step(&key, claim, w, &mut acc);
                }
            }
        }
    }
    if total > 0 {
        acc.scale(1.0 / total as f64);
    }
    Ok(acc)
}

/// One policy-gradient step on `groups`. Returns the number of touched keys.
pub fn generator_update(pol: &mut GeneratorPolicy, groups: &[RolloutGroup], lr: f64, beta_kl: f64) -> Result<usize> {
    generator_update_normalized(pol, groups, lr, beta_kl, None)
}

pub fn generator_update_normalized(
    pol: &mut GeneratorPolicy,
    groups: &[RolloutGroup],
    lr: f64,
    beta_kl: f64,
    normalizer: Option<usize>,
) -> Result<usize> {
    if normalizer == Some(0) {
        return Err(Error::usage("gradient normalizer must be positive"));
    }
    let grad = generator_gradient(pol, groups, normalizer)?;
    if grad.is_empty() {
        return Ok(0);
    }
    pol.apply_update(&grad, lr, beta_kl)?;
    Ok(grad.len())
}

/// 1 when the verifier's final call agrees with the true outcome.
pub fn verifier_reward(predicted_final: FinalVerdict, true_outcome: bool) -> u8 {
    ((predicted_final == FinalVerdict::Correct) == true_outcome) as u8
}

/// K verifications of one trajectory, rewarded against its outcome only.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationGroup {
    pub query: Query,
    pub trajectory: Trajectory,
    pub verifications: Vec<Verification>,
    pub rewards: Vec<u8>,
}

impl VerificationGroup {
    pub fn scored(query: Query, trajectory: Trajectory, verifications: Vec<Verification>) -> Result<Self> {
        if verifications.len() < 2 {
            return Err(Error::usage(format!(
                "verification group of {}, need K >= 2",
                verifications.len()
            )));
        }
        let outcome = outcome_correct(&query, trajectory.final_answer);
        let rewards = verifications
            .iter()
            .map(|v| verifier_reward(v.final_verdict, outcome))
            .collect();
        Ok(VerificationGroup {
            query,
            trajectory,
            verifications,
            rewards,
        })
    }
}

pub fn verifier_update(
    vpol: &mut VerifierPolicy,
    groups: &[VerificationGroup],
    lr: f64,
    beta_kl: f64,
    epsilon: f64,
) -> Result<usize> {
    let total: usize = groups.iter().map(|g| g.verifications.len()).sum();
    let mut grad = VerifierGradient::default();
    for g in groups {
        if g.rewards.len() != g.verifications.len() {
            return Err(Error::usage("verification group rewards do not match its size"));
        }
        let rewards: Vec<f64> = g.rewards.iter().map(|&r| r as f64).collect();
        let adv = outcome_advantages(&rewards, epsilon)?;
        for (v, a) in g.verifications.iter().zip(adv) {
            if a != 0.0 {
                let (_, vg) = vpol.logprob_and_grad(&g.query, &g.trajectory, v)?;
                grad.merge_scaled(&vg, a / total as f64);
            }
        }
    }
    if grad.is_empty() {
        return Ok(0);
    }
    vpol.apply_update(&grad, lr, beta_kl)?;
    Ok(grad.step.len() + grad.final_.len())
}
