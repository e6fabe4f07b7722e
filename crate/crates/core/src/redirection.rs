//! Phase III: pick failures the verifier caught, restart generation from
//! every step up to the first flagged one, and learn only from those
//! restarts.

use serde::{Deserialize, Serialize};

use crate::env::Query;
use crate::error::{Error, Result};
use crate::grpo::{generator_update_normalized, GroupOrigin, RolloutGroup};
use crate::policy::GeneratorPolicy;
use crate::rng;
use crate::transcript::{
    locate_fpf, render_redirection_context, FinalVerdict, RedirectionKind, RedirectionSample, Trajectory,
    Verification,
};

/// A Phase-I group paired with the verifier's reading of its first rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedGroup {
    pub group: RolloutGroup,
    pub verification: Option<Verification>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub query: Query,
    pub trajectory: Trajectory,
    pub verification: Verification,
}

/// Groups where every rollout failed and the verifier called the
/// representative (first) rollout INCORRECT.
pub fn select_candidates(groups: &[VerifiedGroup]) -> Vec<Candidate> {
    groups
        .iter()
        .filter(|vg| vg.group.all_failed())
        .filter_map(|vg| {
            let v = vg.verification.as_ref()?;
            (v.final_verdict == FinalVerdict::Incorrect).then(|| Candidate {
                query: vg.group.query.clone(),
                trajectory: vg.group.rollouts[0].trajectory.clone(),
                verification: v.clone(),
            })
        })
        .collect()
}

pub fn build_anchor_set(t_star: usize) -> Result<Vec<usize>> {
    if t_star < 1 {
        return Err(Error::usage("t* must be at least 1"));
    }
    Ok((1..=t_star).collect())
}

/// Which anchors to use and whether the flagged step's critique is shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedirectionStrategy {
    pub multi_point: bool,
    pub guided: bool,
}

impl RedirectionStrategy {
    pub const FULL: RedirectionStrategy = RedirectionStrategy {
        multi_point: true,
        guided: true,
    };

    pub fn anchors(&self, t_star: usize) -> Result<Vec<usize>> {
        if self.multi_point {
            build_anchor_set(t_star)
        } else {
            build_anchor_set(t_star).map(|_| vec![t_star])
        }
    }
}

/// One (query, anchor) group as it goes to the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedirectEvent {
    /// Position of the candidate within its batch.
    pub candidate: usize,
    pub query_id: String,
    pub t_star: usize,
    pub anchor: usize,
    pub kind: RedirectionKind,
    pub outcomes: Vec<u8>,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RedirectionBatch {
    pub samples: Vec<RedirectionSample>,
    pub groups: Vec<RolloutGroup>,
    pub events: Vec<RedirectEvent>,
    /// Candidates dropped because no step was flagged.
    pub skipped: usize,
}

impl RedirectionBatch {
    pub fn redirected_candidates(&self) -> usize {
        let mut ids: Vec<usize> = self.events.iter().map(|e| e.candidate).collect();
        ids.dedup();
        ids.len()
    }
}

pub fn run_redirection(
    pol: &GeneratorPolicy,
    candidates: &[Candidate],
    strategy: RedirectionStrategy,
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<RedirectionBatch> {
    if k < 2 {
        return Err(Error::usage(format!("redirection group size {k}, need K >= 2")));
    }
    let mut batch = RedirectionBatch::default();
    for (ci, c) in candidates.iter().enumerate() {
        let Some(t_star) = locate_fpf(&c.verification) else {
            batch.skipped += 1;
            continue;
        };
        for anchor in strategy.anchors(t_star)? {
            let sample =
                render_redirection_context(&c.query, &c.trajectory, &c.verification, anchor, t_star, strategy.guided)?;
            let trajectories = (0..k)
                .map(|i| {
                    let s = rng::mix(&[
                        seed,
                        rng::label::REDIRECT,
                        rng::fingerprint(&c.query.id),
                        anchor as u64,
                        i as u64,
                    ]);
                    pol.sample_trajectory(&c.query, s, Some(&sample))
                })
                .collect::<Result<Vec<_>>>()?;
            let group = RolloutGroup::scored(c.query.clone(), trajectories, GroupOrigin::Redirect, Some(sample.clone()))?
                .with_outcome_advantages(epsilon)?;
            batch.events.push(RedirectEvent {
                candidate: ci,
                query_id: c.query.id.clone(),
                t_star,
                anchor,
                kind: sample.kind,
                outcomes: group.rollouts.iter().map(|r| r.reward).collect(),
                steps: c.query.steps(),
            });
            batch.samples.push(sample);
            batch.groups.push(group);
        }
    }
    Ok(batch)
}

/// Generator update on redirected groups only. `normalizer` as in
/// [`generator_update_normalized`].
pub fn redirection_update(
    pol: &mut GeneratorPolicy,
    batch: &RedirectionBatch,
    lr: f64,
    beta_kl: f64,
    normalizer: Option<usize>,
) -> Result<usize> {
    if let Some(g) = batch.groups.iter().find(|g| g.origin != GroupOrigin::Redirect) {
        return Err(Error::usage(format!(
            "Phase-I group for {} found in a redirection batch",
            g.query.id
        )));
    }
    generator_update_normalized(pol, &batch.groups, lr, beta_kl, normalizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Op, OpKind};
    use crate::grpo::Advantages;
    use crate::policy::{GenKey, GeneratorInit, ReasonCode};
    use crate::transcript::StepVerdict;

    fn query() -> Query {
        Query::new(
            "q",
            5,
            1,
            vec![Op::new(OpKind::Add, 2), Op::new(OpKind::Mul, 3), Op::new(OpKind::Sub, 4)],
        )
        .unwrap()
    }

    fn flagged(at: usize) -> Verification {
        let mut v = vec![StepVerdict::Correct; 3];
        v[at - 1] = StepVerdict::Incorrect(ReasonCode::SignError);
        Verification::new(v, FinalVerdict::Incorrect)
    }

    fn group(claims: &[[u32; 3]]) -> RolloutGroup {
        let ys = claims.iter().map(|c| Trajectory::new("q", c.to_vec()).unwrap()).collect();
        RolloutGroup::scored(query(), ys, GroupOrigin::Phase1, None).unwrap()
    }

    #[test]
    fn selection_rule() {
        let failing = group(&[[3, 4, 1], [2, 1, 2], [0, 0, 1]]);
        let one_success = group(&[[3, 4, 0], [2, 1, 2], [0, 0, 1]]);
        let ok_final = Verification::new(vec![StepVerdict::Correct; 3], FinalVerdict::Correct);
        let picked = select_candidates(&[
            VerifiedGroup { group: one_success, verification: Some(flagged(1)) },
            VerifiedGroup { group: failing.clone(), verification: Some(ok_final) },
            VerifiedGroup { group: failing.clone(), verification: Some(flagged(3)) },
            VerifiedGroup { group: failing, verification: None },
        ]);
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].trajectory.step_claims, vec![3, 4, 1]);
    }

    #[test]
    fn anchor_sets() {
        assert_eq!(build_anchor_set(3).unwrap(), vec![1, 2, 3]);
        assert_eq!(build_anchor_set(1).unwrap(), vec![1]);
        assert!(build_anchor_set(0).is_err());
        let single = RedirectionStrategy { multi_point: false, guided: true };
        assert_eq!(single.anchors(4).unwrap(), vec![4]);
    }

    #[test]
    fn batch_shape_and_kinds() {
        let pol = GeneratorPolicy::uniform(5, 1.0);
        let c = Candidate {
            query: query(),
            trajectory: Trajectory::new("q", vec![3, 2, 3]).unwrap(),
            verification: flagged(2),
        };
        let batch = run_redirection(&pol, &[c.clone()], RedirectionStrategy::FULL, 3, 1e-4, 5).unwrap();
        assert_eq!(batch.groups.len(), 2);
        assert_eq!(batch.groups.iter().map(|g| g.rollouts.len()).sum::<usize>(), 6);
        let kinds: Vec<_> = batch.samples.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![RedirectionKind::Explore, RedirectionKind::Rectify]);
        assert_eq!(batch.samples[1].critique, Some(ReasonCode::SignError));
        assert_eq!(batch, run_redirection(&pol, &[c.clone()], RedirectionStrategy::FULL, 3, 1e-4, 5).unwrap());

        let mut silent = c;
        silent.verification = Verification::new(vec![StepVerdict::Correct; 3], FinalVerdict::Incorrect);
        let b = run_redirection(&pol, &[silent], RedirectionStrategy::FULL, 3, 1e-4, 5).unwrap();
        assert_eq!((b.skipped, b.groups.len()), (1, 0));
    }

    #[test]
    fn all_fail_batch_is_harmless() {
        // the generator always gets step 3 wrong
        let init = GeneratorInit { correct_logit: 40.0, ..GeneratorInit::uniform() };
        let mut pol = GeneratorPolicy::pretrained(5, 1.0, &init);
        let key = GenKey::plain(OpKind::Sub, 4, 4);
        let mut g = crate::policy::GradientAccumulator::new();
        g.add(&key, 5, 1, 1e4);
        pol.apply_update(&g, 1.0, 0.0).unwrap();
        let c = Candidate {
            query: query(),
            trajectory: Trajectory::new("q", vec![3, 4, 3]).unwrap(),
            verification: flagged(1),
        };
        let batch = run_redirection(&pol, &[c], RedirectionStrategy::FULL, 5, 1e-4, 1).unwrap();
        assert!(batch.groups.iter().all(|g| g.all_failed() && g.zero_signal()));
        let before = pol.clone();
        redirection_update(&mut pol, &batch, 0.5, 0.001, Some(4)).unwrap();
        assert_eq!(pol, before);
    }

    #[test]
    fn purity_and_rectification() {
        let mut pol = GeneratorPolicy::uniform(5, 1.0);
        assert_eq!(redirection_update(&mut pol, &RedirectionBatch::default(), 0.1, 0.0, None).unwrap(), 0);

        let c = Candidate {
            query: query(),
            trajectory: Trajectory::new("q", vec![3, 2, 3]).unwrap(),
            verification: flagged(2),
        };
        let batch = run_redirection(&pol, &[c], RedirectionStrategy::FULL, 2, 1e-4, 0).unwrap();
        let rectify = batch.groups[1].clone();
        let mut g = rectify.clone();
        g.rollouts[0].trajectory = Trajectory::new("q", vec![3, 4, 0]).unwrap();
        g.rollouts[0].reward = 1;
        g.rollouts[1].trajectory = Trajectory::new("q", vec![3, 1, 2]).unwrap();
        g.rollouts[1].reward = 0;
        g = g.with_outcome_advantages(1e-4).unwrap();
        assert!(matches!(&g.advantages, Some(Advantages::PerRollout(a)) if a[0] > a[1]));
        let one = RedirectionBatch { groups: vec![g], ..Default::default() };
        let key = GenKey { critique: Some(ReasonCode::SignError), ..GenKey::plain(OpKind::Mul, 3, 3) };
        let before = pol.probs(&key)[4];
        redirection_update(&mut pol, &one, 0.1, 0.0, None).unwrap();
        assert!(pol.probs(&key)[4] > before);

        let mut mixed = one;
        mixed.groups[0].origin = GroupOrigin::Phase1;
        assert!(redirection_update(&mut pol, &mixed, 0.1, 0.0, None).is_err());
    }
}
