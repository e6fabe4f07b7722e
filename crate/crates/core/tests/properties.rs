mod common;

use proptest::prelude::*;
use rand::Rng;

use stride_core::env::{
    generate_indexed_query, oracle_step_labels, oracle_trace, outcome_correct, step_locally_correct, DifficultyConfig,
    OpKind, Query,
};
use stride_core::grpo::{
    generator_gradient, mixed_advantages, outcome_advantages, Advantages, GroupOrigin, RolloutGroup,
};
use stride_core::metrics::{correction_success_rate, verifier_f1, CycleRecord};
use stride_core::policy::{entropy, softmax, GenKey, GeneratorPolicy, ReasonCode, STEP_VERDICTS};
use stride_core::redirection::{
    build_anchor_set, redirection_update, run_redirection, select_candidates, Candidate, RedirectEvent,
    RedirectionBatch, RedirectionStrategy, VerifiedGroup,
};
use stride_core::scheduler::{preset, run_training, Algo, NullSink, PRESETS};
use stride_core::transcript::*;

fn verdict_strategy() -> impl Strategy<Value = StepVerdict> {
    (0..STEP_VERDICTS).prop_map(|i| StepVerdict::from_index(i).unwrap())
}

fn verification_strategy(steps: usize) -> impl Strategy<Value = Verification> {
    (proptest::collection::vec(verdict_strategy(), steps), any::<bool>()).prop_map(|(v, c)| {
        Verification::new(v, if c { FinalVerdict::Correct } else { FinalVerdict::Incorrect })
    })
}

fn query_strategy(max_m: u32, max_t: usize) -> impl Strategy<Value = Query> {
    (2..=max_m, 1..=max_t, any::<u64>()).prop_map(|(m, t, seed)| {
        let cfg = DifficultyConfig {
            modulus: m,
            chain_length_range: (t, t),
            ..DifficultyConfig::default()
        };
        generate_indexed_query(seed, 0, &cfg).unwrap()
    })
}

fn binary_group() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 2..9)
}

// env

proptest! {
    #[test]
    fn oracle_recurrence_and_local_correctness(q in query_strategy(13, 8)) {
        let trace = oracle_trace(&q);
        let mut prev = q.initial_value;
        for (t, op) in q.ops.iter().enumerate() {
            let expected = match op.op_kind {
                OpKind::Add => (prev + op.operand) % q.modulus,
                OpKind::Sub => (prev + q.modulus - op.operand % q.modulus) % q.modulus,
                OpKind::Mul => (prev * op.operand) % q.modulus,
            };
            prop_assert_eq!(trace.true_values[t], expected);
            prop_assert!(step_locally_correct(&q, &trace.true_values[..t], t + 1, expected).unwrap());
            prev = expected;
        }
        prop_assert_eq!(trace.final_answer, prev);
        prop_assert!(outcome_correct(&q, trace.final_answer));
    }

    #[test]
    fn queries_are_pure_functions_of_seed(seed in any::<u64>(), index in 0u64..1000) {
        let cfg = DifficultyConfig::default();
        prop_assert_eq!(generate_indexed_query(seed, index, &cfg).unwrap(), generate_indexed_query(seed, index, &cfg).unwrap());
    }
}

/// Every claim sequence over small moduli and chains: all-locally-correct
/// chains are exactly the oracle trace, so their final claim is correct.
#[test]
fn compositionality_exhaustive() {
    for m in 2..=4u32 {
        for t in 1..=3usize {
            for seed in 0..6u64 {
                let cfg = DifficultyConfig {
                    modulus: m,
                    chain_length_range: (t, t),
                    ..DifficultyConfig::default()
                };
                let q = generate_indexed_query(seed, 0, &cfg).unwrap();
                for code in 0..m.pow(t as u32) {
                    let claims: Vec<u32> = (0..t).map(|i| code / m.pow(i as u32) % m).collect();
                    let y = Trajectory::new(q.id.clone(), claims.clone()).unwrap();
                    if oracle_step_labels(&q, &y).unwrap().iter().all(|&c| c) {
                        assert!(outcome_correct(&q, *claims.last().unwrap()), "{q:?} {claims:?}");
                    }
                }
            }
        }
    }
}

// policy

proptest! {
    #[test]
    fn softmax_normalizes_and_entropy_is_bounded(
        logits in proptest::collection::vec(-30.0f64..30.0, 2..12),
        tau in 0.1f64..5.0,
    ) {
        let p = softmax(&logits, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn sampled_distributions_normalize_at_every_key(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 7, 4);
        let y = common::random_trajectory(&mut r, &q);
        let pol = common::random_generator(&mut r, &q, &[]);
        for (key, _) in pol.generated_steps(&q, &y, None).unwrap() {
            prop_assert!((pol.probs(&key).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for code in ReasonCode::ALL {
                let k = GenKey { critique: Some(code), ..key };
                prop_assert!((pol.probs(&k).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let keys: Vec<GenKey> = pol.generated_steps(&q, &y, None).unwrap().into_iter().map(|(k, _)| k).collect();
        let h = pol.policy_entropy(&keys).unwrap();
        prop_assert!(h >= 0.0 && h <= (q.modulus as f64).ln() + 1e-12);
    }

    /// Untrained critique rows leave the distribution exactly as the plain key's.
    #[test]
    fn critique_at_initialization_is_identity(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 7, 4);
        let pol = common::random_generator(&mut r, &q, &[]);
        for t in 1..=q.steps() {
            let plain = GeneratorPolicy::step_key(&q, &oracle_trace(&q).true_values, t, None);
            for code in ReasonCode::ALL {
                let k = GenKey { critique: Some(code), ..plain };
                prop_assert_eq!(pol.probs(&k), pol.probs(&plain));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>()) {
        prop_assert!(common::generator_gradient_gap(seed) < 1e-6);
        prop_assert!(common::verifier_gradient_gap(seed) < 1e-6);
    }
}

// transcript

proptest! {
    #[test]
    fn trajectory_round_trip(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 23, 8);
        let y = common::random_trajectory(&mut r, &q);
        let text = render_trajectory(&q, &y);
        let parsed = parse_trajectory_for(&q, &text).unwrap();
        prop_assert_eq!(parsed.raw_text.as_deref(), Some(text.as_str()));
        prop_assert_eq!(Trajectory { raw_text: None, ..parsed.clone() }, y.clone());
        prop_assert_eq!(render_trajectory(&q, &parsed), text);
    }

    #[test]
    fn verification_round_trip(v in (1usize..10).prop_flat_map(verification_strategy)) {
        let text = render_verification(&v);
        let parsed = parse_verification(&text, v.step_verdicts.len()).unwrap();
        prop_assert_eq!(Verification { raw_text: None, ..parsed.clone() }, v);
        prop_assert_eq!(render_verification(&parsed), text);
    }

    #[test]
    fn tag_char_deletion_never_parses(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 13, 6);
        let y = common::random_trajectory(&mut r, &q);
        let t = common::mutate(&render_trajectory(&q, &y), common::Mutation::TagCharDelete, &mut r).unwrap();
        prop_assert!(parse_trajectory_for(&q, &t).is_err(), "{}", t);
        let v = common::random_verification(&mut r, q.steps());
        let t = common::mutate(&render_verification(&v), common::Mutation::TagCharDelete, &mut r).unwrap();
        prop_assert!(parse_verification(&t, q.steps()).is_err(), "{}", t);
    }

    #[test]
    fn fpf_is_first_trigger(v in (1usize..12).prop_flat_map(verification_strategy)) {
        match locate_fpf(&v) {
            None => prop_assert!(v.step_verdicts.iter().all(|s| s.is_correct())),
            Some(t) => {
                prop_assert_eq!(trigger(v.step_verdicts[t - 1]), 0);
                prop_assert!(v.step_verdicts[..t - 1].iter().all(|&s| trigger(s) == 1));
            }
        }
    }
}

// grpo

proptest! {
    #[test]
    fn advantages_center_and_permute(rewards in binary_group(), rot in 0usize..8) {
        let a = outcome_advantages(&rewards, 1e-4).unwrap();
        if rewards.iter().any(|&r| r != rewards[0]) {
            prop_assert!((a.iter().sum::<f64>() / a.len() as f64).abs() <= 1e-9);
        } else {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        }
        let k = rot % rewards.len();
        let mut rotated = rewards.clone();
        rotated.rotate_left(k);
        let mut expected = a.clone();
        expected.rotate_left(k);
        let got = outcome_advantages(&rotated, 1e-4).unwrap();
        prop_assert!(got.iter().zip(&expected).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    /// A group whose rollouts all share one reward touches no parameters,
    /// and a zero mixing weight reproduces the outcome-only gradient exactly.
    #[test]
    fn zero_variance_and_alpha_zero(seed in any::<u64>(), success in any::<bool>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 7, 5);
        let pol = common::random_generator(&mut r, &q, &[]);
        let truth = oracle_trace(&q).true_values;
        let ys: Vec<Trajectory> = (0..5)
            .map(|i| {
                let mut y = pol.sample_trajectory(&q, seed.wrapping_add(i), None).unwrap();
                let last = y.steps() - 1;
                let wrong = (truth[last] + 1) % q.modulus;
                y.step_claims[last] = if success { truth[last] } else { wrong };
                y.final_answer = y.step_claims[last];
                y
            })
            .collect();
        let flat = RolloutGroup::scored(q.clone(), ys.clone(), GroupOrigin::Phase1, None).unwrap()
            .with_outcome_advantages(1e-4).unwrap();
        prop_assert!(flat.zero_signal());
        prop_assert!(generator_gradient(&pol, &[flat], None).unwrap().is_empty());

        let mixed_ys: Vec<Trajectory> = (0..5).map(|i| pol.sample_trajectory(&q, seed ^ (i + 99), None).unwrap()).collect();
        let outcome = RolloutGroup::scored(q.clone(), mixed_ys, GroupOrigin::Phase1, None).unwrap()
            .with_outcome_advantages(1e-4).unwrap();
        let Some(Advantages::PerRollout(a)) = outcome.advantages.clone() else { unreachable!() };
        let step: Vec<Vec<f64>> = (0..5).map(|_| (0..q.steps()).map(|_| r.gen_range(-2.0..2.0)).collect()).collect();
        let mut per_step = outcome.clone();
        per_step.advantages = Some(Advantages::PerStep(mixed_advantages(&a, &step, 0.0).unwrap()));
        prop_assert_eq!(
            generator_gradient(&pol, &[outcome], None).unwrap(),
            generator_gradient(&pol, &[per_step], None).unwrap()
        );
    }
}

// redirection

fn all_fail_candidate(r: &mut impl Rng, q: &Query) -> Candidate {
    let truth = oracle_trace(q).true_values;
    let mut claims = truth.clone();
    let last = claims.len() - 1;
    claims[last] = (truth[last] + 1) % q.modulus;
    let mut v = common::random_verification(r, q.steps());
    let flag = r.gen_range(0..q.steps());
    v.step_verdicts[flag] = StepVerdict::Incorrect(ReasonCode::WrongValue);
    v.final_verdict = FinalVerdict::Incorrect;
    Candidate {
        query: q.clone(),
        trajectory: Trajectory::new(q.id.clone(), claims).unwrap(),
        verification: v,
    }
}

proptest! {
    #[test]
    fn anchors_and_kinds(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 7, 6);
        let c = all_fail_candidate(&mut r, &q);
        let t_star = locate_fpf(&c.verification).unwrap();
        prop_assert_eq!(build_anchor_set(t_star).unwrap().len(), t_star);
        let pol = common::random_generator(&mut r, &q, &[]);
        let batch = run_redirection(&pol, &[c], RedirectionStrategy::FULL, 3, 1e-4, seed).unwrap();
        prop_assert_eq!(batch.groups.len(), t_star);
        let rectify = batch.samples.iter().filter(|s| s.kind == RedirectionKind::Rectify).count();
        prop_assert_eq!(rectify, 1);
        prop_assert_eq!(batch.samples.iter().find(|s| s.kind == RedirectionKind::Rectify).unwrap().anchor, t_star);
        prop_assert!(batch.groups.iter().all(|g| g.origin == GroupOrigin::Redirect));
    }

    /// A policy that can never reach the right answer gets all-fail
    /// redirection groups, and updating on them changes nothing.
    #[test]
    fn all_fail_redirection_is_a_no_op(seed in any::<u64>(), normalized in any::<bool>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 7, 5);
        let c = all_fail_candidate(&mut r, &q);
        let mut wrong = GeneratorPolicy::uniform(q.modulus, 1.0);
        // every final-step key, critiqued or not, all but certainly misses
        let miss = (oracle_trace(&q).final_answer + 1) % q.modulus;
        let last = *q.ops.last().unwrap();
        let mut acc = stride_core::policy::GradientAccumulator::new();
        for prev in 0..q.modulus {
            let key = GenKey::plain(last.op_kind, last.operand, prev);
            acc.add(&key, q.modulus as usize, miss as usize, 1.0);
        }
        wrong.apply_update(&acc, 200.0, 0.0).unwrap();
        let batch = run_redirection(&wrong, &[c], RedirectionStrategy::FULL, 5, 1e-4, seed).unwrap();
        prop_assert!(batch.groups.iter().all(|g| g.all_failed()));
        let before = wrong.clone();
        let touched = redirection_update(&mut wrong, &batch, 3.0, 0.1, normalized.then_some(10)).unwrap();
        prop_assert_eq!(touched, 0);
        prop_assert_eq!(wrong, before);
    }

    #[test]
    fn phase_one_groups_are_refused(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 7, 4);
        let mut pol = GeneratorPolicy::uniform(q.modulus, 1.0);
        let ys = (0..3).map(|i| pol.sample_trajectory(&q, i, None).unwrap()).collect();
        let g = RolloutGroup::scored(q, ys, GroupOrigin::Phase1, None).unwrap().with_outcome_advantages(1e-4).unwrap();
        let batch = RedirectionBatch { groups: vec![g], ..RedirectionBatch::default() };
        prop_assert!(redirection_update(&mut pol, &batch, 1.0, 0.0, None).is_err());
    }
}

// metrics

fn event(candidate: usize, outcomes: Vec<u8>) -> RedirectEvent {
    RedirectEvent {
        candidate,
        query_id: format!("q{candidate}"),
        t_star: 1,
        anchor: 1,
        kind: RedirectionKind::Rectify,
        outcomes,
        steps: 3,
    }
}

proptest! {
    #[test]
    fn f1_matches_confusion_matrix(
        rows in proptest::collection::vec(proptest::collection::vec((verdict_strategy(), any::<bool>()), 1..6), 1..6)
    ) {
        let predicted: Vec<Vec<StepVerdict>> = rows.iter().map(|r| r.iter().map(|x| x.0).collect()).collect();
        let oracle: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|x| x.1).collect()).collect();
        let mut m = [[0u32; 2]; 2];
        for (v, ok) in rows.iter().flatten() {
            m[(!v.is_correct()) as usize][(!ok) as usize] += 1;
        }
        let (tp, fp, fn_) = (m[1][1] as f64, m[1][0] as f64, m[0][1] as f64);
        let expected = if tp + fp + fn_ == 0.0 {
            1.0
        } else {
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) }
        };
        prop_assert!((verifier_f1(&predicted, &oracle).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn csr_monotone_in_rescues(outcomes in proptest::collection::vec(proptest::collection::vec(0u8..2, 2..5), 1..8)) {
        let events: Vec<RedirectEvent> = outcomes.iter().cloned().enumerate().map(|(i, o)| event(i, o)).collect();
        let base = correction_success_rate(events.iter().map(|e| (0, e))).unwrap();
        let mut rescued = events.clone();
        rescued.push(event(events.len(), vec![0, 1]));
        prop_assert!(correction_success_rate(rescued.iter().map(|e| (0, e))).unwrap() >= base);
    }

    /// A group with any success is never selected, so it adds no event and
    /// leaves CSR where it was.
    #[test]
    fn unselected_query_leaves_csr(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let q = common::random_query(&mut r, 7, 4);
        let c = all_fail_candidate(&mut r, &q);
        let pol = GeneratorPolicy::uniform(q.modulus, 1.0);
        let failed = RolloutGroup::scored(q.clone(), vec![c.trajectory.clone(); 3], GroupOrigin::Phase1, None).unwrap();
        let truth = Trajectory::new(q.id.clone(), oracle_trace(&q).true_values).unwrap();
        let solved = RolloutGroup::scored(q.clone(), vec![c.trajectory.clone(), truth], GroupOrigin::Phase1, None).unwrap();
        let vg = |g: &RolloutGroup| VerifiedGroup { group: g.clone(), verification: Some(c.verification.clone()) };
        let one = select_candidates(&[vg(&failed)]);
        let two = select_candidates(&[vg(&failed), vg(&solved)]);
        prop_assert_eq!(&one, &two);
        let csr = |cands: &[Candidate]| {
            let b = run_redirection(&pol, cands, RedirectionStrategy::FULL, 3, 1e-4, seed).unwrap();
            correction_success_rate(b.events.iter().map(|e| (0, e)))
        };
        prop_assert_eq!(csr(&one), csr(&two));
    }

    #[test]
    fn cycle_record_round_trip(
        cycle in any::<u64>(),
        vals in proptest::collection::vec(-1e6f64..1e6, 3),
        opts in proptest::collection::vec(proptest::option::of(-1e6f64..1e6), 3),
        skipped in any::<u64>(),
    ) {
        let rec = CycleRecord {
            cycle,
            pass_at_1: vals[0],
            verifier_f1: opts[0],
            csr: opts[1],
            trigger_rate: vals[1],
            mean_entropy: vals[2],
            mean_redirect_length: opts[2],
            skipped_candidates: skipped,
        };
        let back: CycleRecord = serde_json::from_str(&rec.to_json_line()).unwrap();
        prop_assert_eq!(back, rec);
    }
}

// scheduler and presets

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Counters at every cycle boundary are exact multiples of the cadence.
    #[test]
    fn cadence_holds_at_every_boundary(f_v in 1u32..4, mult in 1u32..4, cycles in 1u64..4, seed in 0u64..100) {
        let mut cfg = preset("stride").unwrap();
        cfg.f_v = f_v;
        cfg.f_g = f_v * mult;
        cfg.total_cycles = cycles;
        cfg.seed = seed;
        cfg.train_size = 30;
        cfg.eval_size = 10;
        cfg.batch_size = 4;
        let mut events = Vec::new();
        let report = run_training(&cfg, &mut events).unwrap();
        prop_assert_eq!(report.counters.g_steps, cycles * cfg.f_g as u64);
        prop_assert_eq!(report.counters.v_steps, cycles * cfg.f_v as u64);
        prop_assert_eq!(report.counters.r_phases, cycles * cfg.f_r as u64);
        // within a cycle every G-step precedes the cycle's R-pass
        let mut seen_r = false;
        let mut cycle = 0;
        for e in &events {
            let c = e["cycle"].as_u64().unwrap();
            if c != cycle {
                cycle = c;
                seen_r = false;
            }
            match e["event"].as_str().unwrap() {
                "g_step" => prop_assert!(!seen_r),
                "r_phase" => seen_r = true,
                _ => {}
            }
        }
    }
}

#[test]
fn grpo_only_has_no_verifier() {
    let mut cfg = preset("grpo").unwrap();
    assert_eq!(cfg.algo, Algo::GrpoOnly);
    cfg.total_cycles = 2;
    cfg.train_size = 30;
    cfg.eval_size = 10;
    let report = run_training(&cfg, &mut NullSink).unwrap();
    assert!(report.verifier.is_none());
    assert_eq!(report.counters.r_phases, 0);
    assert!(report.records.iter().all(|r| r.verifier_f1.is_none() && r.csr.is_none()));
}

#[test]
fn every_preset_validates() {
    for name in PRESETS {
        let name = name.replace("@S", "@60");
        preset(&name).unwrap().validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    assert!(preset("frozen-verifier@x").is_err());
    assert!(preset("nope").is_err());
}
