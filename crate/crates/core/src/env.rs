//! Modular-arithmetic chain tasks and their ground-truth oracle.
//!
//! A query starts from `initial_value` and applies a chain of `ADD`, `SUB`
//! and `MUL` operations modulo `modulus`. Each step of a reasoning
//! trajectory claims the value after one operation. Step correctness is
//! judged locally, against the trajectory's own claimed prefix, so an early
//! mistake followed by consistent arithmetic yields a failed outcome whose
//! later steps all look fine.

use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::transcript::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    Add,
    Sub,
    Mul,
}

impl OpKind {
    pub const ALL: [OpKind; 3] = [OpKind::Add, OpKind::Sub, OpKind::Mul];

    /// `(prev op operand) mod modulus`, always in `[0, modulus)`.
    pub fn apply(self, prev: u32, operand: u32, modulus: u32) -> u32 {
        let (p, o, m) = (prev as u64, operand as u64, modulus as u64);
        let v = match self {
            OpKind::Add => (p + o) % m,
            OpKind::Sub => (p % m + m - o % m) % m,
            OpKind::Mul => (p * o) % m,
        };
        v as u32
    }

    pub fn symbol(self) -> char {
        match self {
            OpKind::Add => '+',
            OpKind::Sub => '-',
            OpKind::Mul => '*',
        }
    }

    pub fn from_symbol(c: char) -> Option<OpKind> {
        match c {
            '+' => Some(OpKind::Add),
            '-' => Some(OpKind::Sub),
            '*' => Some(OpKind::Mul),
            _ => None,
        }
    }

    pub fn verb(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "subtract",
            OpKind::Mul => "multiply by",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Op {
    pub op_kind: OpKind,
    pub operand: u32,
}

impl Op {
    pub fn new(op_kind: OpKind, operand: u32) -> Self {
        Op { op_kind, operand }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub modulus: u32,
    pub initial_value: u32,
    pub ops: Vec<Op>,
}

impl Query {
    pub fn new(id: impl Into<String>, modulus: u32, initial_value: u32, ops: Vec<Op>) -> Result<Self> {
        let q = Query {
            id: id.into(),
            modulus,
            initial_value,
            ops,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::config(format!("modulus {} < 2", self.modulus)));
        }
        if self.ops.is_empty() {
            return Err(Error::config("query must have at least one op"));
        }
        if self.initial_value >= self.modulus {
            return Err(Error::config(format!(
                "initial value {} outside [0, {})",
                self.initial_value, self.modulus
            )));
        }
        if let Some(op) = self.ops.iter().find(|op| op.operand >= self.modulus) {
            return Err(Error::config(format!(
                "operand {} outside [0, {})",
                op.operand, self.modulus
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.ops.len()
    }

    /// The value a step starts from, given the claims made so far.
    pub fn prev_value(&self, prefix_claims: &[u32], t: usize) -> u32 {
        if t <= 1 {
            self.initial_value
        } else {
            prefix_claims[t - 2]
        }
    }

    /// Content identity, ignoring the id. Used to keep eval sets disjoint.
    pub fn content_key(&self) -> (u32, u32, Vec<(OpKind, u32)>) {
        (
            self.modulus,
            self.initial_value,
            self.ops.iter().map(|o| (o.op_kind, o.operand)).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpMix {
    pub add: f64,
    pub sub: f64,
    pub mul: f64,
}

impl Default for OpMix {
    fn default() -> Self {
        OpMix {
            add: 1.0 / 3.0,
            sub: 1.0 / 3.0,
            mul: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyConfig {
    pub modulus: u32,
    /// Inclusive `[lo, hi]` range of chain lengths.
    pub chain_length_range: (usize, usize),
    pub op_mix: OpMix,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            modulus: 7,
            chain_length_range: (4, 6),
            op_mix: OpMix::default(),
        }
    }
}

impl DifficultyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::config(format!("modulus {} < 2", self.modulus)));
        }
        let (lo, hi) = self.chain_length_range;
        if lo < 1 || hi < lo {
            return Err(Error::config(format!("bad chain_length_range [{lo}, {hi}]")));
        }
        let w = [self.op_mix.add, self.op_mix.sub, self.op_mix.mul];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("op_mix weights must be nonnegative"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("op_mix weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleTrace {
    pub true_values: Vec<u32>,
    pub final_answer: u32,
}

fn query_id(seed: u64, index: u64, cfg: &DifficultyConfig) -> String {
    let cfg_json = serde_json::to_string(cfg).expect("difficulty config serializes");
    let hex = rng::sha256_hex(format!("{seed}:{index}:{cfg_json}").as_bytes());
    format!("q-{}", &hex[..16])
}

/// Generate query number `index` of the stream identified by `seed`.
pub fn generate_indexed_query(seed: u64, index: u64, cfg: &DifficultyConfig) -> Result<Query> {
    cfg.validate()?;
    let mut r = rng::rng_for(&[rng::label::QUERY, seed, index]);
    let (lo, hi) = cfg.chain_length_range;
    let len = r.gen_range(lo..=hi);
    let weights = WeightedIndex::new([cfg.op_mix.add, cfg.op_mix.sub, cfg.op_mix.mul])
        .map_err(|e| Error::config(format!("op_mix: {e}")))?;
    let initial_value = r.gen_range(0..cfg.modulus);
    let ops = (0..len)
        .map(|_| Op::new(OpKind::ALL[weights.sample(&mut r)], r.gen_range(0..cfg.modulus)))
        .collect();
    Query::new(query_id(seed, index, cfg), cfg.modulus, initial_value, ops)
}

pub fn generate_query(seed: u64, cfg: &DifficultyConfig) -> Result<Query> {
    generate_indexed_query(seed, 0, cfg)
}

/// `n` queries from one seeded stream, duplicates by content skipped.
pub fn generate_dataset(seed: u64, cfg: &DifficultyConfig, n: usize) -> Result<Vec<Query>> {
    generate_disjoint_dataset(seed, cfg, n, &[])
}

/// Like [`generate_dataset`] but never returns a query whose content appears in `exclude`.
pub fn generate_disjoint_dataset(
    seed: u64,
    cfg: &DifficultyConfig,
    n: usize,
    exclude: &[Query],
) -> Result<Vec<Query>> {
    use std::collections::HashSet;
    let mut seen: HashSet<_> = exclude.iter().map(Query::content_key).collect();
    let mut out = Vec::with_capacity(n);
    let mut index = 0u64;
    // Guard against configs whose content space is smaller than `n`.
    let limit = (n as u64).saturating_mul(1000).max(10_000);
    while out.len() < n {
        if index >= limit {
            return Err(Error::config(format!(
                "could only draw {} distinct queries out of {n}",
                out.len()
            )));
        }
        let q = generate_indexed_query(seed, index, cfg)?;
        index += 1;
        if seen.insert(q.content_key()) {
            out.push(q);
        }
    }
    Ok(out)
}

pub fn oracle_trace(q: &Query) -> OracleTrace {
    let mut value = q.initial_value;
    let true_values: Vec<u32> = q
        .ops
        .iter()
        .map(|op| {
            value = op.op_kind.apply(value, op.operand, q.modulus);
            value
        })
        .collect();
    OracleTrace {
        final_answer: *true_values.last().expect("queries have at least one op"),
        true_values,
    }
}

/// Whether `claim` is the right result of step `t` (1-based) given the
/// claimed prefix. Correctness is relative to the prefix, not the oracle.
pub fn step_locally_correct(q: &Query, prefix_claims: &[u32], t: usize, claim: u32) -> Result<bool> {
    if t < 1 || t > q.steps() {
        return Err(Error::usage(format!("step index {t} outside [1, {}]", q.steps())));
    }
    if prefix_claims.len() != t - 1 {
        return Err(Error::usage(format!(
            "step {t} needs a prefix of {} claims, got {}",
            t - 1,
            prefix_claims.len()
        )));
    }
    let op = q.ops[t - 1];
    let prev = q.prev_value(prefix_claims, t);
    Ok(op.op_kind.apply(prev, op.operand, q.modulus) == claim)
}

pub fn outcome_correct(q: &Query, final_answer: u32) -> bool {
    oracle_trace(q).final_answer == final_answer
}

/// Ground-truth local step labels (`true` = correct). Evaluation only.
pub fn oracle_step_labels(q: &Query, y: &Trajectory) -> Result<Vec<bool>> {
    if y.step_claims.len() != q.steps() {
        return Err(Error::usage(format!(
            "trajectory has {} steps, query has {}",
            y.step_claims.len(),
            q.steps()
        )));
    }
    (1..=q.steps())
        .map(|t| step_locally_correct(q, &y.step_claims[..t - 1], t, y.step_claims[t - 1]))
        .collect()
}

pub fn write_queries_jsonl<W: Write>(mut w: W, queries: &[Query]) -> Result<()> {
    for q in queries {
        let line = serde_json::to_string(q).map_err(|e| Error::json("query", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<query sink>", e))?;
    }
    Ok(())
}

pub fn read_queries_jsonl<R: BufRead>(r: R) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<query source>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query =
            serde_json::from_str(&line).map_err(|e| Error::json(format!("query line {}", i + 1), e))?;
        q.validate()?;
        out.push(q);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(m: u32, s0: u32, ops: &[(OpKind, u32)]) -> Query {
        Query::new("t", m, s0, ops.iter().map(|&(k, o)| Op::new(k, o)).collect()).unwrap()
    }

    fn traj(claims: &[u32]) -> Trajectory {
        Trajectory::new("t", claims.to_vec()).unwrap()
    }

    #[test]
    fn oracle_examples() {
        use OpKind::*;
        let t = oracle_trace(&q(7, 3, &[(Add, 5), (Mul, 2), (Sub, 4)]));
        assert_eq!(t.true_values, vec![1, 2, 5]);
        assert_eq!(t.final_answer, 5);

        let t = oracle_trace(&q(5, 4, &[(Add, 0)]));
        assert_eq!((t.true_values, t.final_answer), (vec![4], 4));

        let t = oracle_trace(&q(2, 1, &[(Mul, 0), (Add, 1)]));
        assert_eq!((t.true_values, t.final_answer), (vec![0, 1], 1));
    }

    #[test]
    fn sub_is_canonical_residue() {
        assert_eq!(OpKind::Sub.apply(2, 4, 7), 5);
        assert_eq!(OpKind::Sub.apply(0, 6, 7), 1);
        assert_eq!(OpKind::Sub.apply(3, 0, 7), 3);
    }

    #[test]
    fn local_correctness_follows_claimed_prefix() {
        use OpKind::*;
        let query = q(7, 3, &[(Add, 5), (Mul, 2), (Sub, 4)]);
        assert!(step_locally_correct(&query, &[], 1, 1).unwrap());
        assert!(step_locally_correct(&query, &[3], 2, 6).unwrap());
        assert!(!step_locally_correct(&query, &[1], 2, 3).unwrap());
        assert!(step_locally_correct(&query, &[], 4, 0).is_err());
        assert!(step_locally_correct(&query, &[], 0, 0).is_err());
        assert!(step_locally_correct(&query, &[1, 2], 2, 2).is_err());
    }

    #[test]
    fn outcome_examples() {
        use OpKind::*;
        let query = q(7, 3, &[(Add, 5), (Mul, 2), (Sub, 4)]);
        assert!(outcome_correct(&query, 5));
        assert!(!outcome_correct(&query, 4));
        assert!(Query::new("e", 7, 3, vec![]).is_err());
    }

    #[test]
    fn step_label_examples() {
        use OpKind::*;
        let query = q(7, 3, &[(Add, 5), (Mul, 2), (Sub, 4)]);
        assert_eq!(oracle_step_labels(&query, &traj(&[1, 2, 5])).unwrap(), vec![true; 3]);
        // wrong at step 1 (claims 2), consistent afterwards: 2*2=4, 4-4=0
        assert_eq!(
            oracle_step_labels(&query, &traj(&[2, 4, 0])).unwrap(),
            vec![false, true, true]
        );
        assert_eq!(
            oracle_step_labels(&query, &traj(&[1, 2, 6])).unwrap(),
            vec![true, true, false]
        );
        assert!(oracle_step_labels(&query, &traj(&[1, 2])).is_err());
    }

    #[test]
    fn generation_examples() {
        let cfg = DifficultyConfig::default();
        assert_eq!(generate_query(1, &cfg).unwrap(), generate_query(1, &cfg).unwrap());
        let a = serde_json::to_string(&generate_query(1, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_query(1, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);

        let fixed = DifficultyConfig {
            chain_length_range: (3, 3),
            ..cfg.clone()
        };
        for seed in 0..20 {
            assert_eq!(generate_query(seed, &fixed).unwrap().steps(), 3);
        }

        let query = generate_query(1, &cfg).unwrap();
        assert!(query.initial_value < 7 && query.ops.iter().all(|o| o.operand < 7));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = DifficultyConfig::default();
        cfg.op_mix.add = 0.5;
        assert!(matches!(generate_query(0, &cfg), Err(Error::Config(_))));
        let cfg = DifficultyConfig {
            chain_length_range: (0, 2),
            ..Default::default()
        };
        assert!(generate_query(0, &cfg).is_err());
        let cfg = DifficultyConfig {
            modulus: 1,
            ..Default::default()
        };
        assert!(generate_query(0, &cfg).is_err());
    }

    #[test]
    fn disjoint_sets() {
        let cfg = DifficultyConfig {
            modulus: 2,
            chain_length_range: (1, 2),
            ..Default::default()
        };
        // 2 * (3*2) + 2 * (3*2)^2 = 84 distinct contents
        let train = generate_dataset(1, &cfg, 40).unwrap();
        let eval = generate_disjoint_dataset(2, &cfg, 30, &train).unwrap();
        for e in &eval {
            assert!(train.iter().all(|t| t.content_key() != e.content_key()));
        }
        assert!(generate_disjoint_dataset(3, &cfg, 60, &train).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let qs = generate_dataset(5, &DifficultyConfig::default(), 4).unwrap();
        let mut buf = Vec::new();
        write_queries_jsonl(&mut buf, &qs).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 4);
        assert_eq!(read_queries_jsonl(&buf[..]).unwrap(), qs);
    }
}
