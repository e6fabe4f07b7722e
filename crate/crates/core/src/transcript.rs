//! Transcript formats for generator reasoning, stepwise verification and
//! redirection prompts, plus the trigger function and first-point-of-failure
//! localization.
//!
//! Grammar (whitespace between tags is insignificant, tag names are
//! case-sensitive):
//!
//! ```text
//! trajectory   := <think> (<step> "Step t: (a op b) mod m = c" </step>)+ </think>
//!                 <answer> \boxed{INT} </answer>
//! verification := <step_verification>
//!                   (<step> "Step t Analysis: ..." \boxed{CORRECT|INCORRECT} </step>)+
//!                 </step_verification>
//!                 <final_verification> \boxed{CORRECT|INCORRECT} </final_verification>
//! ```
//!
//! Step numbers are 1-based and must match their position. An `INCORRECT`
//! step verdict carries the first reason-code token found in its analysis
//! text, defaulting to `WRONG_VALUE`.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{OpKind, Query};
use crate::error::{Error, Result};
use crate::policy::ReasonCode;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    pub step_claims: Vec<u32>,
    pub final_answer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl Trajectory {
    /// Builds a trajectory whose final answer is its last claim.
    pub fn new(query_id: impl Into<String>, step_claims: Vec<u32>) -> Result<Self> {
        let final_answer = *step_claims
            .last()
            .ok_or_else(|| Error::usage("trajectory needs at least one step"))?;
        Ok(Trajectory {
            query_id: query_id.into(),
            step_claims,
            final_answer,
            raw_text: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.step_claims.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StepVerdict {
    Correct,
    Incorrect(ReasonCode),
}

impl StepVerdict {
    /// Index into the verifier's step head: 0 is CORRECT, then reason codes.
    pub fn index(self) -> usize {
        match self {
            StepVerdict::Correct => 0,
            StepVerdict::Incorrect(code) => 1 + code.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<StepVerdict> {
        match i {
            0 => Some(StepVerdict::Correct),
            _ => ReasonCode::ALL.get(i - 1).map(|&c| StepVerdict::Incorrect(c)),
        }
    }

    pub fn is_correct(self) -> bool {
        matches!(self, StepVerdict::Correct)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepVerdict::Correct => "CORRECT",
            StepVerdict::Incorrect(code) => code.as_str(),
        }
    }

    pub fn parse(s: &str) -> Option<StepVerdict> {
        if s == "CORRECT" {
            return Some(StepVerdict::Correct);
        }
        ReasonCode::parse(s).map(StepVerdict::Incorrect)
    }
}

impl Serialize for StepVerdict {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for StepVerdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        StepVerdict::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown verdict {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FinalVerdict {
    Correct,
    Incorrect,
}

impl FinalVerdict {
    pub fn index(self) -> usize {
        match self {
            FinalVerdict::Correct => 0,
            FinalVerdict::Incorrect => 1,
        }
    }

    pub fn from_index(i: usize) -> FinalVerdict {
        if i == 0 {
            FinalVerdict::Correct
        } else {
            FinalVerdict::Incorrect
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FinalVerdict::Correct => "CORRECT",
            FinalVerdict::Incorrect => "INCORRECT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub step_verdicts: Vec<StepVerdict>,
    pub final_verdict: FinalVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl Verification {
    pub fn new(step_verdicts: Vec<StepVerdict>, final_verdict: FinalVerdict) -> Self {
        Verification {
            step_verdicts,
            final_verdict,
            raw_text: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RedirectionKind {
    Rectify,
    Explore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedirectionSample {
    pub query_id: String,
    /// 1-based step from which sampling resumes.
    pub anchor: usize,
    pub kind: RedirectionKind,
    pub prefix_claims: Vec<u32>,
    pub prefix_verdicts: Vec<StepVerdict>,
    /// Reason code attached at the anchor (guided rectification only).
    pub critique: Option<ReasonCode>,
    pub rendered_context: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FormatErrorKind {
    MissingTag,
    BadBoxed,
    StepCountMismatch,
    ExtraContent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub struct FormatError {
    pub kind: FormatErrorKind,
    /// Byte offset into the parsed text.
    pub position: usize,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "format error {:?} at byte {}", self.kind, self.position)
    }
}

fn ferr<T>(kind: FormatErrorKind, position: usize) -> std::result::Result<T, FormatError> {
    Err(FormatError { kind, position })
}

// ---------------------------------------------------------------------------
// Rendering

pub fn render_problem(q: &Query) -> String {
    let ops: Vec<String> = q
        .ops
        .iter()
        .map(|op| format!("{} {}", op.op_kind.verb(), op.operand))
        .collect();
    format!(
        "Start from {}, then {}. Work modulo {} and report the value after each operation.",
        q.initial_value,
        ops.join(", then "),
        q.modulus
    )
}

fn render_step_body(q: &Query, claims: &[u32], t: usize) -> String {
    let op = q.ops[t - 1];
    format!(
        "Step {t}: ({} {} {}) mod {} = {}",
        q.prev_value(claims, t),
        op.op_kind.symbol(),
        op.operand,
        q.modulus,
        claims[t - 1]
    )
}

pub fn render_trajectory(q: &Query, y: &Trajectory) -> String {
    let mut out = String::from("<think>\n");
    for t in 1..=y.steps() {
        out.push_str("<step>");
        out.push_str(&render_step_body(q, &y.step_claims, t));
        out.push_str("</step>\n");
    }
    out.push_str("</think>\n");
    out.push_str(&format!("<answer>\\boxed{{{}}}</answer>", y.final_answer));
    out
}

fn render_step_analysis(t: usize, verdict: StepVerdict) -> String {
    match verdict {
        StepVerdict::Correct => format!(
            "Step {t} Analysis: the claimed value follows from the previous value. \\boxed{{CORRECT}}"
        ),
        StepVerdict::Incorrect(code) => format!(
            "Step {t} Analysis: {}, the claimed value does not follow from the previous value. \\boxed{{INCORRECT}}",
            code.as_str()
        ),
    }
}

pub fn render_verification(v: &Verification) -> String {
    let mut out = String::from("<step_verification>\n");
    for (i, verdict) in v.step_verdicts.iter().enumerate() {
        out.push_str("<step>");
        out.push_str(&render_step_analysis(i + 1, *verdict));
        out.push_str("</step>\n");
    }
    out.push_str("</step_verification>\n");
    out.push_str(&format!(
        "<final_verification>\\boxed{{{}}}</final_verification>",
        v.final_verdict.as_str()
    ));
    out
}

const GENERATOR_TEMPLATE: &str = "You are a helpful Assistant that solves mathematical problems step-by-step.
You MUST follow this exact format:
1. Start with a <think> section containing your step-by-step reasoning.
2. Inside <think>, each distinct logical step MUST be enclosed in its own <step> </step> tags.
3. After <think>, provide the final answer within <answer> </answer> tags, using the \\boxed{} format.
User: {{prompt}}
Assistant:";

const VERIFIER_TEMPLATE: &str = "System Instruction:
You are a verification assistant specialized in mathematical reasoning. Your task is to carefully evaluate the provided solution step by step, checking for mathematical correctness and logical coherence... You MUST verify EACH <step> block found in the Assistant's solution.

Problem: {problem}
Assistant's Solution: {solution}
Step Count: The Assistant's solution contains {generator_step_count} steps.

Task Guidance:
For each of the {generator_step_count} steps, you MUST provide ONE corresponding verification analysis within a <step> tag inside the <step_verification> section.

Required Format:
<step_verification>
<step>Step 1 Analysis: [Your reasoning]. \\boxed{CORRECT/INCORRECT}</step>
...
</step_verification>
<final_verification>\\boxed{CORRECT/INCORRECT}</final_verification>

Constraint Checklist:
- Analyze EVERY step individually.
- Provide original reasoning, do not copy solution text.
- Each step analysis must end with exactly one \\boxed{} judgment.
- Output ONLY the specified tags.";

const RECTIFY_INSTRUCTION: &str = "You are a mathematical Assistant. You will be shown a problem, a previous attempt, and step-by-step verification feedback. Your task is to correct the last step of previous attempt and continue solving the problem.";
const EXPLORE_INSTRUCTION: &str = "You are a mathematical Assistant. You will be shown a problem, a previous attempt, and step-by-step verification feedback. Your task is to continue solving the problem from the last step of previous attempt.";
const RECTIFY_GUIDANCE: &str =
    "The verification detected the error in the last step. Now you'll correct the error and continue answering.";
const EXPLORE_GUIDANCE: &str = "The verification guided the previous steps. Now you'll continue answering.";

pub fn render_generator_prompt(q: &Query) -> String {
    GENERATOR_TEMPLATE.replace("{{prompt}}", &render_problem(q))
}

pub fn render_verifier_prompt(q: &Query, y: &Trajectory) -> String {
    VERIFIER_TEMPLATE
        .replace("{problem}", &render_problem(q))
        .replace("{solution}", &render_trajectory(q, y))
        .replace("{generator_step_count}", &y.steps().to_string())
}

/// The value 0 when a verdict flags a fallacy, 1 otherwise.
pub fn trigger(verdict: StepVerdict) -> u8 {
    match verdict {
        StepVerdict::Correct => 1,
        StepVerdict::Incorrect(_) => 0,
    }
}

/// First point of failure: the smallest 1-based step index whose verdict
/// triggers, or `None` when every step is judged correct.
pub fn locate_fpf(v: &Verification) -> Option<usize> {
    v.step_verdicts
        .iter()
        .position(|&verdict| trigger(verdict) == 0)
        .map(|i| i + 1)
}

/// Builds the redirection sample for `anchor` given the first point of
/// failure `t_star`. The feedback body interleaves the `anchor - 1` verified
/// prefix steps with their verdicts. The flagged step's reason code rides
/// along in `critique` for guided rectification only; unguided samples omit
/// all verifier feedback.
pub fn render_redirection_context(
    q: &Query,
    y: &Trajectory,
    v: &Verification,
    anchor: usize,
    t_star: usize,
    guided: bool,
) -> Result<RedirectionSample> {
    if anchor < 1 || anchor > t_star {
        return Err(Error::usage(format!("anchor {anchor} outside [1, t* = {t_star}]")));
    }
    if t_star > y.steps() || v.step_verdicts.len() != y.steps() || y.steps() != q.steps() {
        return Err(Error::usage("t*, trajectory, verification and query disagree on step count"));
    }
    let kind = if anchor == t_star {
        RedirectionKind::Rectify
    } else {
        RedirectionKind::Explore
    };
    let critique = match (kind, guided, v.step_verdicts[t_star - 1]) {
        (RedirectionKind::Rectify, true, StepVerdict::Incorrect(code)) => Some(code),
        _ => None,
    };

    let mut body = Vec::new();
    for s in 1..anchor {
        body.push(format!("<step>{}</step>", render_step_body(q, &y.step_claims, s)));
        if guided {
            body.push(format!("<step>{}</step>", render_step_analysis(s, v.step_verdicts[s - 1])));
        }
    }
    let mut text = String::from("System Instruction:\n");
    text.push_str(match kind {
        RedirectionKind::Rectify => RECTIFY_INSTRUCTION,
        RedirectionKind::Explore => EXPLORE_INSTRUCTION,
    });
    text.push_str("\n\nProblem: ");
    text.push_str(&render_problem(q));
    text.push_str("\n[Previous Attempt & Feedback]:\n");
    text.push_str(&body.join("\n"));
    text.push_str("\n\nTask Guidance:\n");
    text.push_str(match kind {
        RedirectionKind::Rectify => RECTIFY_GUIDANCE,
        RedirectionKind::Explore => EXPLORE_GUIDANCE,
    });
    text.push_str("\n\nYour Solution:");

    Ok(RedirectionSample {
        query_id: q.id.clone(),
        anchor,
        kind,
        prefix_claims: y.step_claims[..anchor - 1].to_vec(),
        prefix_verdicts: v.step_verdicts[..anchor - 1].to_vec(),
        critique,
        rendered_context: text,
    })
}

// ---------------------------------------------------------------------------
// Parsing

const KNOWN_TAGS: [&str; 5] = ["think", "step", "answer", "step_verification", "final_verification"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok<'a> {
    Open(&'a str),
    Close(&'a str),
    Text(&'a str),
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^<(/?)([a-z_]+)>").unwrap())
}

/// Splits into known tags and the text between them. A `<` that does not
/// start a known tag stays part of the surrounding text.
fn tokenize(text: &str) -> Vec<(Tok<'_>, usize)> {
    let mut toks = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    while let Some(off) = text[i..].find('<') {
        let at = i + off;
        match tag_re().captures(&text[at..]) {
            Some(c) if KNOWN_TAGS.contains(&c.get(2).unwrap().as_str()) => {
                if at > text_start {
                    toks.push((Tok::Text(&text[text_start..at]), text_start));
                }
                let name = c.get(2).unwrap().as_str();
                let tok = if c.get(1).unwrap().as_str().is_empty() {
                    Tok::Open(name)
                } else {
                    Tok::Close(name)
                };
                toks.push((tok, at));
                i = at + c.get(0).unwrap().end();
                text_start = i;
            }
            _ => i = at + 1,
        }
    }
    if text_start < text.len() {
        toks.push((Tok::Text(&text[text_start..]), text_start));
    }
    toks
}

struct Cursor<'a> {
    toks: Vec<(Tok<'a>, usize)>,
    pos: usize,
    len: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor {
            toks: tokenize(text),
            pos: 0,
            len: text.len(),
        }
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.len, |t| t.1)
    }

    fn skip_ws(&mut self) {
        while let Some((Tok::Text(s), _)) = self.toks.get(self.pos) {
            if s.trim().is_empty() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<Tok<'a>> {
        self.toks.get(self.pos).map(|t| t.0)
    }

    /// Consumes the expected tag, skipping whitespace first.
    fn expect(&mut self, want: Tok<'static>) -> std::result::Result<(), FormatError> {
        self.skip_ws();
        let at = self.offset();
        match self.peek() {
            Some(t) if t == want => {
                self.pos += 1;
                Ok(())
            }
            _ => ferr(FormatErrorKind::MissingTag, at),
        }
    }

    /// Text directly inside an element; empty when the next token is a tag.
    fn inner_text(&mut self) -> (&'a str, usize) {
        match self.toks.get(self.pos) {
            Some((Tok::Text(s), at)) => {
                self.pos += 1;
                (s, *at)
            }
            _ => ("", self.offset()),
        }
    }

    fn expect_end(&mut self) -> std::result::Result<(), FormatError> {
        self.skip_ws();
        if self.pos < self.toks.len() {
            return ferr(FormatErrorKind::ExtraContent, self.offset());
        }
        Ok(())
    }
}

const BOXED: &str = "\\boxed{";

/// Finds the single `\boxed{...}` in `s` and returns (payload, payload
/// offset, byte range of the whole box within `s`).
fn single_boxed(s: &str, base: usize) -> std::result::Result<(&str, usize, std::ops::Range<usize>), FormatError> {
    let mut hits = s.match_indices(BOXED);
    let (start, _) = match hits.next() {
        Some(h) => h,
        None => return ferr(FormatErrorKind::BadBoxed, base),
    };
    if let Some((second, _)) = hits.next() {
        return ferr(FormatErrorKind::BadBoxed, base + second);
    }
    let payload_start = start + BOXED.len();
    let close = match s[payload_start..].find('}') {
        Some(c) => payload_start + c,
        None => return ferr(FormatErrorKind::BadBoxed, base + start),
    };
    Ok((&s[payload_start..close], base + payload_start, start..close + 1))
}

fn step_body_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*Step\s+(\d+)\s*:\s*\(\s*(\d+)\s*([+*-])\s*(\d+)\s*\)\s*mod\s*(\d+)\s*=\s*(\d+)\s*$")
            .unwrap()
    })
}

fn analysis_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*Step\s+(\d+)\s+Analysis\s*:").unwrap())
}

fn reason_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(WRONG_VALUE|SKIPPED_OPERAND|SIGN_ERROR|OFF_BY_MODULUS)\b").unwrap())
}

fn parse_number(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

/// Parses a generator transcript. Step count is whatever the text holds;
/// use [`parse_trajectory_for`] to also check it against a query.
pub fn parse_trajectory(query_id: &str, text: &str) -> std::result::Result<Trajectory, FormatError> {
    let mut cur = Cursor::new(text);
    cur.expect(Tok::Open("think"))?;
    let mut claims = Vec::new();
    loop {
        cur.skip_ws();
        if cur.peek() != Some(Tok::Open("step")) {
            break;
        }
        cur.pos += 1;
        let (body, at) = cur.inner_text();
        let caps = step_body_re()
            .captures(body)
            .ok_or(FormatError {
                kind: FormatErrorKind::ExtraContent,
                position: at,
            })?;
        let numbers: Option<Vec<u32>> = [1, 2, 4, 5, 6].iter().map(|&g| parse_number(&caps[g])).collect();
        let numbers = numbers.ok_or(FormatError {
            kind: FormatErrorKind::ExtraContent,
            position: at,
        })?;
        debug_assert!(OpKind::from_symbol(caps[3].chars().next().unwrap()).is_some());
        if numbers[0] as usize != claims.len() + 1 {
            return ferr(FormatErrorKind::StepCountMismatch, at);
        }
        claims.push(numbers[4]);
        cur.expect(Tok::Close("step"))?;
    }
    if claims.is_empty() {
        return ferr(FormatErrorKind::StepCountMismatch, cur.offset());
    }
    cur.expect(Tok::Close("think"))?;
    cur.expect(Tok::Open("answer"))?;
    let (body, at) = cur.inner_text();
    let (payload, payload_at, range) = single_boxed(body, at)?;
    if !body[..range.start].trim().is_empty() || !body[range.end..].trim().is_empty() {
        return ferr(FormatErrorKind::ExtraContent, at);
    }
    let answer = parse_number(payload.trim()).ok_or(FormatError {
        kind: FormatErrorKind::BadBoxed,
        position: payload_at,
    })?;
    if Some(&answer) != claims.last() {
        return ferr(FormatErrorKind::BadBoxed, payload_at);
    }
    cur.expect(Tok::Close("answer"))?;
    cur.expect_end()?;
    Ok(Trajectory {
        query_id: query_id.to_string(),
        step_claims: claims,
        final_answer: answer,
        raw_text: Some(text.to_string()),
    })
}

/// [`parse_trajectory`] plus a check that the step count matches `q`.
pub fn parse_trajectory_for(q: &Query, text: &str) -> std::result::Result<Trajectory, FormatError> {
    let y = parse_trajectory(&q.id, text)?;
    if y.steps() != q.steps() {
        return ferr(FormatErrorKind::StepCountMismatch, text.len());
    }
    Ok(y)
}

pub fn parse_verification(text: &str, expected_steps: usize) -> std::result::Result<Verification, FormatError> {
    let mut cur = Cursor::new(text);
    cur.expect(Tok::Open("step_verification"))?;
    let mut verdicts = Vec::new();
    let mut count_error_at = None;
    loop {
        cur.skip_ws();
        if cur.peek() != Some(Tok::Open("step")) {
            break;
        }
        cur.pos += 1;
        let (body, at) = cur.inner_text();
        let header = analysis_re().captures(body).ok_or(FormatError {
            kind: FormatErrorKind::ExtraContent,
            position: at,
        })?;
        let number = parse_number(&header[1]);
        if number != Some(verdicts.len() as u32 + 1) && count_error_at.is_none() {
            count_error_at = Some(at);
        }
        let analysis_start = header.get(0).unwrap().end();
        let (payload, payload_at, range) = single_boxed(body, at)?;
        if range.start < analysis_start || !body[range.end..].trim().is_empty() {
            return ferr(FormatErrorKind::BadBoxed, payload_at);
        }
        let verdict = match payload {
            "CORRECT" => StepVerdict::Correct,
            "INCORRECT" => {
                let analysis = &body[analysis_start..range.start];
                let code = reason_re()
                    .captures(analysis)
                    .and_then(|c| ReasonCode::parse(&c[1]))
                    .unwrap_or(ReasonCode::WrongValue);
                StepVerdict::Incorrect(code)
            }
            _ => return ferr(FormatErrorKind::BadBoxed, payload_at),
        };
        verdicts.push(verdict);
        cur.expect(Tok::Close("step"))?;
    }
    cur.expect(Tok::Close("step_verification"))?;
    cur.expect(Tok::Open("final_verification"))?;
    let (body, at) = cur.inner_text();
    let (payload, payload_at, range) = single_boxed(body, at)?;
    if !body[..range.start].trim().is_empty() || !body[range.end..].trim().is_empty() {
        return ferr(FormatErrorKind::ExtraContent, at);
    }
    let final_verdict = match payload {
        "CORRECT" => FinalVerdict::Correct,
        "INCORRECT" => FinalVerdict::Incorrect,
        _ => return ferr(FormatErrorKind::BadBoxed, payload_at),
    };
    cur.expect(Tok::Close("final_verification"))?;
    cur.expect_end()?;
    if let Some(at) = count_error_at {
        return ferr(FormatErrorKind::StepCountMismatch, at);
    }
    if verdicts.len() != expected_steps {
        return ferr(FormatErrorKind::StepCountMismatch, 0);
    }
    Ok(Verification {
        step_verdicts: verdicts,
        final_verdict,
        raw_text: Some(text.to_string()),
    })
}
