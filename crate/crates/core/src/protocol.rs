//! Wire formats exchanged with thinker and expert models.
//!
//! The thinker answers with three tagged blocks, always in this order:
//!
//! ```text
//! <think>reasoning</think>
//! <score>{"semantic": 7, "quality": 9}</score>
//! <answer>refined instruction</answer>
//! ```
//!
//! The expert answers with a JSON object carrying `is_satisfied`, `reason`
//! and `new_rewritten_prompt`, possibly wrapped in prose or code fences.
//!
//! Everything here is a pure function of its input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Lowest score a thinker or judge may emit.
pub const SCORE_MIN: f64 = 0.0;
/// Highest score a thinker or judge may emit.
pub const SCORE_MAX: f64 = 10.0;

pub(crate) fn score_in_range(x: f64) -> bool {
    x.is_finite() && (SCORE_MIN..=SCORE_MAX).contains(&x)
}

/// One of the three tagged blocks of a thinker answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Think,
    Score,
    Answer,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Think, Block::Score, Block::Answer];

    pub fn name(self) -> &'static str {
        match self {
            Block::Think => "think",
            Block::Score => "score",
            Block::Answer => "answer",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            Block::Think => "<think>",
            Block::Score => "<score>",
            Block::Answer => "<answer>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            Block::Think => "</think>",
            Block::Score => "</score>",
            Block::Answer => "</answer>",
        }
    }

    fn from_name(s: &str) -> Option<Block> {
        Block::ALL.into_iter().find(|b| b.name() == s)
    }
}

/// A single defect in a thinker answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum Violation {
    #[error("missing {} block", .0.name())]
    MissingTag(Block),
    #[error("duplicate {} block", .0.name())]
    DuplicateTag(Block),
    #[error("blocks are not in think, score, answer order")]
    TagOrder,
    #[error("score block is not a JSON object with numeric semantic and quality")]
    MalformedScore,
    #[error("score outside [0, 10]")]
    ScoreOutOfRange,
    #[error("answer block is empty")]
    EmptyAnswer,
}

impl Violation {
    /// Stable kebab-case code used in records and logs.
    pub fn code(&self) -> String {
        match self {
            Violation::MissingTag(b) => format!("missing-{}", b.name()),
            Violation::DuplicateTag(b) => format!("duplicate-{}", b.name()),
            Violation::TagOrder => "tag-order".into(),
            Violation::MalformedScore => "malformed-score".into(),
            Violation::ScoreOutOfRange => "score-out-of-range".into(),
            Violation::EmptyAnswer => "empty-answer".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown violation code `{0}`")]
pub struct UnknownViolationCode(pub String);

impl FromStr for Violation {
    type Err = UnknownViolationCode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parsed = match s {
            "tag-order" => Some(Violation::TagOrder),
            "malformed-score" => Some(Violation::MalformedScore),
            "score-out-of-range" => Some(Violation::ScoreOutOfRange),
            "empty-answer" => Some(Violation::EmptyAnswer),
            _ => {
                if let Some(name) = s.strip_prefix("missing-") {
                    Block::from_name(name).map(Violation::MissingTag)
                } else if let Some(name) = s.strip_prefix("duplicate-") {
                    Block::from_name(name).map(Violation::DuplicateTag)
                } else {
                    None
                }
            }
        };
        parsed.ok_or_else(|| UnknownViolationCode(s.to_string()))
    }
}

impl Serialize for Violation {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for Violation {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parsed thinker answer: critique, two scores and the refined instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinkerVerdict {
    pub reasoning: String,
    pub semantic_score: f64,
    pub quality_score: f64,
    pub refined_instruction: String,
}

/// Reasons a verdict cannot be built or serialized canonically.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("score outside [0, 10]")]
    ScoreOutOfRange,
    #[error("refined instruction is empty")]
    EmptyInstruction,
    #[error("text field contains the reserved tag `{0}`")]
    ReservedTag(&'static str),
}

impl ThinkerVerdict {
    /// Builds a verdict in canonical form: text fields trimmed, scores in
    /// range, no protocol tags inside free text.
    pub fn new(
        reasoning: impl Into<String>,
        semantic_score: f64,
        quality_score: f64,
        refined_instruction: impl Into<String>,
    ) -> Result<Self, VerdictError> {
        let v = ThinkerVerdict {
            reasoning: reasoning.into().trim().to_string(),
            semantic_score,
            quality_score,
            refined_instruction: refined_instruction.into().trim().to_string(),
        };
        v.validate()?;
        Ok(v)
    }

    /// Checks the invariants under which `parse(serialize(v)) == v`.
    pub fn validate(&self) -> Result<(), VerdictError> {
        if !score_in_range(self.semantic_score) || !score_in_range(self.quality_score) {
            return Err(VerdictError::ScoreOutOfRange);
        }
        if self.refined_instruction.trim().is_empty() {
            return Err(VerdictError::EmptyInstruction);
        }
        for text in [&self.reasoning, &self.refined_instruction] {
            if let Some(tag) = reserved_tag_in(text) {
                return Err(VerdictError::ReservedTag(tag));
            }
        }
        Ok(())
    }

    pub fn aggregate(&self, rule: ScoreAggregate) -> f64 {
        rule.apply(self.semantic_score, self.quality_score)
    }
}

fn reserved_tag_in(text: &str) -> Option<&'static str> {
    Block::ALL
        .into_iter()
        .flat_map(|b| [b.open_tag(), b.close_tag()])
        .find(|tag| text.contains(tag))
}

/// How the semantic and quality sub-scores collapse into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregate {
    #[default]
    Mean,
    Min,
}

impl ScoreAggregate {
    pub fn apply(self, semantic: f64, quality: f64) -> f64 {
        match self {
            ScoreAggregate::Mean => (semantic + quality) / 2.0,
            ScoreAggregate::Min => semantic.min(quality),
        }
    }
}

/// Result of checking a raw thinker answer against the tagged format.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FormatJudgment {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Default, Clone, Copy)]
struct TagSeen {
    count: usize,
    first: usize,
}

impl TagSeen {
    fn record(&mut self, pos: usize) {
        if self.count == 0 {
            self.first = pos;
        }
        self.count += 1;
    }
}

#[derive(Debug, Default)]
struct TagScan {
    open: [TagSeen; 3],
    close: [TagSeen; 3],
}

impl TagScan {
    /// Single left-to-right pass; each `<` is compared against six short
    /// constant tags, so the scan is linear in the input length.
    fn run(raw: &str) -> TagScan {
        let mut scan = TagScan::default();
        let bytes = raw.as_bytes();
        for (pos, &b) in bytes.iter().enumerate() {
            if b != b'<' {
                continue;
            }
            let rest = &bytes[pos..];
            for (i, block) in Block::ALL.into_iter().enumerate() {
                if rest.starts_with(block.open_tag().as_bytes()) {
                    scan.open[i].record(pos);
                } else if rest.starts_with(block.close_tag().as_bytes()) {
                    scan.close[i].record(pos);
                }
            }
        }
        scan
    }

    /// Byte range of the block's content when exactly one open and one close
    /// tag exist, in that order.
    fn span(&self, block: Block) -> Option<(usize, usize)> {
        let i = block as usize;
        let (o, c) = (self.open[i], self.close[i]);
        if o.count == 1 && c.count == 1 && o.first < c.first {
            Some((o.first + block.open_tag().len(), c.first))
        } else {
            None
        }
    }
}

enum ScoreBlock {
    Ok(f64, f64),
    Malformed,
    OutOfRange,
}

fn read_score_block(content: &str) -> ScoreBlock {
    let value: Value = match serde_json::from_str(content.trim()) {
        Ok(v) => v,
        Err(_) => return ScoreBlock::Malformed,
    };
    let pair = match &value {
        Value::Object(map) => map
            .get("semantic")
            .and_then(Value::as_f64)
            .zip(map.get("quality").and_then(Value::as_f64)),
        // Bare `[semantic, quality]` lists are also accepted.
        Value::Array(items) if items.len() == 2 => items[0].as_f64().zip(items[1].as_f64()),
        _ => None,
    };
    match pair {
        None => ScoreBlock::Malformed,
        Some((s, q)) if score_in_range(s) && score_in_range(q) => ScoreBlock::Ok(s, q),
        Some(_) => ScoreBlock::OutOfRange,
    }
}

struct Analysis {
    violations: Vec<Violation>,
    verdict: Option<ThinkerVerdict>,
}

fn analyze(raw: &str) -> Analysis {
    let scan = TagScan::run(raw);
    let mut violations = Vec::new();

    for block in Block::ALL {
        let i = block as usize;
        if scan.open[i].count == 0 || scan.close[i].count == 0 {
            violations.push(Violation::MissingTag(block));
        }
    }
    for block in Block::ALL {
        let i = block as usize;
        if scan.open[i].count > 1 || scan.close[i].count > 1 {
            violations.push(Violation::DuplicateTag(block));
        }
    }

    let unique = Block::ALL
        .into_iter()
        .all(|b| scan.open[b as usize].count == 1 && scan.close[b as usize].count == 1);
    let inverted = Block::ALL.into_iter().any(|b| {
        let i = b as usize;
        scan.open[i].count == 1 && scan.close[i].count == 1 && scan.close[i].first < scan.open[i].first
    });
    let out_of_sequence = unique && {
        let positions = [
            scan.open[0].first,
            scan.close[0].first,
            scan.open[1].first,
            scan.close[1].first,
            scan.open[2].first,
            scan.close[2].first,
        ];
        positions.windows(2).any(|w| w[0] >= w[1])
    };
    if inverted || out_of_sequence {
        violations.push(Violation::TagOrder);
    }

    let mut scores = None;
    if let Some((start, end)) = scan.span(Block::Score) {
        match read_score_block(&raw[start..end]) {
            ScoreBlock::Ok(s, q) => scores = Some((s, q)),
            ScoreBlock::Malformed => violations.push(Violation::MalformedScore),
            ScoreBlock::OutOfRange => violations.push(Violation::ScoreOutOfRange),
        }
    }
    let answer = scan.span(Block::Answer).map(|(s, e)| raw[s..e].trim());
    if matches!(answer, Some(a) if a.is_empty()) {
        violations.push(Violation::EmptyAnswer);
    }

    let verdict = if violations.is_empty() {
        let (ts, te) = scan.span(Block::Think).expect("validated think span");
        let (semantic_score, quality_score) = scores.expect("validated score block");
        Some(ThinkerVerdict {
            reasoning: raw[ts..te].trim().to_string(),
            semantic_score,
            quality_score,
            refined_instruction: answer.expect("validated answer span").to_string(),
        })
    } else {
        None
    };
    Analysis { violations, verdict }
}

/// Parses a tagged thinker answer, failing with the first violation found.
pub fn parse_thinker_output(raw: &str) -> Result<ThinkerVerdict, Violation> {
    let Analysis { violations, verdict } = analyze(raw);
    match verdict {
        Some(v) => Ok(v),
        None => Err(violations[0]),
    }
}

/// Lists every defect of a raw thinker answer.
pub fn judge_format(raw: &str) -> FormatJudgment {
    let Analysis { violations, .. } = analyze(raw);
    FormatJudgment {
        valid: violations.is_empty(),
        violations,
    }
}

/// Formats a score so that integral values print without a fraction and
/// everything else uses the shortest round-tripping decimal.
pub(crate) fn format_score(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Canonical tagged form of a verdict.
pub fn serialize_thinker_output(v: &ThinkerVerdict) -> String {
    format!(
        "<think>{}</think>\n<score>{{\"semantic\": {}, \"quality\": {}}}</score>\n<answer>{}</answer>",
        v.reasoning,
        format_score(v.semantic_score),
        format_score(v.quality_score),
        v.refined_instruction
    )
}

/// The expert's stop/continue decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertVerdict {
    pub is_satisfied: bool,
    pub reason: String,
    pub new_rewritten_prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExpertParseError {
    #[error("no JSON object with an `is_satisfied` key")]
    NoVerdictObject,
    #[error("field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("is_satisfied = {is_satisfied} contradicts new_rewritten_prompt presence")]
    Inconsistent { is_satisfied: bool },
}

/// First well-formed JSON object in `raw` accepted by `wanted`, ignoring
/// surrounding prose and code fences.
fn first_object_where(raw: &str, wanted: impl Fn(&Map<String, Value>) -> bool) -> Option<Map<String, Value>> {
    raw.match_indices('{').find_map(|(pos, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) if wanted(&map) => Some(map),
            _ => None,
        }
    })
}

fn first_verdict_object(raw: &str) -> Option<Map<String, Value>> {
    first_object_where(raw, |m| m.contains_key("is_satisfied"))
}

/// Reads `(semantic, quality)` from a judge response: the score block of a
/// tagged answer if there is one, otherwise the first JSON object carrying
/// both keys.
pub fn parse_judge_scores(raw: &str) -> Result<(f64, f64), Violation> {
    let scan = TagScan::run(raw);
    if let Some((start, end)) = scan.span(Block::Score) {
        return match read_score_block(&raw[start..end]) {
            ScoreBlock::Ok(s, q) => Ok((s, q)),
            ScoreBlock::Malformed => Err(Violation::MalformedScore),
            ScoreBlock::OutOfRange => Err(Violation::ScoreOutOfRange),
        };
    }
    let map = first_object_where(raw, |m| m.contains_key("semantic") && m.contains_key("quality"))
        .ok_or(Violation::MissingTag(Block::Score))?;
    match read_score_block(&Value::Object(map).to_string()) {
        ScoreBlock::Ok(s, q) => Ok((s, q)),
        ScoreBlock::Malformed => Err(Violation::MalformedScore),
        ScoreBlock::OutOfRange => Err(Violation::ScoreOutOfRange),
    }
}

/// Parses the expert's JSON verdict out of free-form text.
pub fn parse_expert_output(raw: &str) -> Result<ExpertVerdict, ExpertParseError> {
    let map = first_verdict_object(raw).ok_or(ExpertParseError::NoVerdictObject)?;
    let is_satisfied =
        map.get("is_satisfied")
            .and_then(Value::as_bool)
            .ok_or_else(|| ExpertParseError::InvalidField {
                field: "is_satisfied",
                reason: "expected a boolean".into(),
            })?;
    let reason = match map.get("reason") {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(Value::Null) | None => String::new(),
        Some(_) => {
            return Err(ExpertParseError::InvalidField {
                field: "reason",
                reason: "expected a string".into(),
            })
        }
    };
    let prompt = match map.get("new_rewritten_prompt") {
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Some(Value::String(_)) | Some(Value::Null) | None => None,
        Some(_) => {
            return Err(ExpertParseError::InvalidField {
                field: "new_rewritten_prompt",
                reason: "expected a string or null".into(),
            })
        }
    };
    if is_satisfied == prompt.is_some() {
        return Err(ExpertParseError::Inconsistent { is_satisfied });
    }
    Ok(ExpertVerdict {
        is_satisfied,
        reason,
        new_rewritten_prompt: prompt,
    })
}

/// Canonical JSON form of an expert verdict.
pub fn serialize_expert_output(v: &ExpertVerdict) -> String {
    serde_json::to_string(v).expect("expert verdict serializes")
}

impl fmt::Display for FormatJudgment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return f.write_str("valid");
        }
        let codes: Vec<String> = self.violations.iter().map(Violation::code).collect();
        write!(f, "invalid [{}]", codes.join(", "))
    }
}
