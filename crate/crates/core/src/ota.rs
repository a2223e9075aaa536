//! Structured-response grammar and the composite reward.
//!
//! A well-formed response is exactly `<observation> .. </observation>
//! <think> .. </think> <answer> .. </answer>`: all three blocks, in that
//! order, bodies free of tag tokens, nothing but whitespace outside the
//! blocks. The format reward is the strict indicator of that grammar; the
//! accuracy reward scores the extracted answer against the gold label and is
//! forced to zero whenever the format check fails, so no malformed response
//! can collect partial credit.

use crate::geometry::MotionPrimitive;
use crate::vocab::{TokenId, Vocabulary};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;
use thiserror::Error;

/// The six structure tags, each a single atomic token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    ObservationOpen,
    ObservationClose,
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::ObservationOpen,
        Tag::ObservationClose,
        Tag::ThinkOpen,
        Tag::ThinkClose,
        Tag::AnswerOpen,
        Tag::AnswerClose,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Tag::ObservationOpen => "<observation>",
            Tag::ObservationClose => "</observation>",
            Tag::ThinkOpen => "<think>",
            Tag::ThinkClose => "</think>",
            Tag::AnswerOpen => "<answer>",
            Tag::AnswerClose => "</answer>",
        }
    }

    pub fn from_text(s: &str) -> Option<Tag> {
        Tag::ALL.iter().copied().find(|t| t.text() == s)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.text())
    }
}

/// Opener/closer pairs in required order.
const BLOCKS: [(Tag, Tag); 3] = [
    (Tag::ObservationOpen, Tag::ObservationClose),
    (Tag::ThinkOpen, Tag::ThinkClose),
    (Tag::AnswerOpen, Tag::AnswerClose),
];

const BLOCK_NAMES: [&str; 3] = ["observation", "think", "answer"];

/// First grammar violation found in a response.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatViolation {
    #[error("missing tag {0}")]
    MissingTag(Tag),
    #[error("expected {expected} but found {found}")]
    WrongOrder { expected: Tag, found: Tag },
    #[error("tag {found} inside the {inside} body")]
    NestedTag { found: Tag, inside: &'static str },
    #[error("content outside any block: {0:?}")]
    StrayContent(String),
    #[error("trailing content after </answer>: {0:?}")]
    TrailingContent(String),
}

/// A parsed response; `raw` keeps the exact input tokens so serialization
/// round-trips.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredResponse {
    pub observation: Vec<String>,
    pub think: Vec<String>,
    pub answer: Vec<String>,
    pub raw: Vec<String>,
}

impl StructuredResponse {
    /// Reassembles the canonical token sequence; equals `raw` for any value
    /// produced by the parser.
    pub fn serialize_tokens(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.raw.len());
        for (body, (open, close)) in
            [&self.observation, &self.think, &self.answer].into_iter().zip(BLOCKS)
        {
            out.push(open.text().to_owned());
            out.extend(body.iter().cloned());
            out.push(close.text().to_owned());
        }
        out
    }
}

/// Parses a token sequence against the strict three-block grammar,
/// reporting the first violation.
pub fn parse_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<StructuredResponse, FormatViolation> {
    enum State {
        Open(usize),
        Body(usize),
        Done,
    }
    let mut bodies: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut state = State::Open(0);
    for (idx, tok) in tokens.iter().enumerate() {
        let text = tok.as_ref();
        let tag = Tag::from_text(text);
        match state {
            State::Open(b) => {
                let expected = BLOCKS[b].0;
                match tag {
                    Some(t) if t == expected => state = State::Body(b),
                    Some(t) => {
                        // If the expected opener still shows up later the
                        // blocks are merely reordered; otherwise it is absent.
                        let appears_later = tokens[idx + 1..]
                            .iter()
                            .any(|s| Tag::from_text(s.as_ref()) == Some(expected));
                        return Err(if appears_later {
                            FormatViolation::WrongOrder { expected, found: t }
                        } else {
                            FormatViolation::MissingTag(expected)
                        });
                    }
                    None => return Err(FormatViolation::StrayContent(text.to_owned())),
                }
            }
            State::Body(b) => match tag {
                Some(t) if t == BLOCKS[b].1 => {
                    state = if b == 2 { State::Done } else { State::Open(b + 1) };
                }
                Some(t) => {
                    return Err(FormatViolation::NestedTag { found: t, inside: BLOCK_NAMES[b] })
                }
                None => bodies[b].push(text.to_owned()),
            },
            State::Done => return Err(FormatViolation::TrailingContent(text.to_owned())),
        }
    }
    match state {
        State::Done => {
            let [observation, think, answer] = bodies;
            let raw = tokens.iter().map(|t| t.as_ref().to_owned()).collect();
            Ok(StructuredResponse { observation, think, answer, raw })
        }
        State::Open(b) => Err(FormatViolation::MissingTag(BLOCKS[b].0)),
        State::Body(b) => Err(FormatViolation::MissingTag(BLOCKS[b].1)),
    }
}

/// Splits free text into parser tokens: tag literals become atomic tokens
/// even without surrounding whitespace; everything else splits on
/// whitespace.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let hit = Tag::ALL
            .iter()
            .filter_map(|t| rest.find(t.text()).map(|pos| (pos, *t)))
            .min_by_key(|&(pos, _)| pos);
        match hit {
            Some((pos, tag)) => {
                out.extend(rest[..pos].split_whitespace().map(str::to_owned));
                out.push(tag.text().to_owned());
                rest = &rest[pos + tag.text().len()..];
            }
            None => {
                out.extend(rest.split_whitespace().map(str::to_owned));
                break;
            }
        }
    }
    out
}

/// Parses a free-text response.
pub fn parse(text: &str) -> Result<StructuredResponse, FormatViolation> {
    parse_tokens(&tokenize_text(text))
}

/// Strict binary format reward over tokens.
pub fn format_reward<S: AsRef<str>>(tokens: &[S]) -> f64 {
    if parse_tokens(tokens).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// Strict binary format reward over free text.
pub fn format_reward_text(text: &str) -> f64 {
    format_reward(&tokenize_text(text))
}

/// What an answer body can resolve to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanonicalAnswer {
    Motion(MotionPrimitive),
    Yes,
    No,
}

impl CanonicalAnswer {
    fn from_canonical(s: &str) -> Option<CanonicalAnswer> {
        match s {
            "yes" => Some(CanonicalAnswer::Yes),
            "no" => Some(CanonicalAnswer::No),
            other => MotionPrimitive::from_phrase(other).map(CanonicalAnswer::Motion),
        }
    }
}

#[derive(Debug, Error)]
pub enum SynonymError {
    #[error("line {line}: expected \"surface -> canonical\", got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown canonical answer {text:?}")]
    UnknownCanonical { line: usize, text: String },
    #[error("line {line}: duplicate surface form {text:?}")]
    DuplicateSurface { line: usize, text: String },
}

/// Case-insensitive surface-form table mapping answer text to canonical
/// answers.
#[derive(Debug, Clone)]
pub struct SynonymTable {
    map: HashMap<String, CanonicalAnswer>,
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

static DEFAULT_TABLE: OnceLock<SynonymTable> = OnceLock::new();

impl SynonymTable {
    /// Parses "surface -> canonical" lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<SynonymTable, SynonymError> {
        let mut map = HashMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (surface, canonical) = trimmed
                .split_once("->")
                .ok_or_else(|| SynonymError::BadLine { line, text: trimmed.to_owned() })?;
            let surface = normalize(surface);
            if surface.is_empty() {
                return Err(SynonymError::BadLine { line, text: trimmed.to_owned() });
            }
            let canonical = CanonicalAnswer::from_canonical(canonical.trim()).ok_or_else(|| {
                SynonymError::UnknownCanonical { line, text: canonical.trim().to_owned() }
            })?;
            if map.insert(surface.clone(), canonical).is_some() {
                return Err(SynonymError::DuplicateSurface { line, text: surface });
            }
        }
        Ok(SynonymTable { map })
    }

    /// The built-in table; covers every label phrase plus yes/no with
    /// several surface forms each.
    pub fn builtin() -> &'static SynonymTable {
        DEFAULT_TABLE.get_or_init(|| {
            SynonymTable::parse(include_str!("resources/synonyms.txt"))
                .expect("built-in synonym table parses")
        })
    }

    pub fn lookup(&self, surface: &str) -> Option<CanonicalAnswer> {
        self.map.get(&normalize(surface)).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Surface forms mapping to `answer`.
    pub fn surfaces_of(&self, answer: CanonicalAnswer) -> Vec<&str> {
        let mut v: Vec<&str> =
            self.map.iter().filter(|(_, &a)| a == answer).map(|(s, _)| s.as_str()).collect();
        v.sort_unstable();
        v
    }
}

/// Resolves a parsed response's answer body through the synonym table;
/// `None` when the text matches nothing.
pub fn extract_answer(resp: &StructuredResponse, table: &SynonymTable) -> Option<CanonicalAnswer> {
    table.lookup(&resp.answer.join(" "))
}

/// Accuracy reward: 1.0 for the gold label, `wrong_penalty` for anything
/// else (including unrecognized answers), and a hard 0.0 when the response
/// is malformed. `wrong_penalty` must be nonpositive.
pub fn accuracy_reward<S: AsRef<str>>(
    tokens: &[S],
    gold: MotionPrimitive,
    wrong_penalty: f64,
    table: &SynonymTable,
) -> f64 {
    assert!(wrong_penalty <= 0.0, "wrong_penalty must be nonpositive");
    match parse_tokens(tokens) {
        Err(_) => 0.0,
        Ok(resp) => match extract_answer(&resp, table) {
            Some(CanonicalAnswer::Motion(p)) if p == gold => 1.0,
            _ => wrong_penalty,
        },
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
}

/// Composite reward: `(1 - lambda) * r_acc + lambda * r_fmt`, except that a
/// format violation (`r_fmt == 0`) clamps the whole reward to zero no matter
/// what the accuracy term claims.
pub fn total_reward(r_acc: f64, r_fmt: f64, lambda: f64) -> Result<f64, RewardError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RewardError::LambdaOutOfRange(lambda));
    }
    if r_fmt == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - lambda) * r_acc + lambda * r_fmt)
}

/// One response's reward components. Constructed only through [`score`] and
/// friends, so `r_fmt = 0` always forces `r_acc = 0` and `total = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fmt: f64,
    pub r_acc: f64,
    pub total: f64,
}

/// Scores one token response against a gold label.
pub fn score<S: AsRef<str>>(
    tokens: &[S],
    gold: MotionPrimitive,
    lambda: f64,
    wrong_penalty: f64,
    table: &SynonymTable,
) -> Result<RewardBreakdown, RewardError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RewardError::LambdaOutOfRange(lambda));
    }
    let r_fmt = format_reward(tokens);
    let r_acc = if r_fmt == 0.0 {
        0.0
    } else {
        accuracy_reward(tokens, gold, wrong_penalty, table)
    };
    let total = total_reward(r_acc, r_fmt, lambda)?;
    Ok(RewardBreakdown { r_fmt, r_acc, total })
}

/// Drops at most one trailing end-of-sequence token.
pub fn strip_trailing_eos(ids: &[TokenId], eos: TokenId) -> &[TokenId] {
    match ids.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => ids,
    }
}

/// Scores a policy token-id response: strips one trailing eos, maps ids to
/// texts, and applies [`score`].
pub fn score_ids(
    vocab: &Vocabulary,
    ids: &[TokenId],
    gold: MotionPrimitive,
    lambda: f64,
    wrong_penalty: f64,
    table: &SynonymTable,
) -> Result<RewardBreakdown, RewardError> {
    let body = strip_trailing_eos(ids, vocab.eos());
    score(&vocab.texts(body), gold, lambda, wrong_penalty, table)
}
