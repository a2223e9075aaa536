//! Evaluation: greedy decoding through the shared parse-and-extract path,
//! per-primitive classification accuracy, and the paired yes/no protocol
//! where each question is asked about one matching and one non-matching
//! episode and a pair only counts when both answers are right.

use crate::episodes::{EvalPair, RlQuery};
use crate::geometry::MotionPrimitive;
use crate::ota::{self, CanonicalAnswer, SynonymTable, Tag};
use crate::policy::{self, PolicyParams};
use crate::vocab::{TokenId, Vocabulary};
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

/// Anything that maps a query to a token sequence. Trained policies decode
/// greedily; test stubs emit fixed or randomized sequences.
pub trait Decoder {
    fn decode(&mut self, query: &RlQuery) -> Vec<TokenId>;
}

/// Argmax decoding: at each step take the highest-probability token, lowest
/// index on ties, until eos or `max_len` emitted tokens.
pub fn greedy_decode(
    params: &PolicyParams,
    features: &[f64],
    question: &[TokenId],
    eos: TokenId,
    max_len: usize,
) -> Vec<TokenId> {
    let mut context: Vec<TokenId> = question.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_len {
        let dist = match policy::next_token_dist(params, features, &context) {
            Ok(d) => d,
            Err(_) => break,
        };
        let mut best = 0usize;
        for (i, &p) in dist.iter().enumerate() {
            if p > dist[best] {
                best = i;
            }
        }
        let tok = best as TokenId;
        out.push(tok);
        if tok == eos {
            break;
        }
        context.push(tok);
    }
    out
}

/// Greedy decoding of a trained policy.
pub struct PolicyDecoder<'a> {
    pub params: &'a PolicyParams,
    pub max_len: usize,
}

impl Decoder for PolicyDecoder<'_> {
    fn decode(&mut self, query: &RlQuery) -> Vec<TokenId> {
        let vocab = Vocabulary::standard();
        greedy_decode(
            self.params,
            &query.features.values,
            &query.question,
            vocab.eos(),
            self.max_len,
        )
    }
}

/// What a query asks: name the motion, or confirm a named motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuestionKind {
    Classify,
    Binary(MotionPrimitive),
}

impl QuestionKind {
    /// Recognizes the two question shapes; anything else is `None`.
    pub fn of(vocab: &Vocabulary, question: &[TokenId]) -> Option<QuestionKind> {
        let texts = vocab.texts(question);
        match texts.as_slice() {
            [q] if *q == crate::vocab::Q_CLASSIFY => Some(QuestionKind::Classify),
            [q, phrase] if *q == crate::vocab::Q_IS_IT => {
                MotionPrimitive::from_phrase(phrase).map(QuestionKind::Binary)
            }
            _ => None,
        }
    }
}

fn wrap_answer(vocab: &Vocabulary, observation: &str, answer: TokenId) -> Vec<TokenId> {
    let mut ids = vec![vocab.tag(Tag::ObservationOpen)];
    ids.push(vocab.id(observation).expect("stub word in vocabulary"));
    ids.push(vocab.tag(Tag::ObservationClose));
    ids.push(vocab.tag(Tag::ThinkOpen));
    ids.push(vocab.id("so").expect("stub word in vocabulary"));
    ids.push(vocab.tag(Tag::ThinkClose));
    ids.push(vocab.tag(Tag::AnswerOpen));
    ids.push(answer);
    ids.push(vocab.tag(Tag::AnswerClose));
    ids.push(vocab.eos());
    ids
}

/// Always answers with the gold label (or the correct yes/no); an upper
/// bound for the metrics.
pub struct OracleDecoder;

impl Decoder for OracleDecoder {
    fn decode(&mut self, query: &RlQuery) -> Vec<TokenId> {
        let vocab = Vocabulary::standard();
        let answer = match QuestionKind::of(vocab, &query.question) {
            Some(QuestionKind::Classify) | None => vocab.label(query.label),
            Some(QuestionKind::Binary(asked)) => {
                if asked == query.label {
                    vocab.yes()
                } else {
                    vocab.no()
                }
            }
        };
        wrap_answer(vocab, "flow", answer)
    }
}

/// Emits a sequence that never parses; a lower bound for the metrics.
pub struct MalformedDecoder;

impl Decoder for MalformedDecoder {
    fn decode(&mut self, query: &RlQuery) -> Vec<TokenId> {
        let _ = query;
        let vocab = Vocabulary::standard();
        vec![vocab.tag(Tag::ThinkClose), vocab.tag(Tag::ObservationOpen), vocab.eos()]
    }
}

/// Well-formed responses with uniformly random answers: a random label for
/// classification, a coin flip for yes/no.
pub struct RandomDecoder<R: Rng> {
    pub rng: R,
}

impl<R: Rng> Decoder for RandomDecoder<R> {
    fn decode(&mut self, query: &RlQuery) -> Vec<TokenId> {
        let vocab = Vocabulary::standard();
        let answer = match QuestionKind::of(vocab, &query.question) {
            Some(QuestionKind::Binary(_)) => {
                if self.rng.gen_bool(0.5) {
                    vocab.yes()
                } else {
                    vocab.no()
                }
            }
            _ => {
                let idx = self.rng.gen_range(0..MotionPrimitive::ALL.len());
                vocab.label(MotionPrimitive::from_index(idx).unwrap())
            }
        };
        wrap_answer(vocab, "flow", answer)
    }
}

/// Always answers yes to binary questions.
pub struct AlwaysYesDecoder;

impl Decoder for AlwaysYesDecoder {
    fn decode(&mut self, query: &RlQuery) -> Vec<TokenId> {
        let _ = query;
        let vocab = Vocabulary::standard();
        wrap_answer(vocab, "flow", vocab.yes())
    }
}

/// One classification cell: hits over queries whose gold label is the
/// primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellStats {
    pub correct: usize,
    pub n: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationFragment {
    /// Keyed by primitive phrase, one cell per primitive present.
    pub per_primitive: BTreeMap<String, CellStats>,
    /// Unweighted mean of per-primitive rates.
    pub average: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairFragment {
    /// Every episode counted independently.
    pub per_question_accuracy: f64,
    /// A pair counts only when both of its episodes are answered right.
    pub pair_accuracy: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationFragment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PairFragment>,
}

fn decoded_answer<D: Decoder>(
    decoder: &mut D,
    query: &RlQuery,
    table: &SynonymTable,
) -> Option<CanonicalAnswer> {
    let vocab = Vocabulary::standard();
    let tokens = decoder.decode(query);
    let body = ota::strip_trailing_eos(&tokens, vocab.eos());
    let resp = ota::parse_tokens(&vocab.texts(body)).ok()?;
    ota::extract_answer(&resp, table)
}

/// Per-primitive classification accuracy over a labeled query set. An
/// unparseable or unrecognized response counts as wrong.
pub fn eval_binary<D: Decoder>(
    decoder: &mut D,
    queries: &[RlQuery],
    table: &SynonymTable,
) -> ClassificationFragment {
    let mut cells: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for q in queries {
        let hit = decoded_answer(decoder, q, table) == Some(CanonicalAnswer::Motion(q.label));
        let cell = cells.entry(q.label.phrase().to_owned()).or_insert((0, 0));
        cell.1 += 1;
        if hit {
            cell.0 += 1;
        }
    }
    let per_primitive: BTreeMap<String, CellStats> = cells
        .into_iter()
        .map(|(k, (correct, n))| {
            (k, CellStats { correct, n, rate: correct as f64 / n as f64 })
        })
        .collect();
    let average = if per_primitive.is_empty() {
        0.0
    } else {
        per_primitive.values().map(|c| c.rate).sum::<f64>() / per_primitive.len() as f64
    };
    ClassificationFragment { per_primitive, average, n: queries.len() }
}

/// Paired yes/no protocol: each pair asks the same question about one
/// matching and one non-matching episode.
pub fn eval_pairs<D: Decoder>(
    decoder: &mut D,
    pairs: &[EvalPair],
    table: &SynonymTable,
) -> PairFragment {
    let mut question_hits = 0usize;
    let mut pair_hits = 0usize;
    for pair in pairs {
        let pos_ok = decoded_answer(decoder, &pair.pos, table) == Some(CanonicalAnswer::Yes);
        let neg_ok = decoded_answer(decoder, &pair.neg, table) == Some(CanonicalAnswer::No);
        question_hits += usize::from(pos_ok) + usize::from(neg_ok);
        if pos_ok && neg_ok {
            pair_hits += 1;
        }
    }
    let n = pairs.len();
    PairFragment {
        per_question_accuracy: if n == 0 { 0.0 } else { question_hits as f64 / (2 * n) as f64 },
        pair_accuracy: if n == 0 { 0.0 } else { pair_hits as f64 / n as f64 },
        n_pairs: n,
    }
}

impl EvalReport {
    /// Aligned human-readable table (classification rows, then pair rates).
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if let Some(c) = &self.classification {
            out.push_str(&format!("{:<14} {:>8} {:>6}\n", "primitive", "acc", "n"));
            for (phrase, cell) in &c.per_primitive {
                out.push_str(&format!("{:<14} {:>8.3} {:>6}\n", phrase, cell.rate, cell.n));
            }
            out.push_str(&format!("{:<14} {:>8.3} {:>6}\n", "average", c.average, c.n));
        }
        if let Some(p) = &self.pairs {
            out.push_str(&format!(
                "per-question accuracy {:.3}  pair accuracy {:.3}  pairs {}\n",
                p.per_question_accuracy, p.pair_accuracy, p.n_pairs
            ));
        }
        out
    }
}
