//! Episode and corpus generation: rendered flow features paired with
//! questions, templated reasoning traces for supervised training, and the
//! quality filter that mirrors the data pipeline's reject rules.
//!
//! Corpora are JSONL, one record per line, with token-text arrays so files
//! stay readable and vocabulary-independent. Generation is a pure function
//! of (config, seed): every episode draws from its own splitmix-derived rng,
//! and rejected supervised samples regenerate with a bumped attempt counter.

use crate::geometry::{
    make_trajectory, render_flow, sample_magnitude, sample_scene, CameraTrajectory, FlowFeatures,
    GeometryConfig, GeometryError, MotionFamily, MotionPrimitive,
};
use crate::ota::{self, CanonicalAnswer, SynonymTable, Tag};
use crate::vocab::{TokenId, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("record {id}: {problem}")]
    BadRecord { id: String, problem: String },
    #[error("gave up generating a {label} sample after {attempts} attempts")]
    ExhaustedAttempts { label: MotionPrimitive, attempts: usize },
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Which corpus schema a record belongs to: supervised samples carry a
/// target trace, query records do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusKind {
    Sft,
    Rl,
}

impl CorpusKind {
    fn name(self) -> &'static str {
        match self {
            CorpusKind::Sft => "sft",
            CorpusKind::Rl => "rl",
        }
    }

    fn tag(self) -> u64 {
        match self {
            CorpusKind::Sft => 0x5f74,
            CorpusKind::Rl => 0x726c,
        }
    }
}

/// One serialized episode: features plus question, and for supervised
/// corpora the target token trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub kind: String,
    pub question: Vec<String>,
    pub features: Vec<f64>,
    pub grid_dims: (usize, usize, usize),
    pub label: MotionPrimitive,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<String>>,
}

/// Bare episode payload used inside eval pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub features: Vec<f64>,
    pub grid_dims: (usize, usize, usize),
    pub label: MotionPrimitive,
}

/// A paired binary-protocol item: the same question about two episodes whose
/// gold answers are opposite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub question: Vec<String>,
    pub pos: EpisodeRecord,
    pub neg: EpisodeRecord,
}

/// Supervised sample in token-id space.
#[derive(Debug, Clone, PartialEq)]
pub struct SftSample {
    pub features: FlowFeatures,
    pub question: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub label: MotionPrimitive,
}

/// Query sample in token-id space (RL rollouts and evaluation).
#[derive(Debug, Clone, PartialEq)]
pub struct RlQuery {
    pub features: FlowFeatures,
    pub question: Vec<TokenId>,
    pub label: MotionPrimitive,
}

/// Paired binary-protocol item in token-id space. `pos.label == asked` and
/// `neg.label != asked`, so gold answers are yes and no respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub asked: MotionPrimitive,
    pub pos: RlQuery,
    pub neg: RlQuery,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic per-episode seed from a part list.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x = 0x243f6a8885a308d3;
    for &p in parts {
        x = splitmix64(x ^ p);
    }
    x
}

/// Family keyword that reasoning traces must name, and that the
/// consistency filter looks for.
pub fn family_word(family: MotionFamily) -> &'static str {
    match family {
        MotionFamily::Rotation => "rotation",
        MotionFamily::Translation => "translation",
        MotionFamily::Zoom => "scaling",
        MotionFamily::Static => "stationary",
    }
}

/// The unique motion family named by a think segment, if exactly one is.
pub fn detect_family<S: AsRef<str>>(think: &[S]) -> Option<MotionFamily> {
    let families = [
        MotionFamily::Rotation,
        MotionFamily::Translation,
        MotionFamily::Zoom,
        MotionFamily::Static,
    ];
    let mut found = None;
    for tok in think {
        for f in families {
            if tok.as_ref() == family_word(f) {
                match found {
                    None => found = Some(f),
                    Some(prev) if prev == f => {}
                    Some(_) => return None,
                }
            }
        }
    }
    found
}

fn direction_words(label: MotionPrimitive) -> &'static [&'static str] {
    use MotionPrimitive::*;
    match label {
        PanLeft | TruckLeft => &["leftward"],
        PanRight | TruckRight => &["rightward"],
        TiltUp | PedestalUp => &["upward"],
        TiltDown | PedestalDown => &["downward"],
        RollCw => &["clockwise", "swirl"],
        RollCcw => &["counterclockwise", "swirl"],
        DollyIn | ZoomIn => &["outward", "radial"],
        DollyOut | ZoomOut => &["inward", "radial"],
        Static => &["near-zero"],
    }
}

fn cue_words(family: MotionFamily) -> &'static [&'static str] {
    match family {
        MotionFamily::Rotation => &["depth-independent", "uniform"],
        MotionFamily::Zoom => &["depth-independent", "radial"],
        MotionFamily::Translation => &["depth-dependent", "parallax"],
        MotionFamily::Static => &["near-zero", "steady"],
    }
}

/// Flow strength word; static scenes read as weak.
fn strength_word(features: &FlowFeatures) -> &'static str {
    if features.mean_abs() >= 0.5 {
        "strong"
    } else {
        "weak"
    }
}

const TRACE_VARIANTS: u32 = 3;

/// Builds a template reasoning trace for the episode: observation names the
/// flow pattern, think names the depth cue and exactly one family word, the
/// answer is the label token, and a terminal eos closes the sequence.
pub fn synthesize_trace<R: Rng>(
    traj: &CameraTrajectory,
    features: &FlowFeatures,
    rng: &mut R,
) -> Vec<TokenId> {
    let vocab = Vocabulary::standard();
    let label = traj.label;
    let family = label.family();
    let dirs = direction_words(label);
    let cues = cue_words(family);
    let strength = strength_word(features);
    let variant = rng.gen_range(0..TRACE_VARIANTS);
    let mut obs: Vec<&str> = Vec::new();
    let mut think: Vec<&str> = Vec::new();
    match variant {
        0 => {
            obs.push(strength);
            obs.extend(dirs);
            obs.extend(["flow", "everywhere"]);
            think.extend(cues);
            think.extend(["flow", "so", family_word(family)]);
        }
        1 => {
            obs.push("flow");
            obs.extend(dirs);
            obs.extend(["across", "the", "field"]);
            think.extend(cues);
            think.extend(["so", family_word(family)]);
        }
        _ => {
            obs.extend(dirs);
            obs.extend(["flow", strength]);
            think.extend(["the", "flow", "field"]);
            think.extend(cues);
            think.extend(["so", family_word(family)]);
        }
    }
    let mut ids = vec![vocab.tag(Tag::ObservationOpen)];
    ids.extend(obs.iter().map(|t| vocab.id(t).expect("template word in vocabulary")));
    ids.push(vocab.tag(Tag::ObservationClose));
    ids.push(vocab.tag(Tag::ThinkOpen));
    ids.extend(think.iter().map(|t| vocab.id(t).expect("template word in vocabulary")));
    ids.push(vocab.tag(Tag::ThinkClose));
    ids.push(vocab.tag(Tag::AnswerOpen));
    ids.push(vocab.label(label));
    ids.push(vocab.tag(Tag::AnswerClose));
    ids.push(vocab.eos());
    ids
}

/// Why the filter rejected a sample; the first failing rule wins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    /// Target does not parse against the strict grammar.
    Format,
    /// Extracted answer is not the gold label.
    LabelAccuracy,
    /// Think segment does not name exactly the answer's family.
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

/// Data-pipeline quality filter: format, then label accuracy, then
/// family consistency.
pub fn filter_sample(sample: &SftSample, table: &SynonymTable) -> Verdict {
    let vocab = Vocabulary::standard();
    let body = ota::strip_trailing_eos(&sample.target, vocab.eos());
    let resp = match ota::parse_tokens(&vocab.texts(body)) {
        Ok(resp) => resp,
        Err(_) => return Verdict::Reject(RejectReason::Format),
    };
    match ota::extract_answer(&resp, table) {
        Some(CanonicalAnswer::Motion(p)) if p == sample.label => {}
        _ => return Verdict::Reject(RejectReason::LabelAccuracy),
    }
    if detect_family(&resp.think) != Some(sample.label.family()) {
        return Verdict::Reject(RejectReason::Consistency);
    }
    Verdict::Keep
}

/// Renders one labeled episode with a fresh scene.
fn sample_episode<R: Rng>(
    geo: &GeometryConfig,
    label: MotionPrimitive,
    distractors: bool,
    rng: &mut R,
) -> Result<(CameraTrajectory, FlowFeatures), GeometryError> {
    let magnitude = sample_magnitude(label, geo, rng);
    let traj = make_trajectory(label, geo.frames, magnitude, geo.focal)?;
    let scene = sample_scene(geo, distractors, rng);
    let features = render_flow(&scene, &traj, geo)?;
    Ok((traj, features))
}

const MAX_ATTEMPTS: usize = 200;

/// Generates a label-balanced corpus: `per_label` episodes for each of the
/// 15 primitives, in label order. Supervised samples that fail the filter
/// are regenerated deterministically.
///
/// `label_noise` is the fraction of supervised targets whose answer token is
/// swapped for a uniformly random wrong label after filtering, imitating an
/// imperfectly auto-annotated corpus; query corpora keep their gold labels
/// untouched.
pub fn make_dataset(
    kind: CorpusKind,
    geo: &GeometryConfig,
    per_label: usize,
    distractors: bool,
    label_noise: f64,
    seed: u64,
) -> Result<Vec<CorpusRecord>, EpisodeError> {
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(EpisodeError::BadRecord {
            id: "label-noise".to_owned(),
            problem: format!("label_noise {label_noise} outside [0, 1]"),
        });
    }
    let vocab = Vocabulary::standard();
    let table = SynonymTable::builtin();
    let question: Vec<String> =
        vocab.texts(&vocab.classify_question()).iter().map(|s| s.to_string()).collect();
    let mut records = Vec::with_capacity(per_label * MotionPrimitive::ALL.len());
    for (li, label) in MotionPrimitive::ALL.into_iter().enumerate() {
        for i in 0..per_label {
            let mut attempt = 0usize;
            let record = loop {
                if attempt >= MAX_ATTEMPTS {
                    return Err(EpisodeError::ExhaustedAttempts { label, attempts: attempt });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    seed,
                    kind.tag(),
                    li as u64,
                    i as u64,
                    attempt as u64,
                ]));
                let (traj, features) = match sample_episode(geo, label, distractors, &mut rng) {
                    Ok(ok) => ok,
                    Err(GeometryError::DegenerateScene { .. }) => {
                        attempt += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let target = match kind {
                    CorpusKind::Rl => None,
                    CorpusKind::Sft => {
                        let mut target = synthesize_trace(&traj, &features, &mut rng);
                        let sample = SftSample {
                            features: features.clone(),
                            question: vocab.classify_question(),
                            target: target.clone(),
                            label,
                        };
                        if filter_sample(&sample, table) != Verdict::Keep {
                            attempt += 1;
                            continue;
                        }
                        if label_noise > 0.0 && rng.gen::<f64>() < label_noise {
                            let mut wrong = rng.gen_range(0..MotionPrimitive::ALL.len() - 1);
                            if wrong >= li {
                                wrong += 1;
                            }
                            let open = vocab.tag(Tag::AnswerOpen);
                            if let Some(pos) = target.iter().position(|&t| t == open) {
                                target[pos + 1] = vocab.label(MotionPrimitive::ALL[wrong]);
                            }
                        }
                        Some(vocab.texts(&target).iter().map(|s| s.to_string()).collect())
                    }
                };
                break CorpusRecord {
                    id: format!("{}-{li:02}-{i:04}", kind.name()),
                    kind: kind.name().to_owned(),
                    question: question.clone(),
                    features: features.values,
                    grid_dims: features.grid_dims,
                    label,
                    target,
                };
            };
            records.push(record);
        }
    }
    Ok(records)
}

/// Generates paired binary-protocol items: for each primitive, `per_question`
/// pairs of one matching and one non-matching episode.
pub fn make_eval_pairs(
    geo: &GeometryConfig,
    per_question: usize,
    distractors: bool,
    seed: u64,
) -> Result<Vec<PairRecord>, EpisodeError> {
    let vocab = Vocabulary::standard();
    let mut pairs = Vec::with_capacity(per_question * MotionPrimitive::ALL.len());
    for (li, asked) in MotionPrimitive::ALL.into_iter().enumerate() {
        let question: Vec<String> =
            vocab.texts(&vocab.binary_question(asked)).iter().map(|s| s.to_string()).collect();
        for j in 0..per_question {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                seed,
                0x7061_6972,
                li as u64,
                j as u64,
            ]));
            // Uniform draw over the 14 other labels.
            let other_idx = {
                let r = rng.gen_range(0..MotionPrimitive::ALL.len() - 1);
                if r >= li {
                    r + 1
                } else {
                    r
                }
            };
            let neg_label = MotionPrimitive::from_index(other_idx).unwrap();
            let (_, pos_features) = sample_episode(geo, asked, distractors, &mut rng)?;
            let (_, neg_features) = sample_episode(geo, neg_label, distractors, &mut rng)?;
            pairs.push(PairRecord {
                id: format!("pair-{li:02}-{j:03}"),
                question: question.clone(),
                pos: EpisodeRecord {
                    features: pos_features.values,
                    grid_dims: pos_features.grid_dims,
                    label: asked,
                },
                neg: EpisodeRecord {
                    features: neg_features.values,
                    grid_dims: neg_features.grid_dims,
                    label: neg_label,
                },
            });
        }
    }
    Ok(pairs)
}

fn tokens_to_ids(
    vocab: &Vocabulary,
    texts: &[String],
    id: &str,
) -> Result<Vec<TokenId>, EpisodeError> {
    texts
        .iter()
        .map(|t| {
            vocab.id(t).ok_or_else(|| EpisodeError::BadRecord {
                id: id.to_owned(),
                problem: format!("token {t:?} not in vocabulary"),
            })
        })
        .collect()
}

impl CorpusRecord {
    pub fn to_sft_sample(&self, vocab: &Vocabulary) -> Result<SftSample, EpisodeError> {
        let target = self.target.as_ref().ok_or_else(|| EpisodeError::BadRecord {
            id: self.id.clone(),
            problem: "supervised record lacks a target".to_owned(),
        })?;
        Ok(SftSample {
            features: FlowFeatures { values: self.features.clone(), grid_dims: self.grid_dims },
            question: tokens_to_ids(vocab, &self.question, &self.id)?,
            target: tokens_to_ids(vocab, target, &self.id)?,
            label: self.label,
        })
    }

    pub fn to_rl_query(&self, vocab: &Vocabulary) -> Result<RlQuery, EpisodeError> {
        Ok(RlQuery {
            features: FlowFeatures { values: self.features.clone(), grid_dims: self.grid_dims },
            question: tokens_to_ids(vocab, &self.question, &self.id)?,
            label: self.label,
        })
    }
}

impl PairRecord {
    pub fn to_eval_pair(&self, vocab: &Vocabulary) -> Result<EvalPair, EpisodeError> {
        let question = tokens_to_ids(vocab, &self.question, &self.id)?;
        let asked = match self.question.as_slice() {
            [q, phrase] if q == crate::vocab::Q_IS_IT => {
                MotionPrimitive::from_phrase(phrase).ok_or_else(|| EpisodeError::BadRecord {
                    id: self.id.clone(),
                    problem: format!("unknown asked label {phrase:?}"),
                })?
            }
            _ => {
                return Err(EpisodeError::BadRecord {
                    id: self.id.clone(),
                    problem: "pair question must be [is-it, label]".to_owned(),
                })
            }
        };
        let mk = |ep: &EpisodeRecord| RlQuery {
            features: FlowFeatures { values: ep.features.clone(), grid_dims: ep.grid_dims },
            question: question.clone(),
            label: ep.label,
        };
        Ok(EvalPair { asked, pos: mk(&self.pos), neg: mk(&self.neg) })
    }
}

/// Writes records as JSONL, one compact object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EpisodeError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|source| EpisodeError::Json { line: 0, source })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a JSONL file written by [`write_jsonl`].
pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EpisodeError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|source| EpisodeError::Json { line: i + 1, source })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_geo() -> GeometryConfig {
        GeometryConfig { num_points: 48, num_distractors: 8, ..GeometryConfig::default() }
    }

    #[test]
    fn traces_are_well_formed_and_pass_the_filter() {
        let geo = small_geo();
        let vocab = Vocabulary::standard();
        let table = SynonymTable::builtin();
        for label in MotionPrimitive::ALL {
            for seed in 0..6u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, label.index() as u64]));
                let (traj, features) = sample_episode(&geo, label, false, &mut rng).unwrap();
                let target = synthesize_trace(&traj, &features, &mut rng);
                assert_eq!(*target.last().unwrap(), vocab.eos());
                let body = ota::strip_trailing_eos(&target, vocab.eos());
                let resp = ota::parse_tokens(&vocab.texts(body)).unwrap();
                assert_eq!(
                    ota::extract_answer(&resp, table),
                    Some(CanonicalAnswer::Motion(label))
                );
                assert_eq!(detect_family(&resp.think), Some(label.family()));
                let sample = SftSample {
                    features,
                    question: vocab.classify_question(),
                    target,
                    label,
                };
                assert_eq!(filter_sample(&sample, table), Verdict::Keep);
            }
        }
    }

    #[test]
    fn family_detection_requires_exactly_one_family() {
        assert_eq!(detect_family(&["so", "rotation"]), Some(MotionFamily::Rotation));
        assert_eq!(detect_family(&["rotation", "rotation"]), Some(MotionFamily::Rotation));
        assert_eq!(detect_family(&["rotation", "translation"]), None);
        assert_eq!(detect_family(&["flow", "so"]), None);
        assert_eq!(detect_family(&["stationary"]), Some(MotionFamily::Static));
    }

    fn trace_sample(label: MotionPrimitive, seed: u64) -> SftSample {
        let geo = small_geo();
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (traj, features) = sample_episode(&geo, label, false, &mut rng).unwrap();
        let target = synthesize_trace(&traj, &features, &mut rng);
        SftSample { features, question: vocab.classify_question(), target, label }
    }

    #[test]
    fn filter_rejects_in_rule_order() {
        let table = SynonymTable::builtin();
        let vocab = Vocabulary::standard();

        // Malformed: drop the final answer-close tag (before eos).
        let mut s = trace_sample(MotionPrimitive::TruckLeft, 1);
        let eos = s.target.pop().unwrap();
        s.target.pop();
        s.target.push(eos);
        assert_eq!(filter_sample(&s, table), Verdict::Reject(RejectReason::Format));

        // Wrong answer: swap the label token.
        let mut s = trace_sample(MotionPrimitive::TruckLeft, 2);
        let pos = s.target.len() - 3;
        assert_eq!(s.target[pos], vocab.label(MotionPrimitive::TruckLeft));
        s.target[pos] = vocab.label(MotionPrimitive::PanRight);
        assert_eq!(filter_sample(&s, table), Verdict::Reject(RejectReason::LabelAccuracy));

        // Family mismatch: think names rotation for a translation label.
        let mut s = trace_sample(MotionPrimitive::TruckLeft, 3);
        for t in &mut s.target {
            if *t == vocab.id("translation").unwrap() {
                *t = vocab.id("rotation").unwrap();
            }
        }
        assert_eq!(filter_sample(&s, table), Verdict::Reject(RejectReason::Consistency));

        // Format failures mask later rules.
        let mut s = trace_sample(MotionPrimitive::TruckLeft, 4);
        let pos = s.target.len() - 3;
        s.target[pos] = vocab.label(MotionPrimitive::PanRight);
        let eos = s.target.pop().unwrap();
        s.target.pop();
        s.target.push(eos);
        assert_eq!(filter_sample(&s, table), Verdict::Reject(RejectReason::Format));
    }

    #[test]
    fn datasets_are_balanced_unique_and_deterministic() {
        let geo = small_geo();
        let a = make_dataset(CorpusKind::Sft, &geo, 2, false, 0.0, 42).unwrap();
        assert_eq!(a.len(), 30);
        for label in MotionPrimitive::ALL {
            assert_eq!(a.iter().filter(|r| r.label == label).count(), 2);
        }
        let ids: std::collections::HashSet<_> = a.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids.len(), a.len());
        assert!(a.iter().all(|r| r.target.is_some() && r.kind == "sft"));
        assert!(a.iter().all(|r| r.features.len() == geo.feature_len()));

        let b = make_dataset(CorpusKind::Sft, &geo, 2, false, 0.0, 42).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = make_dataset(CorpusKind::Sft, &geo, 2, false, 0.0, 43).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );

        let rl = make_dataset(CorpusKind::Rl, &geo, 2, true, 0.0, 42).unwrap();
        assert!(rl.iter().all(|r| r.target.is_none() && r.kind == "rl"));
    }

    #[test]
    fn generated_sft_corpus_is_a_filter_fixed_point() {
        let geo = small_geo();
        let vocab = Vocabulary::standard();
        let table = SynonymTable::builtin();
        let records = make_dataset(CorpusKind::Sft, &geo, 2, false, 0.0, 7).unwrap();
        for r in &records {
            let sample = r.to_sft_sample(vocab).unwrap();
            assert_eq!(filter_sample(&sample, table), Verdict::Keep, "record {}", r.id);
        }
    }

    #[test]
    fn record_runtime_round_trip() {
        let geo = small_geo();
        let vocab = Vocabulary::standard();
        let records = make_dataset(CorpusKind::Sft, &geo, 1, false, 0.0, 9).unwrap();
        let r = &records[0];
        let sample = r.to_sft_sample(vocab).unwrap();
        assert_eq!(vocab.texts(&sample.question), r.question.iter().map(|s| s.as_str()).collect::<Vec<_>>());
        assert_eq!(
            vocab.texts(&sample.target),
            r.target.as_ref().unwrap().iter().map(|s| s.as_str()).collect::<Vec<_>>()
        );
        let q = r.to_rl_query(vocab).unwrap();
        assert_eq!(q.features.values, r.features);
        assert_eq!(q.label, r.label);

        let mut bad = r.clone();
        bad.question = vec!["nonsense-token".to_owned()];
        assert!(matches!(bad.to_sft_sample(vocab), Err(EpisodeError::BadRecord { .. })));
        let mut no_target = r.clone();
        no_target.target = None;
        assert!(no_target.to_sft_sample(vocab).is_err());
    }

    #[test]
    fn eval_pairs_have_opposite_gold_answers() {
        let geo = small_geo();
        let vocab = Vocabulary::standard();
        let pairs = make_eval_pairs(&geo, 2, true, 99).unwrap();
        assert_eq!(pairs.len(), 30);
        for record in &pairs {
            let pair = record.to_eval_pair(vocab).unwrap();
            assert_eq!(pair.pos.label, pair.asked);
            assert_ne!(pair.neg.label, pair.asked);
            assert_eq!(pair.pos.question, pair.neg.question);
            assert_eq!(
                vocab.texts(&pair.pos.question),
                vec![crate::vocab::Q_IS_IT, pair.asked.phrase()]
            );
        }
        let again = make_eval_pairs(&geo, 2, true, 99).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn jsonl_round_trips_and_reports_bad_lines() {
        let geo = small_geo();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let records = make_dataset(CorpusKind::Rl, &geo, 1, false, 0.0, 3).unwrap();
        write_jsonl(&path, &records).unwrap();
        let loaded: Vec<CorpusRecord> = load_jsonl(&path).unwrap();
        assert_eq!(records, loaded);

        std::fs::write(&path, "{\"id\": \"x\"\nnot json").unwrap();
        let err = load_jsonl::<CorpusRecord>(&path).unwrap_err();
        assert!(matches!(err, EpisodeError::Json { line: 1, .. }));
    }
}
