//! Run-level configuration: one structured document with sectioned keys
//! covering scene synthesis, corpora, both training stages, and evaluation,
//! plus a master seed from which every stage derives its own stream.

use crate::episodes::derive_seed;
use crate::geometry::{ConfigError as GeometryConfigError, GeometryConfig};
use crate::grpo::{GrpoConfig, GrpoError};
use crate::sft::{SftConfig, SftError};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunConfigError {
    #[error("config parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("bad override '{0}': expected section.key=value")]
    BadOverride(String),
    #[error("unknown preset '{0}': available presets are desk, full")]
    UnknownPreset(String),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryConfigError),
    #[error("sft: {0}")]
    Sft(#[from] SftError),
    #[error("grpo: {0}")]
    Grpo(#[from] GrpoError),
    #[error("{0}")]
    Bad(String),
}

/// Corpus sizes and scene options per pipeline stage. The supervised corpus
/// is rendered without distractor points and with a slice of deliberately
/// wrong answer labels, imitating an imperfectly auto-annotated training set;
/// reinforcement-learning and evaluation corpora carry gold labels and the
/// full distractor load, so improvements there reflect robust reading of the
/// flow field rather than template recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub sft_per_label: usize,
    pub rl_per_label: usize,
    pub eval_per_label: usize,
    /// Paired yes/no episodes per primitive for the paired protocol.
    pub pairs_per_question: usize,
    pub sft_distractors: bool,
    pub rl_distractors: bool,
    pub eval_distractors: bool,
    /// Fraction of supervised targets whose answer token is corrupted.
    pub sft_label_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            sft_per_label: 1600,
            rl_per_label: 200,
            eval_per_label: 20,
            pairs_per_question: 10,
            sft_distractors: false,
            rl_distractors: true,
            eval_distractors: true,
            sft_label_noise: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { hidden_dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Decoding budget per response during evaluation.
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_len: 24 }
    }
}

/// Everything one run needs. Every field has a default; a run directory gets
/// the resolved document written back out so results stay self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; stage seeds are derived from it unless a stage pins its own.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub policy: PolicyConfig,
    pub geometry: GeometryConfig,
    pub corpus: CorpusConfig,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            out_dir: PathBuf::from("runs"),
            policy: PolicyConfig::default(),
            // The runnable default leans on a heavier distractor load than the
            // canonical scene so that held-out accuracy rewards motion cues
            // over memorized feature statistics.
            geometry: GeometryConfig {
                num_distractors: 96,
                distractor_speed: 0.3,
                ..GeometryConfig::default()
            },
            corpus: CorpusConfig::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

const STAGE_CORPUS: u64 = 1;
const STAGE_SFT: u64 = 2;
const STAGE_RL: u64 = 3;
const STAGE_EVAL: u64 = 4;
const STAGE_INIT: u64 = 5;
const STAGE_PAIRS: u64 = 6;

impl RunConfig {
    /// The runnable defaults.
    pub fn desk() -> Self {
        RunConfig::default()
    }

    /// Large-batch settings sized for a far bigger model. The tiny policy
    /// here cannot make progress at this step size, so this preset exists to
    /// keep the full-scale shape selectable, not to be trained as-is.
    pub fn full() -> Self {
        let mut cfg = RunConfig::default();
        cfg.grpo.rollout_batch = 128;
        cfg.grpo.global_batch = 32;
        cfg.grpo.lr = 2e-6;
        cfg.grpo.lambda = 0.1;
        cfg.grpo.updates_per_batch = 1;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self, RunConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(RunConfigError::UnknownPreset(other.to_owned())),
        }
    }

    pub fn validate(&self) -> Result<(), RunConfigError> {
        self.geometry.validate()?;
        self.sft.validate()?;
        self.grpo.validate()?;
        if self.policy.hidden_dim == 0 {
            return Err(RunConfigError::Bad("policy.hidden_dim must be positive".into()));
        }
        for (v, name) in [
            (self.corpus.sft_per_label, "corpus.sft_per_label"),
            (self.corpus.rl_per_label, "corpus.rl_per_label"),
            (self.corpus.eval_per_label, "corpus.eval_per_label"),
            (self.corpus.pairs_per_question, "corpus.pairs_per_question"),
        ] {
            if v == 0 {
                return Err(RunConfigError::Bad(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.corpus.sft_label_noise) {
            return Err(RunConfigError::Bad(
                "corpus.sft_label_noise must lie in [0, 1]".into(),
            ));
        }
        if self.eval.max_len < 3 {
            return Err(RunConfigError::Bad(
                "eval.max_len must allow at least a tagged answer".into(),
            ));
        }
        Ok(())
    }

    pub fn corpus_seed(&self) -> u64 {
        derive_seed(&[self.seed, STAGE_CORPUS])
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(&[self.seed, STAGE_INIT])
    }

    pub fn sft_seed(&self) -> u64 {
        self.sft.seed.unwrap_or_else(|| derive_seed(&[self.seed, STAGE_SFT]))
    }

    pub fn rl_seed(&self) -> u64 {
        self.grpo.seed.unwrap_or_else(|| derive_seed(&[self.seed, STAGE_RL]))
    }

    pub fn eval_seed(&self) -> u64 {
        derive_seed(&[self.seed, STAGE_EVAL])
    }

    pub fn pairs_seed(&self) -> u64 {
        derive_seed(&[self.seed, STAGE_PAIRS])
    }

    /// Parses a full document; unknown keys and type mismatches report the
    /// offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self, RunConfigError> {
        let de = toml::de::Deserializer::parse(text).map_err(|e| RunConfigError::Parse {
            path: "(document)".to_owned(),
            message: e.message().to_owned(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| RunConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().message().to_owned(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Merges a partial document on top of this config: only keys the text
    /// names are replaced, and unknown or mistyped keys are rejected with
    /// their path. This is how a config file layers over a preset.
    pub fn merged_with_toml(&self, text: &str) -> Result<Self, RunConfigError> {
        let over: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            RunConfigError::Parse { path: "(document)".to_owned(), message: e.message().to_owned() }
        })?;
        let mut base: toml::Table = toml::Table::try_from(self).map_err(|e| {
            RunConfigError::Parse { path: "(document)".to_owned(), message: e.to_string() }
        })?;
        deep_merge(&mut base, over);
        let merged = toml::to_string(&base).map_err(|e| RunConfigError::Parse {
            path: "(document)".to_owned(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&merged)
    }

    /// Applies dotted-path overrides like `grpo.lr=0.01` on top of this
    /// config, re-validating key paths through the same strict deserializer.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, RunConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::Table::try_from(self).map_err(|e| {
            RunConfigError::Parse { path: "(document)".to_owned(), message: e.to_string() }
        })?;
        for entry in overrides {
            let (path, raw) = entry
                .split_once('=')
                .ok_or_else(|| RunConfigError::BadOverride(entry.clone()))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            if keys.iter().any(|k| k.is_empty()) {
                return Err(RunConfigError::BadOverride(entry.clone()));
            }
            set_path(&mut doc, &keys, parse_value(raw.trim()))
                .map_err(|()| RunConfigError::BadOverride(entry.clone()))?;
        }
        let text = toml::to_string(&doc).map_err(|e| RunConfigError::Parse {
            path: "(document)".to_owned(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }
}

/// Interprets an override value as TOML (numbers, booleans, quoted strings)
/// and falls back to a plain string so paths need no extra quoting.
fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("probe key exists"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn deep_merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        if let toml::Value::Table(ot) = v {
            if let Some(toml::Value::Table(bt)) = base.get_mut(&k) {
                deep_merge(bt, ot);
                continue;
            }
            base.insert(k, toml::Value::Table(ot));
        } else {
            base.insert(k, v);
        }
    }
}

fn set_path(table: &mut toml::Table, keys: &[&str], value: toml::Value) -> Result<(), ()> {
    match keys {
        [] => Err(()),
        [last] => {
            table.insert((*last).to_owned(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let entry = table
                .entry((*head).to_owned())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry.as_table_mut() {
                Some(inner) => set_path(inner, rest, value),
                None => Err(()),
            }
        }
    }
}
