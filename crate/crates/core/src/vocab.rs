//! Closed token vocabulary shared by corpora, the parser, and the policy.
//!
//! Tags are atomic tokens, each motion label is one token carrying its full
//! phrase, and a small set of filler words covers the templated observation
//! and think segments. Token ids are stable construction-order indices; the
//! policy's output head is sized by [`Vocabulary::size`].

use crate::geometry::MotionPrimitive;
use crate::ota::Tag;
use std::collections::HashMap;
use std::sync::OnceLock;

pub type TokenId = u32;

/// End-of-sequence marker emitted by the policy, stripped before parsing.
pub const EOS: &str = "<eos>";
/// Classification question token ("which motion is this?").
pub const Q_CLASSIFY: &str = "which-motion";
/// Paired binary question token ("is the motion X?"), followed by a label.
pub const Q_IS_IT: &str = "is-it";

const FILLERS: &[&str] = &[
    "flow", "leftward", "rightward", "upward", "downward", "inward", "outward", "radial",
    "uniform", "parallax", "depth-independent", "depth-dependent", "near-zero", "rotation",
    "translation", "scaling", "stationary", "clockwise", "counterclockwise", "strong", "weak",
    "so", "across", "the", "field", "everywhere", "swirl", "steady",
];

/// Immutable token table. One instance covers the whole engine; build it
/// once via [`Vocabulary::standard`].
#[derive(Debug)]
pub struct Vocabulary {
    tokens: Vec<&'static str>,
    index: HashMap<&'static str, TokenId>,
    eos: TokenId,
    yes: TokenId,
    no: TokenId,
    labels: [TokenId; 15],
}

static STANDARD: OnceLock<Vocabulary> = OnceLock::new();

impl Vocabulary {
    /// The shared engine vocabulary: eos, the six structure tags, all 15
    /// label phrases, yes/no, the two question tokens, and the filler words.
    pub fn standard() -> &'static Vocabulary {
        STANDARD.get_or_init(|| {
            let mut tokens: Vec<&'static str> = vec![EOS];
            tokens.extend(Tag::ALL.iter().map(|t| t.text()));
            tokens.extend(MotionPrimitive::ALL.iter().map(|p| p.phrase()));
            tokens.push("yes");
            tokens.push("no");
            tokens.push(Q_CLASSIFY);
            tokens.push(Q_IS_IT);
            tokens.extend_from_slice(FILLERS);
            let index: HashMap<&'static str, TokenId> =
                tokens.iter().enumerate().map(|(i, &t)| (t, i as TokenId)).collect();
            assert_eq!(index.len(), tokens.len(), "duplicate vocabulary token");
            let id = |t: &str| index[t];
            let labels =
                std::array::from_fn(|i| id(MotionPrimitive::ALL[i].phrase()));
            Vocabulary { eos: id(EOS), yes: id("yes"), no: id("no"), labels, tokens, index }
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, text: &str) -> Option<TokenId> {
        self.index.get(text).copied()
    }

    /// Panics on an out-of-range id; ids come from this vocabulary.
    pub fn text(&self, id: TokenId) -> &'static str {
        self.tokens[id as usize]
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn yes(&self) -> TokenId {
        self.yes
    }

    pub fn no(&self) -> TokenId {
        self.no
    }

    pub fn tag(&self, tag: Tag) -> TokenId {
        self.index[tag.text()]
    }

    pub fn label(&self, p: MotionPrimitive) -> TokenId {
        self.labels[p.index()]
    }

    pub fn texts(&self, ids: &[TokenId]) -> Vec<&'static str> {
        ids.iter().map(|&i| self.text(i)).collect()
    }

    /// Converts token texts to ids; `None` if any text is out of vocabulary.
    pub fn ids<S: AsRef<str>>(&self, texts: &[S]) -> Option<Vec<TokenId>> {
        texts.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Question tokens for the 15-way classification protocol.
    pub fn classify_question(&self) -> Vec<TokenId> {
        vec![self.index[Q_CLASSIFY]]
    }

    /// Question tokens for the paired binary protocol about `p`.
    pub fn binary_question(&self, p: MotionPrimitive) -> Vec<TokenId> {
        vec![self.index[Q_IS_IT], self.label(p)]
    }
}
