//! Question parsing and hierarchical linguistic encoding.

pub mod encoder;
pub mod hsrp;
pub mod vocab;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use encoder::{EncodedBundle, LinguisticEncoder, EMBED_DIM};
pub use hsrp::{parse_hsrp, RelationTuple, RoleParser, RuleParser};
pub use vocab::{tokenize, Vocabulary, PAD, UNK};

/// Token ids with a validity mask (`false` marks padding).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    /// Number of real (unpadded) tokens.
    pub fn length(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn padded_len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.length() == 0
    }

    /// Right-pads with [`PAD`] to `len` positions.
    pub fn pad_to(&self, len: usize) -> Self {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(PAD);
            out.mask.push(false);
        }
        out
    }
}

/// Token sequences for the whole question, its three role phrases and an
/// optional answer candidate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionBundle {
    pub q: TokenSeq,
    pub qs: TokenSeq,
    pub qr: TokenSeq,
    pub qo: TokenSeq,
    pub answer: TokenSeq,
    /// Role phrases as joined text, keyed the same way as the confounder sets.
    pub phrases: [String; 4],
}

impl QuestionBundle {
    pub fn streams(&self) -> [&TokenSeq; 4] {
        [&self.q, &self.qs, &self.qr, &self.qo]
    }

    pub fn lengths(&self) -> [usize; 5] {
        [
            self.q.length(),
            self.qs.length(),
            self.qr.length(),
            self.qo.length(),
            self.answer.length(),
        ]
    }
}

fn role_span(tokens: &[String], span: &Range<usize>) -> Range<usize> {
    if span.is_empty() {
        0..tokens.len()
    } else {
        span.clone()
    }
}

/// Tokenises and parses `question`, appending `candidate` tokens to the
/// whole-question stream. Empty role spans fall back to the full question.
pub fn build_bundle(
    question: &str,
    candidate: Option<&str>,
    vocab: &Vocabulary,
    parser: &dyn RoleParser,
) -> QuestionBundle {
    let mut tokens = tokenize(question);
    if tokens.is_empty() {
        tokens.push("<unk>".to_string());
    }
    let tuple = parser.parse(&tokens);
    let cand_tokens = candidate.map(tokenize).unwrap_or_default();

    let mut q_ids = vocab.ids(&tokens);
    q_ids.extend(vocab.ids(&cand_tokens));
    let spans = [
        0..tokens.len(),
        role_span(&tokens, &tuple.subject),
        role_span(&tokens, &tuple.action),
        role_span(&tokens, &tuple.object),
    ];
    let seq = |r: &Range<usize>| TokenSeq::new(vocab.ids(&tokens[r.clone()]));
    let phrases = spans.clone().map(|r| tokens[r].join(" "));
    QuestionBundle {
        q: TokenSeq::new(q_ids),
        qs: seq(&spans[1]),
        qr: seq(&spans[2]),
        qo: seq(&spans[3]),
        answer: TokenSeq::new(vocab.ids(&cand_tokens)),
        phrases,
    }
}
