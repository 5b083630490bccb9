//! Trainable stand-in for the word-embedding + contextual encoder stack:
//! a 300-d embedding table, a `300 → d` projection, learned positions, and
//! pre-norm self-attention layers.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{QuestionBundle, TokenSeq, Vocabulary};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{normal, ParamId, ParamStore};

pub const EMBED_DIM: usize = 300;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinguisticEncoder {
    pub embedding: ParamId,
    pub projection: Linear,
    pub positions: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
}

/// Encoded streams; `answer` is absent when the bundle has no candidate.
#[derive(Clone, Debug)]
pub struct EncodedBundle {
    pub streams: [NodeId; 4],
    pub masks: [Vec<bool>; 4],
    pub answer: Option<NodeId>,
}

impl LinguisticEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        vocab_size: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        max_len: usize,
    ) -> Self {
        let embedding = store.add(format!("{name}.embedding"), normal(rng, vocab_size, EMBED_DIM, 0.1));
        let projection = Linear::new(store, rng, &format!("{name}.proj"), EMBED_DIM, dim, true);
        let positions = store.add(format!("{name}.positions"), normal(rng, max_len, dim, 0.02));
        let hd = dim / heads;
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), dim),
                    attn: MultiHeadAttention::new(
                        store,
                        rng,
                        &format!("{p}.attn"),
                        dim,
                        heads,
                        1.0 / (hd as f64).sqrt(),
                    ),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), dim),
                    ff: FeedForward::new(store, rng, &format!("{p}.ff"), dim, 2 * dim),
                }
            })
            .collect();
        Self {
            embedding,
            projection,
            positions,
            layers,
            vocab_size,
            max_len,
            dim,
        }
    }

    /// Encodes one sequence to `len × d`. Padded positions still produce rows,
    /// but no unmasked row depends on them.
    pub fn encode_seq(
        &self,
        g: &mut Graph,
        seq: &TokenSeq,
        mut probe: Option<&mut Vec<NodeId>>,
    ) -> Result<NodeId> {
        let len = seq.padded_len();
        if len == 0 {
            return Err(Error::Encoding("empty token sequence".into()));
        }
        if len > self.max_len {
            return Err(Error::Encoding(format!(
                "sequence of {len} tokens exceeds max length {}",
                self.max_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::Encoding(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        if seq.is_empty() {
            return Err(Error::Encoding("sequence has no unmasked tokens".into()));
        }
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, seq.ids.iter().map(|&i| i as usize).collect());
        let x = self.projection.forward(g, emb);
        let pos = g.param(self.positions);
        let pos = g.slice_rows(pos, 0, len);
        let mut x = g.add(x, pos);
        for layer in &self.layers {
            let h = layer.attn_norm.forward(g, x);
            let a = layer.attn.forward(g, h, h, Some(&seq.mask), probe.as_deref_mut());
            x = g.add(x, a);
            let h = layer.ff_norm.forward(g, x);
            let f = layer.ff.forward(g, h);
            x = g.add(x, f);
        }
        Ok(x)
    }

    /// Encodes `Q`, `Qs`, `Qr`, `Qo` and the candidate `A` independently.
    pub fn encode_bundle(&self, g: &mut Graph, bundle: &QuestionBundle) -> Result<EncodedBundle> {
        let streams = [
            self.encode_seq(g, &bundle.q, None)?,
            self.encode_seq(g, &bundle.qs, None)?,
            self.encode_seq(g, &bundle.qr, None)?,
            self.encode_seq(g, &bundle.qo, None)?,
        ];
        let answer = if bundle.answer.is_empty() {
            None
        } else {
            Some(self.encode_seq(g, &bundle.answer, None)?)
        };
        Ok(EncodedBundle {
            streams,
            masks: bundle.streams().map(|s| s.mask.clone()),
            answer,
        })
    }

    /// Overwrites embedding rows from a text file of `token v1 … v300` lines.
    /// Tokens absent from the vocabulary are skipped; returns rows loaded.
    pub fn load_embeddings(&self, store: &mut ParamStore, vocab: &Vocabulary, path: &Path) -> Result<usize> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = store.get_mut(self.embedding);
        let mut loaded = 0;
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
            if values.len() != EMBED_DIM {
                return Err(Error::Format(format!(
                    "line {}: expected {EMBED_DIM} values, found {}",
                    lineno + 1,
                    values.len()
                )));
            }
            if let Some(id) = vocab.get(token) {
                for (j, v) in values.into_iter().enumerate() {
                    table[[id as usize, j]] = v;
                }
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linguistic::{build_bundle, RuleParser};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, LinguisticEncoder, Vocabulary) {
        let vocab = Vocabulary::build(["did the car hit the pole near a kiosk"]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = LinguisticEncoder::new(&mut store, &mut rng, "enc", vocab.len(), 8, 2, 1, 16);
        (store, enc, vocab)
    }

    #[test]
    fn shapes_and_determinism() {
        let (store, enc, vocab) = setup();
        let seq = TokenSeq::new(vocab.ids(&crate::linguistic::tokenize("the car hit the pole")));
        let mut g = Graph::new(&store);
        let a = enc.encode_seq(&mut g, &seq, None).unwrap();
        let b = enc.encode_seq(&mut g, &seq, None).unwrap();
        assert_eq!(g.shape(a), (5, 8));
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn out_of_vocabulary_id_rejected() {
        let (store, enc, vocab) = setup();
        let mut g = Graph::new(&store);
        let seq = TokenSeq::new(vec![2, vocab.len() as u32]);
        assert!(matches!(enc.encode_seq(&mut g, &seq, None), Err(Error::Encoding(_))));
    }

    #[test]
    fn attention_rows_normalised_and_padding_ignored() {
        let (mut store, enc, vocab) = setup();
        let b = build_bundle("did the car hit the pole", None, &vocab, &RuleParser);
        let padded = b.q.pad_to(9);
        let mut probe = Vec::new();
        let (before, weights) = {
            let mut g = Graph::new(&store);
            let out = enc.encode_seq(&mut g, &padded, Some(&mut probe)).unwrap();
            let w: Vec<_> = probe.iter().map(|&p| g.value(p).clone()).collect();
            (g.value(out).clone(), w)
        };
        for w in &weights {
            for row in w.rows() {
                let s: f64 = row.iter().take(6).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().skip(6).all(|&v| v <= 1e-9));
            }
        }
        // perturb the padding embedding row
        store.get_mut(enc.embedding).row_mut(0).fill(7.5);
        let mut g = Graph::new(&store);
        let out = enc.encode_seq(&mut g, &padded, None).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                assert!((g.value(out)[[r, c]] - before[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_file_loader() {
        let (mut store, enc, vocab) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.txt");
        let row: Vec<String> = (0..EMBED_DIM).map(|i| format!("{}", i as f64 * 0.001)).collect();
        fs::write(&p, format!("car {}\nnotinvocab {}\n", row.join(" "), row.join(" "))).unwrap();
        assert_eq!(enc.load_embeddings(&mut store, &vocab, &p).unwrap(), 1);
        let id = vocab.id("car") as usize;
        assert_eq!(store.get(enc.embedding)[[id, 10]], 0.01);
        fs::write(&p, "car 1 2 3\n").unwrap();
        assert!(enc.load_embeddings(&mut store, &vocab, &p).is_err());
    }
}
