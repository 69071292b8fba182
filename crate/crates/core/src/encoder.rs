//! Closed-vocabulary tokenizer and the frozen text/image encoders.
//!
//! The text encoder maps a sequence of token vectors to a unit vector:
//! each token is divided by a fixed input scale, shifted by a sinusoidal
//! position code and squashed with `tanh`; the results are mean-pooled and
//! passed through `affine -> tanh -> affine -> normalize`. The image encoder
//! is a single affine map followed by normalization.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{self, gaussian_vec, l2_normalize, seeded_rng, Matrix, Tape, Var};

pub const VOCAB_VERSION: u32 = 1;
pub const PAD: &str = "<pad>";
pub const PAD_ID: usize = 0;

/// Token table: id <-> text, plus one embedding row per id.
///
/// Id 0 is the padding token with an all-zero embedding. Token texts may
/// contain spaces when a whole phrase is registered as a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    seed: u64,
    d_tok: usize,
    texts: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    index: BTreeMap<String, usize>,
}

/// Inputs for a free-form vocabulary with random embeddings.
#[derive(Debug, Clone, Default)]
pub struct TokenSpec {
    pub class_names: Vec<String>,
    pub attributes: Vec<String>,
    pub negatives: Vec<String>,
    pub template_words: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    seed: u64,
    d_tok: usize,
    tokens: Vec<TokenEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenEntry {
    id: usize,
    text: String,
    embedding: Vec<f64>,
}

impl Vocabulary {
    /// Empty table holding only the padding token.
    pub fn new(seed: u64, d_tok: usize) -> Self {
        let mut index = BTreeMap::new();
        index.insert(PAD.to_string(), PAD_ID);
        Self {
            seed,
            d_tok,
            texts: vec![PAD.to_string()],
            embeddings: vec![vec![0.0; d_tok]],
            index,
        }
    }

    /// Registers a new token and returns its id.
    pub fn insert(&mut self, text: &str, embedding: Vec<f64>) -> Result<usize> {
        if self.index.contains_key(text) {
            return Err(Error::DuplicateToken(text.to_string()));
        }
        if embedding.len() != self.d_tok {
            return Err(Error::DimensionMismatch {
                expected: self.d_tok,
                got: embedding.len(),
            });
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::SchemaViolation(format!(
                "non-finite embedding for `{text}`"
            )));
        }
        let id = self.texts.len();
        self.texts.push(text.to_string());
        self.embeddings.push(embedding);
        self.index.insert(text.to_string(), id);
        Ok(id)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    /// Number of ids including padding.
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.len() <= 1
    }

    pub fn id(&self, text: &str) -> Option<usize> {
        self.index.get(text).copied()
    }

    pub fn text(&self, id: usize) -> &str {
        &self.texts[id]
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        &self.embeddings[id]
    }

    /// Whole-string lookup, for phrases registered as one token.
    pub fn lookup(&self, text: &str) -> Result<usize> {
        self.id(text)
            .ok_or_else(|| Error::UnknownToken(text.to_string()))
    }

    /// Whitespace tokenization against the closed vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }

    /// Like [`Vocabulary::tokenize`] but rejects sequences longer than `max_len`.
    pub fn tokenize_bounded(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let ids = self.tokenize(text)?;
        if ids.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: max_len,
            });
        }
        Ok(ids)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_VERSION,
            seed: self.seed,
            d_tok: self.d_tok,
            tokens: self
                .texts
                .iter()
                .zip(&self.embeddings)
                .enumerate()
                .map(|(id, (text, e))| TokenEntry {
                    id,
                    text: text.clone(),
                    embedding: e.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        check_version(&v, VOCAB_VERSION)?;
        let file: VocabFile =
            serde_json::from_value(v).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        let mut vocab = Vocabulary::new(file.seed, file.d_tok);
        for (pos, t) in file.tokens.into_iter().enumerate() {
            if t.id != pos {
                return Err(Error::SchemaViolation(format!(
                    "token ids must be dense, found {} at position {pos}",
                    t.id
                )));
            }
            if pos == PAD_ID {
                if t.text != PAD {
                    return Err(Error::SchemaViolation("id 0 must be the pad token".into()));
                }
                continue;
            }
            vocab.insert(&t.text, t.embedding)?;
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// SHA-256 of the canonical JSON dump, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

pub(crate) fn check_version(v: &serde_json::Value, expected: u32) -> Result<()> {
    match v.get("version") {
        Some(serde_json::Value::Number(n)) if n.as_u64() == Some(u64::from(expected)) => Ok(()),
        Some(other) => Err(Error::VersionMismatch {
            expected,
            found: other.to_string(),
        }),
        None => Err(Error::VersionMismatch {
            expected,
            found: "missing".into(),
        }),
    }
}

/// Builds a vocabulary whose embeddings are seeded Gaussians scaled to unit norm.
///
/// Repeated attribute or negative strings share one id; class names must be
/// unique and must not collide with template words.
pub fn build_vocabulary(spec: &TokenSpec, seed: u64, d_tok: usize) -> Result<Vocabulary> {
    if spec.class_names.is_empty() {
        return Err(Error::EmptySpec);
    }
    let mut rng = seeded_rng(seed);
    let mut vocab = Vocabulary::new(seed, d_tok);
    let mut draw = |vocab: &mut Vocabulary, text: &str| -> Result<()> {
        let e = numerics::random_unit(&mut rng, d_tok);
        vocab.insert(text, e).map(|_| ())
    };
    for w in &spec.template_words {
        if vocab.id(w).is_none() {
            draw(&mut vocab, w)?;
        }
    }
    for c in &spec.class_names {
        draw(&mut vocab, c)?;
    }
    for a in spec.attributes.iter().chain(&spec.negatives) {
        if vocab.id(a).is_none() {
            draw(&mut vocab, a)?;
        }
    }
    Ok(vocab)
}

/// Sinusoidal position codes of amplitude `amp`, one row per position.
pub fn position_codes(max_len: usize, d: usize, amp: f64) -> Vec<Vec<f64>> {
    (0..max_len)
        .map(|pos| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    amp * if i % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}

/// Frozen text encoder. Weights never change after construction.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    seed: u64,
    d_tok: usize,
    max_len: usize,
    input_scale: f64,
    positions: Vec<Vec<f64>>,
    w1: Arc<Matrix>,
    b1: Vec<f64>,
    w2: Arc<Matrix>,
    b2: Vec<f64>,
}

impl TextEncoder {
    /// Fully random encoder: Gaussian weights with `1/sqrt(fan_in)` scale.
    pub fn random(seed: u64, d_tok: usize, hidden: usize, d_out: usize, max_len: usize) -> Self {
        let mut rng = seeded_rng(seed);
        let mut w1 = Matrix::zeros(hidden, d_tok);
        for i in 0..hidden {
            w1.row_mut(i).copy_from_slice(&gaussian_vec(
                &mut rng,
                d_tok,
                1.0 / (d_tok as f64).sqrt(),
            ));
        }
        let b1 = gaussian_vec(&mut rng, hidden, 0.1);
        let mut w2 = Matrix::zeros(d_out, hidden);
        for i in 0..d_out {
            w2.row_mut(i).copy_from_slice(&gaussian_vec(
                &mut rng,
                hidden,
                1.0 / (hidden as f64).sqrt(),
            ));
        }
        let b2 = gaussian_vec(&mut rng, d_out, 0.1);
        Self::from_parts(seed, w1, b1, w2, b2, max_len, 0.5, 1.0)
            .expect("random encoder shapes are consistent")
    }

    /// Encoder from explicit weights. `w1` is `hidden × d_tok`, `w2` is `d_out × hidden`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        seed: u64,
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
        max_len: usize,
        position_amp: f64,
        input_scale: f64,
    ) -> Result<Self> {
        let dims = [
            (b1.len(), w1.rows()),
            (w2.cols(), w1.rows()),
            (b2.len(), w2.rows()),
        ];
        for (got, expected) in dims {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        if !(input_scale > 0.0) {
            return Err(Error::InvalidSpec(format!("input scale {input_scale}")));
        }
        let d_tok = w1.cols();
        Ok(Self {
            seed,
            d_tok,
            max_len,
            input_scale,
            positions: position_codes(max_len, d_tok, position_amp),
            w1: Arc::new(w1),
            b1,
            w2: Arc::new(w2),
            b2,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    pub fn d_out(&self) -> usize {
        self.w2.rows()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        if n > self.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.max_len,
            });
        }
        Ok(())
    }

    /// Per-position token feature `tanh(x / scale + pos_code)`.
    pub fn token_feature(&self, x: &[f64], pos: usize) -> Vec<f64> {
        x.iter()
            .zip(&self.positions[pos])
            .map(|(v, p)| (v / self.input_scale + p).tanh())
            .collect()
    }

    /// Pooled features -> unit output, without validation.
    fn head(&self, pooled: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .w1
            .matvec(pooled)
            .iter()
            .zip(&self.b1)
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let o: Vec<f64> = self
            .w2
            .matvec(&h)
            .iter()
            .zip(&self.b2)
            .map(|(a, b)| a + b)
            .collect();
        let n = numerics::norm(&o);
        o.iter().map(|v| v / n).collect()
    }

    pub fn encode_text(&self, tokens: &[&[f64]]) -> Result<Vec<f64>> {
        self.check_len(tokens.len())?;
        let mut pooled = vec![0.0; self.d_tok];
        for (pos, t) in tokens.iter().enumerate() {
            if t.len() != self.d_tok {
                return Err(Error::DimensionMismatch {
                    expected: self.d_tok,
                    got: t.len(),
                });
            }
            for (p, f) in pooled.iter_mut().zip(self.token_feature(t, pos)) {
                *p += f;
            }
        }
        let n = tokens.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        let out = self.head(&pooled);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NearZeroNorm(0.0));
        }
        Ok(out)
    }

    /// Encodes a sequence of vocabulary ids.
    pub fn encode_ids(&self, ids: &[usize], vocab: &Vocabulary) -> Result<Vec<f64>> {
        let rows: Vec<&[f64]> = ids.iter().map(|i| vocab.embedding(*i)).collect();
        self.encode_text(&rows)
    }

    /// Tape version of [`TextEncoder::token_feature`].
    pub fn token_feature_tape(&self, tape: &mut Tape, x: Var, pos: usize) -> Var {
        let scaled = tape.scale(x, 1.0 / self.input_scale);
        let code = tape.leaf(self.positions[pos].clone());
        let shifted = tape.add(scaled, code);
        tape.tanh(shifted)
    }

    /// Tape head over already-computed token features.
    ///
    /// `features` may contain partial sums (for example one constant node
    /// holding the summed features of all frozen tokens); `n_tokens` is the
    /// true sequence length used for mean pooling.
    pub fn head_tape(&self, tape: &mut Tape, features: &[Var], n_tokens: usize) -> Var {
        let total = if features.len() == 1 {
            features[0]
        } else {
            tape.sum(features)
        };
        let pooled = tape.scale(total, 1.0 / n_tokens as f64);
        let pre = tape.matvec(&self.w1, pooled, Some(&self.b1));
        let h = tape.tanh(pre);
        let out = tape.matvec(&self.w2, h, Some(&self.b2));
        tape.normalize(out)
    }

    /// Differentiable encoding of token vectors that live on `tape`.
    pub fn encode_text_tape(&self, tape: &mut Tape, tokens: &[Var]) -> Result<Var> {
        self.check_len(tokens.len())?;
        let feats: Vec<Var> = tokens
            .iter()
            .enumerate()
            .map(|(pos, t)| self.token_feature_tape(tape, *t, pos))
            .collect();
        Ok(self.head_tape(tape, &feats, tokens.len()))
    }
}

/// Frozen image encoder: `normalize(A x + b)`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    seed: u64,
    a: Matrix,
    bias: Vec<f64>,
}

impl ImageEncoder {
    pub fn random(seed: u64, f: usize, d_out: usize) -> Self {
        let mut rng = seeded_rng(seed);
        let mut a = Matrix::zeros(d_out, f);
        for i in 0..d_out {
            a.row_mut(i)
                .copy_from_slice(&gaussian_vec(&mut rng, f, 1.0 / (f as f64).sqrt()));
        }
        let bias = gaussian_vec(&mut rng, d_out, 0.05);
        Self { seed, a, bias }
    }

    pub fn from_parts(seed: u64, a: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != a.rows() {
            return Err(Error::DimensionMismatch {
                expected: a.rows(),
                got: bias.len(),
            });
        }
        Ok(Self { seed, a, bias })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.a.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.a
    }

    pub fn encode_image(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.a.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.a.cols(),
                got: features.len(),
            });
        }
        let raw: Vec<f64> = self
            .a
            .matvec(features)
            .iter()
            .zip(&self.bias)
            .map(|(x, b)| x + b)
            .collect();
        l2_normalize(&raw)
    }
}

/// Text and image encoders sharing one output space.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TokenSpec {
        TokenSpec {
            class_names: vec!["cat".into(), "dog".into()],
            attributes: vec!["furry".into(), "small".into(), "furry".into()],
            negatives: vec!["background".into()],
            template_words: vec!["a".into(), "photo".into(), "of".into()],
        }
    }

    #[test]
    fn vocabulary_counts_and_sharing() {
        let v = build_vocabulary(&spec(), 3, 16).unwrap();
        // pad + 3 template + 2 classes + 2 distinct attributes + 1 negative
        assert_eq!(v.len(), 9);
        assert_eq!(v.tokenize("a photo of a cat").unwrap().len(), 5);
        assert_eq!(v.tokenize("").unwrap(), Vec::<usize>::new());
        assert!(matches!(v.tokenize("a zorp"), Err(Error::UnknownToken(w)) if w == "zorp"));
        for id in 1..v.len() {
            assert!((numerics::norm(v.embedding(id)) - 1.0).abs() < 1e-12);
        }
        assert_eq!(v, build_vocabulary(&spec(), 3, 16).unwrap());
    }

    #[test]
    fn vocabulary_errors() {
        let mut s = spec();
        s.class_names.push("cat".into());
        assert!(matches!(
            build_vocabulary(&s, 0, 8),
            Err(Error::DuplicateToken(_))
        ));
        assert!(matches!(
            build_vocabulary(&TokenSpec::default(), 0, 8),
            Err(Error::EmptySpec)
        ));
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = build_vocabulary(&spec(), 11, 6).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.hash(), back.hash());
        let bad = v.to_json().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(
            Vocabulary::from_json(&bad),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn text_encoder_is_order_sensitive_and_unit() {
        let enc = TextEncoder::random(1, 16, 24, 32, 16);
        let u = vec![0.3; 16];
        let w: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = enc.encode_text(&[&u, &w]).unwrap();
        let b = enc.encode_text(&[&w, &u]).unwrap();
        assert!((numerics::norm(&a) - 1.0).abs() < 1e-9);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
        assert_eq!(a, enc.encode_text(&[&u, &w]).unwrap());
        assert!(matches!(enc.encode_text(&[]), Err(Error::EmptySequence)));
        let long: Vec<&[f64]> = (0..17).map(|_| u.as_slice()).collect();
        assert!(matches!(
            enc.encode_text(&long),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn tape_encoding_matches_plain() {
        let enc = TextEncoder::random(2, 8, 12, 10, 16);
        let toks: Vec<Vec<f64>> = (0..3)
            .map(|k| (0..8).map(|i| ((i + 3 * k) as f64).cos()).collect())
            .collect();
        let plain = enc
            .encode_text(&toks.iter().map(Vec::as_slice).collect::<Vec<_>>())
            .unwrap();
        let mut t = Tape::new();
        let vars: Vec<Var> = toks.iter().map(|x| t.leaf(x.clone())).collect();
        let out = enc.encode_text_tape(&mut t, &vars).unwrap();
        for (a, b) in t.value(out).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn encode_text_gradient_check() {
        let enc = TextEncoder::random(4, 6, 10, 8, 16);
        let target = l2_normalize(&(0..8).map(|i| i as f64 - 3.5).collect::<Vec<_>>()).unwrap();
        let x0: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let f = |t: &mut Tape, x: Var| {
            let a = t.gather(x, &(0..6).collect::<Vec<_>>());
            let b = t.gather(x, &(6..12).collect::<Vec<_>>());
            let e = enc.encode_text_tape(t, &[a, b]).unwrap();
            let tv = t.leaf(target.clone());
            t.dot(e, tv)
        };
        let r = numerics::gradient_check(f, &x0, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }

    #[test]
    fn image_encoder_contract() {
        let enc = ImageEncoder::random(9, 24, 32);
        let z = enc.encode_image(&[0.0; 24]).unwrap();
        assert!((numerics::norm(&z) - 1.0).abs() < 1e-9);
        assert!(matches!(
            enc.encode_image(&[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        let zero_bias = ImageEncoder::from_parts(9, enc.weights().clone(), vec![0.0; 32]).unwrap();
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (a, b) = (
            zero_bias.encode_image(&x).unwrap(),
            zero_bias.encode_image(&x2).unwrap(),
        );
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-15);
        }
    }
}
