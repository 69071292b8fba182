//! Soft prompt bank and the three prompt layouts built on top of it.
//!
//! Attribute prompts are `[p_1..p_M, class, attribute]`, negative prompts are
//! `[p_1..p_M, negative, class]` and textual prompts are the frozen
//! `[template, class, attribute?]`.

use serde::{Deserialize, Serialize};

use crate::encoder::{TextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_vec, seeded_rng};

/// Std of the Gaussian used when no init phrase is given.
pub const RANDOM_INIT_STD: f64 = 0.02;

/// The learnable context tokens shared by every soft prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPromptBank {
    pub tokens: Vec<Vec<f64>>,
    pub init: String,
}

impl SoftPromptBank {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn d_tok(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tokens.concat()
    }

    /// Overwrites the bank from a flat `M * d_tok` vector.
    pub fn set_flat(&mut self, flat: &[f64]) {
        let d = self.d_tok();
        for (m, t) in self.tokens.iter_mut().enumerate() {
            t.copy_from_slice(&flat[m * d..(m + 1) * d]);
        }
    }
}

/// Copies the embeddings of `phrase` into a new bank, or draws a seeded
/// Gaussian bank when `phrase` is empty.
pub fn init_soft_prompts(
    vocab: &Vocabulary,
    m: usize,
    phrase: &str,
    seed: u64,
) -> Result<SoftPromptBank> {
    let ids = vocab.tokenize(phrase)?;
    if ids.is_empty() {
        let mut rng = seeded_rng(seed);
        let tokens = (0..m)
            .map(|_| gaussian_vec(&mut rng, vocab.d_tok(), RANDOM_INIT_STD))
            .collect();
        return Ok(SoftPromptBank {
            tokens,
            init: String::new(),
        });
    }
    if ids.len() != m {
        return Err(Error::PhraseLengthMismatch {
            expected: m,
            got: ids.len(),
        });
    }
    Ok(SoftPromptBank {
        tokens: ids.iter().map(|i| vocab.embedding(*i).to_vec()).collect(),
        init: phrase.to_string(),
    })
}

/// Ids for a phrase: the whole string if it is a registered token, otherwise
/// its whitespace-separated words.
pub fn phrase_ids(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    match vocab.id(text) {
        Some(id) => Ok(vec![id]),
        None => {
            let ids = vocab.tokenize(text)?;
            if ids.is_empty() {
                return Err(Error::EmptySequence);
            }
            Ok(ids)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    pub text: String,
    pub ids: Vec<usize>,
}

impl Phrase {
    pub fn new(vocab: &Vocabulary, text: &str) -> Result<Self> {
        Ok(Self {
            text: text.to_string(),
            ids: phrase_ids(vocab, text)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LexiconClass {
    pub name: Phrase,
    pub attributes: Vec<Phrase>,
}

/// Resolved token ids for every class, attribute and negative attribute.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub classes: Vec<LexiconClass>,
    pub negatives: Vec<Phrase>,
}

impl Lexicon {
    pub fn new(
        vocab: &Vocabulary,
        class_names: &[String],
        attributes: &[Vec<String>],
        negatives: &[String],
    ) -> Result<Self> {
        if attributes.len() != class_names.len() {
            return Err(Error::DimensionMismatch {
                expected: class_names.len(),
                got: attributes.len(),
            });
        }
        let classes = class_names
            .iter()
            .zip(attributes)
            .map(|(name, attrs)| {
                Ok(LexiconClass {
                    name: Phrase::new(vocab, name)?,
                    attributes: attrs
                        .iter()
                        .map(|a| Phrase::new(vocab, a))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        let negatives = negatives
            .iter()
            .map(|n| Phrase::new(vocab, n))
            .collect::<Result<_>>()?;
        Ok(Self { classes, negatives })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn class(&self, class_id: usize) -> Result<&LexiconClass> {
        self.classes
            .get(class_id)
            .ok_or_else(|| Error::UnknownClass(class_id.to_string()))
    }

    fn attribute(&self, class_id: usize, attribute_id: usize) -> Result<&Phrase> {
        let class = self.class(class_id)?;
        class
            .attributes
            .get(attribute_id)
            .ok_or_else(|| Error::UnknownAttribute {
                class: class.name.text.clone(),
                attribute: attribute_id.to_string(),
            })
    }

    pub fn negative_id(&self, text: &str) -> Result<usize> {
        self.negatives
            .iter()
            .position(|n| n.text == text)
            .ok_or_else(|| Error::UnknownNegative(text.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRef {
    /// Index into the soft prompt bank.
    Soft(usize),
    /// Frozen vocabulary id.
    Frozen(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    AttributeGuided,
    Negative,
    Textual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssembly {
    pub tokens: Vec<TokenRef>,
    pub kind: PromptKind,
    pub class_id: usize,
    pub attribute_id: Option<usize>,
}

impl PromptAssembly {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of leading soft tokens.
    pub fn soft_prefix(&self) -> usize {
        self.tokens
            .iter()
            .take_while(|t| matches!(t, TokenRef::Soft(_)))
            .count()
    }

    /// Frozen ids after the soft prefix, in order.
    pub fn frozen_suffix(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                TokenRef::Frozen(id) => Some(*id),
                TokenRef::Soft(_) => None,
            })
            .collect()
    }

    /// Materializes the token vectors against the current bank.
    pub fn vectors<'a>(&self, bank: &'a SoftPromptBank, vocab: &'a Vocabulary) -> Vec<&'a [f64]> {
        self.tokens
            .iter()
            .map(|t| match t {
                TokenRef::Soft(m) => bank.tokens[*m].as_slice(),
                TokenRef::Frozen(id) => vocab.embedding(*id),
            })
            .collect()
    }

    pub fn encode(
        &self,
        bank: &SoftPromptBank,
        vocab: &Vocabulary,
        enc: &TextEncoder,
    ) -> Result<Vec<f64>> {
        enc.encode_text(&self.vectors(bank, vocab))
    }
}

fn soft_prefix(m: usize) -> impl Iterator<Item = TokenRef> {
    (0..m).map(TokenRef::Soft)
}

fn frozen(ids: &[usize]) -> impl Iterator<Item = TokenRef> + '_ {
    ids.iter().copied().map(TokenRef::Frozen)
}

fn bounded(tokens: Vec<TokenRef>, max_len: usize) -> Result<Vec<TokenRef>> {
    if tokens.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: max_len,
        });
    }
    Ok(tokens)
}

/// `[p_1..p_M, class tokens, attribute tokens]`.
pub fn assemble_attribute_prompt(
    m: usize,
    lexicon: &Lexicon,
    class_id: usize,
    attribute_id: usize,
    max_len: usize,
) -> Result<PromptAssembly> {
    let class = lexicon.class(class_id)?;
    let attr = lexicon.attribute(class_id, attribute_id)?;
    let tokens = soft_prefix(m)
        .chain(frozen(&class.name.ids))
        .chain(frozen(&attr.ids))
        .collect();
    Ok(PromptAssembly {
        tokens: bounded(tokens, max_len)?,
        kind: PromptKind::AttributeGuided,
        class_id,
        attribute_id: Some(attribute_id),
    })
}

/// `[p_1..p_M, class tokens]`, the attribute-free soft prompt.
pub fn assemble_class_prompt(
    m: usize,
    lexicon: &Lexicon,
    class_id: usize,
    max_len: usize,
) -> Result<PromptAssembly> {
    let class = lexicon.class(class_id)?;
    let tokens = soft_prefix(m).chain(frozen(&class.name.ids)).collect();
    Ok(PromptAssembly {
        tokens: bounded(tokens, max_len)?,
        kind: PromptKind::AttributeGuided,
        class_id,
        attribute_id: None,
    })
}

/// `[p_1..p_M, negative tokens, class tokens]`: the negative attribute comes
/// before the class name.
pub fn assemble_negative_prompt(
    m: usize,
    lexicon: &Lexicon,
    class_id: usize,
    negative_id: usize,
    max_len: usize,
) -> Result<PromptAssembly> {
    let class = lexicon.class(class_id)?;
    let neg = lexicon
        .negatives
        .get(negative_id)
        .ok_or_else(|| Error::UnknownNegative(negative_id.to_string()))?;
    let tokens = soft_prefix(m)
        .chain(frozen(&neg.ids))
        .chain(frozen(&class.name.ids))
        .collect();
    Ok(PromptAssembly {
        tokens: bounded(tokens, max_len)?,
        kind: PromptKind::Negative,
        class_id,
        attribute_id: None,
    })
}

/// Fully frozen `[template words, class tokens, attribute tokens?]`.
pub fn assemble_textual_prompt(
    template: &str,
    lexicon: &Lexicon,
    vocab: &Vocabulary,
    class_id: usize,
    attribute_id: Option<usize>,
    max_len: usize,
) -> Result<PromptAssembly> {
    let words = vocab.tokenize(template)?;
    let class = lexicon.class(class_id)?;
    let mut tokens: Vec<TokenRef> = frozen(&words).chain(frozen(&class.name.ids)).collect();
    if let Some(a) = attribute_id {
        tokens.extend(frozen(&lexicon.attribute(class_id, a)?.ids));
    }
    Ok(PromptAssembly {
        tokens: bounded(tokens, max_len)?,
        kind: PromptKind::Textual,
        class_id,
        attribute_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_vocabulary, TokenSpec};

    fn fixture() -> (Vocabulary, Lexicon) {
        let spec = TokenSpec {
            class_names: vec!["cat".into(), "dog".into()],
            attributes: vec!["whiskers".into(), "floppy".into()],
            negatives: vec!["background".into()],
            template_words: vec!["a".into(), "photo".into(), "of".into()],
        };
        let vocab = build_vocabulary(&spec, 5, 8).unwrap();
        let lex = Lexicon::new(
            &vocab,
            &spec.class_names,
            &[
                vec!["whiskers".into()],
                vec!["floppy".into(), "whiskers".into()],
            ],
            &spec.negatives,
        )
        .unwrap();
        (vocab, lex)
    }

    #[test]
    fn init_from_phrase_copies_rows() {
        let (vocab, _) = fixture();
        let bank = init_soft_prompts(&vocab, 4, "a photo of a", 0).unwrap();
        let a = vocab.id("a").unwrap();
        assert_eq!(bank.tokens[0], vocab.embedding(a));
        assert_eq!(bank.tokens[3], vocab.embedding(a));
        assert_eq!(bank.tokens[1], vocab.embedding(vocab.id("photo").unwrap()));
        assert!(matches!(
            init_soft_prompts(&vocab, 4, "a photo of", 0),
            Err(Error::PhraseLengthMismatch {
                expected: 4,
                got: 3
            })
        ));
        let g1 = init_soft_prompts(&vocab, 2, "", 9).unwrap();
        assert_eq!(g1, init_soft_prompts(&vocab, 2, "", 9).unwrap());
        assert_eq!(g1.len(), 2);
    }

    #[test]
    fn layouts() {
        let (vocab, lex) = fixture();
        let cat = vocab.id("cat").unwrap();
        let wh = vocab.id("whiskers").unwrap();
        let bg = vocab.id("background").unwrap();
        let p = assemble_attribute_prompt(4, &lex, 0, 0, 16).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(
            &p.tokens[4..],
            &[TokenRef::Frozen(cat), TokenRef::Frozen(wh)]
        );
        let n = assemble_negative_prompt(4, &lex, 0, 0, 16).unwrap();
        assert_eq!(
            &n.tokens[4..],
            &[TokenRef::Frozen(bg), TokenRef::Frozen(cat)]
        );
        let n0 = assemble_negative_prompt(0, &lex, 0, 0, 16).unwrap();
        assert_eq!(n0.tokens, vec![TokenRef::Frozen(bg), TokenRef::Frozen(cat)]);
        let t = assemble_textual_prompt("a photo of a", &lex, &vocab, 1, Some(1), 16).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.soft_prefix(), 0);
        assert!(matches!(
            assemble_textual_prompt("a zorp", &lex, &vocab, 0, None, 16),
            Err(Error::UnknownToken(_))
        ));
        assert!(matches!(
            assemble_attribute_prompt(4, &lex, 7, 0, 16),
            Err(Error::UnknownClass(_))
        ));
        assert!(matches!(
            assemble_attribute_prompt(4, &lex, 0, 3, 16),
            Err(Error::UnknownAttribute { .. })
        ));
        assert!(matches!(
            assemble_attribute_prompt(15, &lex, 0, 0, 16),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn negative_and_attribute_orderings_encode_differently() {
        let (vocab, _) = fixture();
        let enc = TextEncoder::random(3, 8, 12, 10, 16);
        let bank = init_soft_prompts(&vocab, 2, "", 1).unwrap();
        // Same tokens in opposite order: [p, cat, background] vs [p, background, cat].
        let lex2 = Lexicon::new(
            &vocab,
            &["cat".to_string()],
            &[vec!["background".to_string()]],
            &["background".to_string()],
        )
        .unwrap();
        let a = assemble_attribute_prompt(2, &lex2, 0, 0, 16).unwrap();
        let n = assemble_negative_prompt(2, &lex2, 0, 0, 16).unwrap();
        assert_ne!(a.tokens, n.tokens);
        let ea = a.encode(&bank, &vocab, &enc).unwrap();
        let en = n.encode(&bank, &vocab, &enc).unwrap();
        assert!(ea.iter().zip(&en).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn reassembly_reflects_bank_updates() {
        let (vocab, lex) = fixture();
        let mut bank = init_soft_prompts(&vocab, 4, "a photo of a", 0).unwrap();
        let before_hash = vocab.hash();
        let p = assemble_attribute_prompt(4, &lex, 1, 0, 16).unwrap();
        let before: Vec<Vec<f64>> = p
            .vectors(&bank, &vocab)
            .iter()
            .map(|v| v.to_vec())
            .collect();
        let mut flat = bank.flatten();
        flat[0] += 0.5;
        bank.set_flat(&flat);
        let after = p.vectors(&bank, &vocab);
        assert_eq!(after[0][0], before[0][0] + 0.5);
        assert_eq!(vocab.hash(), before_hash);
    }
}
