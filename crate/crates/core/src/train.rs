//! Soft-prompt optimization, evaluation, checkpoints and parameter sweeps.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attribute::{sample_attributes, AttributePool, SampledAttributes};
use crate::encoder::{check_version, DualEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::loss::{attribute_class_logits, graph};
use crate::numerics::{argmax, seeded_rng, Matrix, Tape, Var};
use crate::prompt::{
    assemble_attribute_prompt, assemble_class_prompt, assemble_negative_prompt,
    assemble_textual_prompt, init_soft_prompts, Lexicon, PromptAssembly, SoftPromptBank,
};
use crate::synthbench::{FewShotTask, GENERAL_NEGATIVE};

pub const CHECKPOINT_VERSION: u32 = 1;
const SHUFFLE_STREAM: u64 = 0x005e_ed0f_ba7c;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Class-name-only soft prompts, cross-entropy only.
    Baseline,
    /// Attribute prompts with prompt regularization.
    Argue,
    /// Attribute prompts, regularization and the negative-prompt term.
    ArgueN,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Argue => "argue",
            Mode::ArgueN => "argue_n",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "argue" => Ok(Mode::Argue),
            "argue_n" => Ok(Mode::ArgueN),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    /// One shared negative attribute for every class.
    General,
    /// A per-class negative attribute aligned with that class's signature.
    ClassSpecific,
}

impl std::str::FromStr for NegativeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(NegativeKind::General),
            "class_specific" => Ok(NegativeKind::ClassSpecific),
            _ => Err(Error::Config(format!("unknown negative kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub tau: f64,
    pub beta: f64,
    pub gamma: f64,
    pub m: usize,
    pub clusters: usize,
    pub shots: usize,
    pub seed: u64,
    pub mode: Mode,
    pub negative: NegativeKind,
    pub init_phrase: String,
    pub template: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.032,
            momentum: 0.0,
            tau: 0.01,
            beta: 20.0,
            gamma: 3.0,
            m: 4,
            clusters: 3,
            shots: 16,
            seed: 0,
            mode: Mode::ArgueN,
            negative: NegativeKind::General,
            init_phrase: "a photo of a".into(),
            template: "a photo of a".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.clusters == 0 || self.shots == 0 {
            return bad("epochs, batch_size, clusters and shots must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        for (name, value) in [("beta", self.beta), ("gamma", self.gamma)] {
            if value < 0.0 {
                return Err(Error::NegativeWeight { name, value });
            }
        }
        Ok(())
    }

    /// Regularization weight actually applied in this mode.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            Mode::Baseline => 0.0,
            _ => self.beta,
        }
    }

    /// Negative-prompt weight actually applied in this mode.
    pub fn effective_gamma(&self) -> f64 {
        match self.mode {
            Mode::ArgueN => self.gamma,
            _ => 0.0,
        }
    }

    pub fn uses_attributes(&self) -> bool {
        self.mode != Mode::Baseline
    }
}

/// `p - lr * g`, element-wise.
pub fn sgd_step(bank: &SoftPromptBank, grad: &[f64], lr: f64) -> Result<SoftPromptBank> {
    let flat = bank.flatten();
    if grad.len() != flat.len() {
        return Err(Error::DimensionMismatch {
            expected: flat.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let next: Vec<f64> = flat.iter().zip(grad).map(|(p, g)| p - lr * g).collect();
    let mut out = bank.clone();
    out.set_flat(&next);
    Ok(out)
}

/// Training shots of `class`, truncated to `shots`.
pub fn class_shots(task: &FewShotTask, class: usize, shots: usize) -> &[Vec<f64>] {
    let all = &task.train[class];
    &all[..shots.min(all.len())]
}

/// Samples attributes for every class from its own training shots, or
/// returns `None` in baseline mode.
pub fn prepare_attributes(
    config: &TrainConfig,
    task: &FewShotTask,
    pool: &AttributePool,
    vocab: &Vocabulary,
    encoders: &DualEncoder,
) -> Result<Option<SampledAttributes>> {
    if !config.uses_attributes() {
        return Ok(None);
    }
    let images: Vec<Vec<Vec<f64>>> = (0..task.num_classes())
        .map(|c| class_shots(task, c, config.shots).to_vec())
        .collect();
    sample_attributes(
        pool,
        &task.class_names,
        &images,
        encoders,
        vocab,
        &config.template,
        config.clusters,
        config.seed,
    )
    .map(Some)
}

fn lexicon_for(
    task: &FewShotTask,
    vocab: &Vocabulary,
    attributes: Option<&SampledAttributes>,
) -> Result<Lexicon> {
    let attrs: Vec<Vec<String>> = match attributes {
        Some(sel) => {
            if sel.classes.len() != task.num_classes() {
                return Err(Error::DimensionMismatch {
                    expected: task.num_classes(),
                    got: sel.classes.len(),
                });
            }
            for (c, s) in sel.classes.iter().enumerate() {
                if s.class != task.class_names[c] {
                    return Err(Error::UnknownClass(s.class.clone()));
                }
                if s.selected.is_empty() {
                    return Err(Error::EmptyAttributeSet(s.class.clone()));
                }
            }
            sel.texts()
        }
        None => vec![Vec::new(); task.num_classes()],
    };
    Lexicon::new(vocab, &task.class_names, &attrs, &task.negatives)
}

/// Per-class soft prompts used for classification.
fn classification_prompts(
    config: &TrainConfig,
    lexicon: &Lexicon,
    class: usize,
    max_len: usize,
) -> Result<Vec<PromptAssembly>> {
    if config.uses_attributes() {
        (0..lexicon.classes[class].attributes.len())
            .map(|j| assemble_attribute_prompt(config.m, lexicon, class, j, max_len))
            .collect()
    } else {
        Ok(vec![assemble_class_prompt(
            config.m, lexicon, class, max_len,
        )?])
    }
}

/// A soft prompt reduced to its frozen part: the summed token features of
/// every frozen position and the total length.
#[derive(Debug, Clone)]
struct CompiledPrompt {
    frozen_features: Vec<f64>,
    len: usize,
}

fn compile(p: &PromptAssembly, vocab: &Vocabulary, encoders: &DualEncoder) -> CompiledPrompt {
    let mut sum = vec![0.0; vocab.d_tok()];
    let prefix = p.soft_prefix();
    for (k, id) in p.frozen_suffix().iter().enumerate() {
        let f = encoders
            .text
            .token_feature(vocab.embedding(*id), prefix + k);
        for (s, v) in sum.iter_mut().zip(f) {
            *s += v;
        }
    }
    CompiledPrompt {
        frozen_features: sum,
        len: p.len(),
    }
}

/// Loss terms on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub l_ent: Var,
    pub l_reg: Option<Var>,
    pub l_neg: Option<Var>,
    pub total: Var,
}

/// Everything about the objective that does not depend on the bank.
#[derive(Debug, Clone)]
pub struct Objective {
    config: TrainConfig,
    encoders: DualEncoder,
    d_tok: usize,
    /// Soft prompts per base class, class-major.
    class_prompts: Vec<Vec<CompiledPrompt>>,
    negative_prompts: Vec<CompiledPrompt>,
    textual: Option<Arc<Matrix>>,
    /// Unit image embeddings of the training shots.
    images: Vec<Vec<f64>>,
    /// Local (base-index) labels.
    labels: Vec<usize>,
}

impl Objective {
    pub fn new(
        config: &TrainConfig,
        task: &FewShotTask,
        vocab: &Vocabulary,
        encoders: &DualEncoder,
        attributes: Option<&SampledAttributes>,
    ) -> Result<Self> {
        config.validate()?;
        if task.base_classes.is_empty() {
            return Err(Error::EmptyTask);
        }
        if config.uses_attributes() && attributes.is_none() {
            return Err(Error::Config(format!(
                "mode {} needs sampled attributes",
                config.mode.name()
            )));
        }
        let lexicon = lexicon_for(task, vocab, attributes.filter(|_| config.uses_attributes()))?;
        let max_len = encoders.text.max_len();
        let mut class_prompts = Vec::new();
        let mut negative_prompts = Vec::new();
        let mut textual_rows = Vec::new();
        for &c in &task.base_classes {
            let prompts = classification_prompts(config, &lexicon, c, max_len)?;
            if config.uses_attributes() {
                for p in &prompts {
                    let t = assemble_textual_prompt(
                        &config.template,
                        &lexicon,
                        vocab,
                        c,
                        p.attribute_id,
                        max_len,
                    )?;
                    textual_rows.push(t.encode(
                        &SoftPromptBank {
                            tokens: vec![],
                            init: String::new(),
                        },
                        vocab,
                        &encoders.text,
                    )?);
                }
            }
            class_prompts.push(
                prompts
                    .iter()
                    .map(|p| compile(p, vocab, encoders))
                    .collect(),
            );
            if config.mode == Mode::ArgueN {
                let neg_text = match config.negative {
                    NegativeKind::General => GENERAL_NEGATIVE.to_string(),
                    NegativeKind::ClassSpecific => task.class_negative(c),
                };
                let nid = lexicon.negative_id(&neg_text)?;
                let p = assemble_negative_prompt(config.m, &lexicon, c, nid, max_len)?;
                negative_prompts.push(compile(&p, vocab, encoders));
            }
        }
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (local, &c) in task.base_classes.iter().enumerate() {
            for x in class_shots(task, c, config.shots) {
                images.push(encoders.image.encode_image(x)?);
                labels.push(local);
            }
        }
        let textual = if textual_rows.is_empty() {
            None
        } else {
            Some(Arc::new(Matrix::from_rows(&textual_rows)?))
        };
        Ok(Self {
            config: config.clone(),
            encoders: encoders.clone(),
            d_tok: vocab.d_tok(),
            class_prompts,
            negative_prompts,
            textual,
            images,
            labels,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn embed(&self, tape: &mut Tape, soft: &[Var], p: &CompiledPrompt) -> Var {
        let frozen = tape.leaf(p.frozen_features.clone());
        let mut feats = soft.to_vec();
        feats.push(frozen);
        self.encoders.text.head_tape(tape, &feats, p.len)
    }

    /// Builds the full objective for the samples in `batch` on `tape`, with
    /// `bank` a flat `M * d_tok` leaf.
    pub fn build(&self, tape: &mut Tape, bank: Var, batch: &[usize]) -> ObjectiveTerms {
        let cfg = &self.config;
        let soft: Vec<Var> = (0..cfg.m)
            .map(|m| {
                let idx: Vec<usize> = (m * self.d_tok..(m + 1) * self.d_tok).collect();
                let tok = tape.gather(bank, &idx);
                self.encoders.text.token_feature_tape(tape, tok, m)
            })
            .collect();
        let rows: Vec<Vec<f64>> = batch.iter().map(|i| self.images[*i].clone()).collect();
        let images = Arc::new(Matrix::from_rows(&rows).expect("equal image dims"));
        let labels: Vec<usize> = batch.iter().map(|i| self.labels[*i]).collect();

        let mut soft_embeddings = Vec::new();
        let mut class_logits = Vec::with_capacity(self.class_prompts.len());
        for prompts in &self.class_prompts {
            let logits: Vec<Var> = prompts
                .iter()
                .map(|p| {
                    let w = self.embed(tape, &soft, p);
                    soft_embeddings.push(w);
                    graph::cosine_logits(tape, &images, w, cfg.tau)
                })
                .collect();
            class_logits.push(graph::pool_attributes(tape, &logits));
        }
        let l_ent = graph::batch_cross_entropy(tape, &class_logits, &labels);
        let mut parts = vec![l_ent];

        let l_reg = self.textual.as_ref().map(|textual| {
            let r = graph::regularization(tape, &soft_embeddings, textual, cfg.tau);
            parts.push(tape.scale(r, cfg.effective_beta()));
            r
        });
        let l_neg = if self.negative_prompts.is_empty() {
            None
        } else {
            let logits: Vec<Var> = self
                .negative_prompts
                .iter()
                .map(|p| {
                    let w = self.embed(tape, &soft, p);
                    graph::cosine_logits(tape, &images, w, cfg.tau)
                })
                .collect();
            let n = graph::negative(tape, &logits, batch.len());
            parts.push(tape.scale(n, cfg.effective_gamma()));
            Some(n)
        };
        let total = if parts.len() == 1 {
            l_ent
        } else {
            tape.sum(&parts)
        };
        ObjectiveTerms {
            l_ent,
            l_reg,
            l_neg,
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_ent: f64,
    pub l_reg: Option<f64>,
    pub l_neg: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSeeds {
    pub text: u64,
    pub image: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub bank: Vec<Vec<f64>>,
    pub vocab_hash: String,
    pub encoder_seeds: EncoderSeeds,
    pub steps: usize,
    /// Attributes used for every class, or `None` in baseline mode.
    pub attributes: Option<SampledAttributes>,
}

impl Checkpoint {
    pub fn bank(&self) -> SoftPromptBank {
        SoftPromptBank {
            tokens: self.bank.clone(),
            init: self.config.init_phrase.clone(),
        }
    }

    pub fn verify_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.hash();
        if found != self.vocab_hash {
            return Err(Error::VocabularyHashMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|_| Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: "unreadable".into(),
        })?;
        check_version(&v, CHECKPOINT_VERSION)?;
        serde_json::from_value(v).map_err(|e| Error::SchemaViolation(e.to_string()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&s)
}

/// Loads a checkpoint and checks it against the supplied vocabulary.
pub fn load_checkpoint_checked(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.verify_vocabulary(vocab)?;
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLosses>,
}

/// Runs SGD over seeded, shuffled mini-batches of base-class shots.
pub fn train(
    config: &TrainConfig,
    task: &FewShotTask,
    vocab: &Vocabulary,
    encoders: &DualEncoder,
    attributes: Option<&SampledAttributes>,
) -> Result<TrainOutcome> {
    let objective = Objective::new(config, task, vocab, encoders, attributes)?;
    let mut bank = init_soft_prompts(vocab, config.m, &config.init_phrase, config.seed)?;
    let n = objective.num_samples();
    if n == 0 {
        return Err(Error::EmptyTask);
    }
    let mut rng = seeded_rng(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = vec![0.0; bank.flatten().len()];
    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let leaf = tape.leaf(bank.flatten());
            let terms = objective.build(&mut tape, leaf, batch);
            let total = tape.scalar(terms.total);
            if !total.is_finite() {
                return Err(Error::DivergedLoss(epoch));
            }
            sums[0] += tape.scalar(terms.l_ent);
            sums[1] += terms.l_reg.map_or(0.0, |v| tape.scalar(v));
            sums[2] += terms.l_neg.map_or(0.0, |v| tape.scalar(v));
            sums[3] += total;
            batches += 1;
            let grad = tape.backward(terms.total).wrt(leaf);
            let step = if config.momentum > 0.0 {
                for (v, g) in velocity.iter_mut().zip(&grad) {
                    *v = config.momentum * *v + g;
                }
                velocity.clone()
            } else {
                grad
            };
            bank = sgd_step(&bank, &step, config.learning_rate)?;
            steps += 1;
        }
        let mean = |s: f64| s / batches as f64;
        history.push(EpochLosses {
            epoch,
            l_ent: mean(sums[0]),
            l_reg: objective.textual.as_ref().map(|_| mean(sums[1])),
            l_neg: (!objective.negative_prompts.is_empty()).then(|| mean(sums[2])),
            total: mean(sums[3]),
        });
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            bank: bank.tokens,
            vocab_hash: vocab.hash(),
            encoder_seeds: EncoderSeeds {
                text: encoders.text.seed(),
                image: encoders.image.seed(),
            },
            steps,
            attributes: attributes.filter(|_| config.uses_attributes()).cloned(),
        },
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub split: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Prompt embeddings per class under the checkpoint's bank.
fn class_embeddings(
    ckpt: &Checkpoint,
    task: &FewShotTask,
    vocab: &Vocabulary,
    encoders: &DualEncoder,
    classes: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let lexicon = lexicon_for(task, vocab, ckpt.attributes.as_ref())?;
    let bank = ckpt.bank();
    classes
        .iter()
        .map(|&c| {
            classification_prompts(&ckpt.config, &lexicon, c, encoders.text.max_len())?
                .iter()
                .map(|p| p.encode(&bank, vocab, &encoders.text))
                .collect()
        })
        .collect()
}

/// Accuracy on one split; predictions are the argmax over the split's
/// classes, ties to the lowest class index.
pub fn evaluate(
    ckpt: &Checkpoint,
    task: &FewShotTask,
    vocab: &Vocabulary,
    encoders: &DualEncoder,
    split: &str,
) -> Result<SplitAccuracy> {
    let data = task.split(split)?;
    ckpt.verify_vocabulary(vocab)?;
    let per_class = class_embeddings(ckpt, task, vocab, encoders, &data.classes)?;
    let mut correct = 0;
    for (x, y) in data.features.iter().zip(&data.labels) {
        let f = encoders.image.encode_image(x)?;
        let logits = attribute_class_logits(&f, &per_class, ckpt.config.tau)?;
        if data.classes[argmax(&logits)] == *y {
            correct += 1;
        }
    }
    let total = data.len();
    Ok(SplitAccuracy {
        split: split.to_string(),
        accuracy: if total == 0 {
            0.0
        } else {
            100.0 * correct as f64 / total as f64
        },
        correct,
        total,
    })
}

/// `2ab / (a + b)`, or 0 when both are 0.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    for v in [base, new] {
        if v < 0.0 || v.is_nan() {
            return Err(Error::NegativeInput(v));
        }
    }
    if base + new == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * new / (base + new))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_accuracy: f64,
    pub new_accuracy: f64,
    pub harmonic_mean: f64,
    pub splits: Vec<SplitAccuracy>,
    /// Mean accuracy over the OOD splits.
    pub ood_mean: f64,
    pub final_losses: Option<EpochLosses>,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitAccuracy> {
        self.splits.iter().find(|s| s.split == name)
    }
}

/// Evaluates every split of the task.
pub fn evaluate_all(
    ckpt: &Checkpoint,
    task: &FewShotTask,
    vocab: &Vocabulary,
    encoders: &DualEncoder,
    history: Option<&[EpochLosses]>,
) -> Result<EvalReport> {
    let splits: Vec<SplitAccuracy> = task
        .split_names()
        .iter()
        .map(|s| evaluate(ckpt, task, vocab, encoders, s))
        .collect::<Result<_>>()?;
    let acc = |name: &str| {
        splits
            .iter()
            .find(|s| s.split == name)
            .map_or(0.0, |s| s.accuracy)
    };
    let base = acc("base_test");
    let new = acc("new_test");
    let ood: Vec<f64> = splits
        .iter()
        .filter(|s| s.split.starts_with("ood_"))
        .map(|s| s.accuracy)
        .collect();
    Ok(EvalReport {
        base_accuracy: base,
        new_accuracy: new,
        harmonic_mean: harmonic_mean(base, new)?,
        ood_mean: if ood.is_empty() {
            0.0
        } else {
            ood.iter().sum::<f64>() / ood.len() as f64
        },
        splits,
        final_losses: history.and_then(|h| h.last().cloned()),
    })
}

/// Sample attributes, train and evaluate in one call.
pub fn run_experiment(
    config: &TrainConfig,
    task: &FewShotTask,
    pool: &AttributePool,
    vocab: &Vocabulary,
    encoders: &DualEncoder,
) -> Result<(TrainOutcome, EvalReport)> {
    let attrs = prepare_attributes(config, task, pool, vocab, encoders)?;
    let outcome = train(config, task, vocab, encoders, attrs.as_ref())?;
    let report = evaluate_all(
        &outcome.checkpoint,
        task,
        vocab,
        encoders,
        Some(&outcome.history),
    )?;
    Ok((outcome, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Clusters,
    Shots,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Clusters => "clusters",
            SweepParam::Shots => "shots",
            SweepParam::Beta => "beta",
        }
    }

    /// Copy of `config` with this parameter set to `value`.
    pub fn apply(self, config: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = config.clone();
        let as_count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!(
                    "{} needs a positive integer, got {v}",
                    self.name()
                )))
            }
        };
        match self {
            SweepParam::Gamma => c.gamma = value,
            SweepParam::Beta => c.beta = value,
            SweepParam::Clusters => c.clusters = as_count(value)?,
            SweepParam::Shots => c.shots = as_count(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "clusters" => Ok(SweepParam::Clusters),
            "shots" => Ok(SweepParam::Shots),
            "beta" => Ok(SweepParam::Beta),
            _ => Err(Error::UnknownParameter(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub base: f64,
    pub new: f64,
    pub h: f64,
    pub ood_mean: f64,
}

/// One full sample-train-evaluate run per value. Runs fan out over at most
/// `threads` workers; rows come back in value order.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    config: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    task: &FewShotTask,
    pool: &AttributePool,
    vocab: &Vocabulary,
    encoders: &DualEncoder,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    let configs: Vec<TrainConfig> = values
        .iter()
        .map(|v| param.apply(config, *v))
        .collect::<Result<_>>()?;
    let run = |(cfg, value): (&TrainConfig, &f64)| -> Result<SweepRow> {
        let (_, report) = run_experiment(cfg, task, pool, vocab, encoders)?;
        Ok(SweepRow {
            param: param.name().to_string(),
            value: *value,
            base: report.base_accuracy,
            new: report.new_accuracy,
            h: report.harmonic_mean,
            ood_mean: report.ood_mean,
        })
    };
    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool_threads.install(|| {
        configs
            .par_iter()
            .zip(values.par_iter())
            .map(run)
            .collect::<Result<Vec<_>>>()
    })
}

fn csv_string(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `epoch,l_ent,l_reg,l_neg,total`; absent terms are empty fields.
pub fn history_csv(history: &[EpochLosses]) -> String {
    csv_string(
        &["epoch", "l_ent", "l_reg", "l_neg", "total"],
        history.iter().map(|h| {
            vec![
                h.epoch.to_string(),
                h.l_ent.to_string(),
                opt(h.l_reg),
                opt(h.l_neg),
                h.total.to_string(),
            ]
        }),
    )
}

/// `param,base,new,h,ood_mean`; `param` holds the swept value.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    csv_string(
        &["param", "base", "new", "h", "ood_mean"],
        rows.iter().map(|r| {
            vec![
                r.value.to_string(),
                r.base.to_string(),
                r.new.to_string(),
                r.h.to_string(),
                r.ood_mean.to_string(),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_examples() {
        let bank = SoftPromptBank {
            tokens: vec![vec![1.0]],
            init: String::new(),
        };
        assert_eq!(
            sgd_step(&bank, &[0.5], 0.032).unwrap().tokens,
            vec![vec![0.984]]
        );
        assert_eq!(sgd_step(&bank, &[0.0], 0.032).unwrap(), bank);
        assert_eq!(sgd_step(&bank, &[0.7], 0.0).unwrap(), bank);
        assert!(matches!(
            sgd_step(&bank, &[f64::NAN], 0.1),
            Err(Error::NonFiniteGradient)
        ));
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(82.69, 63.22).unwrap() - 71.66).abs() <= 0.01);
        assert!((harmonic_mean(83.77, 78.74).unwrap() - 81.18).abs() <= 0.01);
        assert_eq!(harmonic_mean(40.0, 40.0).unwrap(), 40.0);
        assert_eq!(harmonic_mean(40.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(
            harmonic_mean(-1.0, 3.0),
            Err(Error::NegativeInput(_))
        ));
    }

    #[test]
    fn mode_weights() {
        let mut c = TrainConfig {
            mode: Mode::Argue,
            ..TrainConfig::default()
        };
        assert_eq!(c.effective_gamma(), 0.0);
        assert_eq!(c.effective_beta(), 20.0);
        c.mode = Mode::Baseline;
        assert_eq!(c.effective_beta(), 0.0);
        assert!("zorp".parse::<SweepParam>().is_err());
    }

    #[test]
    fn csv_headers() {
        assert!(history_csv(&[]).starts_with("epoch,l_ent,l_reg,l_neg,total\n"));
        assert!(sweep_csv(&[]).starts_with("param,base,new,h,ood_mean\n"));
    }
}
