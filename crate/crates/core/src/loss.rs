//! Predictive distributions and loss terms.
//!
//! Plain functions take embeddings and validate their inputs. The [`graph`]
//! submodule builds the same quantities on a [`Tape`](crate::numerics::Tape)
//! for training.

use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy, dot, logsumexp, softmax_with_temperature, validate_distribution,
};

fn cosines(f: &[f64], ws: &[Vec<f64>]) -> Result<Vec<f64>> {
    ws.iter()
        .map(|w| {
            if w.len() != f.len() {
                return Err(Error::DimensionMismatch {
                    expected: f.len(),
                    got: w.len(),
                });
            }
            Ok(dot(f, w))
        })
        .collect()
}

/// Softmax of `cos(f, w_c) / tau` over hand-written class prompts.
pub fn zero_shot_distribution(f: &[f64], textual: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    softmax_with_temperature(&cosines(f, textual)?, tau)
}

/// Same form as [`zero_shot_distribution`] with soft-prompt embeddings.
pub fn soft_prompt_distribution(f: &[f64], soft: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    softmax_with_temperature(&cosines(f, soft)?, tau)
}

/// Per-class logit `log Σ_j exp(cos(f, w_c^j) / tau)`; classes may have
/// different attribute counts.
pub fn attribute_class_logits(
    f: &[f64],
    per_class: &[Vec<Vec<f64>>],
    tau: f64,
) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    per_class
        .iter()
        .enumerate()
        .map(|(c, ws)| {
            if ws.is_empty() {
                return Err(Error::EmptyAttributeSet(c.to_string()));
            }
            let l: Vec<f64> = cosines(f, ws)?.iter().map(|v| v / tau).collect();
            Ok(logsumexp(&l))
        })
        .collect()
}

/// Distribution whose class mass is the sum of its attributes' exponentiated logits.
pub fn attribute_averaged_distribution(
    f: &[f64],
    per_class: &[Vec<Vec<f64>>],
    tau: f64,
) -> Result<Vec<f64>> {
    let logits = attribute_class_logits(f, per_class, tau)?;
    softmax_with_temperature(&logits, 1.0)
}

pub fn classification_loss(p: &[f64], label: usize) -> Result<f64> {
    cross_entropy(p, label)
}

/// Arithmetic mean of per-sample cross-entropies.
pub fn batch_classification_loss(ps: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if ps.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: ps.len(),
            got: labels.len(),
        });
    }
    let mut total = 0.0;
    for (p, y) in ps.iter().zip(labels) {
        total += cross_entropy(p, *y)?;
    }
    Ok(total / ps.len() as f64)
}

/// Softmax over all textual prompts, flattened class-major.
pub fn regularization_distribution(
    soft: &[f64],
    textual: &[Vec<Vec<f64>>],
    tau: f64,
) -> Result<Vec<f64>> {
    let flat: Vec<Vec<f64>> = textual.iter().flatten().cloned().collect();
    if flat.is_empty() {
        return Err(Error::EmptyTextualSet);
    }
    softmax_with_temperature(&cosines(soft, &flat)?, tau)
}

/// Mean over `(c, j)` of `-log P(own textual counterpart | soft prompt)`.
pub fn regularization_loss(
    soft: &[Vec<Vec<f64>>],
    textual: &[Vec<Vec<f64>>],
    tau: f64,
) -> Result<f64> {
    let shape = |s: &[Vec<Vec<f64>>]| s.iter().map(Vec::len).collect::<Vec<_>>();
    if shape(soft) != shape(textual) {
        return Err(Error::DimensionMismatch {
            expected: textual.iter().map(Vec::len).sum(),
            got: soft.iter().map(Vec::len).sum(),
        });
    }
    let flat_soft: Vec<&Vec<f64>> = soft.iter().flatten().collect();
    if flat_soft.is_empty() {
        return Err(Error::EmptyTextualSet);
    }
    let mut total = 0.0;
    for (k, s) in flat_soft.iter().enumerate() {
        let p = regularization_distribution(s, textual, tau)?;
        total += cross_entropy(&p, k)?;
    }
    Ok(total / flat_soft.len() as f64)
}

/// Softmax of `cos(f, n_c) / tau` over negative prompts.
pub fn negative_distribution(f: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    softmax_with_temperature(&cosines(f, negatives)?, tau)
}

/// `-(1/C) Σ_c log p_c`: equals `ln C` at the uniform distribution and is
/// strictly larger anywhere else.
pub fn negative_loss(p: &[f64]) -> Result<f64> {
    validate_distribution(p)?;
    let c = p.len() as f64;
    Ok(-p
        .iter()
        .map(|v| v.max(crate::numerics::PROB_FLOOR).ln())
        .sum::<f64>()
        / c)
}

/// `l_ent + beta * l_reg + gamma * l_neg`.
pub fn total_loss(l_ent: f64, l_reg: f64, l_neg: f64, beta: f64, gamma: f64) -> Result<f64> {
    if beta < 0.0 {
        return Err(Error::NegativeWeight {
            name: "beta",
            value: beta,
        });
    }
    if gamma < 0.0 {
        return Err(Error::NegativeWeight {
            name: "gamma",
            value: gamma,
        });
    }
    Ok(l_ent + beta * l_reg + gamma * l_neg)
}

/// Tape builders for the training objective.
pub mod graph {
    use std::sync::Arc;

    use crate::numerics::{Matrix, Tape, Var};

    /// `(F w) / tau` for a batch of unit image embeddings stored as rows of `images`.
    pub fn cosine_logits(tape: &mut Tape, images: &Arc<Matrix>, w: Var, tau: f64) -> Var {
        let cos = tape.matvec(images, w, None);
        tape.scale(cos, 1.0 / tau)
    }

    /// Element-wise logsumexp of one class's attribute logit vectors.
    pub fn pool_attributes(tape: &mut Tape, logits: &[Var]) -> Var {
        if logits.len() == 1 {
            logits[0]
        } else {
            tape.logsumexp_across(logits)
        }
    }

    /// Per-sample log-softmax over classes. `class_logits[c]` has one entry
    /// per sample; returns one log-probability vector per sample.
    pub fn per_sample_log_softmax(tape: &mut Tape, class_logits: &[Var], batch: usize) -> Vec<Var> {
        let all = tape.concat(class_logits);
        (0..batch)
            .map(|b| {
                let idx: Vec<usize> = (0..class_logits.len()).map(|c| c * batch + b).collect();
                let row = tape.gather(all, &idx);
                tape.log_softmax(row)
            })
            .collect()
    }

    /// Mean cross-entropy of the batch.
    pub fn batch_cross_entropy(tape: &mut Tape, class_logits: &[Var], labels: &[usize]) -> Var {
        let rows = per_sample_log_softmax(tape, class_logits, labels.len());
        let picked: Vec<Var> = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| tape.index(*r, *y))
            .collect();
        let joined = tape.concat(&picked);
        let s = tape.reduce_sum(joined);
        tape.scale(s, -1.0 / labels.len() as f64)
    }

    /// Contrastive loss of each soft embedding against all textual embeddings
    /// (rows of `textual`, same order as `soft`), averaged.
    pub fn regularization(tape: &mut Tape, soft: &[Var], textual: &Arc<Matrix>, tau: f64) -> Var {
        let picked: Vec<Var> = soft
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let l = cosine_logits(tape, textual, *w, tau);
                let ls = tape.log_softmax(l);
                tape.index(ls, k)
            })
            .collect();
        let joined = tape.concat(&picked);
        let s = tape.reduce_sum(joined);
        tape.scale(s, -1.0 / soft.len() as f64)
    }

    /// Batch mean of `-(1/C) Σ_c log P_n(c | x)`.
    pub fn negative(tape: &mut Tape, class_logits: &[Var], batch: usize) -> Var {
        let rows = per_sample_log_softmax(tape, class_logits, batch);
        let joined = tape.concat(&rows);
        let s = tape.reduce_sum(joined);
        tape.scale(s, -1.0 / (batch * class_logits.len()) as f64)
    }
}
