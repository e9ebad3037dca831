//! Training objectives as tape expressions.
//!
//! Each builder returns a `[1]` scalar on the tape so the terms can be
//! weighted and summed before a single backward pass. The `*_value`
//! helpers evaluate the same expressions in `f64` without gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

/// Scores are clamped this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities `scores` (`B` entries in any
/// shape) against boolean labels.
pub fn bce<T: Element>(tape: &mut Tape<T>, scores: Var, labels: &[bool]) -> Result<Var> {
    let n = tape.value(scores).len();
    if n != labels.len() || n == 0 {
        return Err(Error::dim("bce", &[n], &[labels.len()]));
    }
    let shape = tape.shape(scores).to_vec();
    let s = tape.clamp(scores, cst(PROB_CLAMP), cst(1.0 - PROB_CLAMP));
    let y = Tensor::new(shape.clone(), labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect())?;
    let not_y = y.map(|v| T::one() - v);
    let y = tape.constant(y);
    let not_y = tape.constant(not_y);
    let log_s = tape.ln(s);
    let neg = tape.scale(s, -T::one());
    let one_minus = tape.add_scalar(neg, T::one());
    let log_1ms = tape.ln(one_minus);
    let pos_part = tape.mul(log_s, y)?;
    let neg_part = tape.mul(log_1ms, not_y)?;
    let both = tape.add(pos_part, neg_part)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, cst(-1.0 / n as f64)))
}

/// Supervised contrastive loss over the rows of `embeddings` (`[B×M]`).
///
/// Rows are L2-normalized; for anchor `i` the positives are the other rows
/// sharing its label and the denominator runs over every row except `i`.
/// Anchors without positives are skipped and the result is the mean over
/// the remaining anchors, or 0 when none remain.
pub fn supcon<T: Element>(tape: &mut Tape<T>, embeddings: Var, labels: &[bool], temperature: f64) -> Result<Var> {
    let (b, _) = tape.value(embeddings).dims2();
    if b != labels.len() {
        return Err(Error::dim("supcon", &[b], &[labels.len()]));
    }
    if temperature <= 0.0 {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let positives: Vec<usize> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let z = tape.normalize_rows(embeddings, cst(1e-12));
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let sim = tape.scale(sim, cst(1.0 / temperature));
    let mask: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
    let log_prob = tape.log_softmax_masked(sim, mask)?;
    let weights = Tensor::from_fn([b, b], |k| {
        let (i, j) = (k / b, k % b);
        if i != j && labels[i] == labels[j] {
            cst::<T>(-1.0 / (positives[i] as f64 * anchors as f64))
        } else {
            T::zero()
        }
    });
    let weights = tape.constant(weights);
    let weighted = tape.mul(log_prob, weights)?;
    Ok(tape.sum(weighted))
}

/// Mean of `max(0, margin − (s_pos − s_neg))` over `(pos, neg)` index pairs
/// into the flattened `scores`. No pairs contribute 0.
pub fn margin_rank<T: Element>(tape: &mut Tape<T>, scores: Var, pairs: &[(usize, usize)], margin: f64) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let pos = tape.select(scores, pairs.iter().map(|p| p.0).collect())?;
    let neg = tape.select(scores, pairs.iter().map(|p| p.1).collect())?;
    let gap = tape.sub(pos, neg)?;
    let gap = tape.scale(gap, -T::one());
    let hinge = tape.add_scalar(gap, cst(margin));
    let hinge = tape.relu(hinge);
    let total = tape.sum(hinge);
    Ok(tape.scale(total, cst(1.0 / pairs.len() as f64)))
}

/// Every (native, decoy) index pair that shares a complex id.
pub fn within_complex_pairs<S: AsRef<str>>(complex_ids: &[S], native: &[bool]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, ci) in complex_ids.iter().enumerate() {
        if !native[i] {
            continue;
        }
        for (j, cj) in complex_ids.iter().enumerate() {
            if !native[j] && ci.as_ref() == cj.as_ref() {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

fn eval_scalar(build: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).data()[0])
}

pub fn bce_value(scores: &[f64], labels: &[bool]) -> Result<f64> {
    eval_scalar(|t| {
        let s = t.constant(Tensor::new([scores.len()], scores.to_vec())?);
        bce(t, s, labels)
    })
}

pub fn supcon_value(embeddings: &Tensor<f64>, labels: &[bool], temperature: f64) -> Result<f64> {
    eval_scalar(|t| {
        let e = t.constant(embeddings.clone());
        supcon(t, e, labels, temperature)
    })
}

pub fn margin_rank_value(pos: &[f64], neg: &[f64], margin: f64) -> Result<f64> {
    if pos.len() != neg.len() {
        return Err(Error::dim("margin_rank", &[pos.len()], &[neg.len()]));
    }
    let k = pos.len();
    let scores: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let pairs: Vec<_> = (0..k).map(|i| (i, k + i)).collect();
    eval_scalar(|t| {
        let s = t.constant(Tensor::new([2 * k], scores)?);
        margin_rank(t, s, &pairs, margin)
    })
}
