//! Information losses over relation Gram matrices, plus a toy task loss.
//!
//! With every Gram trace-normalised and α = 2:
//!
//! ```text
//! L_r = -log2 ||G_r^T||_F^2 + log2 ||G_i o G_m o G_r^T / tr||_F^2
//! L_d =  log2 ||G_r^T||_F^2 + log2 ||G_r^S||_F^2 - log2 ||G_r^T o G_r^S / tr||_F^2
//! L_info = λ1 L_r + λ2 L_d
//! ```
//!
//! `L_r` equals `S_2(G_r) - S_2(G_i, G_m, G_r)` and `L_d` equals
//! `-I_2(G_r^T; G_r^S)`. Gram matrices are built over the batch axis.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of the compression (`lambda1`) and distillation (`lambda2`) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Contract(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss term, serialised as one JSON object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_d: f64,
    pub l_task: f64,
    pub l_info: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn batch_of(tape: &Tape, v: Var) -> Result<usize> {
    let b = *tape
        .value(v)
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("expected a batched tensor".into()))?;
    if b < 2 {
        return Err(Error::Contract(format!(
            "information losses need a batch of at least 2 samples, got {b}"
        )));
    }
    Ok(b)
}

/// `R R^T / tr(R R^T)` for `R: [B, M]`.
pub fn relation_gram(tape: &mut Tape, r: Var) -> Result<Var> {
    let rt = tape.transpose(r)?;
    let g = tape.matmul(r, rt)?;
    tape.trace_normalize(g)
}

/// Flatten to `[B, M]`, l2-normalise rows, linear Gram, trace-normalise.
pub fn feature_gram(tape: &mut Tape, z: Var) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("features need rank >= 2, got {shape:?}")));
    }
    let flat = tape.reshape(z, &[shape[0], shape[1..].iter().product()])?;
    let unit = tape.l2norm_rows(flat)?;
    relation_gram(tape, unit)
}

fn log2_frob(tape: &mut Tape, g: Var) -> Result<Var> {
    let f = tape.frobenius_sq(g)?;
    tape.log2_scalar(f)
}

/// Compression loss. Teacher features must be detached.
pub fn loss_r(tape: &mut Tape, z_i_t: Var, z_m_t: Var, r_t: Var) -> Result<Var> {
    if tape.requires_grad(z_i_t) || tape.requires_grad(z_m_t) {
        return Err(Error::Contract("teacher features must be detached".into()));
    }
    let b = batch_of(tape, r_t)?;
    for v in [z_i_t, z_m_t] {
        if tape.value(v).shape()[0] != b {
            return Err(Error::Shape("teacher features and relation disagree on B".into()));
        }
    }
    let g_i = feature_gram(tape, z_i_t)?;
    let g_m = feature_gram(tape, z_m_t)?;
    let g_r = relation_gram(tape, r_t)?;
    let im = tape.hadamard(g_i, g_m)?;
    let imr = tape.hadamard(im, g_r)?;
    let g_imr = tape.trace_normalize(imr)?;
    let a = log2_frob(tape, g_r)?;
    let c = log2_frob(tape, g_imr)?;
    tape.sub(c, a)
}

/// Distillation loss between teacher and student relations.
pub fn loss_d(tape: &mut Tape, r_t: Var, r_s: Var) -> Result<Var> {
    let bt = batch_of(tape, r_t)?;
    let bs = batch_of(tape, r_s)?;
    if bt != bs {
        return Err(Error::Shape(format!("teacher batch {bt} != student batch {bs}")));
    }
    let g_t = relation_gram(tape, r_t)?;
    let g_s = relation_gram(tape, r_s)?;
    let ts = tape.hadamard(g_t, g_s)?;
    let g_ts = tape.trace_normalize(ts)?;
    let a = log2_frob(tape, g_t)?;
    let b = log2_frob(tape, g_s)?;
    let c = log2_frob(tape, g_ts)?;
    let ab = tape.add(a, b)?;
    tape.sub(ab, c)
}

/// `λ1 L_r + λ2 L_d`.
pub fn loss_info(tape: &mut Tape, l_r: Var, l_d: Var, weights: &LossWeights) -> Result<Var> {
    weights.validate()?;
    let a = tape.scale(l_r, weights.lambda1)?;
    let b = tape.scale(l_d, weights.lambda2)?;
    tape.add(a, b)
}

fn check_target(tape: &Tape, logits: Var, target: &Tensor) -> Result<()> {
    if tape.value(logits).shape() != target.shape() || target.rank() != 2 {
        return Err(Error::Shape(format!(
            "logits {:?} and target {:?} must be equal [B, K] shapes",
            tape.value(logits).shape(),
            target.shape()
        )));
    }
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Contract("targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
pub fn bce_term(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    check_target(tape, logits, target)?;
    // softplus(x) - t x == -[t ln σ(x) + (1 - t) ln(1 - σ(x))]
    let t = tape.constant(target.clone());
    let sp = tape.softplus(logits)?;
    let tx = tape.hadamard(t, logits)?;
    let per = tape.sub(sp, tx)?;
    tape.mean(per)
}

/// `1 - mean_b (Σ p t + 1) / (Σ p + Σ t - Σ p t + 1)` with `p = sigmoid(logits)`.
pub fn soft_iou_term(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    check_target(tape, logits, target)?;
    let (b, k) = target.dims2()?;
    let t = tape.constant(target.clone());
    let p = tape.sigmoid(logits)?;
    let pt = tape.hadamard(p, t)?;
    let inter = tape.sum_rows(pt)?;
    let sum_p = tape.sum_rows(p)?;
    let sum_t: Vec<f64> = target.data().chunks(k.max(1)).map(|r| r.iter().sum()).collect();
    let sum_t = tape.constant(Tensor::new(vec![b], sum_t)?);
    let union = tape.add(sum_p, sum_t)?;
    let union = tape.sub(union, inter)?;
    let num = tape.add_scalar(inter, 1.0)?;
    let den = tape.add_scalar(union, 1.0)?;
    let iou = tape.div(num, den)?;
    let mean_iou = tape.mean(iou)?;
    let neg = tape.scale(mean_iou, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Unweighted BCE plus soft-IoU.
pub fn toy_structure_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let bce = bce_term(tape, logits, target)?;
    let iou = soft_iou_term(tape, logits, target)?;
    tape.add(bce, iou)
}

/// Information losses recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct InfoTerms {
    pub l_r: Var,
    pub l_d: Var,
    pub l_info: Var,
}

/// Records `L_r`, `L_d` and `L_info` for the given teacher features and
/// relations.
pub fn info_terms(
    tape: &mut Tape,
    z_i_t: Var,
    z_m_t: Var,
    r_t: Var,
    r_s: Var,
    weights: &LossWeights,
) -> Result<InfoTerms> {
    let l_r = loss_r(tape, z_i_t, z_m_t, r_t)?;
    let l_d = loss_d(tape, r_t, r_s)?;
    let l_info = loss_info(tape, l_r, l_d, weights)?;
    Ok(InfoTerms { l_r, l_d, l_info })
}

impl LossBreakdown {
    /// Reads values off the tape; `l_total = l_task + l_info`.
    pub fn from_tape(tape: &Tape, terms: &InfoTerms, l_task: Option<Var>, weights: &LossWeights) -> Self {
        let l_r = tape.value(terms.l_r).item();
        let l_d = tape.value(terms.l_d).item();
        let l_info = tape.value(terms.l_info).item();
        let l_task = l_task.map_or(0.0, |v| tape.value(v).item());
        Self {
            l_r,
            l_d,
            l_task,
            l_info,
            l_total: l_task + l_info,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
        }
    }
}

/// Value-only evaluation of the information losses from precomputed
/// relations `r_t`, `r_s: [B, M]` and teacher features.
pub fn evaluate_info(
    z_i_t: &Tensor,
    z_m_t: &Tensor,
    r_t: &Tensor,
    r_s: &Tensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let zi = tape.constant(z_i_t.clone());
    let zm = tape.constant(z_m_t.clone());
    let rt = tape.constant(r_t.clone());
    let rs = tape.constant(r_s.clone());
    let terms = info_terms(&mut tape, zi, zm, rt, rs, weights)?;
    Ok(LossBreakdown::from_tape(&tape, &terms, None, weights))
}
