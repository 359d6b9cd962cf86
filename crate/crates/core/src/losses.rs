//! Probability transforms and every loss used in training: temperature
//! softmax, cross-entropy, reverse cross-entropy, their weighted sum, and
//! the pairwise/collaborative KL alignment losses.
//!
//! Each loss exists once, as a tape construction; the value-level wrappers
//! run the same construction on a scratch tape and read the scalar out.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Floor applied to predicted probabilities before `ln` in cross-entropy.
pub const PROB_LOG_FLOOR: f64 = 1e-12;

/// Loss hyperparameters: CE weight, RCE weight, softmax temperature, and the
/// clamp substituted for `log 0` inside RCE.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub rce_log_clamp: f64,
}

impl LossConfig {
    pub fn new(lambda: f64, gamma: f64, tau: f64, rce_log_clamp: f64) -> Result<Self> {
        let cfg = LossConfig {
            lambda,
            gamma,
            tau,
            rce_log_clamp,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.gamma < 0.0 || self.lambda + self.gamma <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must satisfy lambda >= 0, gamma >= 0, lambda+gamma > 0; got {}, {}",
                self.lambda, self.gamma
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if self.rce_log_clamp >= 0.0 {
            return Err(Error::Config(format!(
                "rce log clamp must be negative, got {}",
                self.rce_log_clamp
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.4,
            gamma: 0.9,
            tau: 4.0,
            rce_log_clamp: -4.0,
        }
    }
}

/// Row-stochastic `[B, C]` tensor: each row a probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Tensor);

impl ProbDist {
    pub fn new(t: Tensor) -> Result<Self> {
        let (b, c) = t.rows()?;
        for i in 0..b {
            let row = &t.data()[i * c..(i + 1) * c];
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::Distribution(format!(
                    "row {i} contains negative or non-finite entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Distribution(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(ProbDist(t))
    }

    pub fn one_hot(labels: &[u32], classes: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::Usage(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
            data[i * classes + l as usize] = 1.0;
        }
        Ok(ProbDist(Tensor::new(vec![labels.len(), classes], data)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[1]
    }
}

/// How a collaborative KL sum is weighted.
#[derive(Debug, Clone)]
pub enum CollabWeighting<'a> {
    /// Plain sum over sources.
    Unweighted,
    /// The learner's round weight multiplies the whole sum.
    Own(f64),
    /// Each source's round weight multiplies its own term.
    PerSource(&'a [f64]),
}

// ── Tape-level constructions ────────────────────────────────────────────

/// `softmax(z / tau)` row-wise, differentiable through `z`.
pub fn tape_temperature_softmax(tape: &mut Tape, logits: TensorId, tau: f64) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let scaled = tape.scale(logits, 1.0 / tau);
    tape.softmax_rows(scaled)
}

/// Batch-mean `-Σ p log q`, with `q` floored at [`PROB_LOG_FLOOR`] before the
/// log. `p` is a constant target; gradient flows only through `q`.
pub fn tape_cross_entropy(tape: &mut Tape, labels: &ProbDist, probs: TensorId) -> Result<TensorId> {
    let (b, c) = tape.value(probs).rows()?;
    if labels.tensor().shape() != [b, c] {
        return Err(Error::Shape(format!(
            "label shape {:?} does not match prediction shape [{b}, {c}]",
            labels.tensor().shape()
        )));
    }
    let p = tape.constant(labels.tensor().clone());
    let lnq = tape.ln_floor(probs, PROB_LOG_FLOOR)?;
    let prod = tape.mul_elem(p, lnq)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Batch-mean `-Σ q log p` with `log p` clamped below at the configured
/// constant (so `log 0` contributes the clamp, and clamped terms carry zero
/// gradient through `p`). `p` is constant; gradient flows through `q`.
pub fn tape_reverse_cross_entropy(
    tape: &mut Tape,
    labels: &ProbDist,
    probs: TensorId,
    log_clamp: f64,
) -> Result<TensorId> {
    if log_clamp >= 0.0 {
        return Err(Error::Config(format!(
            "rce log clamp must be negative, got {log_clamp}"
        )));
    }
    let (b, c) = tape.value(probs).rows()?;
    if labels.tensor().shape() != [b, c] {
        return Err(Error::Shape(format!(
            "label shape {:?} does not match prediction shape [{b}, {c}]",
            labels.tensor().shape()
        )));
    }
    let ln_p: Vec<f64> = labels
        .tensor()
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v.ln().max(log_clamp) } else { log_clamp })
        .collect();
    let lnp = tape.constant(Tensor::new(vec![b, c], ln_p)?);
    let prod = tape.mul_elem(probs, lnp)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// `lambda * CE + gamma * RCE`.
pub fn tape_sl_loss(
    tape: &mut Tape,
    labels: &ProbDist,
    probs: TensorId,
    cfg: &LossConfig,
) -> Result<TensorId> {
    let ce = tape_cross_entropy(tape, labels, probs)?;
    let rce = tape_reverse_cross_entropy(tape, labels, probs, cfg.rce_log_clamp)?;
    let a = tape.scale(ce, cfg.lambda);
    let g = tape.scale(rce, cfg.gamma);
    tape.add(a, g)
}

/// Batch-mean `KL(softmax(z1/tau) || softmax(z2/tau))`. The teacher logits
/// `z1` are a constant; gradient flows only into the learner's `z2`. Both
/// sides share one log-softmax path, so aligned logits give an exactly zero
/// loss and gradient.
pub fn tape_kl_divergence(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    learner_logits: TensorId,
    tau: f64,
) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    tape.kl_vs_softmax(learner_logits, teacher_logits, tau)
}

/// Sum of pairwise KL terms against every other client's logits, weighted per
/// [`CollabWeighting`].
pub fn tape_collab_kl_loss(
    tape: &mut Tape,
    others: &[&Tensor],
    own_logits: TensorId,
    tau: f64,
    weighting: CollabWeighting<'_>,
) -> Result<TensorId> {
    if others.is_empty() {
        return Err(Error::Usage("collaborative loss needs at least one other client".into()));
    }
    if let CollabWeighting::PerSource(w) = &weighting {
        if w.len() != others.len() {
            return Err(Error::Usage(format!(
                "{} source weights for {} sources",
                w.len(),
                others.len()
            )));
        }
    }
    let mut total: Option<TensorId> = None;
    for (j, teacher) in others.iter().enumerate() {
        let mut kl = tape_kl_divergence(tape, teacher, own_logits, tau)?;
        if let CollabWeighting::PerSource(w) = &weighting {
            kl = tape.scale(kl, w[j]);
        }
        total = Some(match total {
            None => kl,
            Some(t) => tape.add(t, kl)?,
        });
    }
    let mut out = total.expect("non-empty others");
    if let CollabWeighting::Own(w) = weighting {
        out = tape.scale(out, w);
    }
    Ok(out)
}

// ── Value-level wrappers ────────────────────────────────────────────────

fn softmax_rows_value(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let s = tape_temperature_softmax(&mut tape, z, tau)?;
    Ok(tape.value(s).clone())
}

/// `softmax(z / tau)` as a validated distribution.
pub fn temperature_softmax(logits: &Tensor, tau: f64) -> Result<ProbDist> {
    ProbDist::new(softmax_rows_value(logits, tau)?)
}

pub fn cross_entropy(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    let mut tape = Tape::new();
    let qid = tape.constant(q.tensor().clone());
    let l = tape_cross_entropy(&mut tape, p, qid)?;
    tape.scalar_value(l)
}

pub fn reverse_cross_entropy(p: &ProbDist, q: &ProbDist, log_clamp: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let qid = tape.constant(q.tensor().clone());
    let l = tape_reverse_cross_entropy(&mut tape, p, qid, log_clamp)?;
    tape.scalar_value(l)
}

pub fn sl_loss(p: &ProbDist, q: &ProbDist, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let qid = tape.constant(q.tensor().clone());
    let l = tape_sl_loss(&mut tape, p, qid, cfg)?;
    tape.scalar_value(l)
}

pub fn kl_divergence(teacher_logits: &Tensor, learner_logits: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z2 = tape.constant(learner_logits.clone());
    let l = tape_kl_divergence(&mut tape, teacher_logits, z2, tau)?;
    tape.scalar_value(l)
}

pub fn collab_kl_loss(
    own_logits: &Tensor,
    others: &[&Tensor],
    tau: f64,
    weighting: CollabWeighting<'_>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(own_logits.clone());
    let l = tape_collab_kl_loss(&mut tape, others, z, tau, weighting)?;
    tape.scalar_value(l)
}
