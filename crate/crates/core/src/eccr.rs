//! Enhanced client confidence re-weighting: label quality from inverse mean
//! loss, learning efficiency from loss drop and parameter movement, and the
//! normalized per-round collaboration weights built from both.

use crate::error::{Error, Result};

/// Floor applied to the mean loss before inversion; a perfectly fit client
/// would otherwise receive infinite quality.
pub const QUALITY_LOSS_FLOOR: f64 = 1e-8;

/// Bound on the efficiency exponent; the formula is unbounded.
pub const EFFICIENCY_EXP_CLAMP: f64 = 50.0;

/// Per-client statistics gathered at a round barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundStats {
    /// Mean SL loss over the client's private set, current parameters.
    pub mean_sl_loss: f64,
    /// Same quantity one round earlier.
    pub prev_mean_sl_loss: f64,
    /// Euclidean norm of the parameter change over the last round.
    pub param_delta: f64,
    /// Total scalar parameter count of the client's model.
    pub param_count: usize,
}

/// Raw and normalized collaboration weights for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub eta: f64,
    /// True when all confidences were zero and the uniform fallback applied.
    pub uniform_fallback: bool,
}

/// Inverse mean loss, floored. Returns the quality and whether the floor bit.
pub fn label_quality(mean_sl_loss: f64) -> (f64, bool) {
    if mean_sl_loss <= QUALITY_LOSS_FLOOR {
        (1.0 / QUALITY_LOSS_FLOOR, true)
    } else {
        (1.0 / mean_sl_loss, false)
    }
}

/// `exp(loss_drop - param_delta / param_count)`, exponent clamped to
/// ±[`EFFICIENCY_EXP_CLAMP`]. Returns the value and whether the clamp bit.
pub fn learning_efficiency(stats: &ClientRoundStats) -> (f64, bool) {
    let drop = stats.prev_mean_sl_loss - stats.mean_sl_loss;
    let movement = stats.param_delta / stats.param_count as f64;
    let exponent = drop - movement;
    if exponent.abs() > EFFICIENCY_EXP_CLAMP {
        (exponent.clamp(-EFFICIENCY_EXP_CLAMP, EFFICIENCY_EXP_CLAMP).exp(), true)
    } else {
        (exponent.exp(), false)
    }
}

/// Confidence is the product of label quality and learning efficiency.
pub fn client_confidence(quality: f64, efficiency: f64) -> f64 {
    quality * efficiency
}

/// Raw weights `1/(K-1) + eta * F_k / sum(F)`, then normalized to sum to 1.
/// All-zero confidences fall back to exact uniform weights.
pub fn client_weights(confidences: &[f64], eta: f64, clients: usize) -> Result<RoundWeights> {
    if clients < 2 {
        return Err(Error::Usage(format!("re-weighting needs at least 2 clients, got {clients}")));
    }
    if confidences.len() != clients {
        return Err(Error::Usage(format!(
            "{} confidences for {} clients",
            confidences.len(),
            clients
        )));
    }
    if eta < 0.0 {
        return Err(Error::Config(format!("eta must be non-negative, got {eta}")));
    }
    if confidences.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::Numeric("confidences must be finite and non-negative".into()));
    }
    let total: f64 = confidences.iter().sum();
    if total <= 0.0 {
        let uniform = 1.0 / clients as f64;
        return Ok(RoundWeights {
            raw: vec![1.0 / (clients as f64 - 1.0); clients],
            normalized: vec![uniform; clients],
            eta,
            uniform_fallback: true,
        });
    }
    let base = 1.0 / (clients as f64 - 1.0);
    let raw: Vec<f64> = confidences.iter().map(|f| base + eta * f / total).collect();
    // Normalizing a constant vector is exactly uniform; skip the float sum
    // so equal confidences (and eta = 0) give 1/K with no rounding.
    let normalized: Vec<f64> = if raw.iter().all(|w| w.to_bits() == raw[0].to_bits()) {
        vec![1.0 / clients as f64; clients]
    } else {
        let raw_sum: f64 = raw.iter().sum();
        raw.iter().map(|w| w / raw_sum).collect()
    };
    Ok(RoundWeights {
        raw,
        normalized,
        eta,
        uniform_fallback: false,
    })
}
