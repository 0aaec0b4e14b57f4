use crate::corpus::LabelDistribution;
use crate::error::{Error, Result};

/// Lower clamp applied to predicted probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Two-way softmax, stabilized by subtracting the larger logit.
pub fn softmax2(logits: [f64; 2]) -> Result<LabelDistribution> {
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input {logits:?}")));
    }
    let m = logits[0].max(logits[1]);
    let e_i = (logits[0] - m).exp();
    let e_o = (logits[1] - m).exp();
    let sum = e_i + e_o;
    Ok(LabelDistribution {
        p_i: e_i / sum,
        p_o: e_o / sum,
    })
}

/// `sum_j p(j) * log(p(j) / q(j))` with `0 log 0 = 0` and `q` clamped below
/// at [`PROB_FLOOR`].
pub fn kl_loss(target: &LabelDistribution, pred: &LabelDistribution) -> f64 {
    let term = |p: f64, q: f64| {
        if p == 0.0 {
            0.0
        } else {
            p * (p.ln() - q.max(PROB_FLOOR).ln())
        }
    };
    (term(target.p_i, pred.p_i) + term(target.p_o, pred.p_o)).max(0.0)
}

/// Gradient of [`kl_loss`] composed with [`softmax2`], with respect to the
/// two logits: `pred - target`.
pub fn kl_grad_logits(target: &LabelDistribution, pred: &LabelDistribution) -> [f64; 2] {
    [pred.p_i - target.p_i, pred.p_o - target.p_o]
}
