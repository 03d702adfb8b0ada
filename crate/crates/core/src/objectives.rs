//! Training objectives for the two alternating phases.
//!
//! Shared phase: `CE(y′, y) + λ·KL(R_k ‖ R_{g→k})`.
//! Specific phase: `CE(y″, y) − μ·min(KL(y″ ‖ y′), 10) + (𝒱/2)(‖A‖²_F + ‖B‖²_F)`.
//!
//! The KL between two matrix stacks softmax-normalizes each layer's flattened
//! entries and averages the per-layer divergences.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::alignment::SharedStack;
use crate::error::{Error, Result};

/// Upper clamp on the (subtracted) prediction KL in the specific loss.
pub const PREDICTION_KL_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// η, step size for `A` and `B`.
    pub lr_specific: f64,
    /// η′, step size for `R` and `Ω`.
    pub lr_share: f64,
    /// 𝒱, L2 coefficient on `A` and `B`.
    #[serde(default)]
    pub weight_decay: f64,
    /// λ, weight of the matrix KL in the shared loss.
    #[serde(default = "one")]
    pub kl_weight: f64,
    /// μ, weight of the prediction KL in the specific loss.
    #[serde(default = "one")]
    pub pred_kl_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            lr_specific: 0.05,
            lr_share: 0.05,
            weight_decay: 1e-4,
            kl_weight: 1.0,
            pred_kl_weight: 1.0,
        }
    }
}

impl Hyperparameters {
    /// Step sizes may be zero (frozen training); everything must be finite and
    /// non-negative.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lr_specific", self.lr_specific),
            ("lr_share", self.lr_share),
            ("weight_decay", self.weight_decay),
            ("kl_weight", self.kl_weight),
            ("pred_kl_weight", self.pred_kl_weight),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Components of one loss evaluation.
///
/// Shared phase: `total = ce + λ·kl_term`, `reg = 0`.
/// Specific phase: `total = ce − μ·kl_term + reg`, with `kl_term` already clamped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kl_term: f64,
    pub reg: f64,
}

pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let (imax, max) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
    // The argmax term contributes exactly 1; ln_1p keeps the rest precise.
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != imax)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    logits.mapv(|v| (v - max) - rest.ln_1p())
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

fn check_logits(logits: ArrayView1<f64>) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::Input("need at least two classes".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite logits".into()));
    }
    Ok(())
}

pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    check_logits(logits)?;
    if label >= logits.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)[label])
}

/// `∂CE/∂logits = softmax − onehot`.
pub fn cross_entropy_grad(logits: ArrayView1<f64>, label: usize) -> Array1<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

/// `KL(softmax(p) ‖ softmax(q))`.
pub fn prediction_kl(p_logits: ArrayView1<f64>, q_logits: ArrayView1<f64>) -> Result<f64> {
    check_logits(p_logits)?;
    check_logits(q_logits)?;
    if p_logits.len() != q_logits.len() {
        return Err(Error::Shape(format!(
            "logit lengths {} and {} differ",
            p_logits.len(),
            q_logits.len()
        )));
    }
    Ok(kl_from_logits(p_logits, q_logits))
}

fn kl_from_logits(p_logits: ArrayView1<f64>, q_logits: ArrayView1<f64>) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    // Clamp at zero: the sum can land a few ulps below when p ≈ q.
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

/// Gradient of `KL(softmax(p) ‖ softmax(q))` with respect to `p`:
/// `p_j (log p_j − log q_j − KL)`.
pub fn prediction_kl_grad(p_logits: ArrayView1<f64>, q_logits: ArrayView1<f64>) -> Array1<f64> {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let diff = &lp - &lq;
    let p = lp.mapv(f64::exp);
    let kl = (&p * &diff).sum();
    p * (diff - kl)
}

/// Row-major flattening of one layer.
fn flatten(m: &Array2<f64>) -> Array1<f64> {
    m.iter().copied().collect()
}

/// Mean over layers of `KL(softmax(vec L_l) ‖ softmax(vec Ref_l))`.
pub fn matrix_kl(local: &SharedStack, reference: &SharedStack) -> Result<f64> {
    local.check_same_shape(reference, "matrix_kl")?;
    let total: f64 = local
        .layers()
        .iter()
        .zip(reference.layers())
        .map(|(l, r)| kl_from_logits(flatten(l).view(), flatten(r).view()))
        .sum();
    Ok(total / local.depth() as f64)
}

/// Gradients of [`matrix_kl`] with respect to the local and reference stacks.
pub fn matrix_kl_grads(
    local: &SharedStack,
    reference: &SharedStack,
) -> Result<(SharedStack, SharedStack)> {
    local.check_same_shape(reference, "matrix_kl")?;
    let scale = 1.0 / local.depth() as f64;
    let rank = local.rank();
    let mut d_local = Vec::with_capacity(local.depth());
    let mut d_ref = Vec::with_capacity(local.depth());
    for (l, r) in local.layers().iter().zip(reference.layers()) {
        let (lf, rf) = (flatten(l), flatten(r));
        let gl = prediction_kl_grad(lf.view(), rf.view()) * scale;
        // ∂KL/∂q_logits = softmax(q) − softmax(p)
        let gr = (softmax(rf.view()) - softmax(lf.view())) * scale;
        d_local.push(gl.into_shape_with_order((rank, rank)).expect("r*r entries"));
        d_ref.push(gr.into_shape_with_order((rank, rank)).expect("r*r entries"));
    }
    Ok((SharedStack::new(d_local)?, SharedStack::new(d_ref)?))
}

/// Sum of squared Frobenius norms over a list of matrices.
pub fn squared_norm(ms: &[Array2<f64>]) -> f64 {
    ms.iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Single-sample shared-phase loss.
pub fn loss_share(
    logits: ArrayView1<f64>,
    label: usize,
    local_r: &SharedStack,
    ref_r: &SharedStack,
    hyper: &Hyperparameters,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(logits, label)?;
    let kl_term = matrix_kl(local_r, ref_r)?;
    Ok(LossBreakdown {
        total: ce + hyper.kl_weight * kl_term,
        ce,
        kl_term,
        reg: 0.0,
    })
}

/// Single-sample specific-phase loss. `phase1_logits` is a constant.
pub fn loss_specific(
    logits: ArrayView1<f64>,
    label: usize,
    phase1_logits: ArrayView1<f64>,
    a_all: &[Array2<f64>],
    b_all: &[Array2<f64>],
    hyper: &Hyperparameters,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(logits, label)?;
    let kl_term = prediction_kl(logits, phase1_logits)?.min(PREDICTION_KL_CLAMP);
    let reg = 0.5 * hyper.weight_decay * (squared_norm(a_all) + squared_norm(b_all));
    Ok(LossBreakdown {
        total: ce - hyper.pred_kl_weight * kl_term + reg,
        ce,
        kl_term,
        reg,
    })
}
