//! Attack losses: feature distance, top-2 prediction margin, threshold
//! floor, and weighted ensemble fusion.
//!
//! All losses are minimized by the generator. The prediction margin is
//! positive while the attacked model still agrees with the clean label
//! and negative once it has been fooled; the feature loss falls as the
//! adversarial feature map moves away from the clean one.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which per-target loss drives generator training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Feature,
    Prediction,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<LossKind> {
        match s {
            "feature" => Ok(LossKind::Feature),
            "prediction" => Ok(LossKind::Prediction),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss kind '{other}', expected feature|prediction"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Feature => "feature",
            LossKind::Prediction => "prediction",
        }
    }
}

/// Loss configuration: kind, optional threshold floor, per-target weights.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Floor applied per target under ensemble prediction training.
    pub gamma: Option<f32>,
    /// Per-target ensemble weights, all strictly positive.
    pub weights: Vec<f32>,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one target weight required".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "ensemble weights must be strictly positive, got {:?}",
                self.weights
            )));
        }
        if let Some(g) = self.gamma {
            if !(-1.0..=0.0).contains(&g) {
                return Err(Error::InvalidArgument(format!(
                    "gamma must lie in [-1, 0], got {g}"
                )));
            }
        }
        Ok(())
    }
}

/// Top-two summary of a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSummary {
    pub probs: Tensor,
    pub fir: usize,
    pub sec: usize,
    pub p_fir: f32,
    pub p_sec: f32,
}

/// Indices and values of the two largest probabilities; ties break to the
/// lower index.
pub fn top2(probs: &Tensor) -> Result<PredictionSummary> {
    let p = probs.data();
    if p.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "top2 needs at least 2 classes, got {}",
            p.len()
        )));
    }
    let fir = probs.argmax();
    let mut sec = if fir == 0 { 1 } else { 0 };
    for (i, &v) in p.iter().enumerate() {
        if i != fir && v > p[sec] {
            sec = i;
        }
    }
    Ok(PredictionSummary {
        probs: probs.clone(),
        fir,
        sec,
        p_fir: p[fir],
        p_sec: p[sec],
    })
}

/// Feature loss `1 - mean|a - b|`. Equals 1 exactly when the maps agree;
/// driving it down pushes the adversarial features away from the clean
/// ones.
pub fn loss_feature(feat_clean: &Tensor, feat_adv: &Tensor) -> Result<f32> {
    if feat_clean.shape() != feat_adv.shape() {
        return Err(Error::shape(
            "loss_feature",
            feat_clean.shape(),
            feat_adv.shape(),
        ));
    }
    let n = feat_clean.len() as f32;
    let l1: f32 = feat_clean
        .data()
        .iter()
        .zip(feat_adv.data().iter())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<f32>()
        / n;
    Ok(1.0 - l1)
}

/// Gradient of [`loss_feature`] with respect to the adversarial features.
pub fn loss_feature_grad(feat_clean: &Tensor, feat_adv: &Tensor) -> Result<Tensor> {
    if feat_clean.shape() != feat_adv.shape() {
        return Err(Error::shape(
            "loss_feature_grad",
            feat_clean.shape(),
            feat_adv.shape(),
        ));
    }
    let n = feat_clean.len() as f32;
    feat_adv.zip_map(feat_clean, |b, a| {
        if b > a {
            -1.0 / n
        } else if b < a {
            1.0 / n
        } else {
            0.0
        }
    })
}

fn check_label(clean_label: usize, n: usize) -> Result<()> {
    if clean_label >= n {
        return Err(Error::InvalidArgument(format!(
            "clean_label {clean_label} out of range for {n} classes"
        )));
    }
    Ok(())
}

/// Top-2 margin loss: `p_fir - p_sec` while the prediction still matches
/// the clean label, `p_sec - p_fir` once it does not. Negative values
/// mean the example fools the model.
pub fn loss_prediction(clean_label: usize, probs_adv: &Tensor) -> Result<f32> {
    let s = top2(probs_adv)?;
    check_label(clean_label, probs_adv.len())?;
    Ok(if clean_label == s.fir {
        s.p_fir - s.p_sec
    } else {
        s.p_sec - s.p_fir
    })
}

/// Margin loss value plus its gradient with respect to the probability
/// vector; the selected top-2 indices are constants of the forward pass.
pub fn loss_prediction_with_grad(clean_label: usize, probs_adv: &Tensor) -> Result<(f32, Tensor)> {
    let s = top2(probs_adv)?;
    check_label(clean_label, probs_adv.len())?;
    let (value, sign) = if clean_label == s.fir {
        (s.p_fir - s.p_sec, 1.0f32)
    } else {
        (s.p_sec - s.p_fir, -1.0f32)
    };
    let mut grad = Tensor::zeros(&[probs_adv.len()]);
    grad.data_mut()[s.fir] = sign;
    grad.data_mut()[s.sec] = -sign;
    Ok((value, grad))
}

/// Threshold floor `max(gamma, l_p)`.
pub fn loss_threshold(l_p: f32, gamma: f32) -> f32 {
    l_p.max(gamma)
}

/// Subgradient of [`loss_threshold`] in `l_p`: 1 strictly above the
/// floor, 0 at and below it.
pub fn loss_threshold_gate(l_p: f32, gamma: f32) -> f32 {
    if l_p > gamma {
        1.0
    } else {
        0.0
    }
}

/// Weighted sum of per-target losses.
pub fn loss_ensemble(per_target_losses: &[f32], weights: &[f32]) -> Result<f32> {
    if per_target_losses.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "ensemble needs one weight per loss, got {} losses and {} weights",
            per_target_losses.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "ensemble weights must be strictly positive, got {weights:?}"
        )));
    }
    Ok(per_target_losses
        .iter()
        .zip(weights.iter())
        .map(|(&l, &w)| w * l)
        .sum())
}
