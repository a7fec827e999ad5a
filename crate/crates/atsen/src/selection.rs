//! Reliable-label construction from teacher predictions.
//!
//! Two filters run in sequence: tokens whose two teachers disagree fall back
//! to `"O"`, then tokens whose confidence does not strictly exceed the
//! threshold fall back to `"O"` as well. Whatever survives supervises the
//! student's cross-entropy loss; demoted tokens are handled per the mask
//! policy.

use serde::{Deserialize, Serialize};

use crate::corpus::O_TAG;
use crate::error::{Error, Result};

/// How demoted tokens (disagreement or low confidence) are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Demoted tokens are supervised as `"O"` (the default).
    SuperviseAsO,
    /// Demoted tokens are excluded from the CE loss entirely.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    /// Confidence threshold; labels survive only with confidence strictly
    /// above it.
    pub sigma1: f64,
    pub mask_policy: MaskPolicy,
    /// When false, the two-teacher agreement filter is skipped and each
    /// pair selects from its own teacher alone (the "w/o CP" ablation).
    pub consistency: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            sigma1: 0.9,
            mask_policy: MaskPolicy::SuperviseAsO,
            consistency: true,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma1) {
            return Err(Error::config("sigma1", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-token supervision targets plus the CE mask. Demoted tokens carry the
/// `"O"` tag; whether they are actually supervised depends on the policy
/// that produced the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliableLabels {
    pub tags: Vec<usize>,
    pub mask: Vec<bool>,
}

impl ReliableLabels {
    pub fn supervised_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Keeps a token's label only where both teachers predict it identically;
/// disagreements become `"O"`.
pub fn consistent_prediction(y_t1: &[usize], y_t2: &[usize]) -> Result<Vec<usize>> {
    if y_t1.len() != y_t2.len() {
        return Err(Error::Input(format!(
            "teacher predictions differ in length: {} vs {}",
            y_t1.len(),
            y_t2.len()
        )));
    }
    Ok(y_t1
        .iter()
        .zip(y_t2)
        .map(|(&a, &b)| if a == b { a } else { O_TAG })
        .collect())
}

/// Demotes tokens whose confidence is not strictly above `sigma1` to `"O"`.
pub fn threshold_filter(tags: &[usize], confidences: &[f64], sigma1: f64) -> Result<Vec<usize>> {
    if tags.len() != confidences.len() {
        return Err(Error::Input(format!(
            "tags and confidences differ in length: {} vs {}",
            tags.len(),
            confidences.len()
        )));
    }
    if !(0.0..=1.0).contains(&sigma1) {
        return Err(Error::config("sigma1", "must be in [0, 1]"));
    }
    if let Some(&c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Input(format!("confidence {c} outside [0, 1]")));
    }
    Ok(tags
        .iter()
        .zip(confidences)
        .map(|(&t, &c)| if c > sigma1 { t } else { O_TAG })
        .collect())
}

/// Full two-teacher selection: agreement filter, then the confidence
/// threshold applied to the minimum of the two teachers' confidences (the
/// conservative choice once agreement is established).
pub fn select_reliable(
    t1_pred: (&[usize], &[f64]),
    t2_pred: (&[usize], &[f64]),
    cfg: &SelectionConfig,
) -> Result<ReliableLabels> {
    cfg.validate()?;
    let (y1, c1) = t1_pred;
    let (y2, c2) = t2_pred;
    if y1.len() != c1.len() || y2.len() != c2.len() {
        return Err(Error::Input("prediction/confidence length mismatch".into()));
    }
    let agreed = consistent_prediction(y1, y2)?;
    let min_conf: Vec<f64> = c1.iter().zip(c2).map(|(&a, &b)| a.min(b)).collect();
    let thresholded = threshold_filter(&agreed, &min_conf, cfg.sigma1)?;
    // A token is demoted when the teachers disagreed or its confidence
    // failed the threshold; the threshold applies uniformly, so even an
    // agreed "O" can be demoted (visible only in the exclude mask).
    let demoted: Vec<bool> = (0..agreed.len())
        .map(|j| y1[j] != y2[j] || !(min_conf[j] > cfg.sigma1))
        .collect();
    Ok(ReliableLabels {
        tags: thresholded,
        mask: build_mask(&demoted, cfg.mask_policy),
    })
}

/// Single-teacher selection (threshold only), used when the agreement filter
/// is ablated away.
pub fn select_single(pred: (&[usize], &[f64]), cfg: &SelectionConfig) -> Result<ReliableLabels> {
    cfg.validate()?;
    let (y, c) = pred;
    if y.len() != c.len() {
        return Err(Error::Input("prediction/confidence length mismatch".into()));
    }
    let thresholded = threshold_filter(y, c, cfg.sigma1)?;
    let demoted: Vec<bool> = c.iter().map(|&conf| !(conf > cfg.sigma1)).collect();
    Ok(ReliableLabels {
        tags: thresholded,
        mask: build_mask(&demoted, cfg.mask_policy),
    })
}

fn build_mask(demoted: &[bool], policy: MaskPolicy) -> Vec<bool> {
    match policy {
        MaskPolicy::SuperviseAsO => vec![true; demoted.len()],
        MaskPolicy::Exclude => demoted.iter().map(|&d| !d).collect(),
    }
}
