//! Pixel-wise binary segmentation metrics.
//!
//! Dataset scores are micro-averaged: counts are summed over images first
//! and scored once. A ratio whose denominator is zero scores 0 and is listed
//! in [`Scores::undefined`].

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Tallies `pred >= threshold` against a {0, 1} ground truth.
pub fn confusion<P, G>(pred: &[P], gt: &[G], threshold: f64) -> Result<ConfusionCounts>
where
    P: Copy + Into<f64>,
    G: Copy + Into<f64>,
{
    if pred.len() != gt.len() {
        return Err(Error::Usage(format!(
            "prediction has {} pixels, mask has {}",
            pred.len(),
            gt.len()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Usage(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        let positive = p.into() >= threshold;
        let truth = g.into();
        if truth != 0.0 && truth != 1.0 {
            return Err(Error::Usage(format!("mask value {truth} is not 0 or 1")));
        }
        match (positive, truth == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Names of scores whose denominator was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

pub fn scores(c: &ConfusionCounts) -> Scores {
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let iou = ratio("iou", c.tp, c.tp + c.fp + c.fn_);
    let precision = ratio("precision", c.tp, c.tp + c.fp);
    let recall = ratio("recall", c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1".into());
        0.0
    };
    Scores {
        iou,
        precision,
        recall,
        f1,
        undefined,
    }
}
