use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    BceDice,
    Bce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::BceDice => "bce_dice",
            LossKind::Bce => "bce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce_dice" => Ok(LossKind::BceDice),
            "bce" => Ok(LossKind::Bce),
            _ => Err(Error::Config(format!("unknown loss `{s}` (bce_dice | bce)"))),
        }
    }
}

fn check<T: Element>(pred: &Tensor<T>, gt: &[T], op: &'static str) -> Result<()> {
    if pred.numel() != gt.len() {
        return Err(Error::shape(op, format!("pred has {} values, gt {}", pred.numel(), gt.len())));
    }
    if gt.iter().any(|&g| g != T::zero() && g != T::one()) {
        return Err(Error::Usage(format!("{op}: ground truth must be 0 or 1")));
    }
    Ok(())
}

fn clamp<T: Element>(p: T) -> T {
    let lo = T::from_f64_lossy(PROB_CLAMP);
    p.max(lo).min(T::one() - lo)
}

fn bce_parts<T: Element>(pred: &[T], gt: &[T]) -> (T, Vec<T>) {
    let n = T::from_usize(pred.len()).expect("length fits");
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let p = clamp(p);
        total = total - (g * p.ln() + (T::one() - g) * (T::one() - p).ln());
        grad.push((-g / p + (T::one() - g) / (T::one() - p)) / n);
    }
    (total / n, grad)
}

/// Mean binary cross-entropy of probabilities against a {0, 1} mask.
/// Probabilities are clamped before the logarithm; the clamp is treated as
/// identity in the backward pass so saturated outputs still receive signal.
pub fn bce_loss<T: Element>(pred: &Tensor<T>, gt: &[T]) -> Result<Tensor<T>> {
    check(pred, gt, "bce_loss")?;
    let (value, grad) = bce_parts(pred.data(), gt);
    Ok(Tensor::from_op(
        "bce_loss",
        vec![1],
        vec![value],
        vec![pred.clone()],
        Box::new(move |g, _| vec![Some(grad.iter().map(|&d| d * g[0]).collect())]),
    ))
}

/// Mean BCE plus soft Dice loss `1 − (2Σpg + s) / (Σp + Σg + s)`.
pub fn bce_dice_loss<T: Element>(pred: &Tensor<T>, gt: &[T]) -> Result<Tensor<T>> {
    check(pred, gt, "bce_dice_loss")?;
    let (bce, mut grad) = bce_parts(pred.data(), gt);
    let s = T::from_f64_lossy(DICE_SMOOTH);
    let two = T::from_f64_lossy(2.0);
    let mut inter = T::zero();
    let mut sum_p = T::zero();
    let mut sum_g = T::zero();
    for (&p, &g) in pred.data().iter().zip(gt) {
        let p = clamp(p);
        inter = inter + p * g;
        sum_p = sum_p + p;
        sum_g = sum_g + g;
    }
    let num = two * inter + s;
    let den = sum_p + sum_g + s;
    let dice = T::one() - num / den;
    for (d, &g) in grad.iter_mut().zip(gt) {
        // d/dp of −num/den
        *d = *d - (two * g * den - num) / (den * den);
    }
    Ok(Tensor::from_op(
        "bce_dice_loss",
        vec![1],
        vec![bce + dice],
        vec![pred.clone()],
        Box::new(move |g, _| vec![Some(grad.iter().map(|&d| d * g[0]).collect())]),
    ))
}

pub fn loss<T: Element>(kind: LossKind, pred: &Tensor<T>, gt: &[T]) -> Result<Tensor<T>> {
    match kind {
        LossKind::BceDice => bce_dice_loss(pred, gt),
        LossKind::Bce => bce_loss(pred, gt),
    }
}
