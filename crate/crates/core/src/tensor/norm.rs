use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer.
///
/// Starts at mean 0 / variance 1, so evaluating before any training step
/// normalizes with those values.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

/// Per-channel batch normalization of `[b, c, h, w]` maps.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate; eval mode uses the running
/// estimate only.
pub fn batch_norm2d<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: BnMode,
    eps: T,
    momentum: T,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = match *x.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::shape("batch_norm2d", format!("expected rank 4, got {:?}", x.shape()))),
    };
    if gamma.shape() != [c] || beta.shape() != [c] || state.running_mean.len() != c {
        return Err(Error::shape(
            "batch_norm2d",
            format!("input {:?} vs affine {:?}/{:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let plane = h * w;
    let count = b * plane;
    let n = T::from_usize(count).unwrap();
    let xd = x.data();

    let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let values = || (0..b).flat_map(move |bi| &xd[(bi * c + ch) * plane..][..plane]);
                let mu = values().copied().sum::<T>() / n;
                let ss = values().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                mean[ch] = mu;
                var[ch] = ss / n;
                let unbiased = if count > 1 {
                    ss / T::from_usize(count - 1).unwrap()
                } else {
                    var[ch]
                };
                state.running_mean[ch] =
                    (T::one() - momentum) * state.running_mean[ch] + momentum * mu;
                state.running_var[ch] =
                    (T::one() - momentum) * state.running_var[ch] + momentum * unbiased;
            }
            let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv)
        }
        BnMode::Eval => (
            state.running_mean.clone(),
            state.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        ),
    };

    // Normalized input, kept for the backward rule.
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + plane {
                let v = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                out[i] = g * v + be;
            }
        }
    }

    let gamma_c = gamma.clone();
    Ok(Tensor::from_op(
        "batch_norm2d",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gy, _| {
            let mut gx = vec![T::zero(); gy.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ch in 0..c {
                let idx = || (0..b).flat_map(move |bi| (bi * c + ch) * plane..(bi * c + ch + 1) * plane);
                let sum_g: T = idx().map(|i| gy[i]).sum();
                let sum_gx: T = idx().map(|i| gy[i] * xhat[i]).sum();
                ggamma[ch] = sum_gx;
                gbeta[ch] = sum_g;
                let scale = gamma_c.data()[ch] * inv_std[ch];
                match mode {
                    BnMode::Train => {
                        let (mg, mgx) = (sum_g / n, sum_gx / n);
                        for i in idx() {
                            gx[i] = scale * (gy[i] - mg - xhat[i] * mgx);
                        }
                    }
                    BnMode::Eval => {
                        for i in idx() {
                            gx[i] = scale * gy[i];
                        }
                    }
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::from_vec(&[c], vec![1.0; c]).unwrap(),
            Tensor::from_vec(&[c], vec![0.0; c]).unwrap(),
        )
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let x = Tensor::full(&[2, 1, 3, 3], 4.2);
        let (g, b) = affine(1);
        let mut st = BatchNormState::new(1);
        let y = batch_norm2d(&x, &g, &b, &mut st, BnMode::Train, 1e-5, 0.1).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn standardized_channel_unchanged() {
        let x = Tensor::from_vec(&[1, 1, 1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (g, b) = affine(1);
        let mut st = BatchNormState::new(1);
        let y = batch_norm2d(&x, &g, &b, &mut st, BnMode::Train, 1e-5, 0.1).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn matches_two_pass_oracle_and_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, c, h, w) = (3, 2, 4, 5);
        let xv: Vec<f64> = (0..b * c * h * w).map(|_| rng.random_range(-2.0..3.0)).collect();
        let gv = vec![0.7, 1.3];
        let bv = vec![-0.2, 0.4];
        let x = Tensor::from_vec(&[b, c, h, w], xv.clone()).unwrap();
        let mut st = BatchNormState::new(c);
        let y = batch_norm2d(
            &x,
            &Tensor::from_vec(&[c], gv.clone()).unwrap(),
            &Tensor::from_vec(&[c], bv.clone()).unwrap(),
            &mut st,
            BnMode::Train,
            1e-5,
            0.1,
        )
        .unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b)
                .flat_map(|bi| xv[(bi * c + ch) * h * w..][..h * w].to_vec())
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            for bi in 0..b {
                for i in 0..h * w {
                    let at = (bi * c + ch) * h * w + i;
                    let want = gv[ch] * (xv[at] - mean) / (var + 1e-5).sqrt() + bv[ch];
                    assert!((y.data()[at] - want).abs() < 1e-10);
                }
            }
            assert!((st.running_mean[ch] - 0.1 * mean).abs() < 1e-12);
            assert!((st.running_var[ch] - (0.9 + 0.1 * var * n / (n - 1.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_before_training_uses_initial_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, -3.0]).unwrap();
        let (g, b) = affine(1);
        let mut st = BatchNormState::new(1);
        let y = batch_norm2d(&x, &g, &b, &mut st, BnMode::Eval, 0.0, 0.1).unwrap();
        assert_eq!(y.data(), &[2.0, -3.0]);
        assert_eq!(st, BatchNormState::new(1));
    }
}
