use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Element;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment buffers, one per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.params().map(|(_, _, p)| vec![T::zero(); p.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
        }
    }
}

/// One bias-corrected Adam update of `param` in place. `t` is the step
/// number after incrementing (first step is 1).
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Element>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = T::from_f64_lossy(beta1);
    let b2 = T::from_f64_lossy(beta2);
    let c1 = T::from_f64_lossy(1.0 - beta1.powi(t as i32));
    let c2 = T::from_f64_lossy(1.0 - beta2.powi(t as i32));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Applies one Adam step to every parameter that holds a gradient and
/// increments the step counter. Parameters without a gradient keep their
/// values and moments.
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Usage(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let updates: Vec<_> = store
        .params()
        .map(|(id, name, p)| (id, name.to_string(), p.data().to_vec(), p.grad().map(|g| g.clone())))
        .collect();
    for (i, (id, name, mut data, grad)) in updates.into_iter().enumerate() {
        let Some(grad) = grad else { continue };
        if grad.len() != data.len() || state.m[i].len() != data.len() {
            return Err(Error::Usage(format!("gradient/moment shape mismatch for `{name}`")));
        }
        adam_update(
            &mut data,
            &grad,
            &mut state.m[i],
            &mut state.v[i],
            state.t,
            lr,
            state.beta1,
            state.beta2,
            state.eps,
        );
        store.set(id, data)?;
    }
    Ok(())
}
