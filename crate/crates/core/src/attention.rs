//! Multi-head differential attention.
//!
//! Per head, queries and keys are projected to `2d` columns and split into
//! halves. Two softmax attention maps are formed from the halves and their
//! λ-weighted difference is applied to the unsplit `2d`-wide values:
//!
//! ```text
//! A1 = softmax(Q1 K1ᵀ / √d),  A2 = softmax(Q2 K2ᵀ / √d)
//! head = (A1 − λ A2) V
//! ```
//!
//! Head outputs are concatenated (`h · 2d` columns) and mapped back to `c`
//! channels by an output projection. No positional encoding, masking or
//! per-head normalization is applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffAttentionConfig {
    /// Embedding (channel) width `c`.
    pub channels: usize,
    /// Width `d` of each query/key half.
    pub head_dim: usize,
    pub heads: usize,
    /// Suppression coefficient λ ∈ [0, 1].
    pub lambda: f64,
}

impl DiffAttentionConfig {
    /// `heads` heads with `d = c / (2 · heads)`.
    pub fn for_channels(channels: usize, heads: usize, lambda: f64) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(2 * heads) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {heads} heads of even width"
            )));
        }
        let cfg = DiffAttentionConfig {
            channels,
            head_dim: channels / (2 * heads),
            heads,
            lambda,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.channels == 0 || self.head_dim == 0 || self.heads == 0 {
            return Err(Error::Config(format!("degenerate attention config {self:?}")));
        }
        Ok(())
    }

    /// Column count of the fused Q/K/V projections (`h · 2d`).
    pub fn inner_width(&self) -> usize {
        self.heads * 2 * self.head_dim
    }
}

/// Fused projection weights: `w_q`, `w_k`, `w_v` are `[c, h·2d]` (head `i`
/// owns columns `[2d·i, 2d·(i+1))`), `w_o` is `[h·2d, c]`.
#[derive(Clone, Debug)]
pub struct DiffAttentionWeights<T: Element> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

impl<T: Element> DiffAttentionWeights<T> {
    pub fn validate(&self, cfg: &DiffAttentionConfig) -> Result<()> {
        cfg.validate()?;
        let inner = [cfg.channels, cfg.inner_width()];
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.shape() != inner {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {inner:?}",
                    w.shape()
                )));
            }
        }
        if self.w_o.shape() != [cfg.inner_width(), cfg.channels] {
            return Err(Error::Config(format!(
                "w_o has shape {:?}, expected {:?}",
                self.w_o.shape(),
                [cfg.inner_width(), cfg.channels]
            )));
        }
        Ok(())
    }
}

/// One head's projected operands.
#[derive(Clone, Debug)]
pub struct HeadProjections<T: Element> {
    pub q1: Tensor<T>,
    pub q2: Tensor<T>,
    pub k1: Tensor<T>,
    pub k2: Tensor<T>,
    pub v: Tensor<T>,
}

fn check_tokens<T: Element>(x: &Tensor<T>, cfg: &DiffAttentionConfig) -> Result<()> {
    if x.rank() != 3 || x.shape()[2] != cfg.channels {
        return Err(Error::Config(format!(
            "attention input {:?} must be [b, n, {}]",
            x.shape(),
            cfg.channels
        )));
    }
    Ok(())
}

/// Projects `x: [b, n, c]` and splits every head's query/key columns into
/// two halves of width `d`.
pub fn project_and_split<T: Element>(
    x: &Tensor<T>,
    cfg: &DiffAttentionConfig,
    w: &DiffAttentionWeights<T>,
) -> Result<Vec<HeadProjections<T>>> {
    check_tokens(x, cfg)?;
    w.validate(cfg)?;
    let q = x.matmul(&w.w_q)?;
    let k = x.matmul(&w.w_k)?;
    let v = x.matmul(&w.w_v)?;
    let width = 2 * cfg.head_dim;
    (0..cfg.heads)
        .map(|h| {
            let qh = q.narrow(2, h * width, width)?.split_lastdim(2)?;
            let kh = k.narrow(2, h * width, width)?.split_lastdim(2)?;
            Ok(HeadProjections {
                q1: qh[0].clone(),
                q2: qh[1].clone(),
                k1: kh[0].clone(),
                k2: kh[1].clone(),
                v: v.narrow(2, h * width, width)?,
            })
        })
        .collect()
}

/// The two attention maps `(A1, A2)`, each `[b, n, n]` with unit row sums.
pub fn attention_maps<T: Element>(p: &HeadProjections<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = p.q1.shape()[2];
    if [&p.q2, &p.k1, &p.k2].iter().any(|t| t.shape() != p.q1.shape()) {
        return Err(Error::shape(
            "diff_attention",
            format!(
                "q1 {:?}, q2 {:?}, k1 {:?}, k2 {:?}",
                p.q1.shape(),
                p.q2.shape(),
                p.k1.shape(),
                p.k2.shape()
            ),
        ));
    }
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let map = |q: &Tensor<T>, k: &Tensor<T>| -> Result<Tensor<T>> {
        Ok(q.matmul(&k.transpose_last2()?)?.scale(scale).softmax_lastdim())
    };
    Ok((map(&p.q1, &p.k1)?, map(&p.q2, &p.k2)?))
}

/// `(A1 − λ A2) V` for one head; output is `[b, n, 2d]`.
pub fn diff_attention_head<T: Element>(p: &HeadProjections<T>, lambda: T) -> Result<Tensor<T>> {
    let (a1, a2) = attention_maps(p)?;
    let v = &p.v;
    if v.rank() != 3 || v.shape()[..2] != a1.shape()[..2] {
        return Err(Error::shape(
            "diff_attention",
            format!("attention {:?} vs values {:?}", a1.shape(), v.shape()),
        ));
    }
    a1.sub(&a2.scale(lambda))?.matmul(v)
}

/// Full multi-head block on token sequences `x: [b, n, c]`.
pub fn multi_head_diff_attention<T: Element>(
    x: &Tensor<T>,
    cfg: &DiffAttentionConfig,
    w: &DiffAttentionWeights<T>,
) -> Result<Tensor<T>> {
    let lambda = T::from_f64_lossy(cfg.lambda);
    let heads = project_and_split(x, cfg, w)?
        .iter()
        .map(|p| diff_attention_head(p, lambda))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_lastdim(&heads)?.matmul(&w.w_o)
}

/// Applies attention to a feature map `[b, C, h, w]` by treating its `h·w`
/// positions as tokens, then restores the map layout.
pub fn spatial_attention_wrap<T: Element>(
    f: &Tensor<T>,
    cfg: &DiffAttentionConfig,
    w: &DiffAttentionWeights<T>,
) -> Result<Tensor<T>> {
    let (tokens, [b, c, h, wd]) = flatten_tokens(f)?;
    if c != cfg.channels {
        return Err(Error::Config(format!(
            "feature map has {c} channels, attention expects {}",
            cfg.channels
        )));
    }
    let y = multi_head_diff_attention(&tokens, cfg, w)?;
    y.transpose_last2()?.reshape(&[b, c, h, wd])
}

/// `[b, C, h, w]` → `[b, h·w, C]`, plus the original extents.
pub fn flatten_tokens<T: Element>(f: &Tensor<T>) -> Result<(Tensor<T>, [usize; 4])> {
    let [b, c, h, w] = match *f.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(Error::shape("spatial_attention", format!("expected rank 4, got {:?}", f.shape()))),
    };
    Ok((f.reshape(&[b, c, h * w])?.transpose_last2()?, [b, c, h, w]))
}

/// Differential attention as a layer with registered weights.
#[derive(Clone, Debug)]
pub struct DiffAttention {
    pub cfg: DiffAttentionConfig,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl DiffAttention {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: DiffAttentionConfig) -> Self {
        let (c, inner) = (cfg.channels, cfg.inner_width());
        DiffAttention {
            cfg,
            w_q: b.xavier("w_q", &[c, inner], c, inner),
            w_k: b.xavier("w_k", &[c, inner], c, inner),
            w_v: b.xavier("w_v", &[c, inner], c, inner),
            w_o: b.xavier("w_o", &[inner, c], inner, c),
        }
    }

    pub fn weights<T: Element>(&self, store: &ParamStore<T>) -> DiffAttentionWeights<T> {
        DiffAttentionWeights {
            w_q: store.get(self.w_q).clone(),
            w_k: store.get(self.w_k).clone(),
            w_v: store.get(self.w_v).clone(),
            w_o: store.get(self.w_o).clone(),
        }
    }

    pub fn forward<T: Element>(&self, store: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        spatial_attention_wrap(f, &self.cfg, &self.weights(store))
    }
}
