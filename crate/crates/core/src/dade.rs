//! Dilated bottleneck with parallel differential-attention branches.
//!
//! Four (by default) dilated 3×3 conv stages run as a cascade. The
//! structural stream is the input plus every stage output; the attentional
//! stream is the sum of a differential-attention branch applied to each
//! stage output.

use serde::{Deserialize, Serialize};

use crate::attention::{DiffAttention, DiffAttentionConfig};
use crate::error::{Error, Result};
use crate::nn::{Builder, ConvBnRelu, ParamStore};
use crate::tensor::{BnMode, Conv2dSpec, Element, Tensor};

pub const DEFAULT_RATES: [usize; 4] = [1, 3, 5, 9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DadeConfig {
    pub rates: Vec<usize>,
    pub channels: usize,
    pub attention: DiffAttentionConfig,
}

impl DadeConfig {
    pub fn new(channels: usize, rates: Vec<usize>, heads: usize, lambda: f64) -> Result<Self> {
        let cfg = DadeConfig {
            rates,
            channels,
            attention: DiffAttentionConfig::for_channels(channels, heads, lambda)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() || self.rates.contains(&0) {
            return Err(Error::Config(format!("dilation rates {:?} must be >= 1", self.rates)));
        }
        if self.rates.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("dilation rates {:?} must not decrease", self.rates)));
        }
        if self.attention.channels != self.channels {
            return Err(Error::Config(format!(
                "attention width {} differs from bottleneck width {}",
                self.attention.channels, self.channels
            )));
        }
        self.attention.validate()
    }
}

/// 3×3 dilated conv → BN → ReLU with padding equal to the rate.
#[derive(Clone, Debug)]
pub struct DilatedStage {
    pub rate: usize,
    pub block: ConvBnRelu,
}

impl DilatedStage {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, channels: usize, rate: usize) -> Self {
        DilatedStage {
            rate,
            block: ConvBnRelu::new(b, channels, channels, 3, Conv2dSpec::same(3, rate)),
        }
    }

    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        f: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        self.block.forward(store, f, mode)
    }
}

#[derive(Clone, Debug)]
pub struct DadeOutput<T: Element> {
    pub structural: Tensor<T>,
    /// `None` when the attention branches are disabled.
    pub attentional: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Dade {
    pub cfg: DadeConfig,
    pub stages: Vec<DilatedStage>,
    /// One branch per stage; empty when attention is disabled.
    pub branches: Vec<DiffAttention>,
}

impl Dade {
    /// Builds the bottleneck; `with_attention = false` gives the plain
    /// dilated cascade.
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: DadeConfig, with_attention: bool) -> Result<Self> {
        cfg.validate()?;
        let stages = cfg
            .rates
            .iter()
            .enumerate()
            .map(|(i, &r)| DilatedStage::new(&mut b.sub(&format!("stage{i}")), cfg.channels, r))
            .collect();
        let branches = if with_attention {
            (0..cfg.rates.len())
                .map(|i| DiffAttention::new(&mut b.sub(&format!("attn{i}")), cfg.attention))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Dade {
            cfg,
            stages,
            branches,
        })
    }

    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        f: &Tensor<T>,
        mode: BnMode,
    ) -> Result<DadeOutput<T>> {
        match *f.shape() {
            [_, c, h, w] if c == self.cfg.channels && h >= 1 && w >= 1 => {}
            _ => {
                return Err(Error::Config(format!(
                    "bottleneck input {:?} must be [b, {}, h, w]",
                    f.shape(),
                    self.cfg.channels
                )))
            }
        }
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        let mut current = f.clone();
        for stage in &self.stages {
            current = stage.forward(store, &current, mode)?;
            stage_outputs.push(current.clone());
        }
        let mut terms = vec![f.clone()];
        terms.extend(stage_outputs.iter().cloned());
        let structural = Tensor::add_all(&terms)?;

        let attentional = if self.branches.is_empty() {
            None
        } else {
            let maps = self
                .branches
                .iter()
                .zip(&stage_outputs)
                .map(|(branch, c)| branch.forward(store, c))
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::add_all(&maps)?)
        };
        Ok(DadeOutput {
            structural,
            attentional,
        })
    }
}
