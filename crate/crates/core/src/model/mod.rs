//! Encoder / dilated-attention bottleneck / decoder assembly and its two
//! ablation variants.

mod checkpoint;
mod decoder;
mod encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dade::{Dade, DadeConfig, DEFAULT_RATES};
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamStore};
use crate::tensor::{BnMode, Element, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, OptimizerMeta, MAGIC, SCHEMA_VERSION};
pub use decoder::{DecoderBlock, DecoderStream, Ddfm, FusionHead};
pub use encoder::{Encoder, EncoderFeatures, ResidualBlock};

pub const IN_CHANNELS: usize = 3;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Which ablation row to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain dilated centre, one decoder with skips.
    Baseline,
    /// Bottleneck with attention; both streams summed into one decoder.
    DadeOnly,
    /// Bottleneck with attention and the dual-stream decoder.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::DadeOnly, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::DadeOnly => "dade_only",
            Variant::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (baseline | dade_only | full)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder_widths: Vec<usize>,
    pub encoder_blocks: Vec<usize>,
    pub dade: DadeConfig,
    pub variant: Variant,
    pub seed: u64,
}

impl ModelConfig {
    /// Reduced-width ResNet34 layout: widths (16, 32, 64, 128), two blocks
    /// per stage, rates (1, 3, 5, 9), four heads, λ = 0.5.
    pub fn desk(input_size: usize, variant: Variant, seed: u64) -> Self {
        Self::with_layout(input_size, vec![16, 32, 64, 128], vec![2, 2, 2, 2], variant, seed)
    }

    /// Full-width ResNet34 stage layout (randomly initialized).
    pub fn resnet34(input_size: usize, variant: Variant, seed: u64) -> Self {
        Self::with_layout(input_size, vec![64, 128, 256, 512], vec![3, 4, 6, 3], variant, seed)
    }

    fn with_layout(input_size: usize, widths: Vec<usize>, blocks: Vec<usize>, variant: Variant, seed: u64) -> Self {
        let dade = DadeConfig::new(widths[3], DEFAULT_RATES.to_vec(), DEFAULT_HEADS, DEFAULT_LAMBDA)
            .expect("preset widths divide into heads");
        ModelConfig {
            input_size,
            encoder_widths: widths,
            encoder_blocks: blocks,
            dade,
            variant,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.encoder_widths.len() != 4 || self.encoder_blocks.len() != 4 {
            return Err(Error::Config("encoder needs exactly four stages".into()));
        }
        if self.encoder_widths.windows(2).any(|w| w[1] <= w[0]) || self.encoder_widths[0] == 0 {
            return Err(Error::Config(format!(
                "encoder widths {:?} must be strictly increasing",
                self.encoder_widths
            )));
        }
        if self.encoder_blocks.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.dade.channels != self.encoder_widths[3] {
            return Err(Error::Config(format!(
                "bottleneck width {} differs from last encoder width {}",
                self.dade.channels, self.encoder_widths[3]
            )));
        }
        self.dade.validate()
    }
}

/// Network topology; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct D3fNet {
    pub encoder: Encoder,
    pub center: Dade,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub enum Decoder {
    /// One stream with skips plus the fusion head.
    Single { stream: DecoderStream, head: FusionHead },
    Dual(Ddfm),
}

impl D3fNet {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.encoder_widths;
        let encoder = Encoder::new(&mut b.sub("encoder"), IN_CHANNELS, w, &cfg.encoder_blocks)?;
        let with_attention = cfg.variant != Variant::Baseline;
        let center = Dade::new(&mut b.sub("center"), cfg.dade.clone(), with_attention)?;
        let decoder = match cfg.variant {
            Variant::Full => Decoder::Dual(Ddfm::new(&mut b.sub("decoder"), w)),
            _ => Decoder::Single {
                stream: DecoderStream::new(&mut b.sub("decoder.structural"), w),
                head: FusionHead::new(&mut b.sub("decoder.head"), w[0], w[0]),
            },
        };
        Ok(D3fNet {
            encoder,
            center,
            decoder,
        })
    }

    pub fn logits<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        image: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let e = self.encoder.forward(store, image, mode)?;
        let center = self.center.forward(store, &e.e4, mode)?;
        let skips = [&e.e3, &e.e2, &e.e1];
        match &self.decoder {
            Decoder::Dual(ddfm) => {
                let attentional = center
                    .attentional
                    .ok_or_else(|| Error::Config("dual-stream decoder needs attention branches".into()))?;
                ddfm.decode(store, &center.structural, &attentional, skips, mode)
            }
            Decoder::Single { stream, head } => {
                let merged = match &center.attentional {
                    Some(a) => center.structural.add(a)?,
                    None => center.structural.clone(),
                };
                let h = stream.forward(store, &merged, Some(skips), mode)?;
                head.forward(store, &h, mode)
            }
        }
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub cfg: ModelConfig,
    pub net: D3fNet,
    pub store: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Seeded construction; identical configs give identical parameters.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = D3fNet::new(&mut Builder::new(&mut store, &mut rng), &cfg)?;
        Ok(Model { cfg, net, store })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn logits(&mut self, image: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.net.logits(&mut self.store, image, mode)
    }

    /// Road probabilities `[b, 1, H, W]`.
    pub fn forward(&mut self, image: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Ok(self.logits(image, mode)?.sigmoid())
    }

    pub fn encode(&mut self, image: &Tensor<T>, mode: BnMode) -> Result<EncoderFeatures<T>> {
        self.net.encoder.forward(&mut self.store, image, mode)
    }

    /// Same parameters and statistics in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(b: usize, size: usize, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * 3 * size * size;
        Tensor::from_vec(&[b, 3, size, size], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn encoder_shapes() {
        for (size, e4) in [(64usize, 2usize), (128, 4)] {
            let mut m = Model::<f64>::new(ModelConfig::desk(size, Variant::Full, 1)).unwrap();
            let e = m.encode(&image(1, size, 2), BnMode::Train).unwrap();
            assert_eq!(e.e1.shape(), &[1, 16, size / 4, size / 4]);
            assert_eq!(e.e2.shape(), &[1, 32, size / 8, size / 8]);
            assert_eq!(e.e3.shape(), &[1, 64, size / 16, size / 16]);
            assert_eq!(e.e4.shape(), &[1, 128, e4, e4]);
        }
    }

    #[test]
    fn constant_image_is_finite() {
        let mut m = Model::<f32>::new(ModelConfig::desk(64, Variant::Full, 1)).unwrap();
        let img = Tensor::full(&[2, 3, 64, 64], 0.5f32);
        let e = m.encode(&img, BnMode::Train).unwrap();
        for t in [&e.e1, &e.e2, &e.e3, &e.e4] {
            assert!(t.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let mut m = Model::<f64>::new(ModelConfig::desk(64, Variant::Full, 1)).unwrap();
        let img = Tensor::zeros(&[1, 3, 48, 40]);
        assert!(matches!(m.forward(&img, BnMode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn variants_run_and_differ_in_size() {
        let counts: Vec<usize> = Variant::ALL
            .iter()
            .map(|&v| {
                let mut m = Model::<f32>::new(ModelConfig::desk(64, v, 3)).unwrap();
                let p = m.forward(&image(1, 64, 4).cast(), BnMode::Train).unwrap();
                assert_eq!(p.shape(), &[1, 1, 64, 64]);
                assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
                m.num_parameters()
            })
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(64, Variant::Full, 0);
        c.input_size = 48;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(64, Variant::Full, 0);
        c.encoder_widths = vec![16, 16, 64, 128];
        assert!(c.validate().is_err());
        assert_eq!("dade_only".parse::<Variant>().unwrap(), Variant::DadeOnly);
        assert!("other".parse::<Variant>().is_err());
    }
}
