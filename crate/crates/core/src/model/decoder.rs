use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, ConvBnRelu, ConvTranspose2d, ParamStore};
use crate::tensor::{BnMode, Conv2dSpec, Element, Tensor};

/// 1×1 channel reduction → BN → ReLU → stride-2 transposed conv → BN → ReLU.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub reduce: ConvBnRelu,
    pub up: ConvTranspose2d,
    pub up_bn: BatchNorm2d,
}

impl DecoderBlock {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cin: usize, cout: usize) -> Self {
        DecoderBlock {
            reduce: ConvBnRelu::new(&mut b.sub("reduce"), cin, cout, 1, Conv2dSpec::new(1, 0, 1)),
            up: ConvTranspose2d::new(&mut b.sub("up"), cout, cout, 3, 2, false),
            up_bn: BatchNorm2d::new(&mut b.sub("up_bn"), cout),
        }
    }

    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let h = self.reduce.forward(store, x, mode)?;
        let h = self.up.forward(store, &h)?;
        Ok(self.up_bn.forward(store, &h, mode)?.relu())
    }
}

/// Four decoder blocks, each doubling resolution. Channel plan for encoder
/// widths `(w0, w1, w2, w3)` is `w3→w2→w1→w0→w0`.
#[derive(Clone, Debug)]
pub struct DecoderStream {
    pub blocks: Vec<DecoderBlock>,
}

impl DecoderStream {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, widths: &[usize]) -> Self {
        let plan = [
            (widths[3], widths[2]),
            (widths[2], widths[1]),
            (widths[1], widths[0]),
            (widths[0], widths[0]),
        ];
        DecoderStream {
            blocks: plan
                .iter()
                .enumerate()
                .map(|(i, &(cin, cout))| DecoderBlock::new(&mut b.sub(&format!("block{}", i + 1)), cin, cout))
                .collect(),
        }
    }

    /// With `skips = Some([e3, e2, e1])` those maps are added after blocks
    /// 1–3; with `None` the stream is decoded on its own.
    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        skips: Option<[&Tensor<T>; 3]>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(store, &h, mode)?;
            if let Some(skips) = &skips {
                if let Some(skip) = skips.get(i) {
                    if skip.shape() != h.shape() {
                        return Err(Error::Config(format!(
                            "skip {i} has shape {:?}, decoder produced {:?}",
                            skip.shape(),
                            h.shape()
                        )));
                    }
                    h = h.add(skip)?;
                }
            }
        }
        Ok(h)
    }
}

/// Final ×2 upsample to full resolution followed by the fusion layer
/// (3×3 conv → BN → ReLU → 1×1 conv to one logit channel).
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub up: ConvTranspose2d,
    pub up_bn: BatchNorm2d,
    pub fuse: ConvBnRelu,
    pub classifier: Conv2d,
}

impl FusionHead {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cin: usize, width: usize) -> Self {
        FusionHead {
            up: ConvTranspose2d::new(&mut b.sub("up"), cin, width, 3, 2, false),
            up_bn: BatchNorm2d::new(&mut b.sub("up_bn"), width),
            fuse: ConvBnRelu::new(&mut b.sub("fuse"), width, width, 3, Conv2dSpec::same(3, 1)),
            classifier: Conv2d::new(&mut b.sub("classifier"), width, 1, 1, Conv2dSpec::new(1, 0, 1), true),
        }
    }

    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let h = self.up.forward(store, x)?;
        let h = self.up_bn.forward(store, &h, mode)?.relu();
        let h = self.fuse.forward(store, &h, mode)?;
        self.classifier.forward(store, &h)
    }
}

/// Dual-stream decoder: the structural stream receives encoder skips, the
/// attentional stream does not; their outputs are concatenated and fused.
#[derive(Clone, Debug)]
pub struct Ddfm {
    pub structural: DecoderStream,
    pub attentional: DecoderStream,
    pub head: FusionHead,
}

impl Ddfm {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, widths: &[usize]) -> Self {
        Ddfm {
            structural: DecoderStream::new(&mut b.sub("structural"), widths),
            attentional: DecoderStream::new(&mut b.sub("attentional"), widths),
            head: FusionHead::new(&mut b.sub("head"), 2 * widths[0], widths[0]),
        }
    }

    /// Logits `[b, 1, H, W]` from the two bottleneck streams and the encoder
    /// skips `(e3, e2, e1)`.
    pub fn decode<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        structural: &Tensor<T>,
        attentional: &Tensor<T>,
        skips: [&Tensor<T>; 3],
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        if structural.shape() != attentional.shape() {
            return Err(Error::Config(format!(
                "structural {:?} and attentional {:?} streams differ in shape",
                structural.shape(),
                attentional.shape()
            )));
        }
        let s = self.structural.forward(store, structural, Some(skips), mode)?;
        let a = self.attentional.forward(store, attentional, None, mode)?;
        let fused = Tensor::concat_channels(&[s, a])?;
        self.head.forward(store, &fused, mode)
    }
}
