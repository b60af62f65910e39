use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, ConvBnRelu, ParamStore};
use crate::tensor::{max_pool2d, BnMode, Conv2dSpec, Element, Tensor};

/// Basic two-conv residual block with an optional projection shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    /// 1×1 strided conv + BN when stride or width changes.
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("residual block stride {stride} not in {{1, 2}}")));
        }
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&mut b.sub("down.conv"), cin, cout, 1, Conv2dSpec::new(stride, 0, 1), false),
                BatchNorm2d::new(&mut b.sub("down.bn"), cout),
            )
        });
        Ok(ResidualBlock {
            conv1: Conv2d::new(&mut b.sub("conv1"), cin, cout, 3, Conv2dSpec::new(stride, 1, 1), false),
            bn1: BatchNorm2d::new(&mut b.sub("bn1"), cout),
            conv2: Conv2d::new(&mut b.sub("conv2"), cout, cout, 3, Conv2dSpec::same(3, 1), false),
            bn2: BatchNorm2d::new(&mut b.sub("bn2"), cout),
            shortcut,
            stride,
        })
    }

    /// `relu(BN(conv(relu(BN(conv(x))))) + shortcut(x))`
    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        x: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Tensor<T>> {
        let h = self.conv1.forward(store, x)?;
        let h = self.bn1.forward(store, &h, mode)?.relu();
        let h = self.conv2.forward(store, &h)?;
        let h = self.bn2.forward(store, &h, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(store, x)?;
                bn.forward(store, &s, mode)?
            }
            None => x.clone(),
        };
        if skip.shape() != h.shape() {
            return Err(Error::Config(format!(
                "residual branch {:?} vs shortcut {:?}",
                h.shape(),
                skip.shape()
            )));
        }
        Ok(h.add(&skip)?.relu())
    }
}

/// ResNet-style encoder: 7×7/2 stem, 3×3/2 max pool, then four stages
/// (the first at stride 1, the rest at stride 2).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: ConvBnRelu,
    pub stages: Vec<Vec<ResidualBlock>>,
}

/// Encoder feature maps at 1/4, 1/8, 1/16 and 1/32 of the input size.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<T: Element> {
    pub e1: Tensor<T>,
    pub e2: Tensor<T>,
    pub e3: Tensor<T>,
    pub e4: Tensor<T>,
}

impl Encoder {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        in_channels: usize,
        widths: &[usize],
        blocks: &[usize],
    ) -> Result<Self> {
        let stem = ConvBnRelu::new(&mut b.sub("stem"), in_channels, widths[0], 7, Conv2dSpec::new(2, 3, 1));
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (i, (&w, &n)) in widths.iter().zip(blocks).enumerate() {
            let mut stage = Vec::with_capacity(n);
            for j in 0..n {
                let stride = if j == 0 && i > 0 { 2 } else { 1 };
                let block = ResidualBlock::new(&mut b.sub(&format!("layer{}.{j}", i + 1)), cin, w, stride)?;
                stage.push(block);
                cin = w;
            }
            stages.push(stage);
        }
        Ok(Encoder { stem, stages })
    }

    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        image: &Tensor<T>,
        mode: BnMode,
    ) -> Result<EncoderFeatures<T>> {
        match *image.shape() {
            [_, _, h, w] if h % 32 == 0 && w % 32 == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(Error::Config(format!(
                    "image {:?} must be [b, c, h, w] with h and w divisible by 32",
                    image.shape()
                )))
            }
        }
        let x = self.stem.forward(store, image, mode)?;
        let mut x = max_pool2d(&x, 3, 2, 1)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(store, &x, mode)?;
            }
            feats.push(x.clone());
        }
        let [e1, e2, e3, e4]: [Tensor<T>; 4] = feats.try_into().expect("four stages");
        Ok(EncoderFeatures { e1, e2, e3, e4 })
    }
}
