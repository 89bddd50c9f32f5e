//! Convolutional feature extractors with their original classification
//! blocks removed. Each maps `(n, c, h, w)` to a `(n, features, h', w')` map.

use candle_core::Tensor;

use super::layers::{avg_pool, max_pool, max_pool_same, Conv2d, ConvBn, ConvSpec, ParamBuilder};
use super::BackboneKind;
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) enum Backbone {
    Tiny(TinyNet),
    InceptionV3(InceptionV3),
    ResNet(ResNet50),
    Vgg(Vgg16),
    Xception(Xception),
}

impl Backbone {
    pub fn build(kind: BackboneKind, pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(match kind {
            BackboneKind::TinyTest => Backbone::Tiny(TinyNet::new(pb, channels)?),
            BackboneKind::InceptionV3 => Backbone::InceptionV3(InceptionV3::new(pb, channels)?),
            BackboneKind::Resnet => Backbone::ResNet(ResNet50::new(pb, channels)?),
            BackboneKind::Vgg => Backbone::Vgg(Vgg16::new(pb, channels)?),
            BackboneKind::Xception => Backbone::Xception(Xception::new(pb, channels)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Tiny(n) => n.forward(x),
            Backbone::InceptionV3(n) => n.forward(x),
            Backbone::ResNet(n) => n.forward(x),
            Backbone::Vgg(n) => n.forward(x),
            Backbone::Xception(n) => n.forward(x),
        }
    }

    /// Channel count of the final feature map.
    pub fn out_channels(&self) -> usize {
        match self {
            Backbone::Tiny(n) => n.convs.last().map(Conv2d::out_channels).unwrap_or(0),
            Backbone::InceptionV3(_) => 2048,
            Backbone::ResNet(_) => 2048,
            Backbone::Vgg(n) => n.convs.last().map(Conv2d::out_channels).unwrap_or(0),
            Backbone::Xception(n) => n.conv4.out_channels(),
        }
    }
}

/// Four conv/ReLU stages with max pooling, about 8e4 weights. Small enough to
/// train on a CPU in seconds.
#[derive(Debug, Clone)]
pub(crate) struct TinyNet {
    convs: Vec<Conv2d>,
}

impl TinyNet {
    const WIDTHS: [usize; 4] = [16, 32, 64, 96];

    fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = channels;
        for (i, &c_out) in Self::WIDTHS.iter().enumerate() {
            let spec = if i == 0 {
                ConvSpec::square(3).stride(2).bias()
            } else {
                ConvSpec::square(3).pad(1).bias()
            };
            convs.push(Conv2d::new(&mut pb.sub(format!("conv{}", i + 1)), c_in, c_out, spec)?);
            c_in = c_out;
        }
        Ok(TinyNet { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?.relu()?;
            if i < last {
                x = max_pool(&x, 2, 2, 0)?;
            }
        }
        Ok(x)
    }
}

const INCEPTION_BN_EPS: f64 = 1e-3;

fn basic(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<ConvBn> {
    ConvBn::new(&mut pb.sub(name), c_in, c_out, spec, INCEPTION_BN_EPS)
}

fn cat(parts: &[Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 1)?)
}

fn chain(layers: &[ConvBn], x: &Tensor) -> Result<Tensor> {
    let mut x = x.clone();
    for l in layers {
        x = l.forward(&x)?;
    }
    Ok(x)
}

#[derive(Debug, Clone)]
struct InceptionA {
    b1: ConvBn,
    b5: [ConvBn; 2],
    b3: [ConvBn; 3],
    pool: ConvBn,
}

impl InceptionA {
    fn new(pb: &mut ParamBuilder, c_in: usize, pool_features: usize) -> Result<Self> {
        let k1 = ConvSpec::square(1);
        Ok(InceptionA {
            b1: basic(pb, "branch1x1", c_in, 64, k1)?,
            b5: [
                basic(pb, "branch5x5_1", c_in, 48, k1)?,
                basic(pb, "branch5x5_2", 48, 64, ConvSpec::square(5).same())?,
            ],
            b3: [
                basic(pb, "branch3x3dbl_1", c_in, 64, k1)?,
                basic(pb, "branch3x3dbl_2", 64, 96, ConvSpec::square(3).same())?,
                basic(pb, "branch3x3dbl_3", 96, 96, ConvSpec::square(3).same())?,
            ],
            pool: basic(pb, "branch_pool", c_in, pool_features, k1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        cat(&[
            self.b1.forward(x)?,
            chain(&self.b5, x)?,
            chain(&self.b3, x)?,
            self.pool.forward(&avg_pool(x, 3, 1, 1)?)?,
        ])
    }
}

#[derive(Debug, Clone)]
struct InceptionB {
    b3: ConvBn,
    dbl: [ConvBn; 3],
}

impl InceptionB {
    fn new(pb: &mut ParamBuilder, c_in: usize) -> Result<Self> {
        Ok(InceptionB {
            b3: basic(pb, "branch3x3", c_in, 384, ConvSpec::square(3).stride(2))?,
            dbl: [
                basic(pb, "branch3x3dbl_1", c_in, 64, ConvSpec::square(1))?,
                basic(pb, "branch3x3dbl_2", 64, 96, ConvSpec::square(3).same())?,
                basic(pb, "branch3x3dbl_3", 96, 96, ConvSpec::square(3).stride(2))?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        cat(&[self.b3.forward(x)?, chain(&self.dbl, x)?, max_pool(x, 3, 2, 0)?])
    }
}

#[derive(Debug, Clone)]
struct InceptionC {
    b1: ConvBn,
    b7: [ConvBn; 3],
    dbl: [ConvBn; 5],
    pool: ConvBn,
}

impl InceptionC {
    fn new(pb: &mut ParamBuilder, c_in: usize, c7: usize) -> Result<Self> {
        let k1 = ConvSpec::square(1);
        Ok(InceptionC {
            b1: basic(pb, "branch1x1", c_in, 192, k1)?,
            b7: [
                basic(pb, "branch7x7_1", c_in, c7, k1)?,
                basic(pb, "branch7x7_2", c7, c7, ConvSpec::rect(1, 7))?,
                basic(pb, "branch7x7_3", c7, 192, ConvSpec::rect(7, 1))?,
            ],
            dbl: [
                basic(pb, "branch7x7dbl_1", c_in, c7, k1)?,
                basic(pb, "branch7x7dbl_2", c7, c7, ConvSpec::rect(7, 1))?,
                basic(pb, "branch7x7dbl_3", c7, c7, ConvSpec::rect(1, 7))?,
                basic(pb, "branch7x7dbl_4", c7, c7, ConvSpec::rect(7, 1))?,
                basic(pb, "branch7x7dbl_5", c7, 192, ConvSpec::rect(1, 7))?,
            ],
            pool: basic(pb, "branch_pool", c_in, 192, k1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        cat(&[
            self.b1.forward(x)?,
            chain(&self.b7, x)?,
            chain(&self.dbl, x)?,
            self.pool.forward(&avg_pool(x, 3, 1, 1)?)?,
        ])
    }
}

#[derive(Debug, Clone)]
struct InceptionD {
    b3: [ConvBn; 2],
    b7: [ConvBn; 4],
}

impl InceptionD {
    fn new(pb: &mut ParamBuilder, c_in: usize) -> Result<Self> {
        let k1 = ConvSpec::square(1);
        Ok(InceptionD {
            b3: [
                basic(pb, "branch3x3_1", c_in, 192, k1)?,
                basic(pb, "branch3x3_2", 192, 320, ConvSpec::square(3).stride(2))?,
            ],
            b7: [
                basic(pb, "branch7x7x3_1", c_in, 192, k1)?,
                basic(pb, "branch7x7x3_2", 192, 192, ConvSpec::rect(1, 7))?,
                basic(pb, "branch7x7x3_3", 192, 192, ConvSpec::rect(7, 1))?,
                basic(pb, "branch7x7x3_4", 192, 192, ConvSpec::square(3).stride(2))?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        cat(&[chain(&self.b3, x)?, chain(&self.b7, x)?, max_pool(x, 3, 2, 0)?])
    }
}

#[derive(Debug, Clone)]
struct InceptionE {
    b1: ConvBn,
    b3_1: ConvBn,
    b3_2a: ConvBn,
    b3_2b: ConvBn,
    dbl_1: ConvBn,
    dbl_2: ConvBn,
    dbl_3a: ConvBn,
    dbl_3b: ConvBn,
    pool: ConvBn,
}

impl InceptionE {
    fn new(pb: &mut ParamBuilder, c_in: usize) -> Result<Self> {
        let k1 = ConvSpec::square(1);
        Ok(InceptionE {
            b1: basic(pb, "branch1x1", c_in, 320, k1)?,
            b3_1: basic(pb, "branch3x3_1", c_in, 384, k1)?,
            b3_2a: basic(pb, "branch3x3_2a", 384, 384, ConvSpec::rect(1, 3))?,
            b3_2b: basic(pb, "branch3x3_2b", 384, 384, ConvSpec::rect(3, 1))?,
            dbl_1: basic(pb, "branch3x3dbl_1", c_in, 448, k1)?,
            dbl_2: basic(pb, "branch3x3dbl_2", 448, 384, ConvSpec::square(3).same())?,
            dbl_3a: basic(pb, "branch3x3dbl_3a", 384, 384, ConvSpec::rect(1, 3))?,
            dbl_3b: basic(pb, "branch3x3dbl_3b", 384, 384, ConvSpec::rect(3, 1))?,
            pool: basic(pb, "branch_pool", c_in, 192, k1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b3 = self.b3_1.forward(x)?;
        let dbl = self.dbl_2.forward(&self.dbl_1.forward(x)?)?;
        cat(&[
            self.b1.forward(x)?,
            self.b3_2a.forward(&b3)?,
            self.b3_2b.forward(&b3)?,
            self.dbl_3a.forward(&dbl)?,
            self.dbl_3b.forward(&dbl)?,
            self.pool.forward(&avg_pool(x, 3, 1, 1)?)?,
        ])
    }
}

/// Inception v3 up to the last mixed block: 2048 channels at 8x8 for a
/// 299x299 input.
#[derive(Debug, Clone)]
pub(crate) struct InceptionV3 {
    stem_a: [ConvBn; 3],
    stem_b: [ConvBn; 2],
    mixed_5: [InceptionA; 3],
    mixed_6a: InceptionB,
    mixed_6: [InceptionC; 4],
    mixed_7a: InceptionD,
    mixed_7: [InceptionE; 2],
}

impl InceptionV3 {
    fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let k3 = ConvSpec::square(3);
        Ok(InceptionV3 {
            stem_a: [
                basic(pb, "conv2d_1a_3x3", channels, 32, k3.stride(2))?,
                basic(pb, "conv2d_2a_3x3", 32, 32, k3)?,
                basic(pb, "conv2d_2b_3x3", 32, 64, k3.same())?,
            ],
            stem_b: [
                basic(pb, "conv2d_3b_1x1", 64, 80, ConvSpec::square(1))?,
                basic(pb, "conv2d_4a_3x3", 80, 192, k3)?,
            ],
            mixed_5: [
                InceptionA::new(&mut pb.sub("mixed_5b"), 192, 32)?,
                InceptionA::new(&mut pb.sub("mixed_5c"), 256, 64)?,
                InceptionA::new(&mut pb.sub("mixed_5d"), 288, 64)?,
            ],
            mixed_6a: InceptionB::new(&mut pb.sub("mixed_6a"), 288)?,
            mixed_6: [
                InceptionC::new(&mut pb.sub("mixed_6b"), 768, 128)?,
                InceptionC::new(&mut pb.sub("mixed_6c"), 768, 160)?,
                InceptionC::new(&mut pb.sub("mixed_6d"), 768, 160)?,
                InceptionC::new(&mut pb.sub("mixed_6e"), 768, 192)?,
            ],
            mixed_7a: InceptionD::new(&mut pb.sub("mixed_7a"), 768)?,
            mixed_7: [
                InceptionE::new(&mut pb.sub("mixed_7b"), 1280)?,
                InceptionE::new(&mut pb.sub("mixed_7c"), 2048)?,
            ],
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = max_pool(&chain(&self.stem_a, x)?, 3, 2, 0)?;
        let mut x = max_pool(&chain(&self.stem_b, &x)?, 3, 2, 0)?;
        for m in &self.mixed_5 {
            x = m.forward(&x)?;
        }
        x = self.mixed_6a.forward(&x)?;
        for m in &self.mixed_6 {
            x = m.forward(&x)?;
        }
        x = self.mixed_7a.forward(&x)?;
        for m in &self.mixed_7 {
            x = m.forward(&x)?;
        }
        Ok(x)
    }
}

const RESNET_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct Bottleneck {
    convs: [ConvBn; 3],
    downsample: Option<ConvBn>,
}

impl Bottleneck {
    fn new(pb: &mut ParamBuilder, c_in: usize, width: usize, stride: usize) -> Result<Self> {
        let c_out = width * 4;
        let downsample = if stride != 1 || c_in != c_out {
            Some(ConvBn::linear(
                &mut pb.sub("downsample"),
                c_in,
                c_out,
                ConvSpec::square(1).stride(stride),
                RESNET_BN_EPS,
            )?)
        } else {
            None
        };
        Ok(Bottleneck {
            convs: [
                ConvBn::new(&mut pb.sub("conv1"), c_in, width, ConvSpec::square(1), RESNET_BN_EPS)?,
                ConvBn::new(&mut pb.sub("conv2"), width, width, ConvSpec::square(3).pad(1).stride(stride), RESNET_BN_EPS)?,
                ConvBn::linear(&mut pb.sub("conv3"), width, c_out, ConvSpec::square(1), RESNET_BN_EPS)?,
            ],
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = chain(&self.convs, x)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

/// ResNet-50 without its pooling and fully-connected layers.
#[derive(Debug, Clone)]
pub(crate) struct ResNet50 {
    stem: ConvBn,
    blocks: Vec<Bottleneck>,
}

impl ResNet50 {
    fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let stem = ConvBn::new(&mut pb.sub("conv1"), channels, 64, ConvSpec::square(7).stride(2).pad(3), RESNET_BN_EPS)?;
        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (stage, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            for i in 0..depth {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                let mut sub = pb.sub(format!("layer{}", stage + 1));
                blocks.push(Bottleneck::new(&mut sub.sub(i), c_in, width, stride)?);
                c_in = width * 4;
            }
        }
        Ok(ResNet50 { stem, blocks })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = max_pool(&self.stem.forward(x)?, 3, 2, 1)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(x)
    }
}

/// VGG-16 convolutional stack (13 conv layers, five max-pools).
#[derive(Debug, Clone)]
pub(crate) struct Vgg16 {
    convs: Vec<Conv2d>,
    pool_after: Vec<bool>,
}

impl Vgg16 {
    const BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];

    fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut pool_after = Vec::new();
        let mut c_in = channels;
        for (b, &(depth, width)) in Self::BLOCKS.iter().enumerate() {
            for i in 0..depth {
                let name = format!("block{}_conv{}", b + 1, i + 1);
                convs.push(Conv2d::new(&mut pb.sub(name), c_in, width, ConvSpec::square(3).pad(1).bias())?);
                pool_after.push(i + 1 == depth);
                c_in = width;
            }
        }
        Ok(Vgg16 { convs, pool_after })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (conv, &pool) in self.convs.iter().zip(&self.pool_after) {
            x = conv.forward(&x)?.relu()?;
            if pool {
                x = max_pool(&x, 2, 2, 0)?;
            }
        }
        Ok(x)
    }
}

/// Depthwise 3x3 followed by pointwise 1x1, then batch norm.
#[derive(Debug, Clone)]
struct SeparableConv {
    depthwise: Conv2d,
    pointwise: ConvBn,
}

impl SeparableConv {
    fn new(pb: &mut ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(SeparableConv {
            depthwise: Conv2d::new(&mut pb.sub("depthwise"), c_in, c_in, ConvSpec::square(3).pad(1).groups(c_in))?,
            pointwise: ConvBn::linear(&mut pb.sub("pointwise"), c_in, c_out, ConvSpec::square(1), XCEPTION_BN_EPS)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }
}

const XCEPTION_BN_EPS: f64 = 1e-3;

/// Residual block of separable convolutions. Each separable conv is preceded
/// by a ReLU unless `relu_first` is false for the first one.
#[derive(Debug, Clone)]
struct XceptionBlock {
    seps: Vec<SeparableConv>,
    relu_first: bool,
    downsample: Option<ConvBn>,
}

impl XceptionBlock {
    fn new(
        pb: &mut ParamBuilder,
        widths: &[usize],
        c_in: usize,
        relu_first: bool,
        strided: bool,
    ) -> Result<Self> {
        let mut seps = Vec::new();
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            seps.push(SeparableConv::new(&mut pb.sub(format!("sepconv{}", i + 1)), c, w)?);
            c = w;
        }
        let downsample = if strided {
            Some(ConvBn::linear(&mut pb.sub("residual"), c_in, c, ConvSpec::square(1).stride(2), XCEPTION_BN_EPS)?)
        } else {
            None
        };
        Ok(XceptionBlock {
            seps,
            relu_first,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for (i, sep) in self.seps.iter().enumerate() {
            if i > 0 || self.relu_first {
                y = y.relu()?;
            }
            y = sep.forward(&y)?;
        }
        Ok(match &self.downsample {
            Some(d) => (max_pool_same(&y, 3, 2)? + d.forward(x)?)?,
            None => (y + x)?,
        })
    }
}

/// Xception entry, middle and exit flows; 2048 channels out.
#[derive(Debug, Clone)]
pub(crate) struct Xception {
    conv1: ConvBn,
    conv2: ConvBn,
    blocks: Vec<XceptionBlock>,
    conv3: SeparableConv,
    conv4: ConvBn,
    conv4_depthwise: Conv2d,
}

impl Xception {
    fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        let conv1 = ConvBn::new(&mut pb.sub("block1_conv1"), channels, 32, ConvSpec::square(3).stride(2), XCEPTION_BN_EPS)?;
        let conv2 = ConvBn::new(&mut pb.sub("block1_conv2"), 32, 64, ConvSpec::square(3), XCEPTION_BN_EPS)?;
        let mut blocks = vec![
            XceptionBlock::new(&mut pb.sub("block2"), &[128, 128], 64, false, true)?,
            XceptionBlock::new(&mut pb.sub("block3"), &[256, 256], 128, true, true)?,
            XceptionBlock::new(&mut pb.sub("block4"), &[728, 728], 256, true, true)?,
        ];
        for b in 5..13 {
            blocks.push(XceptionBlock::new(&mut pb.sub(format!("block{b}")), &[728, 728, 728], 728, true, false)?);
        }
        blocks.push(XceptionBlock::new(&mut pb.sub("block13"), &[728, 1024], 728, true, true)?);
        let conv3 = SeparableConv::new(&mut pb.sub("block14_sepconv1"), 1024, 1536)?;
        let mut last = pb.sub("block14_sepconv2");
        let conv4_depthwise = Conv2d::new(&mut last.sub("depthwise"), 1536, 1536, ConvSpec::square(3).pad(1).groups(1536))?;
        let conv4 = ConvBn::new(&mut last.sub("pointwise"), 1536, 2048, ConvSpec::square(1), XCEPTION_BN_EPS)?;
        Ok(Xception {
            conv1,
            conv2,
            blocks,
            conv3,
            conv4,
            conv4_depthwise,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = self.conv2.forward(&self.conv1.forward(x)?)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        let x = self.conv3.forward(&x)?.relu()?;
        self.conv4.forward(&self.conv4_depthwise.forward(&x)?)
    }
}
