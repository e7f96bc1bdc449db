//! Network building blocks shared by the factorizer, motion estimator and
//! generators: convolutions, instance normalization, generalized divisive
//! normalization, residual/scale blocks and a small two-level U-Net.

use crate::autodiff::{concat0, Arr, Graph, Param, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Weight initialization for a conv layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform Kaiming-style fan-in scaling.
    Kaiming,
    /// All zeros; used for prediction heads that must start at identity.
    Zero,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let weight = Arr::from_shape_fn(IxDyn(&[out_ch, in_ch, kernel, kernel]), |_| match init {
            Init::Kaiming => rng.gen_range(-bound..bound),
            Init::Zero => 0.0,
        });
        let bias = Arr::zeros(IxDyn(&[out_ch]));
        Conv2d {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        x.conv2d(&w, &b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel instance normalization with learnable affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: Param::new(format!("{name}.gamma"), Arr::ones(IxDyn(&[channels, 1, 1]))),
            beta: Param::new(format!("{name}.beta"), Arr::zeros(IxDyn(&[channels, 1, 1]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let mu = x.mean_axes_keep(&[1, 2]);
        let centered = x.sub(&mu);
        let var = centered.mul(&centered).mean_axes_keep(&[1, 2]);
        let normed = centered.div(&var.add_scalar(self.eps).sqrt());
        normed.mul(&g.param(&self.gamma)).add(&g.param(&self.beta))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Generalized divisive normalization: `y_i = x_i / sqrt(b_i + sum_j g_ij x_j^2)`.
///
/// Parameters are stored in reparametrized form (squared on use) so positivity
/// of the denominator holds for any parameter values.
#[derive(Debug, Clone)]
pub struct Gdn {
    pub beta: Param,
    pub gamma: Param,
}

impl Gdn {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Arr::from_elem(IxDyn(&[channels, channels, 1, 1]), 0.1);
        for c in 0..channels {
            gamma[IxDyn(&[c, c, 0, 0])] = 0.3;
        }
        Gdn {
            beta: Param::new(format!("{name}.beta"), Arr::ones(IxDyn(&[channels]))),
            gamma: Param::new(format!("{name}.gamma"), gamma),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let beta = g.param(&self.beta);
        let gamma = g.param(&self.gamma);
        let beta_sq = beta.mul(&beta).add_scalar(1e-6);
        let gamma_sq = gamma.mul(&gamma);
        let denom_sq = x.mul(x).conv2d(&gamma_sq, &beta_sq, 1, 0);
        x.div(&denom_sq.sqrt())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.beta, &self.gamma]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.beta, &mut self.gamma]
    }
}

/// conv3x3 + instance norm + relu, stride 1 or 2.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

impl ConvBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(&format!("{name}.conv"), in_ch, out_ch, 3, stride, 1, Init::Kaiming, rng),
            norm: InstanceNorm::new(&format!("{name}.norm"), out_ch),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        self.norm.forward(g, &self.conv.forward(g, x)).relu()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }
}

/// Nearest-neighbour 2x upsample followed by a [`ConvBlock`].
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub block: ConvBlock,
}

impl UpBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        UpBlock {
            block: ConvBlock::new(name, in_ch, out_ch, 1, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        self.block.forward(g, &x.upsample_nearest2x())
    }

    pub fn params(&self) -> Vec<&Param> {
        self.block.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.block.params_mut()
    }
}

/// Size-preserving residual block: `x + conv(relu(conv(x)))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, 1, 1, Init::Kaiming, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), channels, channels, 3, 1, 1, Init::Kaiming, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        x.add(&self.conv2.forward(g, &self.conv1.forward(g, x).relu()))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p
    }
}

/// Two-level U-Net: stem, one stride-2 descent, residual bottleneck, one
/// ascent, skip concatenation and a projection head. Output spatial size
/// equals input spatial size.
#[derive(Debug, Clone)]
pub struct UNet {
    pub stem: ConvBlock,
    pub down: ConvBlock,
    pub bottleneck: ResBlock,
    pub up: UpBlock,
    pub fuse: ConvBlock,
    pub head: Conv2d,
}

impl UNet {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        width: usize,
        head_init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        UNet {
            stem: ConvBlock::new(&format!("{name}.stem"), in_ch, width, 1, rng),
            down: ConvBlock::new(&format!("{name}.down"), width, 2 * width, 2, rng),
            bottleneck: ResBlock::new(&format!("{name}.bottleneck"), 2 * width, rng),
            up: UpBlock::new(&format!("{name}.up"), 2 * width, width, rng),
            fuse: ConvBlock::new(&format!("{name}.fuse"), 2 * width, width, 1, rng),
            head: Conv2d::new(&format!("{name}.head"), width, out_ch, 3, 1, 1, head_init, rng),
        }
    }

    /// Raw head output; callers apply their own activation.
    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let s = self.stem.forward(g, x);
        let d = self.down.forward(g, &s);
        let b = self.bottleneck.forward(g, &d);
        let u = self.up.forward(g, &b);
        let f = self.fuse.forward(g, &concat0(&[u, s]));
        self.head.forward(g, &f)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        p.extend(self.down.params());
        p.extend(self.bottleneck.params());
        p.extend(self.up.params());
        p.extend(self.fuse.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.down.params_mut());
        p.extend(self.bottleneck.params_mut());
        p.extend(self.up.params_mut());
        p.extend(self.fuse.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

/// Total scalar count across a parameter list.
pub fn param_count<'a>(params: impl IntoIterator<Item = &'a Param>) -> usize {
    params.into_iter().map(|p| p.len()).sum()
}
