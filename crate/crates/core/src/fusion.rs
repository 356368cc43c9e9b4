//! Style fusion decoder (SFD): a U-Net over β whose bottleneck and every
//! upsampling stage are modulated by a style embedding θ through adaptive
//! style transfer (AST) blocks.

use disth_tensor::nn::{Conv2d, Linear, LEAKY_SLOPE};
use disth_tensor::{Init, ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::anatomy::check_divisible;
use crate::blocks::{bilinear_matrix, DoubleConv};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::style_encoders::EMBED_DIM;

/// Variance stabilizer of the AdaIN normalization.
pub const ADAIN_EPS: f64 = 1e-5;

/// Instance-normalize `x` `[B, C, H, W]`, then `x̂·γ·(1+map) + δ` with
/// `γ, δ` of shape `[B, C]` and `map` of `[B, H·W]`.
pub fn spatial_adain<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, delta: &Tensor<F>, map: &Tensor<F>) -> Tensor<F> {
    x.instance_norm(ADAIN_EPS).modulate(gamma, delta, map)
}

fn split_heads<F: Scalar>(t: &Tensor<F>, heads: usize) -> Tensor<F> {
    let (b, n, d) = (t.dim(0), t.dim(1), t.dim(2));
    t.reshape(&[b, n, heads, d / heads])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b * heads, n, d / heads])
}

/// Multi-head softmax attention of one query `[B, D]` over `[B, N, D]` keys/values.
pub fn softmax_attention<F: Scalar>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize) -> Tensor<F> {
    let (b, d) = (q.dim(0), q.dim(1));
    let dh = d / heads;
    let qh = q.reshape(&[b * heads, 1, dh]);
    let kh = split_heads(k, heads);
    let vh = split_heads(v, heads);
    let scores = qh.matmul(&kh.transpose(1, 2)).mul_scalar(1.0 / (dh as f64).sqrt());
    scores.softmax().matmul(&vh).reshape(&[b, d])
}

/// Multi-head linear attention with feature map `φ(x) = elu(x) + 1`.
pub fn linear_attention<F: Scalar>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize) -> Tensor<F> {
    let (b, d) = (q.dim(0), q.dim(1));
    let dh = d / heads;
    let fq = q.reshape(&[b * heads, 1, dh]).elu_plus_one();
    let fk = split_heads(k, heads).elu_plus_one();
    let vh = split_heads(v, heads);
    let kv = fk.transpose(1, 2).matmul(&vh);
    let num = fq.matmul(&kv);
    let den = fq.mul(&fk.sum_axis(1, true)).sum_axis(2, true);
    num.div(&den).reshape(&[b, d])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Softmax,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleBlockKind {
    /// Attention-driven spatial AdaIN.
    Ast,
    /// Global AdaIN from an MLP of θ; no attention, no spatial map.
    Adain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AstConfig {
    pub embed_dim: usize,
    pub query_hidden: usize,
    pub attn_dim: usize,
    pub bottleneck_heads: usize,
    pub upsample_heads: usize,
    pub map_size: usize,
}

impl Default for AstConfig {
    fn default() -> Self {
        AstConfig {
            embed_dim: EMBED_DIM,
            query_hidden: 128,
            attn_dim: 64,
            bottleneck_heads: 8,
            upsample_heads: 4,
            map_size: 4,
        }
    }
}

impl AstConfig {
    pub fn validate(&self) -> Result<()> {
        for heads in [self.bottleneck_heads, self.upsample_heads] {
            if heads == 0 || self.attn_dim % heads != 0 {
                return Err(Error::Config(format!(
                    "attention width {} is not divisible by {heads} heads",
                    self.attn_dim
                )));
            }
        }
        if self.embed_dim == 0 || self.query_hidden == 0 || self.map_size == 0 {
            return Err(Error::Config("AST widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct AstBlock<F: Scalar> {
    channels: usize,
    heads: usize,
    kind: AttentionKind,
    map_size: usize,
    q1: Linear<F>,
    q2: Linear<F>,
    key: Linear<F>,
    value: Linear<F>,
    out: Linear<F>,
    modulation: Linear<F>,
    upsample: Tensor<F>,
}

impl<F: Scalar> AstBlock<F> {
    pub fn new(init: &mut Init<'_, F>, cfg: &AstConfig, channels: usize, kind: AttentionKind, hw: (usize, usize)) -> Self {
        let heads = match kind {
            AttentionKind::Softmax => cfg.bottleneck_heads,
            AttentionKind::Linear => cfg.upsample_heads,
        };
        let m = cfg.map_size;
        let u = bilinear_matrix(m, hw.0, hw.1);
        AstBlock {
            channels,
            heads,
            kind,
            map_size: m,
            q1: Linear::he(&mut init.pp("query1"), cfg.embed_dim, cfg.query_hidden),
            q2: Linear::new(&mut init.pp("query2"), cfg.query_hidden, cfg.attn_dim),
            key: Linear::new(&mut init.pp("key"), channels, cfg.attn_dim),
            value: Linear::new(&mut init.pp("value"), channels, cfg.attn_dim),
            out: Linear::new(&mut init.pp("out"), cfg.attn_dim, cfg.attn_dim),
            modulation: Linear::zeros(&mut init.pp("modulation"), cfg.attn_dim, 2 * channels + m * m),
            upsample: Tensor::from_f64s(&u, &[m * m, hw.0 * hw.1]),
        }
    }

    pub fn attention_kind(&self) -> AttentionKind {
        self.kind
    }

    /// Style-context vector `[B, attn_dim]`: the query plus the projected attention readout.
    pub fn context(&self, x: &Tensor<F>, theta: &Tensor<F>) -> Tensor<F> {
        let (b, c) = (x.dim(0), x.dim(1));
        let hw = x.dim(2) * x.dim(3);
        let q = self.q2.forward(&self.q1.forward(theta).leaky_relu(LEAKY_SLOPE));
        let feats = x.reshape(&[b, c, hw]).transpose(1, 2);
        let k = self.key.forward(&feats);
        let v = self.value.forward(&feats);
        let read = match self.kind {
            AttentionKind::Softmax => softmax_attention(&q, &k, &v, self.heads),
            AttentionKind::Linear => linear_attention(&q, &k, &v, self.heads),
        };
        q.add(&self.out.forward(&read))
    }

    pub fn forward(&self, x: &Tensor<F>, theta: &Tensor<F>) -> Result<Tensor<F>> {
        check_block_input(x, theta, self.channels, self.upsample.dim(1))?;
        let c = self.channels;
        let m = self.modulation.forward(&self.context(x, theta));
        let gamma = m.narrow(1, 0, c).add_scalar(1.0);
        let delta = m.narrow(1, c, c);
        let map = m.narrow(1, 2 * c, self.map_size * self.map_size).matmul(&self.upsample);
        Ok(spatial_adain(x, &gamma, &delta, &map))
    }
}

fn check_block_input<F: Scalar>(x: &Tensor<F>, theta: &Tensor<F>, channels: usize, hw: usize) -> Result<()> {
    if x.rank() != 4 || x.dim(1) != channels || x.dim(2) * x.dim(3) != hw {
        return Err(Error::arg(format!(
            "style block expects [B, {channels}, H, W] with H·W = {hw}, got {:?}",
            x.shape()
        )));
    }
    if theta.rank() != 2 || theta.dim(0) != x.dim(0) {
        return Err(Error::arg(format!(
            "style embedding batch {:?} does not match features {:?}",
            theta.shape(),
            x.shape()
        )));
    }
    Ok(())
}

pub struct AdainBlock<F: Scalar> {
    channels: usize,
    hw: usize,
    fc1: Linear<F>,
    fc2: Linear<F>,
}

impl<F: Scalar> AdainBlock<F> {
    pub fn new(init: &mut Init<'_, F>, cfg: &AstConfig, channels: usize, hw: (usize, usize)) -> Self {
        AdainBlock {
            channels,
            hw: hw.0 * hw.1,
            fc1: Linear::he(&mut init.pp("fc1"), cfg.embed_dim, cfg.query_hidden),
            fc2: Linear::zeros(&mut init.pp("fc2"), cfg.query_hidden, 2 * channels),
        }
    }

    pub fn forward(&self, x: &Tensor<F>, theta: &Tensor<F>) -> Result<Tensor<F>> {
        check_block_input(x, theta, self.channels, self.hw)?;
        let c = self.channels;
        let m = self.fc2.forward(&self.fc1.forward(theta).leaky_relu(LEAKY_SLOPE));
        let zero_map = Tensor::zeros(&[x.dim(0), self.hw]);
        Ok(spatial_adain(x, &m.narrow(1, 0, c).add_scalar(1.0), &m.narrow(1, c, c), &zero_map))
    }
}

pub enum StyleBlock<F: Scalar> {
    Ast(AstBlock<F>),
    Adain(AdainBlock<F>),
}

impl<F: Scalar> StyleBlock<F> {
    pub fn forward(&self, x: &Tensor<F>, theta: &Tensor<F>) -> Result<Tensor<F>> {
        match self {
            StyleBlock::Ast(b) => b.forward(x, theta),
            StyleBlock::Adain(b) => b.forward(x, theta),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub block: StyleBlockKind,
    pub ast: AstConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            base_channels: 64,
            levels: 3,
            block: StyleBlockKind::Ast,
            ast: AstConfig::default(),
        }
    }
}

impl DecoderConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.levels).map(|i| self.base_channels << i).collect()
    }
}

/// Layer summary stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayout {
    pub widths: Vec<usize>,
    pub style_blocks: usize,
    pub upsampling_stages: usize,
    pub block: StyleBlockKind,
}

pub struct StyleFusionDecoder<F: Scalar> {
    pub config: DecoderConfig,
    in_channels: usize,
    image: (usize, usize),
    enc: Vec<DoubleConv<F>>,
    bottleneck: DoubleConv<F>,
    bottleneck_style: StyleBlock<F>,
    dec: Vec<(DoubleConv<F>, StyleBlock<F>)>,
    out: Conv2d<F>,
    params: ParamSet<F>,
}

impl<F: Scalar> StyleFusionDecoder<F> {
    pub fn new(config: DecoderConfig, in_channels: usize, image: (usize, usize), seed: u64) -> Result<Self> {
        config.ast.validate()?;
        check_divisible(image, config.levels)?;
        if config.base_channels == 0 || in_channels == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, &[tag::INIT, 2]);
        let mut init = Init::new(&mut params, &mut rng);
        let mut init = init.pp("sfd");
        let widths = config.widths();
        let l = config.levels;
        let res = |level: usize| (image.0 >> level, image.1 >> level);
        let style = |init: &mut Init<'_, F>, c: usize, kind: AttentionKind, level: usize| match config.block {
            StyleBlockKind::Ast => StyleBlock::Ast(AstBlock::new(init, &config.ast, c, kind, res(level))),
            StyleBlockKind::Adain => StyleBlock::Adain(AdainBlock::new(init, &config.ast, c, res(level))),
        };
        let enc = (0..l)
            .map(|i| {
                let c_in = if i == 0 { in_channels } else { widths[i - 1] };
                DoubleConv::new(&mut init.pp(&format!("enc{i}")), c_in, widths[i], None)
            })
            .collect();
        let bottleneck = DoubleConv::new(&mut init.pp("bottleneck"), widths[l - 1], widths[l], None);
        let bottleneck_style = style(&mut init.pp("bottleneck_style"), widths[l], AttentionKind::Softmax, l);
        let dec = (0..l)
            .rev()
            .map(|i| {
                let conv = DoubleConv::new(&mut init.pp(&format!("dec{i}")), widths[i + 1] + widths[i], widths[i], None);
                let block = style(&mut init.pp(&format!("dec{i}_style")), widths[i], AttentionKind::Linear, i);
                (conv, block)
            })
            .collect();
        let out = Conv2d::new(&mut init.pp("out"), widths[0], 1, 1, 1, 0);
        Ok(StyleFusionDecoder {
            config,
            in_channels,
            image,
            enc,
            bottleneck,
            bottleneck_style,
            dec,
            out,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layout(&self) -> DecoderLayout {
        DecoderLayout {
            widths: self.config.widths(),
            style_blocks: 1 + self.dec.len(),
            upsampling_stages: self.dec.len(),
            block: self.config.block,
        }
    }

    /// `β [B, C_in, H, W]`, `θ [B, D]` → image `[B, 1, H, W]` in `(0, 1)`.
    pub fn forward(&self, beta: &Tensor<F>, theta: &Tensor<F>) -> Result<Tensor<F>> {
        match beta.shape() {
            [_, c, h, w] if *c == self.in_channels && (*h, *w) == self.image => {}
            s => {
                return Err(Error::arg(format!(
                    "decoder expects [B, {}, {}, {}], got {s:?}",
                    self.in_channels, self.image.0, self.image.1
                )))
            }
        }
        if theta.shape() != [beta.dim(0), self.config.ast.embed_dim] {
            return Err(Error::arg(format!(
                "style embedding must be [{}, {}], got {:?}",
                beta.dim(0),
                self.config.ast.embed_dim,
                theta.shape()
            )));
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = beta.clone();
        for (i, block) in self.enc.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2d(2);
            }
            h = block.forward(&h);
            skips.push(h.clone());
        }
        h = self.bottleneck.forward(&h.avg_pool2d(2));
        h = self.bottleneck_style.forward(&h, theta)?.leaky_relu(LEAKY_SLOPE);
        for ((conv, style), skip) in self.dec.iter().zip(skips.iter().rev()) {
            h = conv.forward(&Tensor::concat(&[h.upsample_nearest(2), skip.clone()], 1));
            h = style.forward(&h, theta)?.leaky_relu(LEAKY_SLOPE);
        }
        Ok(self.out.forward(&h).sigmoid())
    }
}
