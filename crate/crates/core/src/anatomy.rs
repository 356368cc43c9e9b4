//! Anatomy mapper: a U-Net from an image to the contrast-invariant map β.
//!
//! The first convolution is reflection-padded and immediately instance
//! normalized. Together these make β exactly invariant to positive affine
//! intensity maps `a·I + b`, up to the normalization ε.

use std::fs;
use std::path::Path;

use disth_tensor::nn::Conv2d;
use disth_tensor::{Init, ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::blocks::DoubleConv;
use crate::error::{Error, Result};
use crate::image::{stack_images, Image};
use crate::rng::{self, tag};

/// Normalization used after convolutions other than the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeepNorm {
    Instance,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub beta_channels: usize,
    /// Kept tiny: β(a·I + b) matches β(I) only up to a relative error of
    /// roughly eps·(1/a² − 1) / var(first conv).
    pub first_norm_eps: f64,
    pub deep_norm: DeepNorm,
    pub deep_norm_eps: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            base_channels: 32,
            levels: 3,
            beta_channels: 16,
            first_norm_eps: 1e-8,
            deep_norm: DeepNorm::Instance,
            deep_norm_eps: 1e-5,
        }
    }
}

impl MapperConfig {
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.levels).map(|i| self.base_channels << i).collect()
    }

    pub fn validate(&self, image: (usize, usize)) -> Result<()> {
        if self.base_channels == 0 || self.beta_channels == 0 || self.levels == 0 {
            return Err(Error::Config("mapper widths and depth must be positive".into()));
        }
        if !(self.first_norm_eps > 0.0) {
            return Err(Error::Config("first_norm_eps must be positive".into()));
        }
        check_divisible(image, self.levels)
    }
}

pub(crate) fn check_divisible(image: (usize, usize), levels: usize) -> Result<()> {
    let k = 1usize << levels;
    if image.0 % k != 0 || image.1 % k != 0 || image.0 < 2 * k || image.1 < 2 * k {
        return Err(Error::Config(format!(
            "image {}x{} must be a multiple of {k} (and at least {}) for {levels} U-Net levels",
            image.0,
            image.1,
            2 * k
        )));
    }
    Ok(())
}

/// Per-image anatomy features `[C, H, W]`, aligned with the input.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl AnatomyMap {
    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Vec<AnatomyMap> {
        let (b, c, h, w) = match t.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            s => panic!("anatomy tensor must be [B, C, H, W], got {s:?}"),
        };
        t.data()
            .chunks(c * h * w)
            .take(b)
            .map(|d| AnatomyMap {
                channels: c,
                height: h,
                width: w,
                data: d.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
            .collect()
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_vec(
            self.data.iter().map(|&v| F::cst(v as f64)).collect(),
            &[1, self.channels, self.height, self.width],
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Writes `beta.f32` (little-endian), `beta.json` (shape descriptor) and
    /// `beta.png` (channels tiled in a grid, each min-max scaled).
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let raw: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let blob = dir.join("beta.f32");
        fs::write(&blob, raw).map_err(|e| Error::io(&blob, e))?;
        let desc = serde_json::json!({
            "shape": [self.channels, self.height, self.width],
            "dtype": "float32",
            "byte_order": "little",
            "layout": "channel-major",
            "file": "beta.f32",
        });
        let json = dir.join("beta.json");
        fs::write(&json, serde_json::to_string_pretty(&desc)?).map_err(|e| Error::io(&json, e))?;

        let cols = (self.channels as f64).sqrt().ceil() as usize;
        let rows = self.channels.div_ceil(cols);
        let (h, w) = (self.height, self.width);
        let mut grid = vec![0.0f32; rows * h * cols * w];
        for c in 0..self.channels {
            let ch = self.channel(c);
            let (lo, hi) = ch.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            let (gr, gc) = (c / cols, c % cols);
            for y in 0..h {
                for x in 0..w {
                    grid[(gr * h + y) * cols * w + gc * w + x] = (ch[y * w + x] - lo) / span;
                }
            }
        }
        Image::new(rows * h, cols * w, grid)?.save_png(&dir.join("beta.png"))
    }
}

pub struct AnatomyMapper<F: Scalar> {
    pub config: MapperConfig,
    image: (usize, usize),
    enc: Vec<DoubleConv<F>>,
    bottleneck: DoubleConv<F>,
    dec: Vec<DoubleConv<F>>,
    out: Conv2d<F>,
    params: ParamSet<F>,
}

impl<F: Scalar> AnatomyMapper<F> {
    pub fn new(config: MapperConfig, image: (usize, usize), seed: u64) -> Result<Self> {
        config.validate(image)?;
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, &[tag::INIT, 1]);
        let mut init = Init::new(&mut params, &mut rng);
        let mut init = init.pp("mapper");
        let widths = config.widths();
        let deep = match config.deep_norm {
            DeepNorm::Instance => Some(config.deep_norm_eps),
            DeepNorm::None => None,
        };
        let mut enc = Vec::with_capacity(config.levels);
        for i in 0..config.levels {
            let c_in = if i == 0 { 1 } else { widths[i - 1] };
            let block = DoubleConv::new(&mut init.pp(&format!("enc{i}")), c_in, widths[i], deep);
            enc.push(if i == 0 { block.with_input_stage(config.first_norm_eps) } else { block });
        }
        let l = config.levels;
        let bottleneck = DoubleConv::new(&mut init.pp("bottleneck"), widths[l - 1], widths[l], deep);
        let dec = (0..l)
            .rev()
            .map(|i| DoubleConv::new(&mut init.pp(&format!("dec{i}")), widths[i + 1] + widths[i], widths[i], deep))
            .collect();
        let out = Conv2d::new(&mut init.pp("out"), widths[0], config.beta_channels, 1, 1, 0);
        Ok(AnatomyMapper {
            config,
            image,
            enc,
            bottleneck,
            dec,
            out,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image
    }

    /// `[B, 1, H, W]` → `[B, C_β, H, W]`.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match x.shape() {
            [_, 1, h, w] if (*h, *w) == self.image => {}
            s => {
                return Err(Error::arg(format!(
                    "anatomy mapper expects [B, 1, {}, {}], got {s:?}",
                    self.image.0, self.image.1
                )))
            }
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for (i, block) in self.enc.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2d(2);
            }
            h = block.forward(&h);
            skips.push(h.clone());
        }
        h = self.bottleneck.forward(&h.avg_pool2d(2));
        for (block, skip) in self.dec.iter().zip(skips.iter().rev()) {
            h = block.forward(&Tensor::concat(&[h.upsample_nearest(2), skip.clone()], 1));
        }
        Ok(self.out.forward(&h))
    }

    pub fn extract_beta(&self, image: &Image) -> Result<AnatomyMap> {
        let t = self.forward(&stack_images(&[image])?)?;
        Ok(AnatomyMap::from_tensor(&t).remove(0))
    }
}
