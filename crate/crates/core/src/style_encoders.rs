//! Image encoder E_I and metadata encoder E_M sharing one 512-d unit-norm
//! embedding space, pretrained with symmetric in-batch InfoNCE.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use disth_tensor::nn::{Conv2d, Embedding, Linear, LEAKY_SLOPE};
use disth_tensor::optim::Adam;
use disth_tensor::{Init, InitKind, Param, ParamSet, Scalar, Tensor};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{params_hash, Archive};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::image::{stack_images, Image};
use crate::metadata::{build_prompt, AcquisitionParams, Prompt, Vocab, DEFAULT_MAX_LEN, PAD_ID};
use crate::phantom::ContrastClass;
use crate::rng::{self, tag};

pub const EMBED_DIM: usize = 512;
pub const ENCODER_KIND: &str = "style-encoders";
/// Bumped whenever the encoder architecture changes incompatibly.
pub const ENCODER_VERSION: u32 = 1;
const NORM_EPS: f64 = 1e-12;

/// Unit-norm style vector (θ_i from images, θ_m from metadata).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding(Vec<f32>);

impl StyleEmbedding {
    /// Normalizes `v`; rejects zero or non-finite vectors.
    pub fn normalized(v: Vec<f32>) -> Result<Self> {
        let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::arg("style embedding must be finite and non-zero"));
        }
        Ok(StyleEmbedding(v.into_iter().map(|x| (x as f64 / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &StyleEmbedding) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum();
        dot / (self.norm() * other.norm())
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_vec(self.0.iter().map(|&v| F::cst(v as f64)).collect(), &[1, self.0.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub embed_dim: usize,
    pub image_channels: Vec<usize>,
    pub image_hidden: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub max_len: usize,
    pub temperature_init: f64,
    /// Floor for the learned temperature.
    pub min_temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            image_height: 64,
            image_width: 64,
            embed_dim: EMBED_DIM,
            image_channels: vec![16, 32, 64],
            image_hidden: 256,
            token_dim: 64,
            text_hidden: 128,
            max_len: DEFAULT_MAX_LEN,
            temperature_init: 0.07,
            min_temperature: 0.01,
            lr: 1e-3,
            batch_size: 32,
            steps: 600,
            seed: 0,
            log_every: 50,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::arg("contrastive pretraining needs batch_size >= 2"));
        }
        if self.image_channels.is_empty() || self.embed_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder widths must be non-empty".into()));
        }
        if !(self.min_temperature > 0.0) || !(self.temperature_init >= self.min_temperature) || !(self.lr > 0.0) {
            return Err(Error::Config("temperature and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Strided conv stack; mean-pooled activations of every stage feed an MLP head.
pub struct ImageEncoder<F: Scalar> {
    convs: Vec<Conv2d<F>>,
    fc1: Linear<F>,
    fc2: Linear<F>,
    input: (usize, usize),
}

impl<F: Scalar> ImageEncoder<F> {
    pub fn new(init: &mut Init<'_, F>, cfg: &ClipConfig) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in cfg.image_channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut init.pp(&format!("conv{i}")), c_in, c, 3, 2, 1));
            c_in = c;
        }
        let pooled: usize = cfg.image_channels.iter().sum();
        ImageEncoder {
            convs,
            fc1: Linear::he(&mut init.pp("fc1"), pooled, cfg.image_hidden),
            fc2: Linear::new(&mut init.pp("fc2"), cfg.image_hidden, cfg.embed_dim),
            input: (cfg.image_height, cfg.image_width),
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.input
    }

    /// `[B, 1, H, W]` → `[B, D]` unit rows.
    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match x.shape() {
            [_, 1, h, w] if (*h, *w) == self.input => {}
            s => {
                return Err(Error::arg(format!(
                    "image encoder expects [B, 1, {}, {}], got {s:?}",
                    self.input.0, self.input.1
                )))
            }
        }
        let b = x.dim(0);
        let mut h = x.clone();
        let mut pooled = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(&h).leaky_relu(LEAKY_SLOPE);
            let c = h.dim(1);
            let hw = h.dim(2) * h.dim(3);
            pooled.push(h.reshape(&[b, c, hw]).mean_axis(2, false));
        }
        let feat = Tensor::concat(&pooled, 1);
        let z = self.fc2.forward(&self.fc1.forward(&feat).leaky_relu(LEAKY_SLOPE));
        Ok(z.l2_normalize(NORM_EPS))
    }
}

/// Token + position embeddings, a per-token MLP, masked mean pooling and a linear head.
pub struct MetadataEncoder<F: Scalar> {
    tok: Embedding<F>,
    pos: Embedding<F>,
    mlp1: Linear<F>,
    mlp2: Linear<F>,
    head: Linear<F>,
    max_len: usize,
    vocab_size: usize,
}

impl<F: Scalar> MetadataEncoder<F> {
    pub fn new(init: &mut Init<'_, F>, cfg: &ClipConfig, vocab_size: usize) -> Self {
        MetadataEncoder {
            tok: Embedding::new(&mut init.pp("tok"), vocab_size, cfg.token_dim),
            pos: Embedding::new(&mut init.pp("pos"), cfg.max_len, cfg.token_dim),
            mlp1: Linear::he(&mut init.pp("mlp1"), cfg.token_dim, cfg.text_hidden),
            mlp2: Linear::he(&mut init.pp("mlp2"), cfg.text_hidden, cfg.text_hidden),
            head: Linear::new(&mut init.pp("head"), cfg.text_hidden, cfg.embed_dim),
            max_len: cfg.max_len,
            vocab_size,
        }
    }

    /// `ids` holds `B` rows of `max_len` token ids; returns `[B, D]` unit rows.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor<F>> {
        let l = self.max_len;
        if ids.is_empty() || ids.len() % l != 0 {
            return Err(Error::arg(format!("token batch length {} is not a multiple of {l}", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::arg(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let b = ids.len() / l;
        let positions: Vec<usize> = (0..l).collect();
        let e = self.tok.forward(ids, &[b, l]).add(&self.pos.forward(&positions, &[l]));
        let h = self.mlp1.forward(&e).leaky_relu(LEAKY_SLOPE);
        let h = self.mlp2.forward(&h).leaky_relu(LEAKY_SLOPE);
        let mut mask = Vec::with_capacity(b * l);
        for row in ids.chunks(l) {
            let n = row.iter().filter(|&&t| t != PAD_ID).count().max(1) as f64;
            mask.extend(row.iter().map(|&t| F::cst(if t == PAD_ID { 0.0 } else { 1.0 / n })));
        }
        let pooled = h.mul(&Tensor::from_vec(mask, &[b, l, 1])).sum_axis(1, false);
        Ok(self.head.forward(&pooled).l2_normalize(NORM_EPS))
    }
}

/// Frozen-or-trainable pair of style encoders plus the vocabulary they were trained with.
pub struct EncoderPair<F: Scalar> {
    pub config: ClipConfig,
    pub vocab: Vocab,
    pub image: ImageEncoder<F>,
    pub text: MetadataEncoder<F>,
    pub logit_scale: Rc<Param<F>>,
    params: ParamSet<F>,
}

impl<F: Scalar> EncoderPair<F> {
    pub fn new(config: ClipConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.max_len() != config.max_len {
            return Err(Error::Config(format!(
                "vocabulary max_len {} differs from encoder max_len {}",
                vocab.max_len(),
                config.max_len
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, &[tag::CLIP, tag::INIT]);
        let mut init = Init::new(&mut params, &mut rng);
        let image = ImageEncoder::new(&mut init.pp("image"), &config);
        let text = MetadataEncoder::new(&mut init.pp("text"), &config, vocab.size());
        let logit_scale = init.param("logit_scale", &[], InitKind::Const((1.0 / config.temperature_init).ln()));
        Ok(EncoderPair {
            config,
            vocab,
            image,
            text,
            logit_scale,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn set_frozen(&self, frozen: bool) {
        self.params.set_trainable(!frozen);
    }

    pub fn weights_hash(&self) -> String {
        params_hash(&self.params)
    }

    pub fn temperature(&self) -> f64 {
        (-self.logit_scale.value().item_f64()).exp()
    }

    pub fn encode_image(&self, image: &Image) -> Result<StyleEmbedding> {
        let z = self.image.forward(&stack_images::<F>(&[image])?)?;
        StyleEmbedding::normalized(z.to_f64_vec().into_iter().map(|v| v as f32).collect())
    }

    pub fn encode_metadata(&self, tokens: &[usize]) -> Result<StyleEmbedding> {
        if tokens.len() != self.config.max_len {
            return Err(Error::arg(format!(
                "expected {} tokens, got {}",
                self.config.max_len,
                tokens.len()
            )));
        }
        let z = self.text.forward(tokens)?;
        StyleEmbedding::normalized(z.to_f64_vec().into_iter().map(|v| v as f32).collect())
    }

    pub fn encode_prompt(&self, prompt: &Prompt) -> Result<StyleEmbedding> {
        self.encode_metadata(&self.vocab.tokenize(prompt.as_str()))
    }

    pub fn encode_acquisition(&self, acq: &AcquisitionParams) -> Result<StyleEmbedding> {
        self.encode_prompt(&build_prompt(acq))
    }

    /// Token ids for a batch of acquisitions, row-major.
    pub fn tokenize_batch(&self, acqs: &[&AcquisitionParams]) -> Vec<usize> {
        acqs.iter().flat_map(|a| self.vocab.tokenize(build_prompt(a).as_str())).collect()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(
            ENCODER_KIND,
            serde_json::json!({
                "version": ENCODER_VERSION,
                "config": self.config,
                "vocab": self.vocab,
            }),
        );
        a.insert_params("", &self.params);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let version = a.meta.get("version").and_then(|v| v.as_u64());
        if version != Some(ENCODER_VERSION as u64) {
            return Err(Error::Config(format!("unsupported encoder version {version:?}")));
        }
        let config: ClipConfig = serde_json::from_value(a.meta["config"].clone())?;
        let vocab: Vocab = serde_json::from_value(a.meta["vocab"].clone())?;
        let pair = EncoderPair::new(config, vocab, 0)?;
        a.load_params("", &pair.params)?;
        Ok(pair)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        a.expect_kind(ENCODER_KIND, path)?;
        EncoderPair::from_archive(&a)
    }
}

/// Symmetric InfoNCE over an `[N, D]` pair of embedding batches, where row
/// `i` of each is a positive pair. `logit_scale` is a scalar, `ln(1/τ)`.
pub fn clip_loss<F: Scalar>(img: &Tensor<F>, txt: &Tensor<F>, logit_scale: &Tensor<F>) -> Result<Tensor<F>> {
    if img.rank() != 2 || img.shape() != txt.shape() {
        return Err(Error::arg(format!(
            "clip loss needs equal [N, D] batches, got {:?} and {:?}",
            img.shape(),
            txt.shape()
        )));
    }
    let n = img.dim(0);
    if n < 2 {
        return Err(Error::arg("contrastive loss needs a batch of at least 2 pairs"));
    }
    let logits = img.matmul(&txt.transpose(0, 1)).mul(&logit_scale.exp());
    let targets: Vec<usize> = (0..n).collect();
    let i2t = logits.cross_entropy(&targets);
    let t2i = logits.transpose(0, 1).cross_entropy(&targets);
    Ok(i2t.add(&t2i).mul_scalar(0.5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipLogRow {
    pub step: usize,
    pub loss: f64,
    pub temperature: f64,
}

/// Contrastive pretraining on the train split's (image, prompt) pairs.
/// The vocabulary is frozen from the train-split prompts.
pub fn pretrain_clip(dataset: &Dataset, cfg: &ClipConfig) -> Result<(EncoderPair<f32>, Vec<ClipLogRow>)> {
    cfg.validate()?;
    let train = dataset.indices(Split::Train);
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "train split has {} samples, fewer than batch_size {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let (h, w) = dataset.image_shape();
    if (h, w) != (cfg.image_height, cfg.image_width) {
        return Err(Error::Config(format!(
            "dataset images are {h}x{w}, encoder expects {}x{}",
            cfg.image_height, cfg.image_width
        )));
    }
    let prompts: Vec<String> = train
        .iter()
        .map(|&i| build_prompt(&dataset.samples[i].acq).into_string())
        .collect();
    let vocab = Vocab::build(prompts.iter().map(String::as_str), cfg.max_len)?;
    let pair = EncoderPair::<f32>::new(cfg.clone(), vocab, cfg.seed)?;
    let tokens: Vec<Vec<usize>> = prompts.iter().map(|p| pair.vocab.tokenize(p)).collect();
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut running = 0.0;
    for step in 0..cfg.steps {
        let mut rng = rng::stream(cfg.seed, &[tag::CLIP, tag::STEP, step as u64]);
        let picks = sample(&mut rng, train.len(), cfg.batch_size).into_vec();
        let images: Vec<&Image> = picks.iter().map(|&k| &dataset.samples[train[k]].image).collect();
        let ids: Vec<usize> = picks.iter().flat_map(|&k| tokens[k].iter().copied()).collect();
        let zi = pair.image.forward(&stack_images(&images)?)?;
        let zt = pair.text.forward(&ids)?;
        let loss = clip_loss(&zi, &zt, &pair.logit_scale.value())?;
        let value = loss.item_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: "clip".into(),
                step: step as u64,
            });
        }
        let grads = loss.backward();
        opt.step(pair.params(), &grads);
        let max_scale = (1.0 / cfg.min_temperature).ln();
        if pair.logit_scale.value().item_f64() > max_scale {
            pair.logit_scale.set(vec![max_scale as f32]);
        }
        running += value;
        let every = cfg.log_every.max(1);
        if (step + 1) % every == 0 || step + 1 == cfg.steps {
            let n = (step % every + 1) as f64;
            log.push(ClipLogRow {
                step: step + 1,
                loss: running / n,
                temperature: pair.temperature(),
            });
            log::info!("clip step {}: loss {:.4} temperature {:.4}", step + 1, running / n, pair.temperature());
            running = 0.0;
        }
    }
    pair.set_frozen(true);
    Ok((pair, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub split: Split,
    pub n_images: usize,
    pub top1_accuracy: f64,
    pub per_class: BTreeMap<String, f64>,
}

/// For every image, rank the prompts of all contrasts of the same anatomy;
/// a hit means its own prompt scores highest.
pub fn retrieval_accuracy<F: Scalar>(pair: &EncoderPair<F>, dataset: &Dataset, split: Split) -> Result<RetrievalReport> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split:?} split is empty")));
    }
    let img_emb: Vec<StyleEmbedding> = idx
        .iter()
        .map(|&i| pair.encode_image(&dataset.samples[i].image))
        .collect::<Result<_>>()?;
    let txt_emb: Vec<StyleEmbedding> = idx
        .iter()
        .map(|&i| pair.encode_acquisition(&dataset.samples[i].acq))
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, &i) in idx.iter().enumerate() {
        groups.entry(&dataset.samples[i].anatomy_id).or_default().push(k);
    }
    let mut hits: BTreeMap<ContrastClass, (usize, usize)> = BTreeMap::new();
    for group in groups.values() {
        for &k in group {
            let best = group
                .iter()
                .copied()
                .max_by(|&a, &b| img_emb[k].cosine(&txt_emb[a]).total_cmp(&img_emb[k].cosine(&txt_emb[b])))
                .expect("non-empty group");
            let e = hits.entry(dataset.samples[idx[k]].contrast).or_default();
            e.0 += usize::from(best == k);
            e.1 += 1;
        }
    }
    let total: usize = hits.values().map(|h| h.1).sum();
    let correct: usize = hits.values().map(|h| h.0).sum();
    Ok(RetrievalReport {
        split,
        n_images: total,
        top1_accuracy: correct as f64 / total as f64,
        per_class: hits
            .into_iter()
            .map(|(c, (h, n))| (c.as_str().to_string(), h as f64 / n as f64))
            .collect(),
    })
}
