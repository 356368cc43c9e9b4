//! Harmonization model, its training loop and the inference entry point.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use disth_tensor::optim::{Adam, AdamState};
use disth_tensor::{ParamSet, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anatomy::{AnatomyMap, AnatomyMapper, MapperConfig};
use crate::checkpoint::Archive;
use crate::dataset::{Dataset, PairIndex, Sample, Split};
use crate::error::{Error, Result};
use crate::fusion::{DecoderConfig, DecoderLayout, StyleFusionDecoder};
use crate::image::{stack_images, unstack_images, Image};
use crate::losses::{
    adv_disc_loss, adv_gen_loss, loss_beta, loss_dir, loss_global, loss_perc, loss_rec, loss_total, DiscriminatorConfig,
    LossRecord, LossTerms, LossWeights, PatchConfig, PatchDiscriminator, PerceptualConfig, PerceptualNet,
};
use crate::metadata::AcquisitionParams;
use crate::rng::{self, tag};
use crate::style_encoders::{EncoderPair, StyleEmbedding};

pub const MODEL_KIND: &str = "harmonization-model";
pub const MODEL_VERSION: u32 = 1;
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOSS_LOG: &str = "losses.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// When false the source image itself is fed to the decoder.
    pub use_mapper: bool,
    pub mapper: MapperConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub perceptual: PerceptualConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_mapper: true,
            mapper: MapperConfig::default(),
            decoder: DecoderConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            perceptual: PerceptualConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub disc_lr: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Hard cap on optimizer steps, applied on top of `epochs`.
    pub max_steps: Option<u64>,
    /// Wall-clock cap; training stops cleanly at the first step past it.
    pub max_minutes: Option<f64>,
    /// Probability of conditioning on the image embedding rather than the metadata embedding.
    pub p_image: f64,
    /// Draw the conditioning source per sample instead of per batch.
    pub per_sample_conditioning: bool,
    pub seed: u64,
    pub weights: LossWeights,
    pub patch: PatchConfig,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 1e-4,
            disc_lr: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch_size: 16,
            epochs: 15,
            max_steps: None,
            max_minutes: None,
            p_image: 0.5,
            per_sample_conditioning: false,
            seed: 0,
            weights: LossWeights::default(),
            patch: PatchConfig::default(),
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_image) {
            return Err(Error::Config(format!("p_image must be in [0, 1], got {}", self.p_image)));
        }
        if !(self.lr > 0.0) || self.disc_lr.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.weights.validate()?;
        self.patch.validate()
    }
}

/// Style source for harmonization: exactly one of a target image or metadata.
#[derive(Clone, Debug, PartialEq)]
pub enum Guidance {
    Image(Image),
    Metadata(AcquisitionParams),
}

impl Guidance {
    pub fn from_options(target: Option<Image>, metadata: Option<AcquisitionParams>) -> Result<Guidance> {
        match (target, metadata) {
            (Some(img), None) => Ok(Guidance::Image(img)),
            (None, Some(acq)) => Ok(Guidance::Metadata(acq)),
            (Some(_), Some(_)) => Err(Error::arg("guidance takes a target image or metadata, not both")),
            (None, None) => Err(Error::arg("guidance needs a target image or metadata")),
        }
    }
}

/// Encoders plus the trainable generator (mapper and decoder), discriminator and perceptual net.
pub struct HarmonizationModel<F: Scalar> {
    pub config: ModelConfig,
    pub image: (usize, usize),
    pub mapper: Option<AnatomyMapper<F>>,
    pub decoder: StyleFusionDecoder<F>,
    pub disc: PatchDiscriminator<F>,
    pub perc: PerceptualNet<F>,
    pub encoders: EncoderPair<F>,
    gen_params: ParamSet<F>,
}

impl<F: Scalar> HarmonizationModel<F> {
    pub fn new(config: ModelConfig, encoders: EncoderPair<F>, seed: u64) -> Result<Self> {
        let image = (encoders.config.image_height, encoders.config.image_width);
        if config.decoder.ast.embed_dim != encoders.config.embed_dim {
            return Err(Error::Config(format!(
                "decoder embed_dim {} differs from encoder embed_dim {}",
                config.decoder.ast.embed_dim, encoders.config.embed_dim
            )));
        }
        let mapper = if config.use_mapper {
            Some(AnatomyMapper::new(config.mapper.clone(), image, seed)?)
        } else {
            None
        };
        let in_ch = if config.use_mapper { config.mapper.beta_channels } else { 1 };
        let decoder = StyleFusionDecoder::new(config.decoder.clone(), in_ch, image, seed)?;
        let disc = PatchDiscriminator::new(&config.discriminator, seed);
        let perc = PerceptualNet::new(&config.perceptual)?;
        encoders.set_frozen(true);
        let mut gen_params = ParamSet::new();
        if let Some(m) = &mapper {
            gen_params.extend(m.params());
        }
        gen_params.extend(decoder.params());
        Ok(HarmonizationModel {
            config,
            image,
            mapper,
            decoder,
            disc,
            perc,
            encoders,
            gen_params,
        })
    }

    pub fn generator_params(&self) -> &ParamSet<F> {
        &self.gen_params
    }

    /// β for a `[B, 1, H, W]` batch, or the batch itself without a mapper.
    pub fn beta(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        match &self.mapper {
            Some(m) => m.forward(x),
            None => Ok(x.clone()),
        }
    }

    pub fn extract_beta(&self, image: &Image) -> Result<AnatomyMap> {
        let m = self
            .mapper
            .as_ref()
            .ok_or_else(|| Error::Config("this model was trained without an anatomy mapper".into()))?;
        m.extract_beta(image)
    }

    pub fn decode(&self, beta: &Tensor<F>, theta: &Tensor<F>) -> Result<Tensor<F>> {
        self.decoder.forward(beta, theta)
    }

    pub fn style(&self, guidance: &Guidance) -> Result<StyleEmbedding> {
        match guidance {
            Guidance::Image(img) => self.encoders.encode_image(img),
            Guidance::Metadata(acq) => {
                acq.validate()?;
                self.encoders.encode_acquisition(acq)
            }
        }
    }

    pub fn harmonize_with(&self, src: &Image, theta: &StyleEmbedding) -> Result<Image> {
        if src.shape() != self.image {
            return Err(Error::arg(format!("source image is {:?}, model expects {:?}", src.shape(), self.image)));
        }
        let beta = self.beta(&stack_images(&[src])?)?;
        let out = self.decode(&beta, &theta.to_tensor())?;
        Ok(unstack_images(&out).remove(0))
    }

    /// Harmonize several sources at once, each with its own style embedding.
    pub fn harmonize_batch(&self, srcs: &[&Image], thetas: &[&StyleEmbedding]) -> Result<Vec<Image>> {
        if srcs.len() != thetas.len() || srcs.is_empty() {
            return Err(Error::arg("harmonize_batch needs one embedding per source"));
        }
        if let Some(bad) = srcs.iter().find(|s| s.shape() != self.image) {
            return Err(Error::arg(format!("source image is {:?}, model expects {:?}", bad.shape(), self.image)));
        }
        let d = thetas[0].dim();
        let theta: Vec<F> = thetas.iter().flat_map(|t| t.as_slice().iter().map(|&v| F::cst(v as f64))).collect();
        let theta = Tensor::from_vec(theta, &[thetas.len(), d]);
        let beta = self.beta(&stack_images(srcs)?)?;
        Ok(unstack_images(&self.decode(&beta, &theta)?))
    }

    pub fn harmonize(&self, src: &Image, guidance: &Guidance) -> Result<Image> {
        let theta = self.style(guidance)?;
        self.harmonize_with(src, &theta)
    }

    pub fn layout(&self) -> serde_json::Value {
        let decoder: DecoderLayout = self.decoder.layout();
        serde_json::json!({
            "decoder": decoder,
            "mapper_widths": self.mapper.as_ref().map(|m| m.config.widths()),
        })
    }

    fn write_weights(&self, a: &mut Archive) {
        a.insert_params("enc.", self.encoders.params());
        a.insert_params("gen.", &self.gen_params);
        a.insert_params("disc.", self.disc.params());
        a.insert_params("perc.", self.perc.params());
    }

    fn read_weights(&self, a: &Archive) -> Result<()> {
        a.load_params("enc.", self.encoders.params())?;
        a.load_params("gen.", &self.gen_params)?;
        a.load_params("disc.", self.disc.params())?;
        a.load_params("perc.", self.perc.params())
    }
}

/// Progress counters; with the root seed they determine every later step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Pairs of the current epoch already consumed.
    pub cursor: usize,
    pub image_conditioned: u64,
    pub conditioning_draws: u64,
}

/// Bernoulli choice of the conditioning source.
pub fn draw_image_conditioning(p_image: f64, rng: &mut impl Rng) -> bool {
    rng.gen_bool(p_image)
}

type EmbeddingPair = (Vec<f32>, Vec<f32>);

pub struct Trainer {
    pub model: HarmonizationModel<f32>,
    pub config: TrainConfig,
    pub state: TrainState,
    pub log: Vec<LossRecord>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    /// Frozen-encoder outputs (θ_i, θ_m) per (anatomy, contrast).
    cache: HashMap<(String, usize), EmbeddingPair>,
}

fn adam_to_archive(a: &mut Archive, prefix: &str, st: &AdamState) {
    for (name, m, v) in &st.moments {
        a.insert(format!("{prefix}.m.{name}"), &[m.len()], m.clone());
        a.insert(format!("{prefix}.v.{name}"), &[v.len()], v.clone());
    }
}

fn adam_from_archive(a: &Archive, prefix: &str, params: &ParamSet<f32>, step: u64) -> AdamState {
    let moments = params
        .iter()
        .filter_map(|p| {
            let m = a.get(&format!("{prefix}.m.{}", p.name()))?;
            let v = a.get(&format!("{prefix}.v.{}", p.name()))?;
            Some((p.name().to_string(), m.1.to_vec(), v.1.to_vec()))
        })
        .collect();
    AdamState { step, moments }
}

impl Trainer {
    pub fn new(config: TrainConfig, encoders: EncoderPair<f32>) -> Result<Trainer> {
        config.validate()?;
        let model = HarmonizationModel::new(config.model.clone(), encoders, config.seed)?;
        let opt_g = Adam::with_betas(config.lr, config.adam_beta1, config.adam_beta2);
        let opt_d = Adam::with_betas(config.disc_lr.unwrap_or(config.lr), config.adam_beta1, config.adam_beta2);
        Ok(Trainer {
            model,
            config,
            state: TrainState::default(),
            log: Vec::new(),
            opt_g,
            opt_d,
            cache: HashMap::new(),
        })
    }

    fn embeddings(&mut self, s: &Sample) -> Result<EmbeddingPair> {
        let key = (s.anatomy_id.clone(), s.contrast.index());
        if let Some(e) = self.cache.get(&key) {
            return Ok(e.clone());
        }
        let ti = self.model.encoders.encode_image(&s.image)?.as_slice().to_vec();
        let tm = self.model.encoders.encode_acquisition(&s.acq)?.as_slice().to_vec();
        self.cache.insert(key, (ti.clone(), tm.clone()));
        Ok((ti, tm))
    }

    /// One generator update followed by one discriminator update on a batch
    /// of same-anatomy (source, target) pairs.
    pub fn train_step(&mut self, batch: &[(&Sample, &Sample)], rng: &mut impl Rng) -> Result<LossRecord> {
        let step = self.state.step + 1;
        let g = self.generator_step(batch, rng)?;
        let adv_d = self.discriminator_step(&g.target, &g.rec)?;
        self.state.step = step;
        self.state.image_conditioned += g.image_rows as u64;
        self.state.conditioning_draws += batch.len() as u64;
        Ok(LossRecord {
            step,
            adv_d,
            image_conditioned: g.image_rows as f64 / batch.len() as f64,
            ..g.record
        })
    }

    /// Generator sub-step: updates mapper and decoder only.
    pub fn generator_step(&mut self, batch: &[(&Sample, &Sample)], rng: &mut impl Rng) -> Result<GeneratorOutput> {
        let terms = self.forward_terms(batch, rng)?;
        let step = self.state.step + 1;
        let total = loss_total(&terms.terms, &self.config.weights).map_err(|e| match e {
            Error::NonFinite { component, .. } => Error::NonFinite { component, step },
            other => other,
        })?;
        let grads = total.backward();
        self.opt_g.step(&self.model.gen_params, &grads);
        let v = |t: &Tensor<f32>| t.item_f64();
        Ok(GeneratorOutput {
            record: LossRecord {
                step,
                beta: v(&terms.terms.beta),
                rec: v(&terms.terms.rec),
                perc: v(&terms.terms.perc),
                adv_g: v(&terms.terms.adv),
                global: v(&terms.terms.global),
                dir: v(&terms.terms.dir),
                total: total.item_f64(),
                ..Default::default()
            },
            rec: terms.rec.detach(),
            target: terms.target,
            image_rows: terms.image_rows,
        })
    }

    /// Discriminator sub-step on (real, fake); the fake is detached, so
    /// generator weights are untouched. Returns the discriminator loss.
    pub fn discriminator_step(&mut self, real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<f64> {
        self.model.disc.params().set_trainable(true);
        let d_loss = adv_disc_loss(&self.model.disc.forward(real), &self.model.disc.forward(&fake.detach()));
        let d_value = d_loss.item_f64();
        if !d_value.is_finite() {
            return Err(Error::NonFinite {
                component: "L_adv_d".into(),
                step: self.state.step + 1,
            });
        }
        let grads = d_loss.backward();
        self.opt_d.step(self.model.disc.params(), &grads);
        Ok(d_value)
    }

    /// Generator-side forward pass. The discriminator is frozen while it runs.
    fn forward_terms(&mut self, batch: &[(&Sample, &Sample)], rng: &mut impl Rng) -> Result<StepTensors> {
        if batch.is_empty() {
            return Err(Error::arg("empty training batch"));
        }
        for (s, t) in batch {
            if s.anatomy_id != t.anatomy_id {
                return Err(Error::Data(format!(
                    "pair mixes anatomies {} and {}",
                    s.anatomy_id, t.anatomy_id
                )));
            }
        }
        let b = batch.len();
        let mut theta_i = Vec::with_capacity(b * 512);
        let mut theta_m = Vec::with_capacity(b * 512);
        let mut m_src = Vec::with_capacity(b * 512);
        let mut e_src = Vec::with_capacity(b * 512);
        for (s, t) in batch {
            let (ti, tm) = self.embeddings(t)?;
            let (si, sm) = self.embeddings(s)?;
            theta_i.extend(ti);
            theta_m.extend(tm);
            e_src.extend(si);
            m_src.extend(sm);
        }
        let d = theta_i.len() / b;
        let theta_i = Tensor::from_vec(theta_i, &[b, d]);
        let theta_m = Tensor::from_vec(theta_m, &[b, d]);
        let e_src = Tensor::from_vec(e_src, &[b, d]);
        let m_src = Tensor::from_vec(m_src, &[b, d]);

        let use_image: Vec<bool> = if self.config.per_sample_conditioning {
            (0..b).map(|_| draw_image_conditioning(self.config.p_image, rng)).collect()
        } else {
            vec![draw_image_conditioning(self.config.p_image, rng); b]
        };
        let image_rows = use_image.iter().filter(|&&u| u).count();
        let theta = if image_rows == b {
            theta_i.clone()
        } else if image_rows == 0 {
            theta_m.clone()
        } else {
            let mask: Vec<f32> = use_image.iter().map(|&u| if u { 1.0 } else { 0.0 }).collect();
            let mask = Tensor::from_vec(mask, &[b, 1]);
            theta_i.mul(&mask).add(&theta_m.mul(&mask.neg().add_scalar(1.0)))
        };

        let x_src = stack_images::<f32>(&batch.iter().map(|(s, _)| &s.image).collect::<Vec<_>>())?;
        let x_tgt = stack_images::<f32>(&batch.iter().map(|(_, t)| &t.image).collect::<Vec<_>>())?;
        let beta_src = self.model.beta(&x_src)?;
        let rec = self.model.decode(&beta_src, &theta)?;
        let w = &self.config.weights;
        let zero = || Tensor::<f32>::scalar(0.0);

        let l_beta = if self.model.mapper.is_some() && w.beta > 0.0 {
            let beta_tgt = self.model.beta(&x_tgt)?;
            loss_beta(&beta_src, &beta_tgt, &self.config.patch)?
        } else {
            zero()
        };
        let l_rec = loss_rec(&x_tgt, &rec)?;
        let l_perc = if w.perc > 0.0 { loss_perc(&x_tgt, &rec, &self.model.perc)? } else { zero() };
        self.model.disc.params().set_trainable(false);
        let l_adv = if w.adv > 0.0 { adv_gen_loss(&self.model.disc.forward(&rec)) } else { zero() };
        let (l_global, l_dir) = if w.global > 0.0 || w.dir > 0.0 {
            let e_rec = self.model.encoders.image.forward(&rec)?;
            (loss_global(&e_rec, &theta_i, &theta_m)?, loss_dir(&e_rec, &e_src, &theta_m, &m_src)?)
        } else {
            (zero(), zero())
        };
        Ok(StepTensors {
            terms: LossTerms {
                beta: l_beta,
                rec: l_rec,
                perc: l_perc,
                adv: l_adv,
                global: l_global,
                dir: l_dir,
            },
            rec,
            target: x_tgt,
            image_rows,
        })
    }

    /// Squared generator-gradient norm contributed by each weighted loss term
    /// on its own, without updating anything.
    pub fn term_gradient_norms(&mut self, batch: &[(&Sample, &Sample)], rng: &mut impl Rng) -> Result<Vec<(&'static str, f64)>> {
        let t = self.forward_terms(batch, rng)?;
        let mut out = Vec::new();
        for ((name, term), (_, weight)) in t.terms.named().into_iter().zip(self.config.weights.named()) {
            if weight == 0.0 {
                continue;
            }
            let g = term.mul_scalar(weight).backward();
            out.push((name, self.model.gen_params.grad_norm_sq(&g)));
        }
        Ok(out)
    }

    pub fn steps_per_epoch(&self, n_pairs: usize) -> u64 {
        n_pairs.div_ceil(self.config.batch_size) as u64
    }

    pub fn epoch_order(&self, pairs: &[PairIndex], epoch: u64) -> Vec<PairIndex> {
        let mut order = pairs.to_vec();
        order.shuffle(&mut rng::stream(self.config.seed, &[tag::SHUFFLE, epoch]));
        order
    }

    /// Next batch of the epoch schedule; advances the epoch/cursor counters.
    pub fn next_batch(&mut self, pairs: &[PairIndex]) -> Vec<PairIndex> {
        let order = self.epoch_order(pairs, self.state.epoch);
        let end = (self.state.cursor + self.config.batch_size).min(order.len());
        let batch = order[self.state.cursor..end].to_vec();
        self.state.cursor = end;
        if end == order.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
        }
        batch
    }

    pub fn step_rng(&self) -> rand_chacha::ChaCha8Rng {
        rng::stream(self.config.seed, &[tag::STEP, self.state.step])
    }

    /// Runs the next scheduled step on `dataset`'s train pairs.
    pub fn step_on(&mut self, dataset: &Dataset, pairs: &[PairIndex]) -> Result<LossRecord> {
        let mut rng = self.step_rng();
        let idx = self.next_batch(pairs);
        let batch: Vec<(&Sample, &Sample)> = idx
            .iter()
            .map(|p| (&dataset.samples[p.src], &dataset.samples[p.tgt]))
            .collect();
        let rec = self.train_step(&batch, &mut rng)?;
        self.log.push(rec.clone());
        Ok(rec)
    }

    pub fn total_steps(&self, n_pairs: usize) -> u64 {
        let by_epochs = self.config.epochs * self.steps_per_epoch(n_pairs);
        self.config.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(
            MODEL_KIND,
            serde_json::json!({
                "version": MODEL_VERSION,
                "model": self.model.config,
                "train": self.config,
                "encoders": {
                    "config": self.model.encoders.config,
                    "vocab": self.model.encoders.vocab,
                    "hash": self.model.encoders.weights_hash(),
                },
                "layout": self.model.layout(),
                "state": self.state,
                "opt_g_step": self.opt_g.steps(),
                "opt_d_step": self.opt_d.steps(),
            }),
        );
        self.model.write_weights(&mut a);
        adam_to_archive(&mut a, "opt_g", &self.opt_g.export());
        adam_to_archive(&mut a, "opt_d", &self.opt_d.export());
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Trainer> {
        a.expect_kind(MODEL_KIND, path)?;
        let version = a.meta.get("version").and_then(|v| v.as_u64());
        if version != Some(MODEL_VERSION as u64) {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("unsupported model version {version:?}"),
            });
        }
        let config: TrainConfig = serde_json::from_value(a.meta["train"].clone())?;
        let enc_cfg = serde_json::from_value(a.meta["encoders"]["config"].clone())?;
        let vocab = serde_json::from_value(a.meta["encoders"]["vocab"].clone())?;
        let encoders = EncoderPair::new(enc_cfg, vocab, 0)?;
        let mut t = Trainer::new(config, encoders)?;
        t.model.read_weights(a)?;
        t.model.encoders.set_frozen(true);
        t.state = serde_json::from_value(a.meta["state"].clone())?;
        let gs = a.meta["opt_g_step"].as_u64().unwrap_or(0);
        let ds = a.meta["opt_d_step"].as_u64().unwrap_or(0);
        t.opt_g.import(&adam_from_archive(a, "opt_g", &t.model.gen_params, gs));
        t.opt_d.import(&adam_from_archive(a, "opt_d", t.model.disc.params(), ds));
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Trainer> {
        Trainer::from_archive(&Archive::load(path)?, path)
    }
}

/// Result of a generator sub-step; `record.adv_d` is left at zero.
pub struct GeneratorOutput {
    pub record: LossRecord,
    pub rec: Tensor<f32>,
    pub target: Tensor<f32>,
    pub image_rows: usize,
}

struct StepTensors {
    terms: LossTerms<f32>,
    rec: Tensor<f32>,
    target: Tensor<f32>,
    image_rows: usize,
}

/// Load a trained model for inference.
pub fn load_model(path: &Path) -> Result<HarmonizationModel<f32>> {
    Ok(Trainer::load(path)?.model)
}

pub fn harmonize(src: &Image, guidance: &Guidance, checkpoint: &Path) -> Result<Image> {
    load_model(checkpoint)?.harmonize(src, guidance)
}

fn write_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(LossRecord::CSV_HEADER);
    text.push('\n');
    for r in log {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_log(path: &Path, up_to: u64) -> Result<Vec<LossRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(LossRecord::parse_csv_row)
        .filter(|r| r.as_ref().map_or(true, |r| r.step <= up_to))
        .collect()
}

/// Summary returned by [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub stopped_by_time: bool,
}

/// Train on the dataset's train split, writing `last.ckpt` every
/// `checkpoint_every` steps, `losses.csv`, and finally `model.ckpt`.
///
/// With `resume` set, continues from that checkpoint's counters, weights and
/// optimizer state; only the budget fields of `config` are applied.
/// A non-finite loss aborts, leaving the last good checkpoint on disk.
pub fn fit(
    dataset: &Dataset,
    config: &TrainConfig,
    encoders: EncoderPair<f32>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    let pairs = dataset.pairs(Split::Train);
    if pairs.is_empty() {
        return Err(Error::Config("train split has no cross-contrast pairs".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(path) => Trainer::load(path)?,
        None => Trainer::new(config.clone(), encoders)?,
    };
    if resume.is_some() {
        // Budget and logging come from the caller; everything that shapes
        // the optimization stays as checkpointed.
        trainer.config.epochs = config.epochs;
        trainer.config.max_steps = config.max_steps;
        trainer.config.max_minutes = config.max_minutes;
        trainer.config.checkpoint_every = config.checkpoint_every;
        trainer.config.log_every = config.log_every;
        trainer.log = read_log(&out_dir.join(LOSS_LOG), trainer.state.step)?;
    } else {
        trainer.save(&out_dir.join(LAST_CHECKPOINT))?;
    }
    let config_path = out_dir.join("train_config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&trainer.config)?).map_err(|e| Error::io(&config_path, e))?;

    let total = trainer.total_steps(pairs.len());
    let started = Instant::now();
    let mut stopped_by_time = false;
    while trainer.state.step < total {
        if let Some(limit) = trainer.config.max_minutes {
            if started.elapsed().as_secs_f64() / 60.0 >= limit {
                stopped_by_time = true;
                log::info!("time budget reached after {} steps", trainer.state.step);
                break;
            }
        }
        let rec = match trainer.step_on(dataset, &pairs) {
            Ok(r) => r,
            Err(e) => {
                write_log(&out_dir.join(LOSS_LOG), &trainer.log)?;
                log::error!("training aborted: {e}; last good checkpoint is {}", out_dir.join(LAST_CHECKPOINT).display());
                return Err(e);
            }
        };
        if trainer.config.log_every > 0 && rec.step % trainer.config.log_every == 0 {
            log::info!(
                "step {}/{} epoch {}: total {:.4} rec {:.4} beta {:.4} perc {:.4} adv_g {:.4} adv_d {:.4} global {:.4} dir {:.4}",
                rec.step, total, trainer.state.epoch, rec.total, rec.rec, rec.beta, rec.perc, rec.adv_g, rec.adv_d, rec.global, rec.dir
            );
        }
        if trainer.config.checkpoint_every > 0 && rec.step % trainer.config.checkpoint_every == 0 {
            trainer.save(&out_dir.join(LAST_CHECKPOINT))?;
            write_log(&out_dir.join(LOSS_LOG), &trainer.log)?;
        }
    }
    write_log(&out_dir.join(LOSS_LOG), &trainer.log)?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&final_path)?;
    trainer.save(&out_dir.join(LAST_CHECKPOINT))?;
    Ok(FitOutcome {
        checkpoint: final_path,
        steps: trainer.state.step,
        stopped_by_time,
    })
}
