//! Training objectives, the patch discriminator and the frozen perceptual network.

use std::fmt::Write as _;

use disth_tensor::nn::{Conv2d, LEAKY_SLOPE};
use disth_tensor::{Init, ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta: f64,
    pub rec: f64,
    pub perc: f64,
    pub adv: f64,
    pub global: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.1,
            rec: 10.0,
            perc: 1.0,
            adv: 1.0,
            global: 1.0,
            dir: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("L_beta", self.beta),
            ("L_rec", self.rec),
            ("L_perc", self.perc),
            ("L_adv", self.adv),
            ("L_global", self.global),
            ("L_dir", self.dir),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    /// Side of the square patch gathered at each grid point.
    pub patch_size: usize,
    pub stride: usize,
    pub temperature: f64,
    /// Also anchor β_tgt against β_src and average both directions.
    pub symmetric: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_size: 1,
            stride: 2,
            temperature: 0.07,
            symmetric: false,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::Config("patch size and stride must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Patch vectors `[B, P, C·k·k]` on the strided grid of a `[B, C, H, W]` map.
pub fn patch_vectors<F: Scalar>(beta: &Tensor<F>, cfg: &PatchConfig) -> Result<Tensor<F>> {
    cfg.validate()?;
    let (b, c, h, w) = match beta.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(Error::arg(format!("anatomy map must be [B, C, H, W], got {s:?}"))),
    };
    let k = cfg.patch_size;
    if k > h || k > w {
        return Err(Error::arg(format!("patch size {k} exceeds the {h}x{w} map")));
    }
    let grid = if k == 1 {
        beta.subsample2d(cfg.stride)
    } else {
        // one-hot kernel: output channel (ci, dy, dx) copies input ci at offset (dy, dx)
        let d = c * k * k;
        let mut eye = vec![F::zero(); d * c * k * k];
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let o = (ci * k + dy) * k + dx;
                    eye[((o * c + ci) * k + dy) * k + dx] = F::one();
                }
            }
        }
        beta.conv2d(&Tensor::from_vec(eye, &[d, c, k, k]), None, cfg.stride, 0)
    };
    let (d, p) = (grid.dim(1), grid.dim(2) * grid.dim(3));
    Ok(grid.reshape(&[b, d, p]).transpose(1, 2))
}

/// Patch InfoNCE over `[B, P, D]` vectors: anchor `z[i]`, positive `z'[i]`,
/// negatives every `z'[k]`; mean over anchors and batch.
pub fn patch_info_nce<F: Scalar>(z: &Tensor<F>, z_pos: &Tensor<F>, temperature: f64) -> Result<Tensor<F>> {
    if z.rank() != 3 || z.shape() != z_pos.shape() {
        return Err(Error::arg(format!(
            "patch sets must share a [B, P, D] shape, got {:?} and {:?}",
            z.shape(),
            z_pos.shape()
        )));
    }
    let (b, p) = (z.dim(0), z.dim(1));
    if p < 2 {
        return Err(Error::arg("patch grid has a single location, so there are no negatives"));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg("temperature must be > 0"));
    }
    let zn = z.l2_normalize(1e-12);
    let zp = z_pos.l2_normalize(1e-12);
    let logits = zn.matmul(&zp.transpose(1, 2)).mul_scalar(1.0 / temperature).reshape(&[b * p, p]);
    let targets: Vec<usize> = (0..b * p).map(|i| i % p).collect();
    Ok(logits.cross_entropy(&targets))
}

/// L_β between the anatomy maps of two renders of the same anatomy.
pub fn loss_beta<F: Scalar>(beta_src: &Tensor<F>, beta_tgt: &Tensor<F>, cfg: &PatchConfig) -> Result<Tensor<F>> {
    if beta_src.shape() != beta_tgt.shape() {
        return Err(Error::arg(format!(
            "anatomy maps differ in shape: {:?} vs {:?}",
            beta_src.shape(),
            beta_tgt.shape()
        )));
    }
    let zs = patch_vectors(beta_src, cfg)?;
    let zt = patch_vectors(beta_tgt, cfg)?;
    let forward = patch_info_nce(&zs, &zt, cfg.temperature)?;
    if cfg.symmetric {
        let backward = patch_info_nce(&zt, &zs, cfg.temperature)?;
        Ok(forward.add(&backward).mul_scalar(0.5))
    } else {
        Ok(forward)
    }
}

fn same_shape<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::arg(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn loss_rec<F: Scalar>(target: &Tensor<F>, rec: &Tensor<F>) -> Result<Tensor<F>> {
    same_shape(target, rec, "reconstruction loss")?;
    Ok(rec.sub(target).abs().mean_all())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    /// Width of each pair of convolutions; a 2×2 average pool separates pairs.
    pub channels: Vec<usize>,
    /// 1-based convolution depths whose ReLU outputs are compared.
    pub taps: Vec<usize>,
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            channels: vec![8, 16],
            taps: vec![2, 4],
            seed: 0x5eed,
        }
    }
}

/// Frozen randomly initialized conv stack standing in for a pretrained feature network.
pub struct PerceptualNet<F: Scalar> {
    convs: Vec<Conv2d<F>>,
    taps: Vec<usize>,
    params: ParamSet<F>,
}

impl<F: Scalar> PerceptualNet<F> {
    pub fn new(cfg: &PerceptualConfig) -> Result<Self> {
        let depth = 2 * cfg.channels.len();
        if cfg.taps.len() < 2 {
            return Err(Error::Config("perceptual network needs at least two tap layers".into()));
        }
        let mut taps = cfg.taps.clone();
        taps.sort_unstable();
        taps.dedup();
        if taps.len() != cfg.taps.len() || taps.iter().any(|&t| t == 0 || t > depth) {
            return Err(Error::Config(format!("perceptual taps {:?} must be distinct depths in 1..={depth}", cfg.taps)));
        }
        let mut params = ParamSet::new();
        let mut rng = rng::stream(cfg.seed, &[tag::INIT, 3]);
        let mut init = Init::new(&mut params, &mut rng);
        let mut init = init.pp("perc");
        let mut convs = Vec::with_capacity(depth);
        let mut c_in = 1;
        for j in 0..depth {
            let c = cfg.channels[j / 2];
            convs.push(Conv2d::new(&mut init.pp(&format!("conv{}", j + 1)), c_in, c, 3, 1, 1));
            c_in = c;
        }
        params.set_trainable(false);
        Ok(PerceptualNet { convs, taps, params })
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn features(&self, x: &Tensor<F>) -> Vec<Tensor<F>> {
        let last = *self.taps.last().expect("validated non-empty");
        let mut out = Vec::with_capacity(self.taps.len());
        let mut h = x.clone();
        for (j, conv) in self.convs.iter().enumerate().take(last) {
            if j > 0 && j % 2 == 0 {
                h = h.avg_pool2d(2);
            }
            h = conv.forward(&h).relu();
            if self.taps.contains(&(j + 1)) {
                out.push(h.clone());
            }
        }
        out
    }
}

/// Σ over taps of the mean absolute feature difference.
pub fn loss_perc<F: Scalar>(target: &Tensor<F>, rec: &Tensor<F>, net: &PerceptualNet<F>) -> Result<Tensor<F>> {
    same_shape(target, rec, "perceptual loss")?;
    let ft = net.features(target);
    let fr = net.features(rec);
    let mut total: Option<Tensor<F>> = None;
    for (a, b) in ft.iter().zip(&fr) {
        let term = b.sub(a).abs().mean_all();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.expect("at least two taps"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_channels: 16 }
    }
}

/// Convolutional discriminator emitting one logit per receptive-field patch.
pub struct PatchDiscriminator<F: Scalar> {
    c1: Conv2d<F>,
    c2: Conv2d<F>,
    c3: Conv2d<F>,
    params: ParamSet<F>,
}

impl<F: Scalar> PatchDiscriminator<F> {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64) -> Self {
        let d = cfg.base_channels.max(1);
        let mut params = ParamSet::new();
        let mut rng = rng::stream(seed, &[tag::INIT, 4]);
        let mut init = Init::new(&mut params, &mut rng);
        let mut init = init.pp("disc");
        let c1 = Conv2d::new(&mut init.pp("c1"), 1, d, 4, 2, 1);
        let c2 = Conv2d::new(&mut init.pp("c2"), d, 2 * d, 4, 2, 1);
        let c3 = Conv2d::new(&mut init.pp("c3"), 2 * d, 1, 4, 1, 1);
        // small final layer so initial logits sit near zero
        c3.weight.set(c3.weight.to_vec().iter().map(|&v| v * F::cst(0.1)).collect());
        PatchDiscriminator { c1, c2, c3, params }
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    /// `[B, 1, H, W]` → logits `[B, 1, h, w]`.
    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let h = self.c1.forward(x).leaky_relu(LEAKY_SLOPE);
        let h = self.c2.forward(&h).instance_norm(1e-5).leaky_relu(LEAKY_SLOPE);
        self.c3.forward(&h)
    }
}

/// `−E log σ(real) − E log(1 − σ(fake))`.
pub fn adv_disc_loss<F: Scalar>(real_logits: &Tensor<F>, fake_logits: &Tensor<F>) -> Tensor<F> {
    real_logits.neg().softplus().mean_all().add(&fake_logits.softplus().mean_all())
}

/// Non-saturating generator loss `−E log σ(fake)`.
pub fn adv_gen_loss<F: Scalar>(fake_logits: &Tensor<F>) -> Tensor<F> {
    fake_logits.neg().softplus().mean_all()
}

pub struct AdvLosses<F: Scalar> {
    pub gen: Tensor<F>,
    pub disc: Tensor<F>,
}

/// Both adversarial terms. The discriminator term sees `fake` detached, so
/// it never sends gradient into the generator.
pub fn loss_adv<F: Scalar>(disc: &PatchDiscriminator<F>, real: &Tensor<F>, fake: &Tensor<F>) -> Result<AdvLosses<F>> {
    same_shape(real, fake, "adversarial loss")?;
    let gen = adv_gen_loss(&disc.forward(fake));
    let d = adv_disc_loss(&disc.forward(real), &disc.forward(&fake.detach()));
    Ok(AdvLosses { gen, disc: d })
}

fn check_rows<F: Scalar>(t: &Tensor<F>, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::arg(format!("{what} must be [B, D], got {:?}", t.shape())));
    }
    let d = t.dim(1);
    for row in t.data().chunks(d) {
        if row.iter().all(|v| *v == F::zero()) {
            return Err(Error::arg(format!("{what} contains a zero vector")));
        }
    }
    Ok(())
}

fn row_cosine<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, eps: f64) -> Tensor<F> {
    let dot = a.mul(b).sum_axis(1, false);
    let na = a.square().sum_axis(1, false).add_scalar(eps).sqrt();
    let nb = b.square().sum_axis(1, false).add_scalar(eps).sqrt();
    dot.div(&na.mul(&nb))
}

/// `½(1 − cos(e_rec, θ_i)) + ½(1 − cos(e_rec, θ_m))`, averaged over the batch.
pub fn loss_global<F: Scalar>(e_rec: &Tensor<F>, theta_i: &Tensor<F>, theta_m: &Tensor<F>) -> Result<Tensor<F>> {
    for (t, n) in [(e_rec, "e_rec"), (theta_i, "θ_i"), (theta_m, "θ_m")] {
        check_rows(t, n)?;
    }
    same_shape(e_rec, theta_i, "global loss")?;
    same_shape(e_rec, theta_m, "global loss")?;
    let ci = row_cosine(e_rec, theta_i, 0.0);
    let cm = row_cosine(e_rec, theta_m, 0.0);
    Ok(ci.add(&cm).mul_scalar(-0.5).add_scalar(1.0).mean_all())
}

/// Below this norm a displacement counts as no change of style.
pub const DIR_MIN_NORM: f64 = 1e-8;

/// `1 − cos(e_rec − e_src, m_tgt − m_src)`, averaged over the batch. Rows
/// whose displacement norm is below [`DIR_MIN_NORM`] contribute zero.
pub fn loss_dir<F: Scalar>(e_rec: &Tensor<F>, e_src: &Tensor<F>, m_tgt: &Tensor<F>, m_src: &Tensor<F>) -> Result<Tensor<F>> {
    for t in [e_src, m_tgt, m_src] {
        same_shape(e_rec, t, "directional loss")?;
    }
    if e_rec.rank() != 2 {
        return Err(Error::arg(format!("directional loss needs [B, D] embeddings, got {:?}", e_rec.shape())));
    }
    let di = e_rec.sub(e_src);
    let dm = m_tgt.sub(m_src);
    let (b, d) = (di.dim(0), di.dim(1));
    let norm = |t: &Tensor<F>, r: usize| -> f64 {
        t.data()[r * d..(r + 1) * d]
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut mask = Vec::with_capacity(b);
    for r in 0..b {
        let keep = norm(&di, r) >= DIR_MIN_NORM && norm(&dm, r) >= DIR_MIN_NORM;
        if !keep {
            log::warn!("directional loss: degenerate same-style pair in batch row {r}; contribution set to 0");
        }
        mask.push(F::cst(if keep { 1.0 } else { 0.0 }));
    }
    let per_row = row_cosine(&di, &dm, 1e-30).neg().add_scalar(1.0);
    Ok(per_row.mul(&Tensor::from_vec(mask, &[b])).mean_all())
}

/// The six weighted components of the generator objective.
pub struct LossTerms<F: Scalar> {
    pub beta: Tensor<F>,
    pub rec: Tensor<F>,
    pub perc: Tensor<F>,
    pub adv: Tensor<F>,
    pub global: Tensor<F>,
    pub dir: Tensor<F>,
}

impl<F: Scalar> LossTerms<F> {
    pub fn named(&self) -> [(&'static str, &Tensor<F>); 6] {
        [
            ("L_beta", &self.beta),
            ("L_rec", &self.rec),
            ("L_perc", &self.perc),
            ("L_adv", &self.adv),
            ("L_global", &self.global),
            ("L_dir", &self.dir),
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        let s = |x: f64| Tensor::scalar(F::cst(x));
        LossTerms {
            beta: s(v[0]),
            rec: s(v[1]),
            perc: s(v[2]),
            adv: s(v[3]),
            global: s(v[4]),
            dir: s(v[5]),
        }
    }
}

/// Weighted sum of the components; a non-finite component is an error naming it.
pub fn loss_total<F: Scalar>(terms: &LossTerms<F>, w: &LossWeights) -> Result<Tensor<F>> {
    let mut total: Option<Tensor<F>> = None;
    for ((name, t), (_, weight)) in terms.named().into_iter().zip(w.named()) {
        if !t.item_f64().is_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
                step: 0,
            });
        }
        let term = t.mul_scalar(weight);
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    Ok(total.expect("six components"))
}

/// One row of the loss log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub beta: f64,
    pub rec: f64,
    pub perc: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub global: f64,
    pub dir: f64,
    pub total: f64,
    pub image_conditioned: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,L_beta,L_rec,L_perc,L_adv_g,L_adv_d,L_global,L_dir,total";

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.beta, self.rec, self.perc, self.adv_g, self.adv_d, self.global, self.dir, self.total
        )
        .expect("writing to a String");
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<LossRecord> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Data(format!("loss log row has {} fields, expected 9", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| Error::Data(format!("bad number {:?} in loss log", f[i])));
        Ok(LossRecord {
            step: f[0].parse().map_err(|_| Error::Data(format!("bad step {:?} in loss log", f[0])))?,
            beta: num(1)?,
            rec: num(2)?,
            perc: num(3)?,
            adv_g: num(4)?,
            adv_d: num(5)?,
            global: num(6)?,
            dir: num(7)?,
            total: num(8)?,
            image_conditioned: f64::NAN,
        })
    }
}
