//! Image-quality metrics, cross-contrast matrices and the ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PairIndex, Split};
use crate::error::{Error, Result};
use crate::fusion::StyleBlockKind;
use crate::image::Image;
use crate::phantom::ContrastClass;
use crate::style_encoders::{EncoderPair, StyleEmbedding};
use crate::trainer::{fit, HarmonizationModel, TrainConfig, Trainer};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio for images on [0, 1]; zero error reports the cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.pixels().len() as f64;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Summed-area table with a zero first row and column.
fn integral(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Mean local SSIM over every fully contained 7×7 uniform window, with
/// population statistics and dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::arg(format!("ssim needs at least {k}x{k} pixels, got {h}x{w}")));
    }
    let x: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let tables = [
        integral(&x, h, w),
        integral(&y, h, w),
        integral(&prod(&x, &x), h, w),
        integral(&prod(&y, &y), h, w),
        integral(&prod(&x, &y), h, w),
    ];
    let n = (k * k) as f64;
    let stride = w + 1;
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let [mx, my, sxx, syy, sxy] = tables.each_ref().map(|s| {
                (s[(r + k) * stride + c + k] - s[r * stride + c + k] - s[(r + k) * stride + c] + s[r * stride + c]) / n
            });
            let vx = (sxx - mx * mx).max(0.0);
            let vy = (syy - my * my).max(0.0);
            let cxy = sxy - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Image,
    Text,
}

impl GuidanceMode {
    pub fn parse(s: &str) -> Result<GuidanceMode> {
        match s {
            "image" => Ok(GuidanceMode::Image),
            "text" => Ok(GuidanceMode::Text),
            _ => Err(Error::arg(format!("unknown guidance mode {s:?} (expected image or text)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::Image => "image",
            GuidanceMode::Text => "text",
        }
    }
}

/// Source-by-target contrast matrix of mean scores. Absent cells are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsMatrix {
    pub contrasts: Vec<ContrastClass>,
    pub psnr: Vec<Vec<Option<f64>>>,
    pub ssim: Vec<Vec<Option<f64>>>,
    pub counts: Vec<Vec<usize>>,
    pub psnr_std: Vec<Vec<Option<f64>>>,
    pub ssim_std: Vec<Vec<Option<f64>>>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

impl MetricsMatrix {
    /// Aggregates per-pair scores `(src, tgt, psnr, ssim)`.
    pub fn from_scores(contrasts: &[ContrastClass], scores: &[(ContrastClass, ContrastClass, f64, f64)]) -> Self {
        let k = contrasts.len();
        let pos = |c: ContrastClass| contrasts.iter().position(|&x| x == c);
        let mut p = vec![vec![Vec::new(); k]; k];
        let mut s = vec![vec![Vec::new(); k]; k];
        for &(a, b, vp, vs) in scores {
            if let (Some(i), Some(j)) = (pos(a), pos(b)) {
                p[i][j].push(vp);
                s[i][j].push(vs);
            }
        }
        let agg = |cells: &Vec<Vec<Vec<f64>>>, f: fn((f64, f64)) -> f64| {
            cells
                .iter()
                .map(|row| row.iter().map(|c| (!c.is_empty()).then(|| f(mean_std(c)))).collect())
                .collect()
        };
        MetricsMatrix {
            contrasts: contrasts.to_vec(),
            psnr: agg(&p, |m| m.0),
            ssim: agg(&s, |m| m.0),
            psnr_std: agg(&p, |m| m.1),
            ssim_std: agg(&s, |m| m.1),
            counts: p.iter().map(|row| row.iter().map(Vec::len).collect()).collect(),
        }
    }

    /// `(src, tgt)` index pairs of populated cells.
    pub fn populated(&self) -> Vec<(usize, usize)> {
        let k = self.contrasts.len();
        (0..k)
            .flat_map(|i| (0..k).map(move |j| (i, j)))
            .filter(|&(i, j)| self.counts[i][j] > 0)
            .collect()
    }

    /// Count-weighted mean over all populated cells.
    pub fn overall(&self) -> (f64, f64) {
        let cells = self.populated();
        let n: usize = cells.iter().map(|&(i, j)| self.counts[i][j]).sum();
        let w = |m: &Vec<Vec<Option<f64>>>| {
            cells
                .iter()
                .map(|&(i, j)| m[i][j].unwrap_or(0.0) * self.counts[i][j] as f64)
                .sum::<f64>()
                / n.max(1) as f64
        };
        (w(&self.psnr), w(&self.ssim))
    }

    fn matrix_csv(&self, values: &[Vec<Option<f64>>]) -> String {
        let mut out = String::from("source\\target");
        for c in &self.contrasts {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (i, row) in values.iter().enumerate() {
            out.push_str(self.contrasts[i].as_str());
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v:.6}");
                    }
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from("source,target,count,psnr_mean,psnr_std,ssim_mean,ssim_std\n");
        for (i, j) in self.populated() {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                self.contrasts[i],
                self.contrasts[j],
                self.counts[i][j],
                self.psnr[i][j].unwrap_or(f64::NAN),
                self.psnr_std[i][j].unwrap_or(f64::NAN),
                self.ssim[i][j].unwrap_or(f64::NAN),
                self.ssim_std[i][j].unwrap_or(f64::NAN),
            );
        }
        out
    }

    /// Writes `metrics.csv`, `matrix_psnr.csv`, `matrix_ssim.csv`,
    /// `matrix.json` and the two heatmap PNGs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("metrics.csv", self.cells_csv())?;
        put("matrix_psnr.csv", self.matrix_csv(&self.psnr))?;
        put("matrix_ssim.csv", self.matrix_csv(&self.ssim))?;
        put("matrix.json", serde_json::to_string_pretty(self)?)?;
        heatmap(&self.psnr, &dir.join("matrix_psnr.png"))?;
        heatmap(&self.ssim, &dir.join("matrix_ssim.png"))
    }
}

const HEATMAP_CELL: u32 = 32;

/// Cell colours run dark blue (lowest) to yellow (highest); absent cells are grey.
fn heatmap(values: &[Vec<Option<f64>>], path: &Path) -> Result<()> {
    let k = values.len() as u32;
    let present: Vec<f64> = values.iter().flatten().flatten().copied().collect();
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut img = image::RgbImage::new(k * HEATMAP_CELL, k * HEATMAP_CELL);
    for (y, px) in img.enumerate_rows_mut() {
        for (x, _, p) in px {
            let (i, j) = ((y / HEATMAP_CELL) as usize, (x / HEATMAP_CELL) as usize);
            *p = match values[i][j] {
                None => image::Rgb([128, 128, 128]),
                Some(v) => {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
                    let c = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
                    image::Rgb([c(30.0, 250.0), c(30.0, 230.0), c(120.0, 40.0)])
                }
            };
        }
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

fn score_pairs(
    dataset: &Dataset,
    pairs: &[PairIndex],
    mut outputs: impl FnMut(&[PairIndex]) -> Result<Vec<Image>>,
) -> Result<Vec<(ContrastClass, ContrastClass, f64, f64)>> {
    let mut scores = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let outs = outputs(chunk)?;
        for (p, out) in chunk.iter().zip(&outs) {
            let (s, t) = (&dataset.samples[p.src], &dataset.samples[p.tgt]);
            scores.push((s.contrast, t.contrast, psnr(out, &t.image)?, ssim(out, &t.image)?));
        }
    }
    Ok(scores)
}

const EVAL_BATCH: usize = 16;

fn split_pairs(dataset: &Dataset, split: Split) -> Result<Vec<PairIndex>> {
    let pairs = dataset.pairs(split);
    if pairs.is_empty() {
        return Err(Error::Data(format!("{split:?} split has no cross-contrast pairs")));
    }
    Ok(pairs)
}

/// Scores the unharmonized source against the target: the floor every model must beat.
pub fn identity_matrix(dataset: &Dataset, split: Split) -> Result<MetricsMatrix> {
    let pairs = split_pairs(dataset, split)?;
    let scores = score_pairs(dataset, &pairs, |chunk| {
        Ok(chunk.iter().map(|p| dataset.samples[p.src].image.clone()).collect())
    })?;
    Ok(MetricsMatrix::from_scores(&dataset.contrasts(), &scores))
}

/// Harmonizes every ordered cross-contrast pair of `split`, guided by the
/// target's image or by its acquisition metadata, and scores against the target.
pub fn cross_contrast_matrix(
    model: &HarmonizationModel<f32>,
    dataset: &Dataset,
    split: Split,
    mode: GuidanceMode,
) -> Result<MetricsMatrix> {
    let pairs = split_pairs(dataset, split)?;
    let mut cache: Vec<Option<StyleEmbedding>> = vec![None; dataset.samples.len()];
    let scores = score_pairs(dataset, &pairs, |chunk| {
        for p in chunk {
            if cache[p.tgt].is_none() {
                let t = &dataset.samples[p.tgt];
                cache[p.tgt] = Some(match mode {
                    GuidanceMode::Image => model.encoders.encode_image(&t.image)?,
                    GuidanceMode::Text => model.encoders.encode_acquisition(&t.acq)?,
                });
            }
        }
        let srcs: Vec<&Image> = chunk.iter().map(|p| &dataset.samples[p.src].image).collect();
        let thetas: Vec<&StyleEmbedding> = chunk.iter().map(|p| cache[p.tgt].as_ref().expect("cached")).collect();
        model.harmonize_batch(&srcs, &thetas)
    })?;
    Ok(MetricsMatrix::from_scores(&dataset.contrasts(), &scores))
}

/// The five ablation rows, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    AdainBlocks,
    NoMapper,
    MetadataOnly,
    ImageOnly,
    Full,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::AdainBlocks,
        AblationVariant::NoMapper,
        AblationVariant::MetadataOnly,
        AblationVariant::ImageOnly,
        AblationVariant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::AdainBlocks => "AdaIN instead of AST blocks",
            AblationVariant::NoMapper => "No β disentanglement (no Anatomy Mapper)",
            AblationVariant::MetadataOnly => "Trained with only metadata guidance",
            AblationVariant::ImageOnly => "Trained with only image guidance",
            AblationVariant::Full => "Full model",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            AblationVariant::AdainBlocks => "adain",
            AblationVariant::NoMapper => "no_mapper",
            AblationVariant::MetadataOnly => "metadata_only",
            AblationVariant::ImageOnly => "image_only",
            AblationVariant::Full => "full",
        }
    }

    /// The base config with this variant's single change applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            AblationVariant::AdainBlocks => c.model.decoder.block = StyleBlockKind::Adain,
            AblationVariant::NoMapper => c.model.use_mapper = false,
            AblationVariant::MetadataOnly => c.p_image = 0.0,
            AblationVariant::ImageOnly => c.p_image = 1.0,
            AblationVariant::Full => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub label: String,
    pub psnr_image: f64,
    pub ssim_image: f64,
    pub psnr_text: f64,
    pub ssim_text: f64,
    pub steps: u64,
    /// Set when training or evaluation failed; metric fields are NaN then.
    pub error: Option<String>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,psnr_image,ssim_image,psnr_text,ssim_text,steps,status";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {}", e.replace([',', '\n'], ";")));
        let _ = writeln!(
            out,
            "\"{}\",{:.4},{:.4},{:.4},{:.4},{},{}",
            r.label, r.psnr_image, r.ssim_image, r.psnr_text, r.ssim_text, r.steps, status
        );
    }
    out
}

/// Evaluates one trained model under both guidance modes, writing the
/// matrices to `dir/image` and `dir/text`.
pub fn evaluate_both(
    model: &HarmonizationModel<f32>,
    dataset: &Dataset,
    split: Split,
    dir: &Path,
) -> Result<(MetricsMatrix, MetricsMatrix)> {
    let img = cross_contrast_matrix(model, dataset, split, GuidanceMode::Image)?;
    img.write(&dir.join("image"))?;
    let txt = cross_contrast_matrix(model, dataset, split, GuidanceMode::Text)?;
    txt.write(&dir.join("text"))?;
    Ok((img, txt))
}

/// Trains and evaluates every ablation variant with the same seed and budget.
/// A variant that fails is reported in its row; the others still run.
pub fn run_ablation(
    dataset: &Dataset,
    encoders: &EncoderPair<f32>,
    base: &TrainConfig,
    variants: &[AblationVariant],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let enc_archive = encoders.to_archive()?;
    let mut rows = Vec::new();
    for &v in variants {
        let dir = out_dir.join(v.slug());
        log::info!("ablation: training {:?}", v.label());
        let result = (|| -> Result<(MetricsMatrix, MetricsMatrix, u64)> {
            let enc = EncoderPair::from_archive(&enc_archive)?;
            let outcome = fit(dataset, &v.apply(base), enc, &dir, None)?;
            let model = Trainer::load(&outcome.checkpoint)?.model;
            let (i, t) = evaluate_both(&model, dataset, Split::Test, &dir)?;
            Ok((i, t, outcome.steps))
        })();
        let row = match result {
            Ok((img, txt, steps)) => {
                let (pi, si) = img.overall();
                let (pt, st) = txt.overall();
                AblationRow {
                    variant: v,
                    label: v.label().into(),
                    psnr_image: pi,
                    ssim_image: si,
                    psnr_text: pt,
                    ssim_text: st,
                    steps,
                    error: None,
                }
            }
            Err(e) => {
                log::error!("ablation variant {:?} failed: {e}", v.label());
                AblationRow {
                    variant: v,
                    label: v.label().into(),
                    psnr_image: f64::NAN,
                    ssim_image: f64::NAN,
                    psnr_text: f64::NAN,
                    ssim_text: f64::NAN,
                    steps: 0,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let csv = out_dir.join("ablation.csv");
    fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    let json = out_dir.join("ablation.json");
    fs::write(&json, serde_json::to_string_pretty(&rows)?).map_err(|e| Error::io(&json, e))?;
    Ok(rows)
}
