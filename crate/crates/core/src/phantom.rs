//! Synthetic tissue phantoms and their spin-echo / inversion-recovery renders.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metadata::{determine_plane, AcquisitionParams, Plane};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ContrastClass {
    T1w,
    T2w,
    PDw,
    #[serde(rename = "FLAIR")]
    Flair,
}

impl ContrastClass {
    pub const ALL: [ContrastClass; 4] = [ContrastClass::T1w, ContrastClass::T2w, ContrastClass::PDw, ContrastClass::Flair];

    pub fn as_str(self) -> &'static str {
        match self {
            ContrastClass::T1w => "T1w",
            ContrastClass::T2w => "T2w",
            ContrastClass::PDw => "PDw",
            ContrastClass::Flair => "FLAIR",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Result<ContrastClass> {
        ContrastClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown contrast class {s:?}")))
    }
}

impl fmt::Display for ContrastClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const PD_RANGE: (f64, f64) = (0.0, 1.0);
pub const T1_RANGE: (f64, f64) = (0.2, 5.0);
pub const T2_RANGE: (f64, f64) = (0.01, 3.0);

/// Proton density, T1 (s) and T2 (s).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tissue {
    pub pd: f64,
    pub t1: f64,
    pub t2: f64,
}

pub const CSF: Tissue = Tissue { pd: 1.0, t1: 4.0, t2: 2.0 };
pub const GRAY_MATTER: Tissue = Tissue { pd: 0.8, t1: 1.3, t2: 0.1 };
pub const WHITE_MATTER: Tissue = Tissue { pd: 0.65, t1: 0.8, t2: 0.075 };
pub const LESION: Tissue = Tissue { pd: 0.85, t1: 1.6, t2: 0.25 };

const JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct TissuePhantom {
    pub anatomy_id: String,
    pub height: usize,
    pub width: usize,
    pub pd_map: Vec<f64>,
    pub t1_map: Vec<f64>,
    pub t2_map: Vec<f64>,
}

impl TissuePhantom {
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// A phantom with one tissue everywhere, mainly for signal-model checks.
    pub fn uniform(height: usize, width: usize, tissue: Tissue) -> Self {
        let n = height * width;
        TissuePhantom {
            anatomy_id: "uniform".into(),
            height,
            width,
            pd_map: vec![tissue.pd; n],
            t1_map: vec![tissue.t1; n],
            t2_map: vec![tissue.t2; n],
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Approximate signed distance in pixels (negative inside).
    fn distance(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        (r - 1.0) * self.rx.min(self.ry)
    }

    fn scaled(&self, k: f64) -> Ellipse {
        Ellipse {
            ry: self.ry * k,
            rx: self.rx * k,
            ..*self
        }
    }
}

/// Coverage in [0, 1]: 1 well inside, 0 well outside, smooth over ~2 px.
fn coverage(d: f64) -> f64 {
    let t = (0.5 - d / 2.0).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn jitter(t: Tissue, rng: &mut impl Rng) -> Tissue {
    let mut j = || 1.0 + rng.gen_range(-JITTER..=JITTER);
    Tissue {
        pd: t.pd * j(),
        t1: t.t1 * j(),
        t2: t.t2 * j(),
    }
}

/// Skull-free brain: nested CSF / gray / white shells plus `n_structures`
/// random inner ellipses, each with its own jittered tissue triple.
pub fn synth_tissue_maps(seed: u64, shape: (usize, usize), n_structures: usize) -> Result<TissuePhantom> {
    let (h, w) = shape;
    if h < 16 || w < 16 {
        return Err(Error::arg(format!("phantom shape must be at least 16x16, got {h}x{w}")));
    }
    if n_structures == 0 {
        return Err(Error::arg("phantom needs at least one structure"));
    }
    let mut rng = rng::stream(seed, &[tag::PHANTOM]);
    let (hf, wf) = (h as f64, w as f64);
    let brain = Ellipse {
        cy: hf / 2.0 + rng.gen_range(-0.04..0.04) * hf,
        cx: wf / 2.0 + rng.gen_range(-0.04..0.04) * wf,
        ry: hf * rng.gen_range(0.38..0.45),
        rx: wf * rng.gen_range(0.32..0.40),
        angle: rng.gen_range(-0.25..0.25),
    };
    let mut layers: Vec<(Ellipse, Tissue)> = vec![
        (brain.scaled(1.0), jitter(CSF, &mut rng)),
        (brain.scaled(rng.gen_range(0.88..0.93)), jitter(GRAY_MATTER, &mut rng)),
        (brain.scaled(rng.gen_range(0.70..0.80)), jitter(WHITE_MATTER, &mut rng)),
    ];
    let inner_tissues = [CSF, GRAY_MATTER, WHITE_MATTER, LESION];
    for _ in 0..n_structures {
        let r = rng.gen_range(0.0..0.55);
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let tissue = *inner_tissues.choose(&mut rng).expect("non-empty");
        let e = Ellipse {
            cy: brain.cy + r * 0.7 * brain.ry * phi.sin(),
            cx: brain.cx + r * 0.7 * brain.rx * phi.cos(),
            ry: hf * rng.gen_range(0.04..0.14),
            rx: wf * rng.gen_range(0.04..0.14),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        };
        layers.push((e, jitter(tissue, &mut rng)));
    }

    let n = h * w;
    let (mut pd, mut t1, mut t2) = (vec![0.0; n], vec![1.0; n], vec![0.1; n]);
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for (i, (e, t)) in layers.iter().enumerate() {
                let a = coverage(e.distance(py, px));
                if a <= 0.0 {
                    continue;
                }
                // The outer shell fades PD in from zero; tissue times start inside it.
                if i == 0 {
                    pd[k] = a * t.pd;
                    t1[k] = t.t1;
                    t2[k] = t.t2;
                } else {
                    pd[k] += a * (t.pd - pd[k]);
                    t1[k] += a * (t.t1 - t1[k]);
                    t2[k] += a * (t.t2 - t2[k]);
                }
            }
            pd[k] = pd[k].clamp(PD_RANGE.0, PD_RANGE.1);
            t1[k] = t1[k].clamp(T1_RANGE.0, T1_RANGE.1);
            t2[k] = t2[k].clamp(T2_RANGE.0, T2_RANGE.1);
        }
    }
    Ok(TissuePhantom {
        anatomy_id: format!("phantom-{seed:016x}"),
        height: h,
        width: w,
        pd_map: pd,
        t1_map: t1,
        t2_map: t2,
    })
}

/// Spin-echo signal `PD·(1−e^(−TR/T1))·e^(−TE/T2)`.
pub fn spin_echo(t: Tissue, te: f64, tr: f64) -> f64 {
    t.pd * (1.0 - (-tr / t.t1).exp()) * (-te / t.t2).exp()
}

/// Magnitude inversion-recovery signal `PD·|1−2e^(−TI/T1)+e^(−TR/T1)|·e^(−TE/T2)`.
pub fn inversion_recovery(t: Tissue, te: f64, tr: f64, ti: f64) -> f64 {
    t.pd * (1.0 - 2.0 * (-ti / t.t1).exp() + (-tr / t.t1).exp()).abs() * (-te / t.t2).exp()
}

/// Unnormalized per-pixel signal.
pub fn raw_signal(phantom: &TissuePhantom, acq: &AcquisitionParams) -> Result<Vec<f64>> {
    if !(acq.te_s >= 0.0) || !(acq.tr_s > 0.0) {
        return Err(Error::arg(format!("render needs TE >= 0 and TR > 0, got TE={} TR={}", acq.te_s, acq.tr_s)));
    }
    let ti = if acq.is_inversion_recovery() {
        match acq.ti_s {
            Some(ti) if ti > 0.0 => Some(ti),
            _ => return Err(Error::arg("inversion-recovery acquisition requires TI > 0")),
        }
    } else {
        None
    };
    let n = phantom.height * phantom.width;
    Ok((0..n)
        .map(|k| {
            let t = Tissue {
                pd: phantom.pd_map[k],
                t1: phantom.t1_map[k],
                t2: phantom.t2_map[k],
            };
            match ti {
                Some(ti) => inversion_recovery(t, acq.te_s, acq.tr_s, ti),
                None => spin_echo(t, acq.te_s, acq.tr_s),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }
}

/// Render, max-normalize to [0, 1], add optional Gaussian noise and clamp.
pub fn render_slice(phantom: &TissuePhantom, acq: &AcquisitionParams, opts: &RenderOptions) -> Result<Image> {
    let mut s = raw_signal(phantom, acq)?;
    let max = s.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut s {
            *v /= max;
        }
    }
    if opts.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, opts.noise_sigma).map_err(|e| Error::arg(e.to_string()))?;
        let mut rng = rng::stream(opts.noise_seed, &[tag::NOISE]);
        for v in &mut s {
            *v += normal.sample(&mut rng);
        }
    }
    Image::new(
        phantom.height,
        phantom.width,
        s.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    )
}

/// Discrete per-contrast parameter grids (seconds). Grids rather than
/// continuous ranges so every sampled value is a vocabulary word.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AcquisitionRanges {
    pub contrast: ContrastClass,
    pub te_s: &'static [f64],
    pub tr_s: &'static [f64],
    pub ti_s: &'static [f64],
}

impl AcquisitionRanges {
    pub fn te_bounds(&self) -> (f64, f64) {
        bounds(self.te_s)
    }

    pub fn tr_bounds(&self) -> (f64, f64) {
        bounds(self.tr_s)
    }
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

pub const ACQUISITION_TABLE: [AcquisitionRanges; 4] = [
    AcquisitionRanges {
        contrast: ContrastClass::T1w,
        te_s: &[0.008, 0.01, 0.012, 0.015, 0.02],
        tr_s: &[0.4, 0.45, 0.5, 0.55, 0.6],
        ti_s: &[],
    },
    AcquisitionRanges {
        contrast: ContrastClass::T2w,
        te_s: &[0.08, 0.087, 0.09, 0.1, 0.11, 0.12],
        tr_s: &[3.0, 3.5, 3.96, 4.5, 5.0],
        ti_s: &[],
    },
    AcquisitionRanges {
        contrast: ContrastClass::PDw,
        te_s: &[0.01, 0.012, 0.014, 0.0203, 0.025],
        tr_s: &[2.5, 3.0, 3.68, 4.0, 5.9],
        ti_s: &[],
    },
    AcquisitionRanges {
        contrast: ContrastClass::Flair,
        te_s: &[0.1, 0.11, 0.12, 0.129, 0.14],
        tr_s: &[8.0, 8.002, 9.0, 10.0],
        ti_s: &[2.0, 2.2, 2.4, 2.5],
    },
];

pub fn acquisition_ranges(contrast: ContrastClass) -> &'static AcquisitionRanges {
    &ACQUISITION_TABLE[contrast.index()]
}

struct Scanner {
    manufacturer: &'static str,
    model: &'static str,
    field_t: f64,
}

const SCANNERS: [Scanner; 6] = [
    Scanner { manufacturer: "GE", model: "Signa_HDxt", field_t: 1.5 },
    Scanner { manufacturer: "GE", model: "SIGNA_HDx", field_t: 1.5 },
    Scanner { manufacturer: "Siemens", model: "Aera", field_t: 1.5 },
    Scanner { manufacturer: "Siemens", model: "Avanto", field_t: 1.5 },
    Scanner { manufacturer: "Siemens", model: "Skyra", field_t: 3.0 },
    Scanner { manufacturer: "Philips", model: "Ingenia", field_t: 3.0 },
];

/// Voxel spacings (mm); mostly thick axial slices.
const SPACINGS: [(f64, f64, f64); 6] = [
    (0.45, 0.45, 6.0),
    (0.5, 0.5, 5.0),
    (1.0, 1.0, 1.0),
    (0.9, 0.9, 3.0),
    (0.5, 5.0, 0.5),
    (5.0, 0.5, 0.5),
];

fn descriptor(manufacturer: &str, contrast: ContrastClass, plane: Plane) -> (&'static str, &'static str, Option<&'static str>) {
    use ContrastClass::*;
    let sequence = if contrast == Flair { "SE_IR" } else { "SE" };
    match manufacturer {
        "GE" => {
            let desc = match (contrast, plane) {
                (T1w, Plane::Coronal) => "Cor T1",
                (T1w, _) => "Ax T1",
                (T2w, _) => "Ax T2",
                (PDw, _) => "Ax PD/T2",
                (Flair, _) => "Ax T2 FLAIR",
            };
            let variant = if contrast == T1w { None } else { Some("SK") };
            (desc, sequence, variant)
        }
        "Siemens" => {
            let (desc, variant) = match contrast {
                T1w => ("t1_se_tra", "SK_SP_OSP"),
                T2w => ("t2_tse_tra_384_p2", "SK_SP_OSP"),
                PDw => ("pd+t2_tse_tra", "SK_SP_OSP"),
                Flair => ("t2_tirm_tra_dark-fluid", "SK_SP_MP_OSP"),
            };
            (desc, sequence, Some(variant))
        }
        _ => {
            let desc = match contrast {
                T1w => "T1W_SE",
                T2w => "T2W_TSE",
                PDw => "PDW_TSE",
                Flair => "T2W_FLAIR",
            };
            (desc, sequence, Some("SK"))
        }
    }
}

/// Draw acquisition parameters for a contrast class from the fixed grids and scanner vocabulary.
pub fn sample_acquisition(seed: u64, contrast: ContrastClass) -> AcquisitionParams {
    let mut rng = rng::stream(seed, &[tag::ACQUISITION, contrast.index() as u64]);
    let ranges = acquisition_ranges(contrast);
    let pick = |rng: &mut rand_chacha::ChaCha8Rng, v: &[f64]| *v.choose(rng).expect("non-empty grid");
    let scanner = SCANNERS.choose(&mut rng).expect("non-empty");
    let spacing = SPACINGS[if rng.gen_bool(0.7) { rng.gen_range(0..2) } else { rng.gen_range(2..SPACINGS.len()) }];
    let plane = determine_plane(spacing).expect("table spacings are positive");
    let te_s = pick(&mut rng, ranges.te_s);
    let tr_s = pick(&mut rng, ranges.tr_s);
    let ti_s = (!ranges.ti_s.is_empty()).then(|| pick(&mut rng, ranges.ti_s));
    let (description, sequence, variant) = descriptor(scanner.manufacturer, contrast, plane);
    let flip_deg = if scanner.manufacturer == "Siemens" && contrast != ContrastClass::T1w { 150.0 } else { 90.0 };
    AcquisitionParams {
        te_s,
        tr_s,
        ti_s,
        flip_deg,
        manufacturer: Some(scanner.manufacturer.into()),
        model: Some(scanner.model.into()),
        field_t: scanner.field_t,
        sequence: Some(sequence.into()),
        variant: variant.map(Into::into),
        description: Some(description.into()),
        plane,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn se(te: f64, tr: f64) -> AcquisitionParams {
        AcquisitionParams {
            te_s: te,
            tr_s: tr,
            ti_s: None,
            flip_deg: 90.0,
            manufacturer: None,
            model: None,
            field_t: 1.5,
            sequence: Some("SE".into()),
            variant: None,
            description: None,
            plane: Plane::Axial,
        }
    }

    #[test]
    fn phantom_is_deterministic_and_seed_sensitive() {
        let a = synth_tissue_maps(7, (64, 64), 6).unwrap();
        let b = synth_tissue_maps(7, (64, 64), 6).unwrap();
        let c = synth_tissue_maps(8, (64, 64), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pd_map, c.pd_map);
    }

    #[test]
    fn phantom_rejects_bad_arguments() {
        assert!(synth_tissue_maps(0, (8, 64), 3).is_err());
        assert!(synth_tissue_maps(0, (64, 64), 0).is_err());
    }

    #[test]
    fn background_is_zero_and_brain_is_present() {
        let p = synth_tissue_maps(3, (64, 64), 6).unwrap();
        assert_eq!(p.pd_map[0], 0.0);
        assert!(p.pd_map[32 * 64 + 32] > 0.3);
    }

    #[test]
    fn long_tr_zero_te_gives_pd() {
        let p = TissuePhantom::uniform(16, 16, Tissue { pd: 1.0, t1: 1.0, t2: 0.1 });
        let s = raw_signal(&p, &se(0.0, 1e6)).unwrap();
        assert!(s.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn saturation_recovery_closed_form() {
        let p = TissuePhantom::uniform(16, 16, Tissue { pd: 1.0, t1: 1.0, t2: 0.1 });
        let s = raw_signal(&p, &se(0.0, 1.0)).unwrap();
        assert!((s[0] - 0.632_120_558_828_557_7).abs() < 1e-12);
    }

    #[test]
    fn flair_nulls_at_t1_ln2() {
        let t = Tissue { pd: 1.0, t1: 1.7, t2: 0.1 };
        let p = TissuePhantom::uniform(16, 16, t);
        let mut acq = se(0.0, 1e6);
        acq.ti_s = Some(t.t1 * std::f64::consts::LN_2);
        let s = raw_signal(&p, &acq).unwrap();
        assert!(s[0].abs() < 1e-12);
    }

    #[test]
    fn flair_without_ti_is_rejected() {
        let p = TissuePhantom::uniform(16, 16, CSF);
        let mut acq = se(0.1, 9.0);
        acq.sequence = Some("SE_IR".into());
        assert!(render_slice(&p, &acq, &RenderOptions::default()).is_err());
    }

    #[test]
    fn flair_samples_have_ti() {
        for seed in 0..50 {
            let acq = sample_acquisition(seed, ContrastClass::Flair);
            assert!(acq.ti_s.unwrap() > 0.0);
            acq.validate().unwrap();
        }
        assert_eq!(sample_acquisition(5, ContrastClass::T2w), sample_acquisition(5, ContrastClass::T2w));
    }
}
