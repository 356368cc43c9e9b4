//! Acquisition metadata, the prompt template and its word-level tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    pub fn parse(s: &str) -> Result<Plane> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::arg(format!("unknown plane {other:?}"))),
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// DICOM-style acquisition descriptor. Absent values render as `NONE` in prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub te_s: f64,
    pub tr_s: f64,
    pub ti_s: Option<f64>,
    pub flip_deg: f64,
    pub manufacturer: Option<String>,
    pub model: Option<String>,
    #[serde(rename = "field_T")]
    pub field_t: f64,
    pub sequence: Option<String>,
    pub variant: Option<String>,
    pub description: Option<String>,
    pub plane: Plane,
}

impl AcquisitionParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.te_s, self.tr_s, self.flip_deg, self.field_t, self.ti_s.unwrap_or(1.0)];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("acquisition parameters must be finite"));
        }
        if self.te_s < 0.0 {
            return Err(Error::arg(format!("TE must be >= 0, got {}", self.te_s)));
        }
        if self.tr_s <= 0.0 {
            return Err(Error::arg(format!("TR must be > 0, got {}", self.tr_s)));
        }
        if let Some(ti) = self.ti_s {
            if ti <= 0.0 {
                return Err(Error::arg(format!("TI must be > 0 when present, got {ti}")));
            }
        }
        if !(self.flip_deg > 0.0 && self.flip_deg <= 180.0) {
            return Err(Error::arg(format!("flip angle must be in (0, 180], got {}", self.flip_deg)));
        }
        if self.field_t <= 0.0 {
            return Err(Error::arg(format!("field strength must be > 0, got {}", self.field_t)));
        }
        for (name, value) in self.descriptors() {
            if let Some(v) = value {
                // These characters delimit the prompt grammar.
                if v.is_empty() || v == "NONE" || v.contains([',', '(', ')']) || v.trim() != v {
                    return Err(Error::arg(format!("{name} {v:?} cannot be rendered in a prompt")));
                }
            }
        }
        Ok(())
    }

    fn descriptors(&self) -> [(&'static str, &Option<String>); 5] {
        [
            ("manufacturer", &self.manufacturer),
            ("model", &self.model),
            ("sequence", &self.sequence),
            ("variant", &self.variant),
            ("description", &self.description),
        ]
    }

    /// Inversion recovery is signalled by a TI or by an `IR` sequence name.
    pub fn is_inversion_recovery(&self) -> bool {
        self.ti_s.is_some() || self.sequence.as_deref().is_some_and(|s| s.split('_').any(|p| p == "IR"))
    }
}

/// Prompt text in the fixed acquisition template.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Prompt(String);

impl Prompt {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Shortest decimal that round-trips; never uses exponent notation.
pub fn format_number(v: f64) -> String {
    format!("{v}")
}

fn opt_str(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or("NONE")
}

pub fn build_prompt(acq: &AcquisitionParams) -> Prompt {
    Prompt(format!(
        "A brain MRI, plane {}, Scanner (Manufacturer, Model, Field Strength): ({}, {}, {}), \
         Acquisition (Description, Sequence, Variant): ({}, {}, {}), \
         Imaging Parameters (Echo Time, Repetition Time, Inversion Time, Flip Angle): ({}, {}, {}, {})",
        acq.plane,
        opt_str(&acq.manufacturer),
        opt_str(&acq.model),
        format_number(acq.field_t),
        opt_str(&acq.description),
        opt_str(&acq.sequence),
        opt_str(&acq.variant),
        format_number(acq.te_s),
        format_number(acq.tr_s),
        acq.ti_s.map_or_else(|| "NONE".to_string(), format_number),
        format_number(acq.flip_deg),
    ))
}

fn prompt_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"^A brain MRI, plane (\w+), ",
            r"Scanner \(Manufacturer, Model, Field Strength\): \(([^,()]+), ([^,()]+), ([^,()]+)\), ",
            r"Acquisition \(Description, Sequence, Variant\): \(([^,()]+), ([^,()]+), ([^,()]+)\), ",
            r"Imaging Parameters \(Echo Time, Repetition Time, Inversion Time, Flip Angle\): ",
            r"\(([^,()]+), ([^,()]+), ([^,()]+), ([^,()]+)\)$",
        ))
        .expect("prompt grammar compiles")
    })
}

/// Inverse of [`build_prompt`].
pub fn parse_prompt(text: &str) -> Result<AcquisitionParams> {
    let caps = prompt_regex()
        .captures(text)
        .ok_or_else(|| Error::arg(format!("text does not follow the prompt template: {text:?}")))?;
    let s = |i: usize| caps.get(i).map_or("", |m| m.as_str());
    let opt = |i: usize| (s(i) != "NONE").then(|| s(i).to_string());
    let num = |i: usize, name: &str| -> Result<f64> {
        s(i).parse::<f64>()
            .map_err(|_| Error::arg(format!("{name} {:?} is not a number", s(i))))
    };
    let acq = AcquisitionParams {
        plane: Plane::parse(s(1))?,
        manufacturer: opt(2),
        model: opt(3),
        field_t: num(4, "field strength")?,
        description: opt(5),
        sequence: opt(6),
        variant: opt(7),
        te_s: num(8, "echo time")?,
        tr_s: num(9, "repetition time")?,
        ti_s: if s(10) == "NONE" { None } else { Some(num(10, "inversion time")?) },
        flip_deg: num(11, "flip angle")?,
    };
    acq.validate()?;
    Ok(acq)
}

/// Plane perpendicular to the axis with the largest voxel spacing.
/// Ties prefer axial, then coronal, then sagittal.
pub fn determine_plane(spacing: (f64, f64, f64)) -> Result<Plane> {
    let (sx, sy, sz) = spacing;
    if [sx, sy, sz].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::arg(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    let max = sx.max(sy).max(sz);
    Ok(if sz == max {
        Plane::Axial
    } else if sy == max {
        Plane::Coronal
    } else {
        Plane::Sagittal
    })
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const DEFAULT_MAX_LEN: usize = 96;

/// Splits on whitespace and the template punctuation `, ( ) :`.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c.is_whitespace() || matches!(c, ',' | '(' | ')' | ':'))
        .filter(|w| !w.is_empty())
}

/// Word vocabulary frozen at pretraining time. Ids 0 and 1 are padding and unknown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "VocabRepr", try_from = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    max_len: usize,
    words: Vec<String>,
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            max_len: v.max_len,
            words: v.words,
        }
    }
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = String;

    fn try_from(r: VocabRepr) -> std::result::Result<Self, String> {
        if r.max_len == 0 {
            return Err("vocabulary max_len must be positive".into());
        }
        let index: HashMap<String, usize> = r.words.iter().enumerate().map(|(i, w)| (w.clone(), i + 2)).collect();
        if index.len() != r.words.len() {
            return Err("vocabulary contains duplicate words".into());
        }
        Ok(Vocab {
            words: r.words,
            index,
            max_len: r.max_len,
        })
    }
}

impl Vocab {
    /// Sorted word list from a corpus, so the ids do not depend on corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, max_len: usize) -> Result<Vocab> {
        if max_len == 0 {
            return Err(Error::arg("vocabulary max_len must be positive"));
        }
        let words: BTreeSet<&str> = corpus.into_iter().flat_map(split_words).collect();
        let repr = VocabRepr {
            max_len,
            words: words.into_iter().map(str::to_string).collect(),
        };
        Vocab::try_from(repr).map_err(Error::Config)
    }

    /// Number of ids including padding and unknown.
    pub fn size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Number of words in `text` before padding or truncation.
    pub fn word_count(text: &str) -> usize {
        split_words(text).count()
    }

    /// Fixed-length id sequence, truncated to `max_len` and padded with [`PAD_ID`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = split_words(text).take(self.max_len).map(|w| self.id(w)).collect();
        ids.resize(self.max_len, PAD_ID);
        ids
    }
}

pub fn tokenize_prompt(prompt: &Prompt, vocab: &Vocab) -> Vec<usize> {
    vocab.tokenize(prompt.as_str())
}
