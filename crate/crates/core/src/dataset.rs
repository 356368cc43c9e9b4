//! On-disk paired phantom dataset: one directory per anatomy holding a
//! 16-bit PNG and a metadata sidecar per contrast, plus `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metadata::AcquisitionParams;
use crate::phantom::{render_slice, sample_acquisition, synth_tissue_maps, ContrastClass, RenderOptions, ACQUISITION_TABLE};
use crate::rng::{derive_seed, stream, tag};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_anatomies: usize,
    pub contrasts: Vec<ContrastClass>,
    pub height: usize,
    pub width: usize,
    pub n_structures: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_anatomies: 200,
            contrasts: ContrastClass::ALL.to_vec(),
            height: 64,
            width: 64,
            n_structures: 6,
            seed: 0,
            noise_sigma: 0.01,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_anatomies == 0 {
            return Err(Error::Config("n_anatomies must be positive".into()));
        }
        if self.contrasts.is_empty() {
            return Err(Error::Config("at least one contrast is required".into()));
        }
        let unique: BTreeSet<_> = self.contrasts.iter().collect();
        if unique.len() != self.contrasts.len() {
            return Err(Error::Config("contrast list has duplicates".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t >= 0.0 && v >= 0.0 && t + v <= 1.0) {
            return Err(Error::Config("split fractions must be non-negative and sum to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub anatomy_id: String,
    pub contrast: ContrastClass,
    pub image: String,
    pub metadata: String,
    pub acquisition_seed: u64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyRecord {
    pub anatomy_id: String,
    pub phantom_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub acquisition_table: serde_json::Value,
    pub anatomies: Vec<AnatomyRecord>,
    pub splits: Splits,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn split_of(&self, anatomy_id: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.splits.ids(s).iter().any(|i| i == anatomy_id))
    }
}

pub fn anatomy_id(index: usize) -> String {
    format!("anat-{index:04}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Split anatomies by a seeded shuffle; rounding favours the test split
/// so it is non-empty whenever there are at least two anatomies.
fn assign_splits(ids: &[String], cfg: &DatasetConfig) -> Splits {
    let mut order = ids.to_vec();
    order.shuffle(&mut stream(cfg.seed, &[tag::SPLIT]));
    let n = order.len();
    let mut n_train = (cfg.train_fraction * n as f64).round() as usize;
    let n_val = ((cfg.val_fraction * n as f64).round() as usize).min(n - n_train.min(n));
    n_train = n_train.min(n - n_val);
    if n >= 2 && n_train + n_val == n && cfg.train_fraction + cfg.val_fraction < 1.0 {
        n_train -= 1;
    }
    let mut splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    splits.train.sort();
    splits.val.sort();
    splits.test.sort();
    splits
}

/// Render every anatomy under every configured contrast and write the dataset.
/// Rendering runs on the current rayon pool; output is independent of its size.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let anatomies: Vec<AnatomyRecord> = (0..cfg.n_anatomies)
        .map(|i| AnatomyRecord {
            anatomy_id: anatomy_id(i),
            phantom_seed: derive_seed(cfg.seed, &[tag::PHANTOM, i as u64]),
        })
        .collect();

    let per_anatomy: Vec<Result<Vec<ManifestEntry>>> = anatomies
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let dir = out_dir.join(&rec.anatomy_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut phantom = synth_tissue_maps(rec.phantom_seed, (cfg.height, cfg.width), cfg.n_structures)?;
            phantom.anatomy_id = rec.anatomy_id.clone();
            cfg.contrasts
                .iter()
                .map(|&c| {
                    let acquisition_seed = derive_seed(cfg.seed, &[tag::ACQUISITION, i as u64, c.index() as u64]);
                    let noise_seed = derive_seed(cfg.seed, &[tag::NOISE, i as u64, c.index() as u64]);
                    let acq = sample_acquisition(acquisition_seed, c);
                    let img = render_slice(
                        &phantom,
                        &acq,
                        &RenderOptions {
                            noise_sigma: cfg.noise_sigma,
                            noise_seed,
                        },
                    )?;
                    let image = format!("{}/{}.png", rec.anatomy_id, c.as_str());
                    let metadata = format!("{}/{}.json", rec.anatomy_id, c.as_str());
                    img.save_png(&out_dir.join(&image))?;
                    write_file(&out_dir.join(&metadata), serde_json::to_string_pretty(&acq)?.as_bytes())?;
                    Ok(ManifestEntry {
                        anatomy_id: rec.anatomy_id.clone(),
                        contrast: c,
                        image,
                        metadata,
                        acquisition_seed,
                        noise_seed,
                    })
                })
                .collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(cfg.n_anatomies * cfg.contrasts.len());
    for r in per_anatomy {
        samples.extend(r?);
    }
    let ids: Vec<String> = anatomies.iter().map(|a| a.anatomy_id.clone()).collect();
    let manifest = Manifest {
        format_version: 1,
        config: cfg.clone(),
        acquisition_table: serde_json::to_value(ACQUISITION_TABLE)?,
        anatomies,
        splits: assign_splits(&ids, cfg),
        samples,
    };
    write_file(
        &out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

/// One slice with its acquisition and anatomy identifier.
#[derive(Clone, Debug)]
pub struct Sample {
    pub anatomy_id: String,
    pub contrast: ContrastClass,
    pub split: Split,
    pub acq: AcquisitionParams,
    pub image: Image,
}

/// Ordered (source, target) pair of sample indices sharing an anatomy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairIndex {
    pub src: usize,
    pub tgt: usize,
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Load from a dataset directory or a path to its manifest.
    pub fn load(path: &Path) -> Result<Dataset> {
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let manifest = Manifest::load(&manifest_path)?;
        let samples = manifest
            .samples
            .iter()
            .map(|e| {
                let meta_path = root.join(&e.metadata);
                let text = fs::read_to_string(&meta_path).map_err(|err| Error::io(&meta_path, err))?;
                let acq: AcquisitionParams = serde_json::from_str(&text).map_err(|err| Error::Dataset {
                    path: meta_path.clone(),
                    message: err.to_string(),
                })?;
                let split = manifest.split_of(&e.anatomy_id).ok_or_else(|| Error::Dataset {
                    path: manifest_path.clone(),
                    message: format!("anatomy {} is in no split", e.anatomy_id),
                })?;
                Ok(Sample {
                    anatomy_id: e.anatomy_id.clone(),
                    contrast: e.contrast,
                    split,
                    acq,
                    image: Image::load_png(&root.join(&e.image))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { root, manifest, samples })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// All ordered cross-contrast pairs within each anatomy of a split,
    /// sorted by (anatomy, source contrast, target contrast).
    pub fn pairs(&self, split: Split) -> Vec<PairIndex> {
        let mut by_anatomy: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for i in self.indices(split) {
            by_anatomy.entry(&self.samples[i].anatomy_id).or_default().push(i);
        }
        let mut out = Vec::new();
        for group in by_anatomy.values() {
            let mut g = group.clone();
            g.sort_by_key(|&i| self.samples[i].contrast);
            for &s in &g {
                for &t in &g {
                    if self.samples[s].contrast != self.samples[t].contrast {
                        out.push(PairIndex { src: s, tgt: t });
                    }
                }
            }
        }
        out
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.manifest.config.height, self.manifest.config.width)
    }

    pub fn contrasts(&self) -> Vec<ContrastClass> {
        let set: BTreeSet<ContrastClass> = self.samples.iter().map(|s| s.contrast).collect();
        set.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_cover_everything() {
        for n in [1, 2, 3, 10, 200] {
            let cfg = DatasetConfig {
                n_anatomies: n,
                ..Default::default()
            };
            let ids: Vec<String> = (0..n).map(anatomy_id).collect();
            let s = assign_splits(&ids, &cfg);
            let all: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
            assert_eq!(all.len(), n);
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            if n >= 2 {
                assert!(!s.test.is_empty());
            }
        }
    }
}
