use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use disth_core::dataset::{build_dataset, Dataset, DatasetConfig, Manifest, Split, MANIFEST_FILE};
use disth_core::phantom::*;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn small_config() -> DatasetConfig {
    DatasetConfig {
        n_anatomies: 10,
        contrasts: vec![ContrastClass::T1w, ContrastClass::T2w],
        height: 32,
        width: 32,
        ..DatasetConfig::default()
    }
}

fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
            }
        }
    }
    out
}

#[test]
fn counts_follow_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small_config(), dir.path()).unwrap();
    assert_eq!(m.samples.len(), 20);
    let ids: BTreeSet<_> = m.samples.iter().map(|s| &s.anatomy_id).collect();
    assert_eq!(ids.len(), 10);
    let ds = Dataset::load(dir.path()).unwrap();
    assert_eq!(ds.samples.len(), 20);
    // every same-anatomy ordered pair, both directions
    let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| ds.pairs(s).len()).sum();
    assert_eq!(total, 20);
}

#[test]
fn rebuild_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_dataset(&small_config(), a.path()).unwrap();
    build_dataset(&small_config(), b.path()).unwrap();
    let (ha, hb) = (tree_hashes(a.path()), tree_hashes(b.path()));
    assert_eq!(ha.len(), 10 * 2 * 2 + 1);
    assert_eq!(ha, hb);
    let mut other = small_config();
    other.seed = 1;
    let c = tempfile::tempdir().unwrap();
    build_dataset(&other, c.path()).unwrap();
    assert_ne!(ha[MANIFEST_FILE], tree_hashes(c.path())[MANIFEST_FILE]);
}

#[test]
fn splits_partition_anatomies() {
    let dir = tempfile::tempdir().unwrap();
    let m: Manifest = build_dataset(&DatasetConfig { n_anatomies: 23, height: 16, width: 16, ..Default::default() }, dir.path()).unwrap();
    let sets: Vec<BTreeSet<&String>> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| m.splits.ids(s).iter().collect())
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(sets[i].is_disjoint(&sets[j]));
        }
    }
    assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), 23);
    assert!(!sets[2].is_empty());
}

#[test]
fn pairs_share_anatomy() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.contrasts = ContrastClass::ALL.to_vec();
    build_dataset(&cfg, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    let pairs = ds.pairs(Split::Train);
    assert_eq!(pairs.len(), ds.manifest.splits.train.len() * 12);
    for p in pairs {
        let (s, t) = (&ds.samples[p.src], &ds.samples[p.tgt]);
        assert_eq!(s.anatomy_id, t.anatomy_id);
        assert_ne!(s.contrast, t.contrast);
    }
}

#[test]
fn brain_support_is_shared_across_contrasts() {
    let p = synth_tissue_maps(11, (32, 32), 5).unwrap();
    for (i, c) in ContrastClass::ALL.into_iter().enumerate() {
        let img = render_slice(&p, &sample_acquisition(i as u64, c), &RenderOptions::default()).unwrap();
        for (k, &v) in img.pixels().iter().enumerate() {
            if p.pd_map[k] == 0.0 {
                assert_eq!(v, 0.0, "{c} background pixel {k}");
            } else if c != ContrastClass::Flair && p.pd_map[k] > 0.05 {
                // inversion recovery can null a tissue, spin echo cannot
                assert!(v > 0.0, "{c} brain pixel {k}");
            }
        }
    }
}

#[test]
fn missing_manifest_reports_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = Dataset::load(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&dir.path().display().to_string()), "{err}");
}

#[test]
fn t1_echo_times_sit_below_t2() {
    let t1: Vec<f64> = (0..1000).map(|s| sample_acquisition(s, ContrastClass::T1w).te_s).collect();
    let t2: Vec<f64> = (0..1000).map(|s| sample_acquisition(s, ContrastClass::T2w).te_s).collect();
    let max_t1 = t1.iter().copied().fold(f64::MIN, f64::max);
    let min_t2 = t2.iter().copied().fold(f64::MAX, f64::min);
    assert!(max_t1 < min_t2, "{max_t1} vs {min_t2}");
    let (lo, hi) = acquisition_ranges(ContrastClass::T1w).te_bounds();
    assert!(t1.iter().all(|&te| te >= lo && te <= hi));
}

#[test]
fn closed_form_signal_examples() {
    // PD=1, T1=1 s, TE=0, TR=1 s
    let s = spin_echo(Tissue { pd: 1.0, t1: 1.0, t2: 0.1 }, 0.0, 1.0);
    assert!((s - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phantom_maps_respect_ranges(seed in any::<u64>(), n in 1usize..8) {
        let p = synth_tissue_maps(seed, (24, 20), n).unwrap();
        prop_assert_eq!(p.shape(), (24, 20));
        prop_assert_eq!(p.pd_map.len(), 24 * 20);
        prop_assert_eq!(p.t1_map.len(), p.pd_map.len());
        prop_assert_eq!(p.t2_map.len(), p.pd_map.len());
        prop_assert!(p.pd_map.iter().all(|&v| (PD_RANGE.0..=PD_RANGE.1).contains(&v)));
        prop_assert!(p.t1_map.iter().all(|&v| (T1_RANGE.0..=T1_RANGE.1).contains(&v)));
        prop_assert!(p.t2_map.iter().all(|&v| (T2_RANGE.0..=T2_RANGE.1).contains(&v)));
        let again = synth_tissue_maps(seed, (24, 20), n).unwrap();
        prop_assert_eq!(p, again);
    }

    #[test]
    fn renders_stay_in_unit_range(seed in any::<u64>(), c in 0usize..4, sigma in 0.0f64..0.2) {
        let contrast = ContrastClass::ALL[c];
        let p = synth_tissue_maps(seed, (16, 16), 3).unwrap();
        let acq = sample_acquisition(seed ^ 0x55, contrast);
        prop_assert_eq!(acq.ti_s.is_some(), contrast == ContrastClass::Flair);
        let img = render_slice(&p, &acq, &RenderOptions { noise_sigma: sigma, noise_seed: seed }).unwrap();
        prop_assert!(img.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn spin_echo_is_monotone_in_pd(pd in 0.0f64..0.99, t1 in 0.2f64..5.0, t2 in 0.01f64..3.0, te in 0.0f64..0.2, tr in 0.3f64..10.0) {
        let lo = spin_echo(Tissue { pd, t1, t2 }, te, tr);
        let hi = spin_echo(Tissue { pd: pd + 0.01, t1, t2 }, te, tr);
        prop_assert!(hi >= lo);
    }
}
