use disth_core::anatomy::{AnatomyMap, AnatomyMapper, MapperConfig};
use disth_core::fusion::{DecoderConfig, StyleBlockKind, StyleFusionDecoder};
use disth_core::image::Image;
use disth_core::metadata::{build_prompt, Vocab};
use disth_core::phantom::{render_slice, sample_acquisition, synth_tissue_maps, ContrastClass, RenderOptions};
use disth_core::style_encoders::{ClipConfig, EncoderPair};
use disth_core::Error;
use disth_tensor::Tensor;
use proptest::prelude::*;

fn slice(seed: u64, contrast: ContrastClass, size: usize) -> Image {
    let p = synth_tissue_maps(seed, (size, size), 6).unwrap();
    let acq = sample_acquisition(seed + 1, contrast);
    render_slice(&p, &acq, &RenderOptions { noise_sigma: 0.01, noise_seed: seed + 2 }).unwrap()
}

fn rel_error(x: &AnatomyMap, y: &AnatomyMap) -> f64 {
    let d: f64 = x.data.iter().zip(&y.data).map(|(p, q)| ((p - q) as f64).powi(2)).sum();
    let n: f64 = x.data.iter().map(|p| (*p as f64).powi(2)).sum();
    (d / n).sqrt()
}

#[test]
fn beta_is_invariant_to_intensity_affine_maps() {
    let img = slice(3, ContrastClass::T2w, 64);
    for base in [8, 32] {
        let m = AnatomyMapper::<f32>::new(MapperConfig { base_channels: base, ..Default::default() }, (64, 64), 0).unwrap();
        let b0 = m.extract_beta(&img).unwrap();
        for a in [0.5f32, 2.0] {
            let err = rel_error(&b0, &m.extract_beta(&img.map(|v| a * v + 0.1)).unwrap());
            assert!(err < 1e-4, "base {base} a {a}: {err:e}");
        }
    }
}

#[test]
fn beta_shape_and_gradient_reach_every_mapper_parameter() {
    let m = AnatomyMapper::<f64>::new(MapperConfig { base_channels: 4, beta_channels: 5, ..Default::default() }, (16, 16), 1).unwrap();
    let x = Tensor::<f64>::from_vec((0..512).map(|i| ((i * 7919) % 97) as f64 / 97.0).collect(), &[2, 1, 16, 16]);
    let beta = m.forward(&x).unwrap();
    assert_eq!(beta.shape(), &[2, 5, 16, 16]);
    let g = beta.square().sum_all().backward();
    for p in m.params().iter() {
        let grad = p.grad(&g).unwrap_or_else(|| panic!("{} has no gradient", p.name()));
        assert!(grad.iter().any(|v| *v != 0.0), "{} gradient is zero", p.name());
    }
}

#[test]
fn mapper_rejects_incompatible_shapes() {
    assert!(matches!(AnatomyMapper::<f32>::new(MapperConfig::default(), (30, 30), 0), Err(Error::Config(_))));
    let m = AnatomyMapper::<f32>::new(MapperConfig { base_channels: 4, ..Default::default() }, (16, 16), 0).unwrap();
    assert!(matches!(m.extract_beta(&Image::filled(32, 32, 0.5)), Err(Error::Argument(_))));
}

#[test]
fn beta_export_writes_raw_floats() {
    let dir = tempfile::tempdir().unwrap();
    let m = AnatomyMapper::<f32>::new(MapperConfig { base_channels: 4, beta_channels: 3, ..Default::default() }, (16, 16), 0).unwrap();
    let b = m.extract_beta(&slice(1, ContrastClass::T1w, 16)).unwrap();
    assert!(b.is_finite());
    b.export(dir.path()).unwrap();
    let raw = std::fs::read(dir.path().join("beta.f32")).unwrap();
    assert_eq!(raw.len(), 4 * 3 * 16 * 16);
    let first = f32::from_le_bytes(raw[..4].try_into().unwrap());
    assert_eq!(first, b.channel(0)[0]);
}

fn small_decoder(block: StyleBlockKind) -> StyleFusionDecoder<f64> {
    let mut cfg = DecoderConfig { base_channels: 4, block, ..Default::default() };
    cfg.ast.embed_dim = 16;
    cfg.ast.query_hidden = 8;
    cfg.ast.attn_dim = 8;
    cfg.ast.bottleneck_heads = 2;
    cfg.ast.upsample_heads = 2;
    StyleFusionDecoder::new(cfg, 3, (16, 16), 4).unwrap()
}

fn unit_rows(rows: usize, dim: usize, phase: f64) -> Tensor<f64> {
    let mut v = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let row: Vec<f64> = (0..dim).map(|i| ((i as f64 + 1.0) * (r as f64 + phase)).sin()).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.extend(row.iter().map(|x| x / n));
    }
    Tensor::from_vec(v, &[rows, dim])
}

#[test]
fn decoder_output_depends_on_style_and_is_batch_consistent() {
    let beta = Tensor::<f64>::from_vec((0..2 * 3 * 256).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect(), &[2, 3, 16, 16]);
    for block in [StyleBlockKind::Ast, StyleBlockKind::Adain] {
        let d = small_decoder(block);
        // Modulation heads start at zero so an untrained decoder ignores θ.
        for p in d.params().iter().filter(|p| p.name().contains("modulation") || p.name().contains("fc2")) {
            let n = p.to_vec().len();
            p.set((0..n).map(|i| 0.05 * ((i as f64) * 1.3).sin()).collect());
        }
        let (t1, t2) = (unit_rows(2, 16, 0.3), unit_rows(2, 16, 1.7));
        let y1 = d.forward(&beta, &t1).unwrap();
        assert_eq!(y1.shape(), &[2, 1, 16, 16]);
        assert!(y1.to_f64_vec().iter().all(|v| *v > 0.0 && *v < 1.0));
        let y2 = d.forward(&beta, &t2).unwrap().to_f64_vec();
        let diff = y1.to_f64_vec().iter().zip(&y2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6, "{block:?} ignores the style embedding");

        // Row 0 alone must match row 0 of the batch.
        let alone = d.forward(&beta.narrow(0, 0, 1), &t1.narrow(0, 0, 1)).unwrap().to_f64_vec();
        for (a, b) in alone.iter().zip(&y1.to_f64_vec()[..256]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn style_is_injected_at_the_bottleneck_and_every_upsampling_stage() {
    for levels in [2, 3] {
        let mut cfg = DecoderConfig { base_channels: 4, levels, ..Default::default() };
        cfg.ast.attn_dim = 8;
        cfg.ast.bottleneck_heads = 2;
        cfg.ast.upsample_heads = 2;
        let d = StyleFusionDecoder::<f32>::new(cfg, 3, (16, 16), 0).unwrap();
        let blocks: std::collections::BTreeSet<&str> = d
            .params()
            .iter()
            .filter_map(|p| p.name().split('.').find(|seg| seg.ends_with("_style")))
            .collect();
        assert_eq!(blocks.len(), 1 + levels, "{blocks:?}");
        let layout = d.layout();
        assert_eq!((layout.style_blocks, layout.upsampling_stages), (1 + levels, levels));
    }
}

#[test]
fn output_gradient_with_respect_to_style_is_nonzero() {
    let d = small_decoder(StyleBlockKind::Ast);
    for p in d.params().iter().filter(|p| p.name().contains("modulation")) {
        let n = p.to_vec().len();
        p.set((0..n).map(|i| 0.05 * ((i as f64) * 0.7).cos()).collect());
    }
    let beta = Tensor::<f64>::from_vec((0..3 * 256).map(|i| ((i * 13) % 11) as f64 / 5.0 - 1.0).collect(), &[1, 3, 16, 16]);
    let theta = unit_rows(1, 16, 0.9).to_f64_vec();
    let f = |t: &[f64]| d.forward(&beta, &Tensor::from_vec(t.to_vec(), &[1, 16])).unwrap().sum_all().item_f64();
    let h = 1e-5;
    let (mut plus, mut minus) = (theta.clone(), theta.clone());
    plus[3] += h;
    minus[3] -= h;
    let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
    let th = Tensor::from_vec(theta, &[1, 16]).requires_grad();
    let g = d.forward(&beta, &th).unwrap().sum_all().backward();
    let analytic = g.get(&th).unwrap()[3];
    assert!(numeric.abs() > 1e-8, "numeric derivative {numeric}");
    assert!((analytic - numeric).abs() <= 1e-5 * numeric.abs().max(1e-6), "{analytic} vs {numeric}");
}

#[test]
fn decoder_rejects_mismatched_inputs() {
    let d = small_decoder(StyleBlockKind::Ast);
    let beta = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
    assert!(matches!(d.forward(&beta, &Tensor::zeros(&[1, 8])), Err(Error::Argument(_))));
    assert!(matches!(d.forward(&Tensor::zeros(&[1, 2, 16, 16]), &unit_rows(1, 16, 0.0)), Err(Error::Argument(_))));
}

fn tiny_pair() -> EncoderPair<f32> {
    let cfg = ClipConfig {
        image_height: 16,
        image_width: 16,
        embed_dim: 24,
        image_channels: vec![4, 8],
        image_hidden: 16,
        token_dim: 8,
        text_hidden: 16,
        ..Default::default()
    };
    let prompts: Vec<String> = ContrastClass::ALL
        .iter()
        .enumerate()
        .map(|(i, &c)| build_prompt(&sample_acquisition(i as u64, c)).into_string())
        .collect();
    let vocab = Vocab::build(prompts.iter().map(String::as_str), cfg.max_len).unwrap();
    EncoderPair::new(cfg, vocab, 9).unwrap()
}

#[test]
fn frozen_encoders_receive_no_gradient() {
    let pair = tiny_pair();
    pair.set_frozen(true);
    let x = Tensor::<f32>::from_vec(slice(0, ContrastClass::PDw, 16).into_pixels(), &[1, 1, 16, 16]).requires_grad();
    let g = pair.image.forward(&x).unwrap().sum_all().backward();
    assert!(g.get(&x).is_some());
    assert!(pair.params().iter().all(|p| p.grad(&g).is_none()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn beta_invariance_holds_for_random_affine_maps(seed in 0u64..1000, a in 0.25f32..4.0, b in -0.5f32..0.5) {
        let img = slice(seed, ContrastClass::ALL[(seed % 4) as usize], 32);
        let m = AnatomyMapper::<f32>::new(MapperConfig { base_channels: 4, ..Default::default() }, (32, 32), seed).unwrap();
        let err = rel_error(&m.extract_beta(&img).unwrap(), &m.extract_beta(&img.map(|v| a * v + b)).unwrap());
        prop_assert!(err < 1e-4, "a {} b {}: {:e}", a, b, err);
    }

    #[test]
    fn embeddings_are_unit_vectors(seed in any::<u64>(), c in 0usize..4) {
        let pair = tiny_pair();
        let contrast = ContrastClass::ALL[c];
        let e = pair.encode_image(&slice(seed % 1000, contrast, 16)).unwrap();
        prop_assert!((e.norm() - 1.0).abs() < 1e-5);
        let m = pair.encode_acquisition(&sample_acquisition(seed, contrast)).unwrap();
        prop_assert!((m.norm() - 1.0).abs() < 1e-5);
        prop_assert!(e.cosine(&m).abs() <= 1.0 + 1e-6);
    }
}
