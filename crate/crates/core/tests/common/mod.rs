//! Loop-based reference implementations used as independent oracles, and a
//! finite-difference gradient checker. Shared by several test targets.
#![allow(dead_code)]

use disth_core::image::Image;
use disth_tensor::gradcheck::{numeric_grad, rel_error};
use disth_tensor::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type T = Tensor<f64>;

pub fn rand_vec(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rand_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> T {
    T::from_vec(rand_vec(seed, shape.iter().product(), lo, hi), shape)
}

pub fn rand_image(seed: u64, h: usize, w: usize) -> Image {
    Image::new(h, w, rand_vec(seed, h * w, 0.0, 1.0).into_iter().map(|v| v as f32).collect()).unwrap()
}

/// Largest relative error of `d f / d inputs[i]` against central differences.
pub fn gradcheck(inputs: &[T], f: impl Fn(&[T]) -> T) -> f64 {
    let live: Vec<T> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let grads = f(&live).backward();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let analytic = grads
            .get(&live[i])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = numeric_grad(
            |x| {
                let mut args: Vec<T> = inputs.iter().map(|t| t.detach()).collect();
                args[i] = T::from_vec(x.to_vec(), inputs[i].shape());
                f(&args).item_f64()
            },
            &inputs[i].to_vec(),
            1e-6,
        );
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Dense `[B, C, H, W]` array with explicit indexing.
#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: [usize; 4],
    pub v: Vec<f64>,
}

impl Arr {
    pub fn new(shape: [usize; 4]) -> Arr {
        Arr { shape, v: vec![0.0; shape.iter().product()] }
    }

    pub fn of(t: &T) -> Arr {
        let s = t.shape();
        Arr { shape: [s[0], s[1], s[2], s[3]], v: t.to_vec() }
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.v[((b * cc + c) * h + y) * w + x]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, val: f64) {
        let [_, cc, h, w] = self.shape;
        self.v[((b * cc + c) * h + y) * w + x] = val;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr { shape: self.shape, v: self.v.iter().map(|&x| f(x)).collect() }
    }
}

/// Direct convolution with zero padding.
pub fn conv(x: &Arr, w: &[f64], bias: &[f64], out_c: usize, k: usize, stride: usize, pad: usize) -> Arr {
    let [b, c, h, wd] = x.shape;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Arr::new([b, out_c, oh, ow]);
    for bi in 0..b {
        for o in 0..out_c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = bias[o];
                    for ci in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w[((o * c + ci) * k + dy) * k + dx] * x.at(bi, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(bi, o, y, xx, s);
                }
            }
        }
    }
    out
}

pub fn inorm(x: &Arr, eps: f64) -> Arr {
    let [b, c, h, w] = x.shape;
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let mut mean = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    mean += x.at(bi, ci, y, xx);
                }
            }
            mean /= (h * w) as f64;
            let mut var = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    var += (x.at(bi, ci, y, xx) - mean).powi(2);
                }
            }
            var /= (h * w) as f64;
            for y in 0..h {
                for xx in 0..w {
                    out.set(bi, ci, y, xx, (x.at(bi, ci, y, xx) - mean) / (var + eps).sqrt());
                }
            }
        }
    }
    out
}

pub fn avg_pool2(x: &Arr) -> Arr {
    let [b, c, h, w] = x.shape;
    let mut out = Arr::new([b, c, h / 2, w / 2]);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let s = x.at(bi, ci, 2 * y, 2 * xx)
                        + x.at(bi, ci, 2 * y + 1, 2 * xx)
                        + x.at(bi, ci, 2 * y, 2 * xx + 1)
                        + x.at(bi, ci, 2 * y + 1, 2 * xx + 1);
                    out.set(bi, ci, y, xx, s / 4.0);
                }
            }
        }
    }
    out
}

fn param(ps: &ParamSet<f64>, name: &str) -> Vec<f64> {
    ps.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).to_vec()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Patch vectors of a `[B, C, H, W]` map on the valid strided grid.
pub fn patches(beta: &Arr, k: usize, stride: usize) -> Vec<Vec<Vec<f64>>> {
    let [b, c, h, w] = beta.shape;
    (0..b)
        .map(|bi| {
            let mut out = Vec::new();
            for y in (0..=h - k).step_by(stride) {
                for x in (0..=w - k).step_by(stride) {
                    let mut v = Vec::new();
                    for ci in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                v.push(beta.at(bi, ci, y + dy, x + dx));
                            }
                        }
                    }
                    out.push(v);
                }
            }
            out
        })
        .collect()
}

/// Mean over anchors of −log softmax of the same-location similarity.
pub fn info_nce(z: &[Vec<Vec<f64>>], zp: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (zb, pb) in z.iter().zip(zp) {
        for (p, anchor) in zb.iter().enumerate() {
            let denom: f64 = pb.iter().map(|q| (cos(anchor, q) / tau).exp()).sum();
            total += -(cos(anchor, &pb[p]) / tau).exp().ln() + denom.ln();
            n += 1;
        }
    }
    total / n as f64
}

pub fn loss_beta(src: &Arr, tgt: &Arr, k: usize, stride: usize, tau: f64, symmetric: bool) -> f64 {
    let (zs, zt) = (patches(src, k, stride), patches(tgt, k, stride));
    let f = info_nce(&zs, &zt, tau);
    if symmetric {
        0.5 * (f + info_nce(&zt, &zs, tau))
    } else {
        f
    }
}

pub fn loss_rec(target: &[f64], rec: &[f64]) -> f64 {
    target.iter().zip(rec).map(|(a, b)| (a - b).abs()).sum::<f64>() / target.len() as f64
}

pub fn perc_features(ps: &ParamSet<f64>, channels: &[usize], taps: &[usize], x: &Arr) -> Vec<Arr> {
    let last = *taps.iter().max().unwrap();
    let mut h = x.clone();
    let mut out = Vec::new();
    for j in 0..last {
        if j > 0 && j % 2 == 0 {
            h = avg_pool2(&h);
        }
        let name = format!("perc.conv{}", j + 1);
        let oc = channels[j / 2];
        h = conv(&h, &param(ps, &format!("{name}.weight")), &param(ps, &format!("{name}.bias")), oc, 3, 1, 1)
            .map(|v| v.max(0.0));
        if taps.contains(&(j + 1)) {
            out.push(h.clone());
        }
    }
    out
}

pub fn loss_perc(ps: &ParamSet<f64>, channels: &[usize], taps: &[usize], target: &Arr, rec: &Arr) -> f64 {
    let ft = perc_features(ps, channels, taps, target);
    let fr = perc_features(ps, channels, taps, rec);
    ft.iter().zip(&fr).map(|(a, b)| loss_rec(&a.v, &b.v)).sum()
}

pub fn disc_logits(ps: &ParamSet<f64>, base: usize, x: &Arr) -> Vec<f64> {
    let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
    let p = |n: &str| param(ps, n);
    let h = conv(x, &p("disc.c1.weight"), &p("disc.c1.bias"), base, 4, 2, 1).map(lrelu);
    let h = conv(&h, &p("disc.c2.weight"), &p("disc.c2.bias"), 2 * base, 4, 2, 1);
    let h = inorm(&h, 1e-5).map(lrelu);
    conv(&h, &p("disc.c3.weight"), &p("disc.c3.bias"), 1, 4, 1, 1).v
}

pub fn adv_gen(fake_logits: &[f64]) -> f64 {
    fake_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / fake_logits.len() as f64
}

pub fn adv_disc(real_logits: &[f64], fake_logits: &[f64]) -> f64 {
    real_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / real_logits.len() as f64
        + fake_logits.iter().map(|&l| softplus(l)).sum::<f64>() / fake_logits.len() as f64
}

fn rows(v: &[f64], d: usize) -> Vec<&[f64]> {
    v.chunks(d).collect()
}

pub fn loss_global(e_rec: &[f64], ti: &[f64], tm: &[f64], d: usize) -> f64 {
    let (r, i, m) = (rows(e_rec, d), rows(ti, d), rows(tm, d));
    let mut total = 0.0;
    for k in 0..r.len() {
        total += 0.5 * (1.0 - cos(r[k], i[k])) + 0.5 * (1.0 - cos(r[k], m[k]));
    }
    total / r.len() as f64
}

pub fn loss_dir(e_rec: &[f64], e_src: &[f64], m_tgt: &[f64], m_src: &[f64], d: usize) -> f64 {
    let b = e_rec.len() / d;
    let mut total = 0.0;
    for k in 0..b {
        let di: Vec<f64> = (0..d).map(|j| e_rec[k * d + j] - e_src[k * d + j]).collect();
        let dm: Vec<f64> = (0..d).map(|j| m_tgt[k * d + j] - m_src[k * d + j]).collect();
        total += 1.0 - cos(&di, &dm);
    }
    total / b as f64
}

pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            se += (a.get(y, x) as f64 - b.get(y, x) as f64).powi(2);
        }
    }
    let mse = se / (a.height() * a.width()) as f64;
    if mse == 0.0 {
        100.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn ssim(a: &Image, b: &Image) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let k = 7;
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=a.height() - k {
        for c in 0..=a.width() - k {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for y in r..r + k {
                for x in c..c + k {
                    xs.push(a.get(y, x) as f64);
                    ys.push(b.get(y, x) as f64);
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let cxy = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}
pub mod appendix;
pub mod loss_suite;
