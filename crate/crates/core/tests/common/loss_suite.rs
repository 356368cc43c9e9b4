//! Every loss checked three ways on random 8×8 inputs: against its loop
//! oracle, against central differences, and on closed-form cases.

use disth_core::eval;
use disth_core::image::Image;
use disth_core::losses::{
    adv_disc_loss, adv_gen_loss, loss_adv, loss_beta, loss_dir, loss_global, loss_perc, loss_rec, DiscriminatorConfig,
    PatchConfig, PatchDiscriminator, PerceptualConfig, PerceptualNet,
};

use super::{gradcheck, rand_image, rand_tensor, Arr, T};

pub const ORACLE_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value < self.tolerance
    }
}

fn push(out: &mut Vec<Check>, name: impl Into<String>, value: f64, tolerance: f64) {
    out.push(Check { name: name.into(), value, tolerance });
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

const HW: usize = 8;

pub fn beta_checks(out: &mut Vec<Check>) {
    let shape = [2, 3, HW, HW];
    let src = rand_tensor(1, &shape, -1.0, 1.0);
    let tgt = rand_tensor(2, &shape, -1.0, 1.0);
    for (k, stride, symmetric) in [(1, 2, false), (1, 1, true), (2, 2, false), (3, 2, true)] {
        let cfg = PatchConfig { patch_size: k, stride, temperature: 0.07, symmetric };
        let got = loss_beta(&src, &tgt, &cfg).unwrap().item_f64();
        let want = super::loss_beta(&Arr::of(&src), &Arr::of(&tgt), k, stride, 0.07, symmetric);
        push(out, format!("L_beta oracle k={k} s={stride} sym={symmetric}"), rel(got, want), ORACLE_TOL);
        let g = gradcheck(&[src.clone(), tgt.clone()], |x| loss_beta(&x[0], &x[1], &cfg).unwrap());
        push(out, format!("L_beta gradient k={k} s={stride} sym={symmetric}"), g, GRAD_TOL);
    }
    // identical patches everywhere: every logit equal, loss = log |P|
    let flat = T::from_vec(vec![0.5; 3 * HW * HW], &[1, 3, HW, HW]);
    let cfg = PatchConfig::default();
    let p = ((HW + 1) / 2).pow(2) as f64;
    let got = loss_beta(&flat, &flat, &cfg).unwrap().item_f64();
    push(out, "L_beta uniform case = log|P|", (got - p.ln()).abs(), EXACT_TOL);
    // two orthogonal unit patches at τ = 1
    let two = T::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 1, 2]);
    let cfg = PatchConfig { patch_size: 1, stride: 1, temperature: 1.0, symmetric: false };
    let got = loss_beta(&two, &two, &cfg).unwrap().item_f64();
    let e = std::f64::consts::E;
    push(out, "L_beta 2-patch case = -log(e/(e+1))", (got + (e / (e + 1.0)).ln()).abs(), EXACT_TOL);
}

pub fn rec_checks(out: &mut Vec<Check>) {
    let t = rand_tensor(3, &[2, 1, HW, HW], 0.0, 1.0);
    let r = rand_tensor(4, &[2, 1, HW, HW], 0.0, 1.0);
    let got = loss_rec(&t, &r).unwrap().item_f64();
    push(out, "L_rec oracle", rel(got, super::loss_rec(&t.to_vec(), &r.to_vec())), ORACLE_TOL);
    push(out, "L_rec gradient", gradcheck(&[t, r], |x| loss_rec(&x[0], &x[1]).unwrap()), GRAD_TOL);
}

pub fn perc_checks(out: &mut Vec<Check>) {
    let cfg = PerceptualConfig::default();
    let net = PerceptualNet::<f64>::new(&cfg).unwrap();
    let t = rand_tensor(5, &[2, 1, HW, HW], 0.0, 1.0);
    let r = rand_tensor(6, &[2, 1, HW, HW], 0.0, 1.0);
    let got = loss_perc(&t, &r, &net).unwrap().item_f64();
    let want = super::loss_perc(net.params(), &cfg.channels, &cfg.taps, &Arr::of(&t), &Arr::of(&r));
    push(out, "L_perc oracle", rel(got, want), ORACLE_TOL);
    push(out, "L_perc gradient", gradcheck(&[t, r], |x| loss_perc(&x[0], &x[1], &net).unwrap()), GRAD_TOL);
}

pub fn adv_checks(out: &mut Vec<Check>) {
    let cfg = DiscriminatorConfig { base_channels: 4 };
    let disc = PatchDiscriminator::<f64>::new(&cfg, 9);
    let real = rand_tensor(7, &[2, 1, HW, HW], 0.0, 1.0);
    let fake = rand_tensor(8, &[2, 1, HW, HW], 0.0, 1.0);
    let lr = super::disc_logits(disc.params(), 4, &Arr::of(&real));
    let lf = super::disc_logits(disc.params(), 4, &Arr::of(&fake));
    let got_logits = disc.forward(&fake).to_vec();
    let worst = got_logits.iter().zip(&lf).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    push(out, "discriminator logits oracle", worst, ORACLE_TOL);
    let adv = loss_adv(&disc, &real, &fake).unwrap();
    push(out, "L_adv generator oracle", rel(adv.gen.item_f64(), super::adv_gen(&lf)), ORACLE_TOL);
    push(out, "L_adv discriminator oracle", rel(adv.disc.item_f64(), super::adv_disc(&lr, &lf)), ORACLE_TOL);
    let g = gradcheck(&[fake.clone()], |x| loss_adv(&disc, &real, &x[0]).unwrap().gen);
    push(out, "L_adv generator gradient", g, GRAD_TOL);
    let g = gradcheck(&[real.clone()], |x| loss_adv(&disc, &x[0], &fake).unwrap().disc);
    push(out, "L_adv discriminator gradient", g, GRAD_TOL);
    let logits = rand_tensor(10, &[2, 1, 3, 3], -3.0, 3.0);
    let logits2 = rand_tensor(11, &[2, 1, 3, 3], -3.0, 3.0);
    let g = gradcheck(&[logits, logits2], |x| adv_disc_loss(&x[0], &x[1]).add(&adv_gen_loss(&x[1])));
    push(out, "L_adv logit gradient", g, GRAD_TOL);
}

pub fn global_checks(out: &mut Vec<Check>) {
    let d = 16;
    let e = rand_tensor(12, &[4, d], -1.0, 1.0);
    let ti = rand_tensor(13, &[4, d], -1.0, 1.0);
    let tm = rand_tensor(14, &[4, d], -1.0, 1.0);
    let got = loss_global(&e, &ti, &tm).unwrap().item_f64();
    let want = super::loss_global(&e.to_vec(), &ti.to_vec(), &tm.to_vec(), d);
    push(out, "L_global oracle", rel(got, want), ORACLE_TOL);
    let g = gradcheck(&[e.clone(), ti.clone(), tm.clone()], |x| loss_global(&x[0], &x[1], &x[2]).unwrap());
    push(out, "L_global gradient", g, GRAD_TOL);
    let same = loss_global(&e, &e, &e).unwrap().item_f64();
    push(out, "L_global identical case = 0", same.abs(), EXACT_TOL);
}

pub fn dir_checks(out: &mut Vec<Check>) {
    let d = 16;
    let v: Vec<T> = (15..19).map(|s| rand_tensor(s, &[4, d], -1.0, 1.0)).collect();
    let got = loss_dir(&v[0], &v[1], &v[2], &v[3]).unwrap().item_f64();
    let want = super::loss_dir(&v[0].to_vec(), &v[1].to_vec(), &v[2].to_vec(), &v[3].to_vec(), d);
    push(out, "L_dir oracle", rel(got, want), ORACLE_TOL);
    let g = gradcheck(&v, |x| loss_dir(&x[0], &x[1], &x[2], &x[3]).unwrap());
    push(out, "L_dir gradient", g, GRAD_TOL);
    // image shift along, across and against the metadata shift
    let zero = T::zeros(&[1, 2]);
    let m = T::from_vec(vec![1.0, 0.0], &[1, 2]);
    for (rec, want) in [(vec![3.0, 0.0], 0.0), (vec![0.0, 2.0], 1.0), (vec![-0.5, 0.0], 2.0)] {
        let got = loss_dir(&T::from_vec(rec.clone(), &[1, 2]), &zero, &m, &zero).unwrap().item_f64();
        push(out, format!("L_dir case {rec:?} = {want}"), (got - want).abs(), EXACT_TOL);
    }
}

pub fn metric_checks(out: &mut Vec<Check>) {
    let a = rand_image(20, HW, HW).map(|v| v * 0.8);
    let shifted = a.map(|v| v + 0.1);
    push(out, "PSNR offset case = 20 dB", (eval::psnr(&a, &shifted).unwrap() - 20.0).abs(), 1e-5);
    let b = rand_image(21, HW, HW);
    push(out, "PSNR oracle", rel(eval::psnr(&a, &b).unwrap(), super::psnr(&a, &b)), ORACLE_TOL);
    push(out, "SSIM oracle", rel(eval::ssim(&a, &b).unwrap(), super::ssim(&a, &b)), ORACLE_TOL);
    let zeros = Image::filled(HW, HW, 0.0);
    let ones = Image::filled(HW, HW, 1.0);
    let c1 = 1e-4;
    push(out, "SSIM constant case", (eval::ssim(&zeros, &ones).unwrap() - c1 / (1.0 + c1)).abs(), EXACT_TOL);
}

pub fn all_checks() -> Vec<Check> {
    let mut out = Vec::new();
    beta_checks(&mut out);
    rec_checks(&mut out);
    perc_checks(&mut out);
    adv_checks(&mut out);
    global_checks(&mut out);
    dir_checks(&mut out);
    metric_checks(&mut out);
    out
}
