use crate::{Scalar, Tensor};

impl<F: Scalar> Tensor<F> {
    /// Instance normalization: every `[b, c]` slice of a `[B, C, ...]` tensor
    /// is shifted to zero mean and scaled by `1/sqrt(var + eps)` (biased variance).
    pub fn instance_norm(&self, eps: f64) -> Tensor<F> {
        assert!(self.rank() >= 3, "instance_norm expects [B, C, ...], got {:?}", self.shape());
        let planes = self.dim(0) * self.dim(1);
        let p = self.numel() / planes.max(1);
        let pf = F::cst(p as f64);
        let eps = F::cst(eps);
        let x = self.data();
        let mut out = vec![F::zero(); self.numel()];
        let mut inv_std = vec![F::zero(); planes];
        for k in 0..planes {
            let src = &x[k * p..(k + 1) * p];
            let mean = src.iter().copied().sum::<F>() / pf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / pf;
            let is = F::one() / (var + eps).sqrt();
            inv_std[k] = is;
            for (d, &v) in out[k * p..(k + 1) * p].iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![F::zero(); g.len()];
                for k in 0..planes {
                    let gs = &g[k * p..(k + 1) * p];
                    let ys = &y[k * p..(k + 1) * p];
                    let sum_g: F = gs.iter().copied().sum();
                    let sum_gy: F = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                    let scale = inv_std[k] / pf;
                    for ((d, &gv), &yv) in gx[k * p..(k + 1) * p].iter_mut().zip(gs).zip(ys) {
                        *d = scale * (pf * gv - sum_g - yv * sum_gy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Spatially varying affine modulation of a `[B, C, H, W]` tensor:
    /// `out[b,c,p] = x[b,c,p] · gamma[b,c] · (1 + map[b,p]) + delta[b,c]`.
    /// `gamma`/`delta` are `[B, C]`; `map` is `[B, H·W]` (any shape with that many elements).
    pub fn modulate(&self, gamma: &Tensor<F>, delta: &Tensor<F>, map: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.rank(), 4, "modulate expects [B, C, H, W]");
        let (b, c) = (self.dim(0), self.dim(1));
        let p = self.dim(2) * self.dim(3);
        assert_eq!(gamma.numel(), b * c, "modulate gamma must be [B, C]");
        assert_eq!(delta.numel(), b * c, "modulate delta must be [B, C]");
        assert_eq!(map.numel(), b * p, "modulate map must be [B, H*W]");
        let (x, gm, dl, mp) = (self.data(), gamma.data(), delta.data(), map.data());
        let mut out = vec![F::zero(); self.numel()];
        for bi in 0..b {
            let m = &mp[bi * p..(bi + 1) * p];
            for ci in 0..c {
                let k = bi * c + ci;
                let (gv, dv) = (gm[k], dl[k]);
                for ((o, &xv), &mv) in out[k * p..(k + 1) * p].iter_mut().zip(&x[k * p..(k + 1) * p]).zip(m) {
                    *o = xv * gv * (F::one() + mv) + dv;
                }
            }
        }
        let (xc, gc, dc, mc) = (self.clone(), gamma.clone(), delta.clone(), map.clone());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), delta.clone(), map.clone()],
            Box::new(move |g, _| {
                let (x, gm, mp) = (xc.data(), gc.data(), mc.data());
                let mut gx = xc.is_requires_grad().then(|| vec![F::zero(); b * c * p]);
                let mut gg = gc.is_requires_grad().then(|| vec![F::zero(); b * c]);
                let mut gd = dc.is_requires_grad().then(|| vec![F::zero(); b * c]);
                let mut gmap = mc.is_requires_grad().then(|| vec![F::zero(); b * p]);
                for bi in 0..b {
                    let m = &mp[bi * p..(bi + 1) * p];
                    for ci in 0..c {
                        let k = bi * c + ci;
                        let gs = &g[k * p..(k + 1) * p];
                        let xs = &x[k * p..(k + 1) * p];
                        if let Some(gx) = gx.as_mut() {
                            for ((d, &gv), &mv) in gx[k * p..(k + 1) * p].iter_mut().zip(gs).zip(m) {
                                *d = gv * gm[k] * (F::one() + mv);
                            }
                        }
                        if let Some(gg) = gg.as_mut() {
                            gg[k] = gs.iter().zip(xs).zip(m).map(|((&gv, &xv), &mv)| gv * xv * (F::one() + mv)).sum();
                        }
                        if let Some(gd) = gd.as_mut() {
                            gd[k] = gs.iter().copied().sum();
                        }
                        if let Some(gmap) = gmap.as_mut() {
                            let dst = &mut gmap[bi * p..(bi + 1) * p];
                            for ((d, &gv), &xv) in dst.iter_mut().zip(gs).zip(xs) {
                                *d = *d + gv * xv * gm[k];
                            }
                        }
                    }
                }
                vec![gx, gg, gd, gmap]
            }),
        )
    }

    /// Divide each vector along the last axis by its L2 norm.
    pub fn l2_normalize(&self, eps: f64) -> Tensor<F> {
        let axis = self.rank() - 1;
        let norm = self.square().sum_axis(axis, true).add_scalar(eps).sqrt();
        self.div(&norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_norm_moments() {
        let x = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0], &[1, 2, 2, 2]);
        let y = x.instance_norm(1e-5).to_f64_vec();
        let mean: f64 = y[..4].iter().sum::<f64>() / 4.0;
        let var: f64 = y[..4].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + 1e-5)).abs() < 1e-9);
        // constant plane → zeros, finite
        assert!(y[4..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn modulate_identity() {
        let x = Tensor::<f64>::from_f64s(&[1.0, -1.0, 2.0, 0.5], &[1, 1, 2, 2]);
        let one = Tensor::<f64>::ones(&[1, 1]);
        let zero = Tensor::<f64>::zeros(&[1, 1]);
        let map = Tensor::<f64>::zeros(&[1, 4]);
        assert_eq!(x.modulate(&one, &zero, &map).to_f64_vec(), x.to_f64_vec());
    }
}
