//! 2D convolution (im2col + gemm), padding, pooling and upsampling over
//! `[batch, channels, height, width]` tensors.

use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, col: &mut [F]) {
    let ohw = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oh * g.ow..(oh + 1) * g.ow];
                    if ih < 0 || ih >= g.h as isize {
                        seg.fill(F::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in seg.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize { F::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(col: &[F], g: &ConvGeom, dx: &mut [F]) {
    let ohw = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.ow {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.ow + ow];
                        }
                    }
                }
            }
        }
    }
}

fn dims4(t: &Tensor<impl Scalar>, what: &str) -> (usize, usize, usize, usize) {
    match t.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => panic!("{what} expects a [B, C, H, W] tensor, got {s:?}"),
    }
}

impl<F: Scalar> Tensor<F> {
    /// Cross-correlation with zero padding. `weight` is `[out, in, kh, kw]`.
    pub fn conv2d(&self, weight: &Tensor<F>, bias: Option<&Tensor<F>>, stride: usize, pad: usize) -> Tensor<F> {
        let (b, c, h, w) = dims4(self, "conv2d");
        let (o, wc, kh, kw) = dims4(weight, "conv2d weight");
        assert_eq!(c, wc, "conv2d input channels {c} vs weight {:?}", weight.shape());
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        if let Some(bias) = bias {
            assert_eq!(bias.shape(), &[o], "conv2d bias shape");
        }
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, cols) = (g.rows(), g.cols());
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![F::zero(); b * o * cols];
        let mut col = vec![F::zero(); rows * cols];
        for bi in 0..b {
            im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, &mut col);
            let dst = &mut out[bi * o * cols..(bi + 1) * o * cols];
            if let Some(bias) = bias {
                for (oc, &bv) in bias.data().iter().enumerate() {
                    dst[oc * cols..(oc + 1) * cols].fill(bv);
                }
            }
            let beta = if bias.is_some() { F::one() } else { F::zero() };
            F::gemm(o, rows, cols, wd, false, &col, false, beta, dst);
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let (xc, wt, bc) = (self.clone(), weight.clone(), bias.cloned());
        Tensor::from_op(
            out,
            vec![b, o, g.oh, g.ow],
            parents,
            Box::new(move |grad, _| {
                let x = xc.data();
                let wd = wt.data();
                let need_x = xc.is_requires_grad();
                let need_w = wt.is_requires_grad();
                let mut gx = need_x.then(|| vec![F::zero(); b * c * h * w]);
                let mut gw = need_w.then(|| vec![F::zero(); o * rows]);
                let mut col = vec![F::zero(); rows * cols];
                for bi in 0..b {
                    let gb = &grad[bi * o * cols..(bi + 1) * o * cols];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, &mut col);
                        let beta = if bi == 0 { F::zero() } else { F::one() };
                        F::gemm(o, cols, rows, gb, false, &col, true, beta, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        F::gemm(rows, o, cols, wd, true, gb, false, F::zero(), &mut col);
                        col2im(&col, &g, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                    }
                }
                let mut res = vec![gx, gw];
                if let Some(bias) = &bc {
                    res.push(bias.is_requires_grad().then(|| {
                        let mut gbias = vec![F::zero(); o];
                        for bi in 0..b {
                            for (oc, acc) in gbias.iter_mut().enumerate() {
                                let s: F = grad[(bi * o + oc) * cols..(bi * o + oc + 1) * cols].iter().copied().sum();
                                *acc = *acc + s;
                            }
                        }
                        gbias
                    }));
                }
                res
            }),
        )
    }

    /// Reflection padding (edge not repeated) on the two spatial axes.
    pub fn pad_reflect(&self, pad: usize) -> Tensor<F> {
        let (b, c, h, w) = dims4(self, "pad_reflect");
        assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
            r as usize
        };
        let mut index = Vec::with_capacity(ph * pw);
        for i in 0..ph {
            let si = reflect(i as isize - pad as isize, h);
            for j in 0..pw {
                let sj = reflect(j as isize - pad as isize, w);
                index.push(si * w + sj);
            }
        }
        let x = self.data();
        let planes = b * c;
        let mut out = Vec::with_capacity(planes * ph * pw);
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            out.extend(index.iter().map(|&i| src[i]));
        }
        Tensor::from_op(
            out,
            vec![b, c, ph, pw],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (k, &i) in index.iter().enumerate() {
                        dst[i] = dst[i] + g[p * ph * pw + k];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Non-overlapping `k×k` average pooling. Spatial dims must be divisible by `k`.
    pub fn avg_pool2d(&self, k: usize) -> Tensor<F> {
        let (b, c, h, w) = dims4(self, "avg_pool2d");
        assert!(h % k == 0 && w % k == 0, "avg_pool2d: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let planes = b * c;
        let scale = F::cst(1.0 / (k * k) as f64);
        let x = self.data();
        let mut out = vec![F::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..h {
                for j in 0..w {
                    let o = p * oh * ow + (i / k) * ow + j / k;
                    out[o] = out[o] + x[p * h * w + i * w + j] * scale;
                }
            }
        }
        Tensor::from_op(
            out,
            vec![b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..h {
                        for j in 0..w {
                            gx[p * h * w + i * w + j] = g[p * oh * ow + (i / k) * ow + j / k] * scale;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Keep every `stride`-th row and column, starting at index 0.
    pub fn subsample2d(&self, stride: usize) -> Tensor<F> {
        let (b, c, h, w) = dims4(self, "subsample2d");
        assert!(stride >= 1);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let planes = b * c;
        let x = self.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out.push(x[p * h * w + i * stride * w + j * stride]);
                }
            }
        }
        Tensor::from_op(
            out,
            vec![b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx[p * h * w + i * stride * w + j * stride] = g[(p * oh + i) * ow + j];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, k: usize) -> Tensor<F> {
        let (b, c, h, w) = dims4(self, "upsample_nearest");
        let (oh, ow) = (h * k, w * k);
        let planes = b * c;
        let x = self.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for i in 0..oh {
                let row = &x[p * h * w + (i / k) * w..p * h * w + (i / k + 1) * w];
                for j in 0..ow {
                    out.push(row[j / k]);
                }
            }
        }
        Tensor::from_op(
            out,
            vec![b, c, oh, ow],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let d = p * h * w + (i / k) * w + j / k;
                            gx[d] = gx[d] + g[p * oh * ow + i * ow + j];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
