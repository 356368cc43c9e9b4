//! Broadcasting binary ops, scalar ops and pointwise nonlinearities.

use crate::tensor::numel;
use crate::{Scalar, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} are not broadcast-compatible"),
        };
    }
    out
}

/// Strides of `shape` viewed inside `out` (rank-aligned), 0 on broadcast axes.
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < n {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance the outer multi-index
        let mut d = rank as isize - 2;
        while d >= 0 {
            let du = d as usize;
            idx[du] += 1;
            if idx[du] < out[du] {
                break;
            }
            idx[du] = 0;
            d -= 1;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, op: BinOp) -> Tensor<F> {
    if a.shape() == b.shape() {
        return binary_same(a, b, op);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = view_strides(a.shape(), &out_shape);
    let sb = view_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![F::zero(); numel(&out_shape)];
    for_each_bcast(&out_shape, &sa, &sb, |o, i, j| {
        out[o] = match op {
            BinOp::Add => ad[i] + bd[j],
            BinOp::Sub => ad[i] - bd[j],
            BinOp::Mul => ad[i] * bd[j],
            BinOp::Div => ad[i] / bd[j],
        }
    });
    let (ac, bc) = (a.clone(), b.clone());
    let shape_c = out_shape.clone();
    Tensor::from_op(
        out,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let (need_a, need_b) = (ac.is_requires_grad(), bc.is_requires_grad());
            let mut ga = need_a.then(|| vec![F::zero(); ac.numel()]);
            let mut gb = need_b.then(|| vec![F::zero(); bc.numel()]);
            let (ad, bd) = (ac.data(), bc.data());
            for_each_bcast(&shape_c, &sa, &sb, |o, i, j| {
                let go = g[o];
                let (da, db) = match op {
                    BinOp::Add => (go, go),
                    BinOp::Sub => (go, -go),
                    BinOp::Mul => (go * bd[j], go * ad[i]),
                    BinOp::Div => (go / bd[j], -go * ad[i] / (bd[j] * bd[j])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[i] = ga[i] + da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] = gb[j] + db;
                }
            });
            vec![ga, gb]
        }),
    )
}

fn binary_same<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, op: BinOp) -> Tensor<F> {
    let out: Vec<F> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        })
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g, _| {
            let (ad, bd) = (ac.data(), bc.data());
            let ga = ac.is_requires_grad().then(|| match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().zip(bd).map(|(&g, &y)| g * y).collect(),
                BinOp::Div => g.iter().zip(bd).map(|(&g, &y)| g / y).collect(),
            });
            let gb = bc.is_requires_grad().then(|| match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.iter().map(|&g| -g).collect(),
                BinOp::Mul => g.iter().zip(ad).map(|(&g, &x)| g * x).collect(),
                BinOp::Div => g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect(),
            });
            vec![ga, gb]
        }),
    )
}

impl<F: Scalar> Tensor<F> {
    pub fn add(&self, other: &Tensor<F>) -> Tensor<F> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Tensor<F> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Tensor<F> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<F>) -> Tensor<F> {
        binary(self, other, BinOp::Div)
    }

    /// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_with_grad(
        &self,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Tensor<F> {
        let out: Vec<F> = self.data().iter().map(|&x| f(x)).collect();
        let xc = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let gx = g
                    .iter()
                    .zip(xc.data().iter().zip(y))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<F> {
        let s = F::cst(s);
        self.map_with_grad(move |x| x + s, |_, _| F::one())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<F> {
        let s = F::cst(s);
        self.map_with_grad(move |x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Tensor<F> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Tensor<F> {
        self.map_with_grad(
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<F> {
        let s = F::cst(slope);
        self.map_with_grad(
            move |x| if x > F::zero() { x } else { x * s },
            move |x, _| if x > F::zero() { F::one() } else { s },
        )
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.map_with_grad(
            |x| F::one() / (F::one() + (-x).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.map_with_grad(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn exp(&self) -> Tensor<F> {
        self.map_with_grad(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<F> {
        self.map_with_grad(|x| x.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<F> {
        self.map_with_grad(|x| x.sqrt(), |_, y| F::cst(0.5) / y)
    }

    pub fn square(&self) -> Tensor<F> {
        self.map_with_grad(|x| x * x, |x, _| F::cst(2.0) * x)
    }

    pub fn abs(&self) -> Tensor<F> {
        self.map_with_grad(
            |x| x.abs(),
            |x, _| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    /// `elu(x) + 1`, the positive kernel feature map used by linear attention.
    pub fn elu_plus_one(&self) -> Tensor<F> {
        self.map_with_grad(
            |x| if x > F::zero() { x + F::one() } else { x.exp() },
            |x, y| if x > F::zero() { F::one() } else { y },
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Tensor<F> {
        self.map_with_grad(
            |x| {
                if x > F::zero() {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| F::one() / (F::one() + (-x).exp()),
        )
    }

    /// `ln σ(x) = -softplus(-x)`.
    pub fn log_sigmoid(&self) -> Tensor<F> {
        self.neg().softplus().neg()
    }

    /// Clamp with straight zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<F> {
        let (l, h) = (F::cst(lo), F::cst(hi));
        self.map_with_grad(
            move |x| x.max(l).min(h),
            move |x, _| if x >= l && x <= h { F::one() } else { F::zero() },
        )
    }
}
