use crate::{Scalar, Tensor};

impl<F: Scalar> Tensor<F> {
    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[b,m,k]·[b,k,n]` and
    /// `[b,m,k]·[k,n]` (shared right operand).
    pub fn matmul(&self, rhs: &Tensor<F>) -> Tensor<F> {
        let (batch, m, k) = match self.shape() {
            [m, k] => (1, *m, *k),
            [b, m, k] => (*b, *m, *k),
            s => panic!("matmul lhs must be rank 2 or 3, got {s:?}"),
        };
        let (rhs_batched, k2, n) = match rhs.shape() {
            [k, n] => (false, *k, *n),
            [b, k, n] => {
                assert_eq!(*b, batch, "matmul batch mismatch");
                (true, *k, *n)
            }
            s => panic!("matmul rhs must be rank 2 or 3, got {s:?}"),
        };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(), rhs.shape());
        assert!(self.rank() == 3 || !rhs_batched, "rank-2 lhs with batched rhs");

        let (a, b) = (self.data(), rhs.data());
        let mut out = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            let bs = if rhs_batched { &b[i * k * n..(i + 1) * k * n] } else { b };
            F::gemm(m, k, n, &a[i * m * k..(i + 1) * m * k], false, bs, false, F::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let shape = if self.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let (ac, bc) = (self.clone(), rhs.clone());
        Tensor::from_op(
            out,
            shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                let (a, b) = (ac.data(), bc.data());
                let ga = ac.is_requires_grad().then(|| {
                    let mut ga = vec![F::zero(); batch * m * k];
                    for i in 0..batch {
                        let bs = if rhs_batched { &b[i * k * n..(i + 1) * k * n] } else { b };
                        // dA = G · Bᵀ
                        F::gemm(m, n, k, &g[i * m * n..(i + 1) * m * n], false, bs, true, F::zero(), &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                    ga
                });
                let gb = bc.is_requires_grad().then(|| {
                    let mut gb = vec![F::zero(); if rhs_batched { batch * k * n } else { k * n }];
                    for i in 0..batch {
                        let (dst, beta) = if rhs_batched {
                            (&mut gb[i * k * n..(i + 1) * k * n], F::zero())
                        } else {
                            (&mut gb[..], if i == 0 { F::zero() } else { F::one() })
                        };
                        // dB = Aᵀ · G
                        F::gemm(k, m, n, &a[i * m * k..(i + 1) * m * k], true, &g[i * m * n..(i + 1) * m * n], false, beta, dst);
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x·Wᵀ + b` over the last axis. `weight` is `[out, in]`, `bias` is `[out]`.
    pub fn linear(&self, weight: &Tensor<F>, bias: Option<&Tensor<F>>) -> Tensor<F> {
        let in_dim = *self.shape().last().expect("linear on scalar");
        let (out_dim, w_in) = match weight.shape() {
            [o, i] => (*o, *i),
            s => panic!("linear weight must be [out, in], got {s:?}"),
        };
        assert_eq!(in_dim, w_in, "linear input width {} vs weight {:?}", in_dim, weight.shape());
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[out_dim], "linear bias shape");
        }
        let rows = self.numel() / in_dim;
        let mut out = vec![F::zero(); rows * out_dim];
        if let Some(b) = bias {
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(b.data());
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        F::gemm(rows, in_dim, out_dim, self.data(), false, weight.data(), true, beta, &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (xc, wc, bc) = (self.clone(), weight.clone(), bias.cloned());
        Tensor::from_op(
            out,
            shape,
            parents,
            Box::new(move |g, _| {
                let gx = xc.is_requires_grad().then(|| {
                    let mut gx = vec![F::zero(); rows * in_dim];
                    F::gemm(rows, out_dim, in_dim, g, false, wc.data(), false, F::zero(), &mut gx);
                    gx
                });
                let gw = wc.is_requires_grad().then(|| {
                    let mut gw = vec![F::zero(); out_dim * in_dim];
                    F::gemm(out_dim, rows, in_dim, g, true, xc.data(), false, F::zero(), &mut gw);
                    gw
                });
                let mut res = vec![gx, gw];
                if let Some(b) = &bc {
                    res.push(b.is_requires_grad().then(|| {
                        let mut gb = vec![F::zero(); out_dim];
                        for r in 0..rows {
                            for (d, &s) in gb.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                                *d = *d + s;
                            }
                        }
                        gb
                    }));
                }
                res
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2d_values() {
        let a = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = Tensor::<f64>::from_f64s(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2]);
        assert_eq!(a.matmul(&b).to_f64_vec(), vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn linear_matches_matmul() {
        let x = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let w = Tensor::<f64>::from_f64s(&[1.0, -1.0, 0.5, 2.0, 0.0, 1.0], &[3, 2]);
        let b = Tensor::<f64>::from_f64s(&[0.1, 0.2, 0.3], &[3]);
        let y = x.linear(&w, Some(&b));
        let y2 = x.matmul(&w.transpose(0, 1)).add(&b);
        for (p, q) in y.to_f64_vec().iter().zip(y2.to_f64_vec()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
