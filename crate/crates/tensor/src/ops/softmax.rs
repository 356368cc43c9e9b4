use crate::{Scalar, Tensor};

impl<F: Scalar> Tensor<F> {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor<F> {
        let n = *self.shape().last().expect("softmax on scalar");
        let rows = self.numel() / n;
        let x = self.data();
        let mut out = vec![F::zero(); self.numel()];
        for r in 0..rows {
            let src = &x[r * n..(r + 1) * n];
            let m = src.iter().copied().fold(F::neg_infinity(), F::max);
            let dst = &mut out[r * n..(r + 1) * n];
            let mut s = F::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - m).exp();
                s = s + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / s;
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![F::zero(); g.len()];
                for r in 0..rows {
                    let (gs, ys) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let dot: F = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in gx[r * n..(r + 1) * n].iter_mut().zip(gs).zip(ys) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor<F> {
        let n = *self.shape().last().expect("log_softmax on scalar");
        let rows = self.numel() / n;
        let x = self.data();
        let mut out = vec![F::zero(); self.numel()];
        for r in 0..rows {
            let src = &x[r * n..(r + 1) * n];
            let m = src.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + src.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            for (d, &v) in out[r * n..(r + 1) * n].iter_mut().zip(src) {
                *d = v - lse;
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![F::zero(); g.len()];
                for r in 0..rows {
                    let (gs, ys) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let sum_g: F = gs.iter().copied().sum();
                    for ((d, &gv), &yv) in gx[r * n..(r + 1) * n].iter_mut().zip(gs).zip(ys) {
                        *d = gv - yv.exp() * sum_g;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Mean cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Tensor<F> {
        assert_eq!(self.rank(), 2, "cross_entropy expects [N, K] logits");
        let (rows, k) = (self.dim(0), self.dim(1));
        assert_eq!(targets.len(), rows, "cross_entropy target count");
        assert!(targets.iter().all(|&t| t < k), "cross_entropy target out of range");
        let x = self.data();
        let mut lse = vec![F::zero(); rows];
        let mut total = F::zero();
        for r in 0..rows {
            let src = &x[r * k..(r + 1) * k];
            let m = src.iter().copied().fold(F::neg_infinity(), F::max);
            lse[r] = m + src.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            total = total + lse[r] - src[targets[r]];
        }
        let inv_n = F::cst(1.0 / rows as f64);
        let xc = self.clone();
        let targets = targets.to_vec();
        Tensor::from_op(
            vec![total * inv_n],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = xc.data();
                let scale = g[0] * inv_n;
                let mut gx = vec![F::zero(); rows * k];
                for r in 0..rows {
                    for c in 0..k {
                        gx[r * k + c] = (x[r * k + c] - lse[r]).exp() * scale;
                    }
                    gx[r * k + targets[r]] = gx[r * k + targets[r]] - scale;
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row lookup into an embedding table `[vocab, dim]`; output shape is
    /// `index_shape + [dim]`.
    pub fn embedding(table: &Tensor<F>, ids: &[usize], index_shape: &[usize]) -> Tensor<F> {
        assert_eq!(table.rank(), 2, "embedding table must be [vocab, dim]");
        let (vocab, dim) = (table.dim(0), table.dim(1));
        assert_eq!(ids.len(), index_shape.iter().product::<usize>(), "embedding index shape");
        let t = table.data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            assert!(i < vocab, "token id {i} outside vocabulary of {vocab}");
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(dim);
        let ids = ids.to_vec();
        Tensor::from_op(
            out,
            shape,
            vec![table.clone()],
            Box::new(move |g, _| {
                let mut gt = vec![F::zero(); vocab * dim];
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &v) in gt[i * dim..(i + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *d = *d + v;
                    }
                }
                vec![Some(gt)]
            }),
        )
    }
}
