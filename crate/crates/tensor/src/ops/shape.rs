//! Reductions, reshaping, permutation, concatenation and slicing.

use crate::tensor::numel;
use crate::{Scalar, Tensor};

/// `(outer, n, inner)` view of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<F: Scalar> Tensor<F> {
    pub fn sum_all(&self) -> Tensor<F> {
        let s: F = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Sum over one axis. With `keepdim` the axis is kept with size 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor<F> {
        assert!(axis < self.rank(), "axis {axis} out of range for {:?}", self.shape());
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); outer * n * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor<F> {
        let n = self.dim(axis).max(1);
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<F> {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Materializing axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<F> {
        let rank = self.rank();
        assert_eq!(perm.len(), rank, "permutation rank mismatch");
        let in_shape = self.shape().to_vec();
        let in_strides = contiguous_strides(&in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let gather = gather_index(&out_shape, &src_strides);
        let x = self.data();
        let out: Vec<F> = gather.iter().map(|&i| x[i]).collect();
        let n = self.numel();
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); n];
                for (o, &i) in gather.iter().enumerate() {
                    gx[i] = g[o];
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn transpose(&self, a: usize, b: usize) -> Tensor<F> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenate along `axis`. All other dimensions must agree.
    pub fn concat(parts: &[Tensor<F>], axis: usize) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat of nothing");
        let base = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), base.len(), "concat rank mismatch");
            for (d, (&x, &y)) in p.shape().iter().zip(&base).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {:?} vs {:?}", p.shape(), base);
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let pcs: Vec<Tensor<F>> = parts.to_vec();
        Tensor::from_op(
            out,
            shape,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut offsets = Vec::with_capacity(sizes.len());
                let mut acc = 0;
                for &s in &sizes {
                    offsets.push(acc);
                    acc += s;
                }
                pcs.iter()
                    .zip(sizes.iter().zip(&offsets))
                    .map(|(p, (&sz, &off))| {
                        p.is_requires_grad().then(|| {
                            let mut gp = Vec::with_capacity(outer * sz * inner);
                            for o in 0..outer {
                                let start = (o * total + off) * inner;
                                gp.extend_from_slice(&g[start..start + sz * inner]);
                            }
                            gp
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<F> {
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        assert!(start + len <= n, "narrow out of range");
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            out.extend_from_slice(&x[s..s + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); outer * n * inner];
                for o in 0..outer {
                    let s = (o * n + start) * inner;
                    gx[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<F>]) -> Tensor<F> {
        let mut shaped: Vec<Tensor<F>> = Vec::with_capacity(parts.len());
        for p in parts {
            let mut s = vec![1];
            s.extend_from_slice(p.shape());
            shaped.push(p.reshape(&s));
        }
        Tensor::concat(&shaped, 0)
    }
}

/// For each output position (row-major over `out_shape`), the flat source index.
fn gather_index(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut res = Vec::with_capacity(n);
    for _ in 0..n {
        res.push(idx.iter().zip(src_strides).map(|(i, s)| i * s).sum());
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    res
}
