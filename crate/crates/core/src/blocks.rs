//! Building blocks shared by the U-Nets.

use disth_tensor::nn::{Conv2d, Padding, LEAKY_SLOPE};
use disth_tensor::{Init, Scalar, Tensor};

/// Two 3×3 convolutions, each optionally instance-normalized, each followed by leaky ReLU.
pub(crate) struct DoubleConv<F: Scalar> {
    pub a: Conv2d<F>,
    pub b: Conv2d<F>,
    pub norm_a: Option<f64>,
    pub norm_b: Option<f64>,
}

impl<F: Scalar> DoubleConv<F> {
    pub fn new(init: &mut Init<'_, F>, c_in: usize, c_out: usize, norm: Option<f64>) -> Self {
        DoubleConv {
            a: Conv2d::new(&mut init.pp("a"), c_in, c_out, 3, 1, 1),
            b: Conv2d::new(&mut init.pp("b"), c_out, c_out, 3, 1, 1),
            norm_a: norm,
            norm_b: norm,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let mut h = self.a.forward(x);
        if let Some(eps) = self.norm_a {
            h = h.instance_norm(eps);
        }
        h = h.leaky_relu(LEAKY_SLOPE);
        h = self.b.forward(&h);
        if let Some(eps) = self.norm_b {
            h = h.instance_norm(eps);
        }
        h.leaky_relu(LEAKY_SLOPE)
    }

    /// Reflection-pad the first convolution and pin its normalization.
    pub fn with_input_stage(mut self, eps: f64) -> Self {
        self.a = self.a.with_padding(Padding::Reflect);
        self.norm_a = Some(eps);
        self
    }
}

/// `[m·m, h·w]` matrix performing bilinear upsampling (half-pixel centers,
/// edge-clamped) of a flattened `m×m` map to `h×w`.
pub(crate) fn bilinear_matrix(m: usize, h: usize, w: usize) -> Vec<f64> {
    let weights = |n_out: usize| -> Vec<[(usize, f64); 2]> {
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * m as f64 / n_out as f64 - 0.5).clamp(0.0, (m - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(m - 1);
                let t = s - i0 as f64;
                [(i0, 1.0 - t), (i1, t)]
            })
            .collect()
    };
    let (wy, wx) = (weights(h), weights(w));
    let mut u = vec![0.0; m * m * h * w];
    for (i, ry) in wy.iter().enumerate() {
        for (j, rx) in wx.iter().enumerate() {
            for &(a, fa) in ry {
                for &(b, fb) in rx {
                    u[(a * m + b) * h * w + i * w + j] += fa * fb;
                }
            }
        }
    }
    u
}
