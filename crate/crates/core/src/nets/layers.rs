//! Per-sample layer kernels. Activations are channel-major (`C×H×W`) slices;
//! parameters live in one flat vector and each layer owns a fixed range.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches; `c`
    // is a distinct exclusive borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Start of this layer's weights in the flat parameter vector; the bias
    /// follows the weights.
    pub offset: usize,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, offset: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            offset,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn end(&self) -> usize {
        self.offset + self.param_len()
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let std = (2.0 / self.patch_len() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let (w, b) = params[self.offset..self.end()].split_at_mut(self.weight_len());
        w.iter_mut().for_each(|v| *v = normal.sample(rng));
        b.iter_mut().for_each(|v| *v = 0.0);
    }

    fn im2col(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let positions = oh * ow;
        let mut cols = vec![0.0; self.patch_len() * positions];
        for c in 0..self.in_channels {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let positions = oh * ow;
        let mut out = vec![0.0; self.in_channels * h * w];
        for c in 0..self.in_channels {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the pre-activation output and the im2col buffer needed by
    /// [`Conv2d::backward`].
    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(input.len(), self.in_channels * h * w);
        let (oh, ow) = self.out_size(h, w);
        let positions = oh * ow;
        let cols = self.im2col(input, h, w);
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.end()];
        let mut out = vec![0.0; self.out_channels * positions];
        for (o, chunk) in out.chunks_mut(positions).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[o]);
        }
        let pl = self.patch_len();
        gemm(self.out_channels, pl, positions, weights, (pl, 1), &cols, (positions, 1), 1.0, &mut out);
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns
    /// the gradient with respect to the input (when requested).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        cols: &[f64],
        h: usize,
        w: usize,
        dout: &[f64],
        grad: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let (oh, ow) = self.out_size(h, w);
        let positions = oh * ow;
        let pl = self.patch_len();
        if let Some(grad) = grad {
            let (gw, gb) = grad[self.offset..self.end()].split_at_mut(self.weight_len());
            gemm(self.out_channels, positions, pl, dout, (positions, 1), cols, (1, positions), 1.0, gw);
            for (o, chunk) in dout.chunks(positions).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let mut dcols = vec![0.0; pl * positions];
        gemm(pl, self.out_channels, positions, weights, (1, pl), dout, (positions, 1), 0.0, &mut dcols);
        Some(self.col2im(&dcols, h, w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl Linear {
    pub fn param_len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    pub fn end(&self) -> usize {
        self.offset + self.param_len()
    }

    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        let std = (1.0 / self.inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let wl = self.inputs * self.outputs;
        let (w, b) = params[self.offset..self.end()].split_at_mut(wl);
        w.iter_mut().for_each(|v| *v = normal.sample(rng));
        b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let wl = self.inputs * self.outputs;
        let w = &params[self.offset..self.offset + wl];
        let b = &params[self.offset + wl..self.end()];
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dout: &[f64], grad: Option<&mut [f64]>) -> Vec<f64> {
        let wl = self.inputs * self.outputs;
        if let Some(grad) = grad {
            let (gw, gb) = grad[self.offset..self.end()].split_at_mut(wl);
            for (o, &d) in dout.iter().enumerate() {
                for (g, xi) in gw[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(x) {
                    *g += d * xi;
                }
                gb[o] += d;
            }
        }
        let w = &params[self.offset..self.offset + wl];
        let mut dx = vec![0.0; self.inputs];
        for (o, &d) in dout.iter().enumerate() {
            for (dxi, wi) in dx.iter_mut().zip(&w[o * self.inputs..(o + 1) * self.inputs]) {
                *dxi += d * wi;
            }
        }
        dx
    }
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` by the derivative of ReLU evaluated at its output.
pub(crate) fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn global_avg_pool(x: &[f64], channels: usize) -> Vec<f64> {
    let hw = x.len() / channels;
    x.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
}

pub(crate) fn global_avg_pool_backward(dout: &[f64], hw: usize) -> Vec<f64> {
    dout.iter().flat_map(|&d| std::iter::repeat(d / hw as f64).take(hw)).collect()
}

/// Nearest-neighbour ×2 upsampling.
pub(crate) fn upsample2(x: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for y in 0..oh {
            for xx in 0..ow {
                out[(c * oh + y) * ow + xx] = x[(c * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(c * h + y / 2) * w + xx / 2] += dout[(c * oh + y) * ow + xx];
            }
        }
    }
    dx
}
