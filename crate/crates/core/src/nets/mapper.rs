//! U-shaped encoder-decoder with concatenated skip connections.
//!
//! The decoder predicts a residual in logit space; the output is
//! `sigmoid(logit(x) + r)`, which keeps every pixel inside `(0, 1)` and makes
//! a zero output layer an exact identity on `[CLAMP, 1 - CLAMP]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Conv2d};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::par;

const CLAMP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapperInit {
    /// Zero output layer: the untrained mapper reproduces its input.
    #[default]
    Identity,
    /// Every layer randomly initialized.
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapperSpec {
    /// Number of stride-2 downsampling stages (and matching upsampling stages).
    pub depth: usize,
    pub base_channels: usize,
    pub input: ImageShape,
    #[serde(default)]
    pub init: MapperInit,
}

impl MapperSpec {
    pub fn desk(input: ImageShape) -> Self {
        MapperSpec {
            depth: 3,
            base_channels: 16,
            input,
            init: MapperInit::Identity,
        }
    }
}

struct Stage {
    cols: Vec<f64>,
    activated: Vec<f64>,
    h: usize,
    w: usize,
}

pub struct MapperTrace {
    pub output: Vec<f64>,
    input_logit_grad: Vec<f64>,
    encoders: Vec<Stage>,
    decoders: Vec<Stage>,
    out_cols: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Mapper {
    spec: MapperSpec,
    encoders: Vec<Conv2d>,
    decoders: Vec<Conv2d>,
    out: Conv2d,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Mapper {
    pub fn new(spec: MapperSpec) -> Result<Self> {
        let scale = 1usize << spec.depth;
        if spec.base_channels == 0 || spec.input.height % scale != 0 || spec.input.width % scale != 0 {
            return Err(Error::Config(format!(
                "mapper depth {} needs image sides divisible by {scale}, got {}",
                spec.depth, spec.input
            )));
        }
        let b = spec.base_channels;
        let mut offset = 0;
        let mut encoders = Vec::new();
        let first = Conv2d::new(spec.input.channels, b, 3, 1, offset);
        offset = first.end();
        encoders.push(first);
        for level in 1..=spec.depth {
            let conv = Conv2d::new(b << (level - 1), b << level, 3, 2, offset);
            offset = conv.end();
            encoders.push(conv);
        }
        let mut decoders = Vec::new();
        for level in (0..spec.depth).rev() {
            let conv = Conv2d::new((b << (level + 1)) + (b << level), b << level, 3, 1, offset);
            offset = conv.end();
            decoders.push(conv);
        }
        let out = Conv2d::new(b, spec.input.channels, 1, 1, offset);
        Ok(Mapper {
            spec,
            encoders,
            decoders,
            out,
        })
    }

    pub fn spec(&self) -> &MapperSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.out.end()
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.num_params()];
        for conv in self.encoders.iter().chain(&self.decoders) {
            conv.init(&mut params, &mut rng);
        }
        match self.spec.init {
            MapperInit::Identity => {}
            MapperInit::Random => self.out.init(&mut params, &mut rng),
        }
        params
    }

    fn check(&self, params: &[f64], image: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::shape(format!("{} parameters", self.num_params()), params.len()));
        }
        if image.len() != self.spec.input.len() {
            return Err(Error::shape(
                format!("image {} ({} values)", self.spec.input, self.spec.input.len()),
                format!("{} values", image.len()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], image: &[f64]) -> Result<MapperTrace> {
        self.check(params, image)?;
        let (mut h, mut w) = (self.spec.input.height, self.spec.input.width);
        let mut x = image.to_vec();
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for conv in &self.encoders {
            let (mut out, cols) = conv.forward(params, &x, h, w);
            layers::relu_inplace(&mut out);
            let (oh, ow) = conv.out_size(h, w);
            encoders.push(Stage {
                cols,
                activated: out.clone(),
                h,
                w,
            });
            (h, w) = (oh, ow);
            x = out;
        }
        let mut decoders = Vec::with_capacity(self.decoders.len());
        for (j, conv) in self.decoders.iter().enumerate() {
            let level = self.spec.depth - 1 - j;
            let prev_channels = self.spec.base_channels << (level + 1);
            let mut input = layers::upsample2(&x, prev_channels, h, w);
            (h, w) = (2 * h, 2 * w);
            let skip = &encoders[level].activated;
            input.extend_from_slice(skip);
            let (mut out, cols) = conv.forward(params, &input, h, w);
            layers::relu_inplace(&mut out);
            decoders.push(Stage {
                cols,
                activated: out.clone(),
                h,
                w,
            });
            x = out;
        }
        let (residual, out_cols) = self.out.forward(params, &x, h, w);
        let output = image
            .iter()
            .zip(&residual)
            .map(|(&p, &r)| sigmoid(logit(p.clamp(CLAMP, 1.0 - CLAMP)) + r))
            .collect();
        let input_logit_grad = image
            .iter()
            .map(|&p| {
                if p > CLAMP && p < 1.0 - CLAMP {
                    1.0 / (p * (1.0 - p))
                } else {
                    0.0
                }
            })
            .collect();
        Ok(MapperTrace {
            output,
            input_logit_grad,
            encoders,
            decoders,
            out_cols,
        })
    }

    /// Backpropagates `doutput` (gradient with respect to the mapped image).
    pub fn backward(
        &self,
        params: &[f64],
        trace: &MapperTrace,
        doutput: &[f64],
        mut grad: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let (h, w) = (self.spec.input.height, self.spec.input.width);
        let dres: Vec<f64> = doutput
            .iter()
            .zip(&trace.output)
            .map(|(d, z)| d * z * (1.0 - z))
            .collect();
        let mut d = self
            .out
            .backward(params, &trace.out_cols, h, w, &dres, grad.as_deref_mut(), true)
            .expect("input gradient requested");
        let mut skip_grads: Vec<Option<Vec<f64>>> = vec![None; self.encoders.len()];
        for (j, (conv, stage)) in self.decoders.iter().zip(&trace.decoders).enumerate().rev() {
            let level = self.spec.depth - 1 - j;
            layers::relu_backward(&stage.activated, &mut d);
            let dinput = conv
                .backward(params, &stage.cols, stage.h, stage.w, &d, grad.as_deref_mut(), true)
                .expect("input gradient requested");
            let prev_channels = self.spec.base_channels << (level + 1);
            let split = prev_channels * stage.h * stage.w;
            skip_grads[level] = Some(dinput[split..].to_vec());
            d = layers::upsample2_backward(&dinput[..split], prev_channels, stage.h / 2, stage.w / 2);
        }
        // `d` now holds the gradient flowing into the bottleneck activation.
        for (level, (conv, stage)) in self.encoders.iter().zip(&trace.encoders).enumerate().rev() {
            if let Some(skip) = &skip_grads[level] {
                for (a, b) in d.iter_mut().zip(skip) {
                    *a += b;
                }
            }
            layers::relu_backward(&stage.activated, &mut d);
            let want_input = level > 0 || need_input;
            match conv.backward(params, &stage.cols, stage.h, stage.w, &d, grad.as_deref_mut(), want_input) {
                Some(next) => d = next,
                None => return None,
            }
        }
        // The input also reaches the output directly through logit(x).
        for ((di, dr), dl) in d.iter_mut().zip(&dres).zip(&trace.input_logit_grad) {
            *di += dr * dl;
        }
        Some(d)
    }

    pub fn map(&self, params: &[f64], image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(params, image)?.output)
    }

    pub fn map_batch(&self, params: &[f64], images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        par::map(images, |x| self.map(params, x)).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::fd;
    use rand::Rng;

    fn batch(shape: ImageShape, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = crate::rng::stream(seed, "test-images", &[]);
        (0..n).map(|_| (0..shape.len()).map(|_| r.gen_range(0.05..0.95)).collect()).collect()
    }

    fn mapper(size: usize, init: MapperInit) -> Mapper {
        Mapper::new(MapperSpec {
            depth: 2,
            base_channels: 4,
            input: ImageShape::new(3, size, size),
            init,
        })
        .unwrap()
    }

    #[test]
    fn identity_init_reproduces_input() {
        let m = Mapper::new(MapperSpec::desk(ImageShape::new(3, 32, 32))).unwrap();
        let p = m.init_params(1);
        let x = batch(m.spec().input, 1, 2).remove(0);
        let y = m.map(&p, &x).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn shape_and_range_preserved() {
        for size in [32, 64] {
            let m = Mapper::new(MapperSpec {
                init: MapperInit::Random,
                ..MapperSpec::desk(ImageShape::new(3, size, size))
            })
            .unwrap();
            let p: Vec<f64> = m.init_params(4).iter().map(|v| v * 20.0).collect();
            let mut x = batch(m.spec().input, 1, 3).remove(0);
            x[0] = 0.0;
            x[1] = 1.0;
            let y = m.map(&p, &x).unwrap();
            assert_eq!(y.len(), x.len());
            assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(y, m.map(&p, &x).unwrap());
        }
        assert!(Mapper::new(MapperSpec::desk(ImageShape::new(3, 20, 20))).is_err());
        let m = mapper(8, MapperInit::Random);
        assert!(m.map(&m.init_params(0), &[0.5; 10]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = mapper(8, MapperInit::Random);
        let params = m.init_params(7);
        let images = batch(m.spec().input, 4, 8);
        let n = m.spec().input.len();
        let weights: Vec<f64> = (0..n).map(|k| ((k * 37) % 11) as f64 / 11.0 - 0.5).collect();
        let scalar = |p: &[f64], xs: &[Vec<f64>]| -> f64 {
            xs.iter()
                .map(|x| m.map(p, x).unwrap().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let mut grad = vec![0.0; params.len()];
        let mut input_grads = Vec::new();
        for x in &images {
            let trace = m.forward(&params, x).unwrap();
            input_grads.push(m.backward(&params, &trace, &weights, Some(&mut grad), true).unwrap());
        }
        let err = fd::max_rel_error(|p| scalar(p, &images), &params, &grad, &fd::spread(params.len(), 80));
        assert!(err < 1e-4, "params: {err}");
        let err = fd::max_rel_error(
            |x| {
                let mut xs = images.clone();
                xs[1] = x.to_vec();
                scalar(&params, &xs)
            },
            &images[1],
            &input_grads[1],
            &fd::spread(n, 40),
        );
        assert!(err < 1e-4, "input: {err}");
    }
}
