use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Conv2d, Linear};
use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::par;

/// Subtracted from every pixel before the first convolution.
const INPUT_CENTER: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Three stride-2 3×3 convolutions (32/64/128 channels), global average
    /// pool, linear head.
    DeskCnn,
    /// Same layout with a stride-1 convolution ahead of every downsampling
    /// convolution and doubled widths.
    LargerCnn,
}

impl Backbone {
    fn layers(self) -> Vec<(usize, usize)> {
        match self {
            Backbone::DeskCnn => vec![(32, 2), (64, 2), (128, 2)],
            Backbone::LargerCnn => vec![(64, 1), (64, 2), (128, 1), (128, 2), (256, 1), (256, 2)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub backbone: Backbone,
    pub num_classes: usize,
    pub input: ImageShape,
}

impl ClassifierSpec {
    pub fn desk(num_classes: usize, input: ImageShape) -> Self {
        ClassifierSpec {
            backbone: Backbone::DeskCnn,
            num_classes,
            input,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.layers().last().map(|&(c, _)| c).unwrap_or(0)
    }
}

/// Representation a feature extractor reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureLayer {
    /// Globally pooled output of the last convolution, right before the head.
    Penultimate,
}

impl std::str::FromStr for FeatureLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penultimate" => Ok(FeatureLayer::Penultimate),
            other => Err(Error::Config(format!("unknown feature layer `{other}`"))),
        }
    }
}

struct ConvCache {
    cols: Vec<f64>,
    activated: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ClassifierTrace {
    pub logits: Vec<f64>,
    pub features: Vec<f64>,
    convs: Vec<ConvCache>,
    final_hw: usize,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    spec: ClassifierSpec,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::Config("a classifier needs at least two classes".into()));
        }
        let mut convs = Vec::new();
        let mut offset = 0;
        let mut channels = spec.input.channels;
        let (mut h, mut w) = (spec.input.height, spec.input.width);
        for (out, stride) in spec.backbone.layers() {
            let conv = Conv2d::new(channels, out, 3, stride, offset);
            offset = conv.end();
            (h, w) = conv.out_size(h, w);
            channels = out;
            convs.push(conv);
        }
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("input {} too small for the backbone", spec.input)));
        }
        let head = Linear {
            inputs: channels,
            outputs: spec.num_classes,
            offset,
        };
        Ok(Classifier { spec, convs, head })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.head.end()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Fan-in scaled normal initialization with zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.num_params()];
        for conv in &self.convs {
            conv.init(&mut params, &mut rng);
        }
        self.head.init(&mut params, &mut rng);
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

    pub fn forward(&self, params: &[f64], image: &[f64]) -> Result<ClassifierTrace> {
        self.check(params, image)?;
        let (mut h, mut w) = (self.spec.input.height, self.spec.input.width);
        let mut x: Vec<f64> = image.iter().map(|v| v - INPUT_CENTER).collect();
        let mut convs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut out, cols) = conv.forward(params, &x, h, w);
            layers::relu_inplace(&mut out);
            convs.push(ConvCache {
                cols,
                activated: out.clone(),
                in_h: h,
                in_w: w,
            });
            (h, w) = conv.out_size(h, w);
            x = out;
        }
        let channels = self.head.inputs;
        let features = layers::global_avg_pool(&x, channels);
        let logits = self.head.forward(params, &features);
        Ok(ClassifierTrace {
            logits,
            features,
            convs,
            final_hw: h * w,
        })
    }

    /// Backpropagates `dlogits`. Parameter gradients are accumulated into
    /// `grad` when given; the input gradient is returned when `need_input`.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &ClassifierTrace,
        dlogits: &[f64],
        mut grad: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let dfeat = self.head.backward(params, &trace.features, dlogits, grad.as_deref_mut());
        let mut d = layers::global_avg_pool_backward(&dfeat, trace.final_hw);
        for (i, (conv, cache)) in self.convs.iter().zip(&trace.convs).enumerate().rev() {
            layers::relu_backward(&cache.activated, &mut d);
            let want_input = i > 0 || need_input;
            match conv.backward(params, &cache.cols, cache.in_h, cache.in_w, &d, grad.as_deref_mut(), want_input) {
                Some(next) => d = next,
                None => return None,
            }
        }
        Some(d)
    }

    pub fn logits(&self, params: &[f64], image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(params, image)?.logits)
    }

    pub fn logits_batch(&self, params: &[f64], images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        par::map(images, |x| self.logits(params, x)).into_iter().collect()
    }

    pub fn extract_features(&self, params: &[f64], images: &[&[f64]], layer: FeatureLayer) -> Result<Vec<Vec<f64>>> {
        match layer {
            FeatureLayer::Penultimate => par::map(images, |x| self.forward(params, x).map(|t| t.features))
                .into_iter()
                .collect(),
        }
    }

    pub fn predict(&self, params: &[f64], image: &[f64]) -> Result<usize> {
        Ok(crate::losses::argmax(&self.logits(params, image)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::fd;
    use rand::Rng;

    fn batch(shape: ImageShape, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = crate::rng::stream(seed, "test-images", &[]);
        (0..n).map(|_| (0..shape.len()).map(|_| r.gen::<f64>()).collect()).collect()
    }

    #[test]
    fn shapes_and_zero_head() {
        let spec = ClassifierSpec::desk(5, ImageShape::new(3, 32, 32));
        let net = Classifier::new(spec).unwrap();
        let mut p = net.init_params(1);
        let x = batch(net.spec().input, 2, 0);
        assert_eq!(net.logits(&p, &x[0]).unwrap().len(), 5);
        assert!(net.logits(&p, &x[0][..10]).is_err());
        let head = &net.head;
        p[head.offset..head.offset + head.inputs * head.outputs + head.outputs].fill(0.0);
        assert!(net.logits(&p, &x[0]).unwrap().iter().all(|&v| v == 0.0));
        let f = net.extract_features(&p, &[&x[0], &x[0], &x[1]], FeatureLayer::Penultimate).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0], f[1]);
        assert_eq!(f[0].len(), net.spec().feature_dim());
        assert!("logits".parse::<FeatureLayer>().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for backbone in [Backbone::DeskCnn, Backbone::LargerCnn] {
            let shape = ImageShape::new(3, 8, 8);
            let net = Classifier::new(ClassifierSpec {
                backbone,
                num_classes: 4,
                input: shape,
            })
            .unwrap();
            let params = net.init_params(3);
            let images = batch(shape, 4, 5);
            let weights: Vec<f64> = (0..4).map(|k| 0.3 * k as f64 - 0.5).collect();
            let scalar = |p: &[f64], xs: &[Vec<f64>]| -> f64 {
                xs.iter()
                    .map(|x| net.logits(p, x).unwrap().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            };
            let mut grad = vec![0.0; params.len()];
            let mut input_grads = Vec::new();
            for x in &images {
                let trace = net.forward(&params, x).unwrap();
                input_grads.push(net.backward(&params, &trace, &weights, Some(&mut grad), true).unwrap());
            }
            let idx = fd::spread(params.len(), 60);
            let err = fd::max_rel_error(|p| scalar(p, &images), &params, &grad, &idx);
            assert!(err < 1e-4, "{backbone:?} params: {err}");
            let xi = fd::spread(shape.len(), 30);
            let err = fd::max_rel_error(
                |x| {
                    let mut xs = images.clone();
                    xs[0] = x.to_vec();
                    scalar(&params, &xs)
                },
                &images[0],
                &input_grads[0],
                &xi,
            );
            assert!(err < 1e-4, "{backbone:?} input: {err}");
        }
    }
}
