//! Frozen VGG-16 style feature extractor.

use std::path::Path;

use rand::Rng;

use crate::blocks::{Conv, Padding};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image_batch::{FeatureTap, ImageBatch};
use crate::params::{Binder, ParamStore};
use crate::tensor::Tensor;

/// Output channels of the 13 convolutions at full width.
pub const VGG16_WIDTHS: [usize; 13] = [
    64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512,
];
/// 1-based convolutions followed by 2×2 max pooling.
pub const POOL_AFTER: [usize; 5] = [2, 4, 7, 10, 13];
/// 1-based convolutions whose post-ReLU outputs are tapped.
pub const TAP_LAYERS: [usize; 5] = [1, 3, 5, 9, 13];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightsSource {
    PretrainedFile,
    SeededRandom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VggTaps {
    /// Ordered by [`TAP_LAYERS`]; `layer_id` holds the 1-based conv index.
    pub taps: Vec<FeatureTap>,
    pub weights_source: WeightsSource,
}

impl VggTaps {
    pub fn get(&self, layer: usize) -> Option<&FeatureTap> {
        self.taps.iter().find(|t| t.layer_id == layer)
    }
}

#[derive(Clone, Debug)]
pub struct Vgg16 {
    pub params: ParamStore,
    pub width_div: usize,
    pub source: WeightsSource,
    convs: Vec<Conv>,
}

impl Vgg16 {
    /// He-initialized weights with every width divided by `width_div`.
    pub fn seeded(width_div: usize, rng: &mut impl Rng) -> Result<Self> {
        if width_div == 0 || 64 % width_div != 0 {
            return Err(Error::ConfigInvalid {
                field: "vgg_width_div".into(),
                msg: format!("{width_div} must divide 64"),
            });
        }
        let mut s = ParamStore::new();
        let mut convs = Vec::with_capacity(13);
        let mut cin = 3;
        for (i, &w) in VGG16_WIDTHS.iter().enumerate() {
            let cout = w / width_div;
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let c = Conv::new(
                &mut s,
                &format!("conv{}", i + 1),
                cin,
                cout,
                3,
                1,
                1,
                Padding::Zero,
                true,
                std,
                rng,
            );
            convs.push(c);
            cin = cout;
        }
        s.freeze_all();
        Ok(Self {
            params: s,
            width_div,
            source: WeightsSource::SeededRandom,
            convs,
        })
    }

    /// Full-width weights from a container holding `conv{i}.weight` / `conv{i}.bias`, i = 1..=13.
    pub fn from_file(path: &Path, rng: &mut impl Rng) -> Result<Self> {
        let c = Container::load(path)?;
        let mut v = Self::seeded(1, rng)?;
        v.params
            .load_from(|n| c.tensor(n))
            .map_err(|e| Error::Load {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
        v.source = WeightsSource::PretrainedFile;
        Ok(v)
    }

    pub fn channels(&self) -> Vec<usize> {
        TAP_LAYERS
            .iter()
            .map(|&l| self.convs[l - 1].out_channels)
            .collect()
    }

    /// The five tapped activations; gradients reach `x` but never the weights.
    pub fn extract_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut b = Binder::frozen(&self.params);
        let mut h = x;
        if self.source == WeightsSource::PretrainedFile {
            let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 0.5 / s).collect();
            let shift: Vec<f64> = IMAGENET_MEAN
                .iter()
                .zip(IMAGENET_STD)
                .map(|(m, s)| (0.5 - m) / s)
                .collect();
            h = g.channel_affine(h, &scale, &shift)?;
        }
        let mut taps = Vec::with_capacity(5);
        for (i, conv) in self.convs.iter().enumerate() {
            let layer = i + 1;
            h = conv.forward(g, &mut b, h)?;
            h = g.relu(h);
            if TAP_LAYERS.contains(&layer) {
                taps.push(h);
            }
            if layer == 13 {
                break;
            }
            if POOL_AFTER.contains(&layer) {
                h = g.max_pool2(h)?;
            }
        }
        Ok(taps)
    }

    pub fn extract(&self, x: &ImageBatch) -> Result<VggTaps> {
        self.extract_tensor(x.tensor())
    }

    pub fn extract_tensor(&self, x: &Tensor) -> Result<VggTaps> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let taps = self.extract_graph(&mut g, xv)?;
        Ok(VggTaps {
            taps: taps
                .iter()
                .zip(TAP_LAYERS)
                .map(|(&v, l)| FeatureTap {
                    layer_id: l,
                    data: g.value(v).clone(),
                })
                .collect(),
            weights_source: self.source,
        })
    }

    /// Per-image global average of the deepest tap, `[B, C13]`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let taps = self.extract_tensor(x)?;
        let deep = &taps.taps[4].data;
        let (b, c, h, w) = deep.dims4()?;
        let hw = (h * w) as f64;
        let data = deep
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        Tensor::new(&[b, c], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn width_div_must_divide_64() {
        let mut rng = stream(0, Stream::Extractor);
        assert!(Vgg16::seeded(3, &mut rng).is_err());
        let v = Vgg16::seeded(8, &mut rng).unwrap();
        assert_eq!(v.channels(), vec![8, 16, 32, 64, 64]);
        assert_eq!(v.params.trainable_count(), 0);
    }
}
