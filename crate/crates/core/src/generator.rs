//! ResNet encoder-decoder generator with SN residual blocks, frequency channel
//! attention in the bottleneck and five tapped encoder features.

use image::RgbImage;
use rand::Rng;

use crate::blocks::{Conv, Fca, FcaConfig, InstanceNorm, Padding, SnConv, SnResBlock, INIT_STD};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image_batch::{tensor_to_rgb, FeatureTap, ImageBatch};
use crate::params::{normal_init, Binder, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FCA_GROUPS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub ngf: usize,
    pub n_resblocks: usize,
    pub use_fca: bool,
    pub spectral_norm: bool,
    /// Input height and width; fixes the FCA bases at `H/4 × W/4`.
    pub height: usize,
    pub width: usize,
}

impl GeneratorConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            ngf: cfg.ngf,
            n_resblocks: cfg.n_resblocks,
            use_fca: cfg.use_fca,
            spectral_norm: cfg.spectral_norm,
            height: cfg.crop_size,
            width: cfg.crop_size,
        }
    }

    /// Full-width layout for `size × size` inputs.
    pub fn standard(size: usize) -> Self {
        Self {
            ngf: 64,
            n_resblocks: 9,
            use_fca: true,
            spectral_norm: true,
            height: size,
            width: size,
        }
    }

    /// Index of the residual block whose output is tap 4.
    pub fn deep_tap_block(&self) -> usize {
        self.n_resblocks.min(5) - 1
    }
}

/// Five encoder features: RGB input, both downsampling stages, residual block 1
/// and residual block 5 (the last block when there are fewer).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorTaps {
    pub taps: Vec<FeatureTap>,
}

/// Graph handles produced by one generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    pub output: Var,
    pub taps: Vec<Var>,
    pub bottleneck: Var,
}

#[derive(Clone, Debug)]
struct UpConv {
    weight: ParamId,
    norm: InstanceNorm,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: ParamStore,
    stem: Conv,
    stem_norm: InstanceNorm,
    down: Vec<(Conv, InstanceNorm)>,
    blocks: Vec<SnResBlock>,
    fca: Option<Fca>,
    up: Vec<UpConv>,
    head: Conv,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_resblocks == 0 || cfg.ngf == 0 {
            return Err(Error::ConfigInvalid {
                field: "n_resblocks".into(),
                msg: "generator needs at least one residual block and channel".into(),
            });
        }
        if !cfg.height.is_multiple_of(4) || !cfg.width.is_multiple_of(4) || cfg.height < 16 || cfg.width < 16 {
            return Err(Error::Shape(format!(
                "generator size {}x{} must be >= 16 and divisible by 4",
                cfg.height, cfg.width
            )));
        }
        let mut s = ParamStore::new();
        let ngf = cfg.ngf;
        let stem = Conv::new(
            &mut s,
            "g.stem",
            3,
            ngf,
            7,
            1,
            3,
            Padding::Reflect,
            false,
            INIT_STD,
            rng,
        );
        let stem_norm = InstanceNorm::new(&mut s, "g.stem_norm", ngf, true);
        let mut down = Vec::new();
        for i in 0..2 {
            let (ci, co) = (ngf << i, ngf << (i + 1));
            let name = format!("g.down{}", i + 1);
            let c = Conv::new(
                &mut s,
                &name,
                ci,
                co,
                3,
                2,
                1,
                Padding::Reflect,
                false,
                INIT_STD,
                rng,
            );
            down.push((
                c,
                InstanceNorm::new(&mut s, &format!("{name}_norm"), co, true),
            ));
        }
        let width = 4 * ngf;
        let blocks = (0..cfg.n_resblocks)
            .map(|i| {
                SnResBlock::new(
                    &mut s,
                    &format!("g.res{}", i + 1),
                    width,
                    cfg.spectral_norm,
                    rng,
                )
            })
            .collect();
        let fca = if cfg.use_fca {
            Some(Fca::new(
                &mut s,
                "g.fca",
                width,
                cfg.height / 4,
                cfg.width / 4,
                FcaConfig::lowest(FCA_GROUPS),
                rng,
            )?)
        } else {
            None
        };
        let mut up = Vec::new();
        for i in 0..2 {
            let (ci, co) = (width >> i, width >> (i + 1));
            let name = format!("g.up{}", i + 1);
            let weight = s.add(
                format!("{name}.weight"),
                normal_init(&[ci, co, 3, 3], INIT_STD, rng),
                true,
            );
            up.push(UpConv {
                weight,
                norm: InstanceNorm::new(&mut s, &format!("{name}_norm"), co, true),
            });
        }
        let head = Conv::new(
            &mut s,
            "g.head",
            ngf,
            3,
            7,
            1,
            3,
            Padding::Reflect,
            true,
            INIT_STD,
            rng,
        );
        Ok(Self {
            cfg,
            params: s,
            stem,
            stem_norm,
            down,
            blocks,
            fca,
            up,
            head,
        })
    }

    pub fn sn_convs(&self) -> Vec<&SnConv> {
        self.blocks.iter().flat_map(|b| b.sn_convs()).collect()
    }

    pub fn blocks(&self) -> &[SnResBlock] {
        &self.blocks
    }

    pub fn fca(&self) -> Option<&Fca> {
        self.fca.as_ref()
    }

    /// One power-iteration round for every spectral-normalized convolution.
    pub fn power_iterate(&mut self) {
        let convs: Vec<SnConv> = self.sn_convs().into_iter().cloned().collect();
        for c in convs {
            c.power_iterate(&mut self.params, 1);
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "generator input {:?} must be [B, 3, H, W] with H, W divisible by 4",
                g.shape(x)
            )));
        }
        Ok(())
    }

    fn encode_prefix(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        x: Var,
        stop_at_taps: bool,
    ) -> Result<(Vec<Var>, Var)> {
        self.check_input(g, x)?;
        let mut taps = vec![x];
        let h = self.stem.forward(g, b, x)?;
        let h = self.stem_norm.forward(g, b, h)?;
        let mut h = g.relu(h);
        for (conv, norm) in &self.down {
            h = conv.forward(g, b, h)?;
            h = norm.forward(g, b, h)?;
            h = g.relu(h);
            taps.push(h);
        }
        let deep = self.cfg.deep_tap_block();
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.forward(g, b, h)?;
            if i == 0 || i == deep {
                if i == 0 && i == deep {
                    taps.push(h);
                }
                taps.push(h);
            }
            if stop_at_taps && i == deep {
                break;
            }
        }
        Ok((taps, h))
    }

    /// Full translation pass, returning the output image, the taps and the bottleneck.
    pub fn forward_graph(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<GeneratorVars> {
        let (taps, mut h) = self.encode_prefix(g, b, x, false)?;
        if let Some(fca) = &self.fca {
            h = fca.forward(g, b, h)?;
        }
        let bottleneck = h;
        for u in &self.up {
            let w = b.var(g, u.weight);
            h = g.conv_transpose2d(h, w, None, 2, 1, 1)?;
            h = u.norm.forward(g, b, h)?;
            h = g.relu(h);
        }
        let h = self.head.forward(g, b, h)?;
        let output = g.tanh(h);
        Ok(GeneratorVars {
            output,
            taps,
            bottleneck,
        })
    }

    /// Encoder taps only, stopping after the deepest tapped block.
    pub fn encode_graph(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Vec<Var>> {
        Ok(self.encode_prefix(g, b, x, true)?.0)
    }

    pub fn forward(&self, x: &ImageBatch) -> Result<ImageBatch> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let xv = g.constant(x.tensor().clone());
        let out = self.forward_graph(&mut g, &mut b, xv)?;
        ImageBatch::new(g.value(out.output).clone())
    }

    /// Translate one 8-bit image.
    pub fn translate(&self, img: &RgbImage) -> Result<RgbImage> {
        let out = self.forward(&ImageBatch::from_rgb(img)?)?;
        tensor_to_rgb(out.tensor(), 0)
    }

    pub fn encode_with_taps(&self, x: &ImageBatch) -> Result<GeneratorTaps> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let xv = g.constant(x.tensor().clone());
        let taps = self.encode_graph(&mut g, &mut b, xv)?;
        Ok(GeneratorTaps {
            taps: taps
                .into_iter()
                .enumerate()
                .map(|(i, v)| FeatureTap {
                    layer_id: i,
                    data: g.value(v).clone(),
                })
                .collect(),
        })
    }

    /// Bottleneck features after the residual blocks and attention.
    pub fn bottleneck(&self, x: &ImageBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let xv = g.constant(x.tensor().clone());
        let (_, mut h) = self.encode_prefix(&mut g, &mut b, xv, false)?;
        if let Some(fca) = &self.fca {
            h = fca.forward(&mut g, &mut b, h)?;
        }
        Ok(g.value(h).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            ngf: 8,
            n_resblocks: n,
            use_fca: true,
            spectral_norm: true,
            height: 32,
            width: 32,
        }
    }

    #[test]
    fn single_block_fills_both_deep_taps() {
        let mut rng = stream(0, Stream::Init);
        let gen = Generator::new(small(1), &mut rng).unwrap();
        let x = ImageBatch::new(Tensor::from_fn(&[1, 3, 32, 32], |i| {
            ((i as f64) * 0.1).sin()
        }))
        .unwrap();
        let t = gen.encode_with_taps(&x).unwrap();
        assert_eq!(t.taps.len(), 5);
        assert_eq!(t.taps[3].data, t.taps[4].data);
    }

    #[test]
    fn fca_rejects_other_sizes() {
        let mut rng = stream(0, Stream::Init);
        let gen = Generator::new(small(2), &mut rng).unwrap();
        let x = ImageBatch::new(Tensor::zeros(&[1, 3, 48, 48])).unwrap();
        assert!(matches!(gen.forward(&x), Err(Error::Shape(_))));
        assert_eq!(gen.encode_with_taps(&x).unwrap().taps.len(), 5);
    }
}
