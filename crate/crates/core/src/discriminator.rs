//! 70×70 PatchGAN discriminator and the generated-image history buffer.

use rand::Rng;

use crate::blocks::{Conv, InstanceNorm, Padding, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image_batch::ImageBatch;
use crate::params::{Binder, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Raw realness scores `[B, 1, h, w]`, one per receptive-field patch.
pub type PatchLogits = Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub ndf: usize,
    pub params: ParamStore,
    layers: Vec<(Conv, Option<InstanceNorm>)>,
}

impl Discriminator {
    pub fn new(ndf: usize, rng: &mut impl Rng) -> Self {
        let mut s = ParamStore::new();
        let widths = [3, ndf, 2 * ndf, 4 * ndf, 8 * ndf, 1];
        let strides = [2, 2, 2, 1, 1];
        let mut layers = Vec::new();
        for i in 0..5 {
            let name = format!("d.conv{}", i + 1);
            let middle = i > 0 && i < 4;
            let conv = Conv::new(
                &mut s,
                &name,
                widths[i],
                widths[i + 1],
                4,
                strides[i],
                1,
                Padding::Zero,
                !middle,
                INIT_STD,
                rng,
            );
            let norm = middle
                .then(|| InstanceNorm::new(&mut s, &format!("{name}_norm"), widths[i + 1], false));
            layers.push((conv, norm));
        }
        Self {
            ndf,
            params: s,
            layers,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Conv> {
        self.layers.iter().map(|(c, _)| c)
    }

    pub fn forward_graph(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (conv, norm)) in self.layers.iter().enumerate() {
            h = conv.forward(g, b, h)?;
            if let Some(n) = norm {
                h = n.forward(g, b, h)?;
            }
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &ImageBatch) -> Result<PatchLogits> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let xv = g.constant(x.tensor().clone());
        let out = self.forward_graph(&mut g, &mut b, xv)?;
        Ok(g.value(out).clone())
    }
}

/// Output side length of the stack for a square `size` input.
pub fn patch_grid_size(size: usize) -> Option<usize> {
    [2, 2, 2, 1, 1].iter().try_fold(size, |s, &st| {
        let padded = s + 2;
        (padded >= 4).then(|| (padded - 4) / st + 1)
    })
}

/// Pool of past generated images replayed to the discriminator.
#[derive(Clone, Debug)]
pub struct ImageBuffer {
    pub capacity: usize,
    pool: Vec<Tensor>,
    rng: StreamRng,
}

impl ImageBuffer {
    pub fn new(capacity: usize, rng: StreamRng) -> Self {
        Self {
            capacity,
            pool: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    pub fn pool(&self) -> &[Tensor] {
        &self.pool
    }

    pub fn rng(&self) -> &StreamRng {
        &self.rng
    }

    /// Replace pool contents and RNG, as when resuming.
    pub fn restore(&mut self, pool: Vec<Tensor>, rng: StreamRng) -> Result<()> {
        if pool.len() > self.capacity {
            return Err(Error::Checkpoint(format!(
                "buffer holds {} images, capacity {}",
                pool.len(),
                self.capacity
            )));
        }
        self.pool = pool;
        self.rng = rng;
        Ok(())
    }

    /// Per image: fill the pool while it has room, afterwards swap with a random
    /// pooled image half of the time.
    pub fn query(&mut self, fresh: &ImageBatch) -> Result<ImageBatch> {
        let mut out = Vec::with_capacity(fresh.batch());
        for i in 0..fresh.batch() {
            let img = fresh.tensor().batch_item(i);
            if self.capacity == 0 {
                out.push(img);
            } else if self.pool.len() < self.capacity {
                self.pool.push(img.clone());
                out.push(img);
            } else if self.rng.random::<f64>() < 0.5 {
                let j = self.rng.random_range(0..self.pool.len());
                out.push(std::mem::replace(&mut self.pool[j], img));
            } else {
                out.push(img);
            }
        }
        let refs: Vec<&Tensor> = out.iter().collect();
        ImageBatch::new(Tensor::cat_batch(&refs)?)
    }
}
