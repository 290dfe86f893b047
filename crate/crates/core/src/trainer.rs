//! Alternating discriminator/generator optimization, learning-rate schedule,
//! loss logging, sample grids and resumable checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{error, info};

use crate::checkpoint::Container;
use crate::config::TrainConfig;
use crate::data::{test_split, to_batch, Domain, UnpairedDataset};
use crate::discriminator::{Discriminator, ImageBuffer};
use crate::error::{Error, Result};
use crate::features::Vgg16;
use crate::generator::{Generator, GeneratorConfig};
use crate::graph::{Graph, Var};
use crate::image_batch::{tensor_to_rgb, ImageBatch};
use crate::losses::{
    adv_d_graph, adv_g_graph, patch_loss_graph, semantic_graph, style_graph, LossReport,
};
use crate::optim::Adam;
use crate::params::{Binder, ParamStore};
use crate::qs_attn::{select_anchors_graph, GraphBank, PatchHeads};
use crate::rng::{load_state, save_state, seed_all, stream, Stream, StreamRng};
use crate::tensor::Tensor;

/// Learning rate for 1-based `epoch`: constant through `decay_start_epoch`, then linear to zero.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::ConfigInvalid {
            field: "epoch".into(),
            msg: format!("{epoch} outside 1..={}", cfg.epochs),
        });
    }
    let ds = cfg.decay_start_epoch;
    if epoch <= ds {
        return Ok(cfg.lr);
    }
    let frac = (epoch - ds) as f64 / (cfg.epochs - ds) as f64;
    Ok(cfg.lr * (1.0 - frac))
}

/// Build the extractor the config asks for.
pub fn build_extractor(cfg: &TrainConfig) -> Result<Vgg16> {
    let mut rng = stream(cfg.seed, Stream::Extractor);
    match &cfg.vgg_weights_path {
        Some(p) => Vgg16::from_file(p, &mut rng),
        None => Vgg16::seeded(cfg.vgg_width_div, &mut rng),
    }
}

/// Channel counts of the five generator taps.
pub fn tap_channels(ngf: usize) -> [usize; 5] {
    [3, 2 * ngf, 4 * ngf, 4 * ngf, 4 * ngf]
}

/// One log entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub iteration: u64,
    pub lr: f64,
    pub report: LossReport,
}

impl StepRecord {
    pub fn line(&self) -> String {
        format!(
            "epoch={} iter={} lr={:e} {}",
            self.epoch, self.iteration, self.lr, self.report
        )
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub heads: PatchHeads,
    pub vgg: Vgg16,
    pub adam_g: Adam,
    pub adam_h: Adam,
    pub adam_d: Adam,
    pub buffer: ImageBuffer,
    pub data: UnpairedDataset,
    data_rng: StreamRng,
    contrast_rng: StreamRng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed iterations.
    pub iteration: u64,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = UnpairedDataset::from_config(&cfg)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: TrainConfig, data: UnpairedDataset) -> Result<Self> {
        cfg.validate()?;
        if data.crop_size != cfg.crop_size {
            return Err(Error::Dataset(format!(
                "dataset crops to {}, config expects {}",
                data.crop_size, cfg.crop_size
            )));
        }
        let mut bank = seed_all(cfg.seed);
        let gen = Generator::new(GeneratorConfig::from_train(&cfg), &mut bank.init)?;
        let disc = Discriminator::new(cfg.ndf, &mut bank.init);
        let heads = PatchHeads::new(&tap_channels(cfg.ngf), cfg.nce_dim, &mut bank.init);
        let vgg = build_extractor(&cfg)?;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        Ok(Self {
            adam_g: Adam::new(&gen.params, b1, b2),
            adam_h: Adam::new(&heads.params, b1, b2),
            adam_d: Adam::new(&disc.params, b1, b2),
            buffer: ImageBuffer::new(cfg.buffer_capacity, bank.buffer),
            gen,
            disc,
            heads,
            vgg,
            data,
            data_rng: bank.data,
            contrast_rng: bank.contrast,
            epoch: 0,
            iteration: 0,
            history: Vec::new(),
            cfg,
        })
    }

    fn patch_banks(
        &self,
        g: &mut Graph,
        bh: &mut Binder,
        real: &[Var],
        fake: &[Var],
        offset: usize,
        batch: usize,
    ) -> Result<Vec<GraphBank>> {
        let mut banks = Vec::with_capacity(real.len() * batch);
        for (l, (&r, &f)) in real.iter().zip(fake).enumerate() {
            let (_, _, h, w) = g.value(r).dims4()?;
            let s = self.cfg.patches_per_layer.min(h * w);
            for i in 0..batch {
                banks.push(select_anchors_graph(
                    g,
                    bh,
                    &self.heads,
                    l,
                    r,
                    f,
                    offset + i,
                    s,
                    self.cfg.anchor_source,
                )?);
            }
        }
        Ok(banks)
    }

    /// One discriminator update followed by one generator update at learning rate `lr`.
    pub fn train_step(&mut self, x: &ImageBatch, y: &ImageBatch, lr: f64) -> Result<LossReport> {
        let cfg = self.cfg.clone();
        let bsz = x.batch();
        if y.batch() != bsz {
            return Err(Error::Shape(format!(
                "x batch {bsz} vs y batch {}",
                y.batch()
            )));
        }
        if cfg.spectral_norm {
            self.gen.power_iterate();
        }
        let mut rep = LossReport::default();

        // (1) one generator pass over x and y together
        let mut g = Graph::new();
        let xy = Tensor::cat_batch(&[x.tensor(), y.tensor()])?;
        let xy = g.constant(xy);
        let mut bg = Binder::train(&self.gen.params);
        let out = self.gen.forward_graph(&mut g, &mut bg, xy)?;
        let gx = g.slice_batch(out.output, 0, bsz)?;
        let gy = g.slice_batch(out.output, bsz, bsz)?;

        // (2) discriminator step on real y against replayed fakes
        let fake = self.buffer.query(&ImageBatch::new(g.value(gx).clone())?)?;
        {
            let mut gd = Graph::new();
            let mut bd = Binder::train(&self.disc.params);
            let both = gd.constant(Tensor::cat_batch(&[y.tensor(), fake.tensor()])?);
            let logits = self.disc.forward_graph(&mut gd, &mut bd, both)?;
            let d_real = gd.slice_batch(logits, 0, bsz)?;
            let d_fake = gd.slice_batch(logits, bsz, bsz)?;
            let ld = adv_d_graph(&mut gd, d_real, d_fake, cfg.gan_mode)?;
            rep.adv_d = gd.value(ld).item();
            if !rep.adv_d.is_finite() {
                return Err(Error::NonFinite {
                    iteration: self.iteration,
                    component: "adv_d".into(),
                    value: rep.adv_d,
                });
            }
            let grads = gd.backward(ld)?;
            let gr = bd.collect(&grads);
            drop(bd);
            self.adam_d.step(&mut self.disc.params, &gr, lr);
        }

        // (3) generator step against the updated discriminator
        let mut bdf = Binder::frozen(&self.disc.params);
        let d_fake = self.disc.forward_graph(&mut g, &mut bdf, gx)?;
        let adv_g = adv_g_graph(&mut g, d_fake, cfg.gan_mode, cfg.g_adv_form)?;
        rep.adv_g = g.value(adv_g).item();

        let mut bh = Binder::train(&self.heads.params);
        let enc_in = if cfg.identity_loss {
            g.cat_batch(&[gx, gy])?
        } else {
            gx
        };
        let fake_taps = self.gen.encode_graph(&mut g, &mut bg, enc_in)?;
        let banks_x = self.patch_banks(&mut g, &mut bh, &out.taps, &fake_taps, 0, bsz)?;
        let patch_x = patch_loss_graph(&mut g, &banks_x, cfg.tau)?;
        rep.patch_x = g.value(patch_x).item();
        let mut terms = vec![adv_g, patch_x];
        if cfg.identity_loss {
            // y occupies the second half of both the real and the re-encoded batch
            let banks_y = self.patch_banks(&mut g, &mut bh, &out.taps, &fake_taps, bsz, bsz)?;
            let patch_y = patch_loss_graph(&mut g, &banks_y, cfg.tau)?;
            rep.patch_y = g.value(patch_y).item();
            terms.push(patch_y);
        }

        let p = self.data.sample(Domain::Y, bsz, &mut self.contrast_rng)?;
        let n = self.data.sample(Domain::X, bsz, &mut self.contrast_rng)?;
        if cfg.lambda_semantic > 0.0 || cfg.lambda_style > 0.0 {
            let fa = self.vgg.extract_graph(&mut g, gx)?;
            let pv = g.constant(p.into_tensor());
            let nv = g.constant(n.into_tensor());
            let fp = self.vgg.extract_graph(&mut g, pv)?;
            let fnn = self.vgg.extract_graph(&mut g, nv)?;
            if cfg.lambda_semantic > 0.0 {
                let sem = semantic_graph(&mut g, &fa, &fp, &fnn)?;
                rep.semantic = g.value(sem).item();
                terms.push(g.scale(sem, cfg.lambda_semantic));
            }
            if cfg.lambda_style > 0.0 {
                let sty = style_graph(&mut g, &fa, &fp, &fnn, cfg.alpha_style)?;
                rep.style = g.value(sty).item();
                terms.push(g.scale(sty, cfg.lambda_style));
            }
        }
        let total = g.add_all(&terms)?;
        let finite = rep.finalize(cfg.lambda_semantic, cfg.lambda_style, self.iteration);
        let grads = g.backward(total)?;
        let gg = bg.collect(&grads);
        let gh = bh.collect(&grads);
        if let Err(e) = finite {
            let norm = |v: &[(crate::params::ParamId, Tensor)]| {
                v.iter().map(|(_, t)| t.norm2().powi(2)).sum::<f64>().sqrt()
            };
            error!(
                "aborting at iteration {}: {rep}; grad norms: generator={:e} heads={:e}",
                self.iteration,
                norm(&gg),
                norm(&gh)
            );
            return Err(e);
        }
        drop((bg, bh, bdf));
        self.adam_g.step(&mut self.gen.params, &gg, lr);
        self.adam_h.step(&mut self.heads.params, &gh, lr);
        Ok(rep)
    }

    /// Draw the next pair and take one step, recording it.
    pub fn step(&mut self) -> Result<StepRecord> {
        let epoch = self.epoch + 1;
        let lr = lr_at(epoch.min(self.cfg.epochs), &self.cfg)?;
        let (x, y) = self.data.next_pair(&mut self.data_rng)?;
        let report = self.train_step(&x, &y, lr)?;
        self.iteration += 1;
        let rec = StepRecord {
            epoch,
            iteration: self.iteration,
            lr,
            report,
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Run one full epoch, appending log lines to `log` if given.
    pub fn run_epoch(&mut self, mut log: Option<&mut File>) -> Result<()> {
        for _ in 0..self.data.epoch_len() {
            let rec = self.step()?;
            let line = rec.line();
            info!("{line}");
            if let Some(f) = log.as_deref_mut() {
                writeln!(f, "{line}")?;
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Train through `cfg.epochs`, writing logs, samples and checkpoints under `out`.
    pub fn fit(&mut self, out: Option<&Path>) -> Result<()> {
        self.fit_until(self.cfg.epochs, out)
    }

    pub fn fit_until(&mut self, last_epoch: usize, out: Option<&Path>) -> Result<()> {
        let last_epoch = last_epoch.min(self.cfg.epochs);
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("loss_log.txt"))?,
                )
            }
            None => None,
        };
        let samples = match out {
            Some(_) => Some(self.sample_inputs()?),
            None => None,
        };
        while self.epoch < last_epoch {
            self.run_epoch(log.as_mut())?;
            if let Some(dir) = out {
                let e = self.epoch;
                let end = e == self.cfg.epochs;
                if e.is_multiple_of(self.cfg.sample_every) || end {
                    if let Some(s) = &samples {
                        let grid = self.sample_grid(s)?;
                        let d = dir.join("samples");
                        fs::create_dir_all(&d)?;
                        grid.save(d.join(format!("epoch_{e:04}.png")))?;
                    }
                }
                if e.is_multiple_of(self.cfg.checkpoint_every) || end {
                    let c = self.to_checkpoint();
                    c.save(&dir.join(format!("checkpoint_{e:04}.ckpt")))?;
                    c.save(&dir.join("latest.ckpt"))?;
                }
            }
        }
        Ok(())
    }

    /// The fixed set of four test inputs shown in sample grids.
    pub fn sample_inputs(&self) -> Result<ImageBatch> {
        let (xs, _) = test_split(&self.cfg)?;
        let imgs: Vec<RgbImage> = xs.into_iter().take(4).map(|(_, i)| i).collect();
        if imgs.is_empty() {
            return Err(Error::Dataset("no test images for sample grids".into()));
        }
        to_batch(&imgs, self.cfg.crop_size)
    }

    /// Inputs on the top row, translations beneath.
    pub fn sample_grid(&self, inputs: &ImageBatch) -> Result<RgbImage> {
        let out = self.gen.forward(inputs)?;
        let (n, s) = (inputs.batch() as u32, inputs.height() as u32);
        let mut grid = RgbImage::new(n * s, 2 * s);
        for i in 0..n as usize {
            let a = tensor_to_rgb(inputs.tensor(), i)?;
            let b = tensor_to_rgb(out.tensor(), i)?;
            image::imageops::replace(&mut grid, &a, (i as u32 * s) as i64, 0);
            image::imageops::replace(&mut grid, &b, (i as u32 * s) as i64, s as i64);
        }
        Ok(grid)
    }

    pub fn to_checkpoint(&self) -> Container {
        let mut c = Container::new();
        c.put_text("config", self.cfg.to_text());
        c.put_words(
            "state",
            vec![self.epoch as u64, self.iteration, self.data.cursor()],
        );
        let stores: [(&str, &ParamStore, &Adam); 3] = [
            ("gen", &self.gen.params, &self.adam_g),
            ("heads", &self.heads.params, &self.adam_h),
            ("disc", &self.disc.params, &self.adam_d),
        ];
        for (prefix, s, adam) in stores {
            for (name, p) in s.iter() {
                c.put_tensor(format!("{prefix}/{name}"), p.tensor.clone());
            }
            c.put_words(format!("adam_{prefix}/step"), vec![adam.step]);
            for (k, t) in adam.state(s) {
                c.put_tensor(format!("adam_{prefix}/{k}"), t);
            }
        }
        c.put_words("buffer/count", vec![self.buffer.len() as u64]);
        for (i, t) in self.buffer.pool().iter().enumerate() {
            c.put_tensor(format!("buffer/{i}"), t.clone());
        }
        c.put_words("rng/buffer", save_state(self.buffer.rng()));
        c.put_words("rng/data", save_state(&self.data_rng));
        c.put_words("rng/contrast", save_state(&self.contrast_rng));
        c
    }

    /// Rebuild a trainer from a checkpoint; the dataset comes from the stored config
    /// unless one is supplied.
    pub fn from_checkpoint(c: &Container, data: Option<UnpairedDataset>) -> Result<Self> {
        let cfg = TrainConfig::parse_str(c.text("config")?)?;
        let data = match data {
            Some(d) => d,
            None => UnpairedDataset::from_config(&cfg)?,
        };
        let mut t = Self::with_data(cfg, data)?;
        let state = c.words("state")?;
        if state.len() != 3 {
            return Err(Error::Checkpoint("state entry needs 3 words".into()));
        }
        t.epoch = state[0] as usize;
        t.iteration = state[1];
        t.data.set_cursor(state[2]);
        let load = |prefix: &str, s: &mut ParamStore, adam: &mut Adam| -> Result<()> {
            s.load_from(|n| c.tensor(&format!("{prefix}/{n}")))?;
            let step = c.words(&format!("adam_{prefix}/step"))?;
            let step = *step
                .first()
                .ok_or_else(|| Error::Checkpoint("empty optimizer step".into()))?;
            adam.load_state(s, step, |k| c.tensor(&format!("adam_{prefix}/{k}")))
        };
        load("gen", &mut t.gen.params, &mut t.adam_g)?;
        load("heads", &mut t.heads.params, &mut t.adam_h)?;
        load("disc", &mut t.disc.params, &mut t.adam_d)?;
        let count = c.words("buffer/count")?.first().copied().unwrap_or(0) as usize;
        let pool = (0..count)
            .map(|i| c.require_tensor(&format!("buffer/{i}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        t.buffer
            .restore(pool, load_state(c.words("rng/buffer")?)?)?;
        t.data_rng = load_state(c.words("rng/data")?)?;
        t.contrast_rng = load_state(c.words("rng/contrast")?)?;
        Ok(t)
    }

    pub fn resume(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Container::load(path)?, None)
    }
}

/// Generator and its config from a training checkpoint.
pub fn load_generator(path: &Path) -> Result<(TrainConfig, Generator)> {
    let c = Container::load(path)?;
    let cfg = TrainConfig::parse_str(c.text("config")?)?;
    let mut rng = stream(cfg.seed, Stream::Init);
    let mut gen = Generator::new(GeneratorConfig::from_train(&cfg), &mut rng)?;
    gen.params
        .load_from(|n| c.tensor(&format!("gen/{n}")))
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    Ok((cfg, gen))
}

/// Location of the most recent checkpoint in a training output directory.
pub fn latest_checkpoint(dir: &Path) -> PathBuf {
    dir.join("latest.ckpt")
}
