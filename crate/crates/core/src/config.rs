//! Training configuration: flat `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanMode {
    Logistic,
    LeastSquares,
}

/// Generator side of the logistic objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenAdvForm {
    /// Minimize `E log(1 - D(G(x)))`.
    Saturating,
    /// Minimize `-E log D(G(x))`.
    NonSaturating,
}

/// Which image's features rank the anchor positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorSource {
    Generated,
    Input,
}

macro_rules! named_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok(<$t>::$v),)+
                    _ => Err(format!("unknown value `{s}`, expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
        impl $t {
            pub fn as_str(&self) -> &'static str {
                match self { $(<$t>::$v => $s,)+ }
            }
        }
    };
}

named_enum!(GanMode { Logistic => "logistic", LeastSquares => "least_squares" });
named_enum!(GenAdvForm { Saturating => "saturating", NonSaturating => "non_saturating" });
named_enum!(AnchorSource { Generated => "generated", Input => "input" });

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub load_size: usize,
    pub crop_size: usize,
    pub flip: bool,
    pub tau: f64,
    pub alpha_style: f64,
    pub lambda_semantic: f64,
    pub lambda_style: f64,
    pub identity_loss: bool,
    pub patches_per_layer: usize,
    pub nce_dim: usize,
    pub anchor_source: AnchorSource,
    pub n_resblocks: usize,
    pub ngf: usize,
    pub ndf: usize,
    pub use_fca: bool,
    pub spectral_norm: bool,
    pub buffer_capacity: usize,
    pub seed: u64,
    pub gan_mode: GanMode,
    pub g_adv_form: GenAdvForm,
    pub vgg_width_div: usize,
    pub vgg_weights_path: Option<PathBuf>,
    /// Dataset root with `trainA`/`trainB`/`testA`/`testB`; synthetic shapes when unset.
    pub dataroot: Option<PathBuf>,
    pub synthetic_n: usize,
    pub synthetic_test_n: usize,
    pub synthetic_size: usize,
    pub checkpoint_every: usize,
    pub sample_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            decay_start_epoch: 200,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 1,
            load_size: 286,
            crop_size: 256,
            flip: true,
            tau: 0.07,
            alpha_style: 0.04,
            lambda_semantic: 1.0,
            lambda_style: 0.5,
            identity_loss: true,
            patches_per_layer: 256,
            nce_dim: 256,
            anchor_source: AnchorSource::Generated,
            n_resblocks: 9,
            ngf: 64,
            ndf: 64,
            use_fca: true,
            spectral_norm: true,
            buffer_capacity: 50,
            seed: 0,
            gan_mode: GanMode::Logistic,
            g_adv_form: GenAdvForm::Saturating,
            vgg_width_div: 1,
            vgg_weights_path: None,
            dataroot: None,
            synthetic_n: 100,
            synthetic_test_n: 16,
            synthetic_size: 64,
            checkpoint_every: 10,
            sample_every: 10,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl TrainConfig {
    /// Every recognized key, in canonical order.
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "decay_start_epoch",
        "lr",
        "adam_beta1",
        "adam_beta2",
        "batch_size",
        "load_size",
        "crop_size",
        "flip",
        "tau",
        "alpha_style",
        "lambda_semantic",
        "lambda_style",
        "identity_loss",
        "patches_per_layer",
        "nce_dim",
        "anchor_source",
        "n_resblocks",
        "ngf",
        "ndf",
        "use_fca",
        "spectral_norm",
        "buffer_capacity",
        "seed",
        "gan_mode",
        "g_adv_form",
        "vgg_width_div",
        "vgg_weights_path",
        "dataroot",
        "synthetic_n",
        "synthetic_test_n",
        "synthetic_size",
        "checkpoint_every",
        "sample_every",
    ];

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "epochs" => self.epochs = parse(v)?,
            "decay_start_epoch" => self.decay_start_epoch = parse(v)?,
            "lr" => self.lr = parse(v)?,
            "adam_beta1" => self.adam_beta1 = parse(v)?,
            "adam_beta2" => self.adam_beta2 = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "load_size" => self.load_size = parse(v)?,
            "crop_size" => self.crop_size = parse(v)?,
            "flip" => self.flip = parse_bool(v)?,
            "tau" => self.tau = parse(v)?,
            "alpha_style" => self.alpha_style = parse(v)?,
            "lambda_semantic" => self.lambda_semantic = parse(v)?,
            "lambda_style" => self.lambda_style = parse(v)?,
            "identity_loss" => self.identity_loss = parse_bool(v)?,
            "patches_per_layer" => self.patches_per_layer = parse(v)?,
            "nce_dim" => self.nce_dim = parse(v)?,
            "anchor_source" => self.anchor_source = v.parse()?,
            "n_resblocks" => self.n_resblocks = parse(v)?,
            "ngf" => self.ngf = parse(v)?,
            "ndf" => self.ndf = parse(v)?,
            "use_fca" => self.use_fca = parse_bool(v)?,
            "spectral_norm" => self.spectral_norm = parse_bool(v)?,
            "buffer_capacity" => self.buffer_capacity = parse(v)?,
            "seed" => self.seed = parse(v)?,
            "gan_mode" => self.gan_mode = v.parse()?,
            "g_adv_form" => self.g_adv_form = v.parse()?,
            "vgg_width_div" => self.vgg_width_div = parse(v)?,
            "vgg_weights_path" => self.vgg_weights_path = parse_path(v),
            "dataroot" => self.dataroot = parse_path(v),
            "synthetic_n" => self.synthetic_n = parse(v)?,
            "synthetic_test_n" => self.synthetic_test_n = parse(v)?,
            "synthetic_size" => self.synthetic_size = parse(v)?,
            "checkpoint_every" => self.checkpoint_every = parse(v)?,
            "sample_every" => self.sample_every = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Text form of one key's value.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "decay_start_epoch" => self.decay_start_epoch.to_string(),
            "lr" => self.lr.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "load_size" => self.load_size.to_string(),
            "crop_size" => self.crop_size.to_string(),
            "flip" => self.flip.to_string(),
            "tau" => self.tau.to_string(),
            "alpha_style" => self.alpha_style.to_string(),
            "lambda_semantic" => self.lambda_semantic.to_string(),
            "lambda_style" => self.lambda_style.to_string(),
            "identity_loss" => self.identity_loss.to_string(),
            "patches_per_layer" => self.patches_per_layer.to_string(),
            "nce_dim" => self.nce_dim.to_string(),
            "anchor_source" => self.anchor_source.as_str().into(),
            "n_resblocks" => self.n_resblocks.to_string(),
            "ngf" => self.ngf.to_string(),
            "ndf" => self.ndf.to_string(),
            "use_fca" => self.use_fca.to_string(),
            "spectral_norm" => self.spectral_norm.to_string(),
            "buffer_capacity" => self.buffer_capacity.to_string(),
            "seed" => self.seed.to_string(),
            "gan_mode" => self.gan_mode.as_str().into(),
            "g_adv_form" => self.g_adv_form.as_str().into(),
            "vgg_width_div" => self.vgg_width_div.to_string(),
            "vgg_weights_path" => path(&self.vgg_weights_path),
            "dataroot" => path(&self.dataroot),
            "synthetic_n" => self.synthetic_n.to_string(),
            "synthetic_test_n" => self.synthetic_test_n.to_string(),
            "synthetic_size" => self.synthetic_size.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "sample_every" => self.sample_every.to_string(),
            _ => return None,
        })
    }

    /// Parse config text. Missing keys keep their defaults; the result is validated.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())
                .map_err(|msg| Error::ConfigParse { line: i + 1, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a `key=value` override, then re-validate.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        self.apply_overrides(&[kv])
    }

    /// Apply several overrides, validating once after all of them.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, kvs: &[S]) -> Result<()> {
        for kv in kvs {
            let kv = kv.as_ref();
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: 0,
                msg: format!("override `{kv}` is not `key=value`"),
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|msg| Error::ConfigParse { line: 0, msg })?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap());
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(Error::ConfigInvalid {
                field: field.into(),
                msg,
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.decay_start_epoch > self.epochs {
            return bad(
                "decay_start_epoch",
                format!(
                    "{} exceeds epochs = {}",
                    self.decay_start_epoch, self.epochs
                ),
            );
        }
        if self.crop_size > self.load_size {
            return bad(
                "crop_size",
                format!("{} exceeds load_size = {}", self.crop_size, self.load_size),
            );
        }
        if self.crop_size < 16 || !self.crop_size.is_multiple_of(4) {
            return bad(
                "crop_size",
                format!("{} must be >= 16 and divisible by 4", self.crop_size),
            );
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", format!("{} must be finite and >= 0", self.lr));
        }
        for (f, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(f, format!("{b} must lie in [0, 1)"));
            }
        }
        for (f, v) in [("tau", self.tau), ("alpha_style", self.alpha_style)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(f, format!("{v} must be > 0"));
            }
        }
        // zero weights switch a regularizer off
        for (f, v) in [
            ("lambda_semantic", self.lambda_semantic),
            ("lambda_style", self.lambda_style),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(f, format!("{v} must be >= 0"));
            }
        }
        for (f, v) in [
            ("batch_size", self.batch_size),
            ("patches_per_layer", self.patches_per_layer),
            ("nce_dim", self.nce_dim),
            ("n_resblocks", self.n_resblocks),
            ("ngf", self.ngf),
            ("ndf", self.ndf),
            ("vgg_width_div", self.vgg_width_div),
            ("synthetic_n", self.synthetic_n),
            ("synthetic_test_n", self.synthetic_test_n),
            ("checkpoint_every", self.checkpoint_every),
            ("sample_every", self.sample_every),
        ] {
            if v == 0 {
                return bad(f, "must be at least 1".into());
            }
        }
        if self.use_fca && !(self.ngf * 4).is_multiple_of(16) {
            return bad(
                "ngf",
                format!(
                    "4 * ngf = {} must be divisible by 16 FCA groups",
                    self.ngf * 4
                ),
            );
        }
        if self.use_fca && self.crop_size / 4 < 6 {
            return bad(
                "crop_size",
                "bottleneck must be at least 6x6 to hold the FCA frequencies".into(),
            );
        }
        if self.synthetic_size < 16 {
            return bad("synthetic_size", "must be at least 16".into());
        }
        if 64 % self.vgg_width_div != 0 {
            return bad("vgg_width_div", "must divide 64".into());
        }
        Ok(())
    }
}

/// Read and validate a config file.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    TrainConfig::parse_str(&text)
}
