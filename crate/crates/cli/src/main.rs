use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use sndcr_core::config::{load_config, TrainConfig};
use sndcr_core::data::{load_folder, make_synthetic, resize_square, to_batch};
use sndcr_core::features::Vgg16;
use sndcr_core::image_batch::RgbImage;
use sndcr_core::metrics::{fid_images, ssim, swd};
use sndcr_core::rng::{keyed, stream, Stream};
use sndcr_core::selfcheck::{self, Fault, Options};
use sndcr_core::trainer::{load_generator, Trainer};
use sndcr_core::Error;

const EXIT_SELFCHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "sndcr", version, about = "Unpaired image-to-image translation")]
struct Cli {
    /// Seed for every stochastic step; falls back to SNDCR_SEED, then the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a translator from a config file.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Override a config key, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every image in a folder.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two image folders.
    Evaluate {
        #[arg(long = "set-a")]
        set_a: PathBuf,
        #[arg(long = "set-b")]
        set_b: PathBuf,
        #[arg(long)]
        fid: bool,
        #[arg(long)]
        swd: bool,
        #[arg(long)]
        ssim: bool,
        /// Side length images are resized to.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Channel divisor of the seeded extractor.
        #[arg(long, default_value_t = 16)]
        width_div: usize,
        /// Extractor weights container instead of the seeded extractor.
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        projections: usize,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render the circles/squares toy dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run the invariant suite.
    Selfcheck {
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true, value_parser = ["gram"])]
        inject_fault: Option<String>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl ToString) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.to_string(),
        }
    }

    fn runtime(msg: impl ToString) -> Self {
        Self {
            code: EXIT_RUNTIME,
            msg: msg.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var("SNDCR_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("SNDCR_SEED `{v}` is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn effective_seed(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    Ok(match flag {
        Some(s) => Some(s),
        None => env_seed()?,
    })
}

fn cmd_train(
    config: Option<&Path>,
    overrides: &[String],
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
) -> CmdResult {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt).map_err(|e| match e {
            Error::Load { .. } | Error::Checkpoint(_) => Failure::usage(e),
            other => Failure::runtime(other),
        })?,
        None => {
            let config = config.ok_or_else(|| Failure::usage("--config is required"))?;
            let mut cfg = load_config(config).map_err(Failure::usage)?;
            let mut all: Vec<String> = Vec::new();
            if let Some(s) = env_seed()? {
                all.push(format!("seed={s}"));
            }
            all.extend(overrides.iter().cloned());
            if let Some(s) = seed {
                all.push(format!("seed={s}"));
            }
            cfg.apply_overrides(&all).map_err(Failure::usage)?;
            Trainer::new(cfg).map_err(|e| match e {
                Error::ConfigInvalid { .. } | Error::ConfigParse { .. } => Failure::usage(e),
                other => Failure::runtime(other),
            })?
        }
    };
    fs::create_dir_all(out).map_err(Failure::runtime)?;
    trainer
        .cfg
        .save(&out.join("config.txt"))
        .map_err(Failure::runtime)?;
    info!(
        "training {} epochs of {} iterations into {}",
        trainer.cfg.epochs,
        trainer.data.epoch_len(),
        out.display()
    );
    trainer.fit(Some(out)).map_err(Failure::runtime)?;
    println!(
        "finished {} iterations; checkpoint {}",
        trainer.iteration,
        out.join("latest.ckpt").display()
    );
    Ok(())
}

fn cmd_translate(checkpoint: &Path, input: &Path, out: &Path) -> CmdResult {
    if !checkpoint.is_file() {
        return Err(Failure::usage(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    let (cfg, gen) = load_generator(checkpoint).map_err(Failure::usage)?;
    if !input.is_dir() {
        return Err(Failure::usage(format!(
            "input {} is not a directory",
            input.display()
        )));
    }
    let images = load_folder(input).map_err(Failure::runtime)?;
    if images.is_empty() {
        warn!("no images in {}", input.display());
    }
    fs::create_dir_all(out).map_err(Failure::runtime)?;
    for (name, img) in &images {
        let img = resize_square(img, cfg.crop_size);
        let translated = gen.translate(&img).map_err(Failure::runtime)?;
        translated.save(out.join(name)).map_err(Failure::runtime)?;
    }
    println!("translated {} images into {}", images.len(), out.display());
    Ok(())
}

fn extractor(
    weights: Option<&Path>,
    width_div: usize,
    seed: u64,
) -> Result<(Vgg16, String), Failure> {
    let mut rng = stream(seed, Stream::Extractor);
    match weights {
        Some(p) => {
            let v = Vgg16::from_file(p, &mut rng).map_err(Failure::usage)?;
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((v, format!("vgg16-file-{name}")))
        }
        None => {
            let v = Vgg16::seeded(width_div, &mut rng).map_err(Failure::usage)?;
            Ok((v, format!("vgg16-seeded-w{width_div}-s{seed}")))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    set_a: &Path,
    set_b: &Path,
    metrics: (bool, bool, bool),
    size: usize,
    width_div: usize,
    weights: Option<&Path>,
    projections: usize,
    report: Option<&Path>,
    csv: Option<&Path>,
    seed: u64,
) -> CmdResult {
    let (mut want_fid, mut want_swd, want_ssim) = metrics;
    if !want_fid && !want_swd && !want_ssim {
        want_fid = true;
        want_swd = true;
    }
    let load = |d: &Path| -> Result<BTreeMap<String, RgbImage>, Failure> {
        if !d.is_dir() {
            return Err(Failure::usage(format!(
                "{} is not a directory",
                d.display()
            )));
        }
        Ok(load_folder(d)
            .map_err(Failure::runtime)?
            .into_iter()
            .map(|(n, i)| (n, resize_square(&i, size)))
            .collect())
    };
    let a = load(set_a)?;
    let b = load(set_b)?;
    if want_ssim && (a.len() != b.len() || a.keys().ne(b.keys())) {
        return Err(Failure::usage("SSIM needs both sets aligned by filename"));
    }
    let av: Vec<_> = a.values().cloned().collect();
    let bv: Vec<_> = b.values().cloned().collect();
    let (vgg, extractor_id) = extractor(weights, width_div, seed)?;
    let mut rows: Vec<(&str, f64)> = Vec::new();
    if want_fid {
        rows.push(("fid", fid_images(&vgg, &av, &bv).map_err(Failure::runtime)?));
    }
    if want_swd {
        let ta = to_batch(&av, size).map_err(Failure::runtime)?;
        let tb = to_batch(&bv, size).map_err(Failure::runtime)?;
        let mut rng = keyed(seed, Stream::Metrics, 0);
        let v = swd(ta.tensor(), tb.tensor(), projections, &mut rng).map_err(Failure::runtime)?;
        rows.push(("swd", v));
    }
    if want_ssim {
        let ta = to_batch(&av, size).map_err(Failure::runtime)?;
        let tb = to_batch(&bv, size).map_err(Failure::runtime)?;
        rows.push((
            "ssim",
            ssim(ta.tensor(), tb.tensor()).map_err(Failure::runtime)?,
        ));
    }
    let mut text = String::new();
    for (m, v) in &rows {
        let _ = writeln!(
            text,
            "metric={m} value={v} extractor={extractor_id} seed={seed}"
        );
    }
    match report {
        Some(p) => fs::write(p, &text).map_err(Failure::runtime)?,
        None => print!("{text}"),
    }
    if let Some(p) = csv {
        let mut c = String::from("metric,value,extractor,seed\n");
        for (m, v) in &rows {
            let _ = writeln!(c, "{m},{v},{extractor_id},{seed}");
        }
        fs::write(p, c).map_err(Failure::runtime)?;
    }
    Ok(())
}

fn cmd_make_synthetic(out: &Path, n: usize, n_test: usize, size: usize, seed: u64) -> CmdResult {
    make_synthetic(out, n, n_test, size, seed).map_err(|e| match e {
        Error::Dataset(_) => Failure::usage(e),
        other => Failure::runtime(other),
    })?;
    println!("wrote synthetic dataset to {}", out.display());
    Ok(())
}

fn cmd_selfcheck(quick: bool, fault: Option<&str>, seed: u64) -> CmdResult {
    let opts = Options {
        quick,
        fault: fault.map(|_| Fault::Gram),
        seed,
    };
    let results = selfcheck::run(&opts);
    print!("{}", selfcheck::table(&results));
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_SELFCHECK,
            msg: format!("failed: {}", failed.join(", ")),
        })
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train {
            config,
            overrides,
            out,
            resume,
        } => cmd_train(
            config.as_deref(),
            &overrides,
            &out,
            resume.as_deref(),
            cli.seed,
        ),
        Command::Translate {
            checkpoint,
            input,
            out,
        } => cmd_translate(&checkpoint, &input, &out),
        Command::Evaluate {
            set_a,
            set_b,
            fid,
            swd,
            ssim,
            size,
            width_div,
            extractor,
            projections,
            report,
            csv,
        } => {
            let seed = effective_seed(cli.seed)?.unwrap_or(0);
            cmd_evaluate(
                &set_a,
                &set_b,
                (fid, swd, ssim),
                size,
                width_div,
                extractor.as_deref(),
                projections,
                report.as_deref(),
                csv.as_deref(),
                seed,
            )
        }
        Command::MakeSynthetic {
            out,
            n,
            n_test,
            size,
        } => {
            let seed = effective_seed(cli.seed)?.unwrap_or(TrainConfig::default().seed);
            cmd_make_synthetic(&out, n, n_test, size, seed)
        }
        Command::Selfcheck {
            quick,
            inject_fault,
        } => {
            let seed = effective_seed(cli.seed)?.unwrap_or(0);
            cmd_selfcheck(quick, inject_fault.as_deref(), seed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
