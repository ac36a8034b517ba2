//! Command-line front end. [`run`] is the whole program minus process exit.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::CliConfig;
use crate::data::{
    gen_synthetic, load_dataset, read_checkpoint, write_bytes, write_checkpoint, write_grid,
    Checkpoint,
};
use crate::error::{Error, Result};
use crate::gradcheck::{check_model, GradScale};
use crate::metrics::evaluate;
use crate::prompt::export_similarity_map;
use crate::tensor::Tensor;
use crate::trainer::fit_dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "protoseg",
    version,
    about = "Class-promptable segmentation with learned class prototypes"
)]
struct Cli {
    /// Omit wall-clock timings from logs and history so reruns diff clean.
    #[arg(long, global = true)]
    deterministic_logs: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its train/eval manifests.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write model.ckpt, history.csv and config.txt to out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a manifest and write the metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference check of the full training objective at toy scale.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// h,w,d,C,n,rD,rS,L
        #[arg(long, default_value = "4,4,8,2,2,8,8,1")]
        scale: GradScale,
        /// Corrupt one backward rule; the check must then fail.
        #[arg(long)]
        inject_bad_grad: bool,
    },
    /// Write each sample's normalised similarity map for one class.
    ExportSim {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => {
            if code == EXIT_GRADCHECK {
                let _ = writeln!(err, "gradcheck failed");
            }
            code
        }
        Err(e) => {
            let _ = writeln!(err, "{e}");
            match e {
                Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            }
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::GenData { config, out: dir } => gen_data(config, dir, out),
        Command::Train { config } => train(config, cli.deterministic_logs, out),
        Command::Eval {
            checkpoint,
            manifest,
            out: csv,
            threshold,
        } => eval(checkpoint, manifest, csv, *threshold, out),
        Command::Gradcheck {
            seed,
            scale,
            inject_bad_grad,
        } => gradcheck(scale, *seed, *inject_bad_grad, out),
        Command::ExportSim {
            checkpoint,
            manifest,
            class,
            out: dir,
        } => export_sim(checkpoint, manifest, *class, dir, out),
    }
}

fn say(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Loads a config and anchors its relative paths at the file's directory.
fn load_config(path: &Path) -> Result<CliConfig> {
    let mut cfg = CliConfig::load(path)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
    Ok(cfg)
}

fn gen_data(config: &Path, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(config)?;
    let s = gen_synthetic(&cfg.synth, dir)?;
    say(
        out,
        &format!(
            "wrote {} samples, {} classes, {} bytes to {}",
            s.samples,
            s.classes,
            s.bytes,
            dir.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn train(config: &Path, deterministic: bool, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(config)?;
    cfg.train.validate()?;
    let train_set = load_dataset(&cfg.train.train_manifest)?;
    let eval_set = cfg
        .train
        .eval_manifest
        .as_ref()
        .map(load_dataset)
        .transpose()?;

    let mut log_err = None;
    let (state, mut history) =
        fit_dataset(&cfg.train, &train_set, eval_set.as_ref(), &mut |r, snap| {
            let mut line = format!(
                "step {} dice {:.6} pcl {:.6} total {:.6}",
                r.step, r.loss.dice, r.loss.pcl, r.loss.total
            );
            if !deterministic {
                let _ = write!(line, " wall_ms {:.3}", r.wall_ms);
            }
            if let Some(s) = snap {
                let _ = write!(
                    line,
                    "\neval step {} challenge_iou {:.6} mc_iou {:.6}",
                    s.step, s.challenge_iou, s.mc_iou
                );
            }
            if let Err(e) = say(out, &line) {
                log_err.get_or_insert(e);
            }
        })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    if deterministic {
        for r in &mut history.steps {
            r.wall_ms = 0.0;
        }
    }

    let dir = &cfg.out_dir;
    let ckpt = dir.join("model.ckpt");
    write_checkpoint(
        &ckpt,
        &Checkpoint {
            config: state.config.clone(),
            step: state.step,
            params: state.params.clone(),
        },
    )?;
    write_bytes(&dir.join("history.csv"), history.to_csv().as_bytes())?;
    write_bytes(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    say(
        out,
        &format!(
            "trained {} steps; checkpoint {}",
            state.step,
            ckpt.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn eval(
    checkpoint: &Path,
    manifest: &Path,
    csv: &Path,
    threshold: f64,
    out: &mut dyn Write,
) -> Result<i32> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let ck = read_checkpoint(checkpoint)?;
    let data = load_dataset(manifest)?;
    let report = evaluate(&ck.params, &data, threshold)?;
    write_bytes(csv, report.to_csv().as_bytes())?;
    say(
        out,
        &format!(
            "challenge_iou {:.6} iou {:.6} mc_iou {:.6} over {} pairs",
            report.challenge_iou,
            report.iou,
            report.mc_iou,
            report.pairs.len()
        ),
    )?;
    Ok(EXIT_OK)
}

fn gradcheck(scale: &GradScale, seed: u64, faulty: bool, out: &mut dyn Write) -> Result<i32> {
    let report = check_model(scale, seed, faulty)?;
    for g in &report.groups {
        say(
            out,
            &format!(
                "{} max_rel_err {:.3e} checked {} refined {} skipped {}",
                g.group, g.max_rel_err, g.checked, g.refined, g.skipped
            ),
        )?;
    }
    say(
        out,
        &format!(
            "polarity gradient {}",
            if report.polarity_zero {
                "zero"
            } else {
                "NONZERO"
            }
        ),
    )?;
    if report.passed() {
        say(out, &format!("ok: all groups below {:e}", report.tolerance))?;
        return Ok(EXIT_OK);
    }
    let mut failing: Vec<String> = report.failing().iter().map(|g| g.to_string()).collect();
    if !report.polarity_zero {
        failing.push("polarity".into());
    }
    say(out, &format!("FAILED: {}", failing.join(", ")))?;
    Ok(EXIT_GRADCHECK)
}

/// Binary graymap (P5) with one byte per cell, `round(v * 255)`.
pub fn encode_pgm(map: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        map.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    bytes
}

fn export_sim(
    checkpoint: &Path,
    manifest: &Path,
    class: usize,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<i32> {
    let ck = read_checkpoint(checkpoint)?;
    let classes = ck.params.classes();
    if class == 0 || class > classes {
        return Err(Error::Class { class, classes });
    }
    let data = load_dataset(manifest)?;
    for s in &data.samples {
        let map = export_similarity_map(&ck.params.similarity(&s.embedding)?, class)?;
        write_grid(dir.join(format!("{}.grid", s.id)), &map)?;
        write_bytes(&dir.join(format!("{}.pgm", s.id)), &encode_pgm(&map))?;
    }
    say(
        out,
        &format!(
            "wrote {} similarity maps for class {class} to {}",
            data.samples.len(),
            dir.display()
        ),
    )?;
    Ok(EXIT_OK)
}
