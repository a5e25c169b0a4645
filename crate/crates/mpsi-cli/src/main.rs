//! Command-line driver for the mpsi super-resolution stack.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures (I/O, malformed checkpoints, training blow-ups).

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mpsi::data::{degrade, list_images, load_image, save_image, PatchSampler};
use mpsi::gradcheck::{blocks_suite, model_suite, negative_control, ops_suite, CheckResult};
use mpsi::metrics::{difference_map, psnr, render_eval_tsv, ssim, EvalProtocol, EvalRow};
use mpsi::model::Mpsi;
use mpsi::train::{
    clamp01, render_ablation_report, run_ablation, train_loop, RunConfig, TrainLogEntry, TrainState,
};
use mpsi::{Error, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "mpsi",
    version,
    about = "Selective state-space image super-resolution: train, infer, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of high-resolution images.
    Train(TrainCmd),
    /// Upscale images with a trained checkpoint.
    Infer(InferCmd),
    /// Score a checkpoint against high-resolution references.
    Eval(EvalCmd),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckCmd),
    /// Train and score every ablation variant.
    Ablate(AblateCmd),
}

/// Configuration source shared by the model-running subcommands: a flat
/// `key = value` file, then `--override` pairs, then the shorthands.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run configuration file (flat `key = value` lines, `#` comments).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--override base_lr=1e-4`.
    /// May be repeated; applied in order after `--config`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for `--override seed=N`.
    #[arg(long)]
    seed: Option<u64>,

    /// Shorthand for `--override scale=N`.
    #[arg(long)]
    scale: Option<usize>,
}

impl ConfigArgs {
    /// Resolve the effective configuration on top of `base` (defaults, or
    /// the configuration recovered from a checkpoint sidecar).
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::config(format!(
                        "config file {} not found",
                        path.display()
                    )));
                }
                RunConfig::from_file(path)?
            }
            None => base.unwrap_or_default(),
        };
        for kv in &self.overrides {
            run.apply_override(kv)?;
        }
        if let Some(seed) = self.seed {
            run.set("seed", &seed.to_string())?;
        }
        if let Some(scale) = self.scale {
            run.set("scale", &scale.to_string())?;
        }
        run.validate()?;
        Ok(run)
    }
}

/// Recover the run configuration from a checkpoint's `.meta` sidecar, if
/// one sits next to the checkpoint.
fn config_from_meta(checkpoint: &Path) -> Result<Option<RunConfig>> {
    let meta = PathBuf::from(format!("{}.meta", checkpoint.display()));
    if !meta.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let mut kv = String::new();
    for line in text.lines() {
        if line.trim() == "# entries" {
            break;
        }
        kv.push_str(line);
        kv.push('\n');
    }
    RunConfig::from_kv_text(&kv).map(Some)
}

fn print_log_entry(prefix: &str, e: &TrainLogEntry) {
    println!(
        "{prefix}iter {:>8}  lr {:<10}  loss {:.6}  {:.1}s",
        e.iteration,
        format!("{:e}", e.lr),
        e.loss,
        e.seconds
    );
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainCmd {
    /// Directory of high-resolution training images.
    data: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,

    /// Output directory for the training log and checkpoints.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,

    /// Resume from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

fn cmd_train(cmd: &TrainCmd) -> Result<()> {
    let base = match &cmd.checkpoint {
        Some(ckpt) => config_from_meta(ckpt)?,
        None => None,
    };
    let run = cmd.config.resolve(base)?;
    let sampler: PatchSampler<f64> =
        PatchSampler::from_dir(&cmd.data, run.model.scale, run.train.lr_patch)?;
    for skipped in sampler.skipped() {
        eprintln!("warning: skipped {skipped}");
    }
    let mut state = match &cmd.checkpoint {
        Some(ckpt) => TrainState::<f64>::resume(&run, ckpt)?,
        None => TrainState::<f64>::init(&run)?,
    };
    println!(
        "training on {} images ({} parameters, scale x{}) from iteration {}",
        sampler.len(),
        state.model.param_count(),
        run.model.scale,
        state.iteration
    );
    train_loop(&mut state, &sampler, &run, &cmd.out, &mut |e| {
        print_log_entry("", e)
    })?;
    println!(
        "done: iteration {} reached; artifacts in {}",
        state.iteration,
        cmd.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// infer

#[derive(Args)]
struct InferCmd {
    /// Low-resolution input images.
    #[arg(required = true)]
    images: Vec<PathBuf>,

    /// Trained checkpoint (its `.meta` sidecar supplies the model
    /// configuration unless `--config` replaces it).
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,

    /// Output directory (defaults to each input's own directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_model(config: &ConfigArgs, checkpoint: &Path) -> Result<(RunConfig, Mpsi<f64>)> {
    let run = config.resolve(config_from_meta(checkpoint)?)?;
    let mut model = Mpsi::<f64>::new(&run.model, run.train.seed)?;
    model.load_params_from(checkpoint)?;
    Ok((run, model))
}

fn cmd_infer(cmd: &InferCmd) -> Result<()> {
    let (run, model) = load_model(&cmd.config, &cmd.checkpoint)?;
    if let Some(out) = &cmd.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    for input in &cmd.images {
        let lr: Tensor<f64> = load_image(input)?;
        let sr = clamp01(&model.forward(&lr)?);
        let stem = input.file_stem().and_then(|s| s.to_str()).ok_or_else(|| {
            Error::config(format!("cannot derive a name from {}", input.display()))
        })?;
        let name = format!("{stem}.x{}.png", run.model.scale);
        let dir = match &cmd.out {
            Some(out) => out.clone(),
            None => input.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        let path = dir.join(name);
        save_image(&sr, &path)?;
        println!("{} -> {}", input.display(), path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalCmd {
    /// Directory of high-resolution reference images.
    hr_dir: PathBuf,

    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,

    /// Output directory for `results.tsv` (and difference maps).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Also write `<name>.diff.png` error heat maps into `--out`.
    #[arg(long, requires = "out")]
    diff_maps: bool,
}

fn cmd_eval(cmd: &EvalCmd) -> Result<()> {
    let (run, model) = load_model(&cmd.config, &cmd.checkpoint)?;
    let scale = run.model.scale;
    let protocol = EvalProtocol::for_scale(scale);
    if let Some(out) = &cmd.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let mut rows: Vec<EvalRow> = Vec::new();
    for path in list_images(&cmd.hr_dir)? {
        let hr: Tensor<f64> = load_image(&path)?;
        let (hr_ref, lr) = degrade(&hr, scale)?;
        let sr = clamp01(&model.forward(&lr)?);
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        rows.push(EvalRow {
            name: name.clone(),
            psnr: psnr(&sr, &hr_ref, protocol)?,
            ssim: ssim(&sr, &hr_ref, protocol)?,
        });
        if cmd.diff_maps {
            let out = cmd.out.as_ref().expect("clap enforces --out");
            save_image(
                &difference_map(&sr, &hr_ref)?,
                &out.join(format!("{name}.diff.png")),
            )?;
        }
    }
    if rows.is_empty() {
        return Err(Error::config(format!(
            "no images found in {}",
            cmd.hr_dir.display()
        )));
    }
    let tsv = render_eval_tsv(&rows);
    print!("{tsv}");
    if let Some(out) = &cmd.out {
        let path = out.join("results.tsv");
        std::fs::write(&path, &tsv).map_err(|e| Error::io(&path, e))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args)]
struct GradcheckCmd {
    /// Base seed for the randomized probes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_gradcheck(cmd: &GradcheckCmd) -> Result<()> {
    let mut all: Vec<CheckResult> = Vec::new();
    all.extend(ops_suite(cmd.seed)?);
    all.extend(blocks_suite(cmd.seed + 1)?);
    all.extend(model_suite(cmd.seed + 2)?);
    let mut failed = 0usize;
    for r in &all {
        println!(
            "{}  {:<24} max rel err {:.3e}  (tol {:.0e}, {} coords)",
            if r.passed() { "ok  " } else { "FAIL" },
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.coords_checked
        );
        if !r.passed() {
            failed += 1;
        }
    }
    let control = negative_control()?;
    if control.passed() {
        println!("FAIL  negative control: a deliberately wrong gradient went unflagged");
        failed += 1;
    } else {
        println!("ok    negative control flagged as intended");
    }
    if failed > 0 {
        return Err(Error::contract(
            "gradcheck",
            format!("{failed} of {} checks failed", all.len() + 1),
        ));
    }
    println!("all {} gradient checks passed", all.len() + 1);
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Args)]
struct AblateCmd {
    /// Directory of high-resolution training images.
    train_dir: PathBuf,

    /// First evaluation set (directory of high-resolution images).
    eval_a: PathBuf,

    /// Second evaluation set.
    eval_b: PathBuf,

    #[command(flatten)]
    config: ConfigArgs,

    /// Output directory: one subdirectory per variant plus `report.txt`.
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

fn dir_label(path: &Path) -> String {
    path.file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("eval")
        .to_string()
}

fn cmd_ablate(cmd: &AblateCmd) -> Result<()> {
    let run = cmd.config.resolve(None)?;
    let report = run_ablation::<f64>(
        &run,
        &cmd.train_dir,
        [&cmd.eval_a, &cmd.eval_b],
        &cmd.out,
        &mut |label, e| print_log_entry(&format!("[{label}] "), e),
    )?;
    let names = [dir_label(&cmd.eval_a), dir_label(&cmd.eval_b)];
    let rendered = render_ablation_report(&report, [&names[0], &names[1]]);
    print!("{rendered}");
    let path = cmd.out.join("report.txt");
    std::fs::write(&path, &rendered).map_err(|e| Error::io(&path, e))?;
    println!("report written to {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(cmd) => cmd_train(cmd),
        Command::Infer(cmd) => cmd_infer(cmd),
        Command::Eval(cmd) => cmd_eval(cmd),
        Command::Gradcheck(cmd) => cmd_gradcheck(cmd),
        Command::Ablate(cmd) => cmd_ablate(cmd),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error and exits 1 (not clap's default 2).
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) => 1,
            _ => 2,
        };
        std::process::exit(code);
    }
}
