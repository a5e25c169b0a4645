//! Losses, the Adam optimizer, learning-rate scheduling, the training
//! loop with exact checkpoint/resume, evaluation over directories, and
//! the ablation driver.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::data::{degrade, list_images, load_image, sampling_rng, PatchSampler, Provenance};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, EvalProtocol, EvalRow};
use crate::model::{parse_bool, parse_f64, parse_usize, split_kv, ModelConfig, Mpsi};
use crate::param::{zero_grads, ParamVisit};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Losses

/// Mean absolute error. Ties (zero difference) contribute zero gradient.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    pred.sub(target)?.abs_t().mean_all()
}

/// Mean squared error.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let d = pred.sub(target)?;
    d.mul(&d)?.mean_all()
}

// ---------------------------------------------------------------------------
// Optimizer

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with moments kept per parameter name in `f64`, so optimizer state
/// survives checkpointing bit for bit regardless of the model scalar type.
#[derive(Debug, Default)]
pub struct Adam {
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter. Parameters without a gradient
    /// this step are treated as having a zero gradient.
    pub fn step<T: Scalar>(&mut self, model: &mut dyn ParamVisit<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t.min(i32::MAX as u64) as i32);
        let moments = &mut self.moments;
        let mut first_err = None;
        model.visit_params_mut(&mut |p| {
            if first_err.is_some() {
                return;
            }
            let n = p.numel();
            let g: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|v| v.to_c()).collect(),
                None => vec![0.0; n],
            };
            let (m, v) = moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let old = p.tensor().data();
            let mut new = Vec::with_capacity(n);
            for i in 0..n {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                new.push(T::from_c(
                    old[i].to_c() - lr * mhat / (vhat.sqrt() + ADAM_EPS),
                ));
            }
            if let Err(e) = p.set_data(new) {
                first_err = Some(e);
            }
        });
        match first_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedule

/// Step decay: the rate is halved at each milestone and the new value
/// applies from that iteration on (`lr(m) = base / 2` at milestone `m`).
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<u64>,
}

impl LrSchedule {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let halvings = self.milestones.iter().filter(|&&m| m <= iteration).count();
        self.base * 0.5_f64.powi(halvings as i32)
    }
}

// ---------------------------------------------------------------------------
// Run configuration

/// Training-run hyperparameters (everything that is not model shape).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_patch: usize,
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub augment: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500_000,
            batch_size: 8,
            lr_patch: 64,
            base_lr: 2e-4,
            milestones: vec![250_000, 400_000, 450_000, 475_000],
            augment: true,
            checkpoint_every: 10_000,
            log_every: 100,
            seed: 0,
        }
    }
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| {
        Error::config(format!(
            "key '{key}': '{value}' is not a non-negative integer"
        ))
    })
}

fn parse_milestones(key: &str, value: &str) -> Result<Vec<u64>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse_u64(key, p.trim())).collect()
}

impl TrainConfig {
    pub(crate) fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "iterations" => self.iterations = parse_u64(key, value)?,
            "batch_size" => self.batch_size = parse_usize(key, value)?,
            "lr_patch" => self.lr_patch = parse_usize(key, value)?,
            "base_lr" => self.base_lr = parse_f64(key, value)?,
            "milestones" => self.milestones = parse_milestones(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_u64(key, value)?,
            "log_every" => self.log_every = parse_u64(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_patch == 0 {
            return Err(Error::config("batch_size and lr_patch must be positive"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive and finite"));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::config(
                "checkpoint_every and log_every must be positive",
            ));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.base_lr,
            milestones: self.milestones.clone(),
        }
    }

    fn to_kv_text(&self) -> String {
        let milestones = self
            .milestones
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "iterations = {}\nbatch_size = {}\nlr_patch = {}\nbase_lr = {}\nmilestones = {}\naugment = {}\ncheckpoint_every = {}\nlog_every = {}\nseed = {}\n",
            self.iterations,
            self.batch_size,
            self.lr_patch,
            self.base_lr,
            milestones,
            self.augment,
            self.checkpoint_every,
            self.log_every,
            self.seed,
        )
    }
}

/// Model plus run settings: the full contents of a config file, one flat
/// `key = value` namespace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.try_set(key, value)? || self.train.try_set(key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown config key '{key}'")))
        }
    }

    /// Apply one `key=value` override string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = split_kv(kv)?;
        self.set(k, v)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_kv(line)?;
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("duplicate config key '{k}'")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text)
    }

    pub fn to_kv_text(&self) -> String {
        format!("{}{}", self.model.to_kv_text(), self.train.to_kv_text())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

// ---------------------------------------------------------------------------
// Train state and checkpointing

const RNG_ENTRY: &str = "rng_state";
const ITER_ENTRY: &str = "iteration";
const ADAM_T_ENTRY: &str = "adam_t";
const ADAM_M_PREFIX: &str = "adam_m/";
const ADAM_V_PREFIX: &str = "adam_v/";

fn rng_to_values(rng: &ChaCha8Rng) -> Vec<f64> {
    let seed = rng.get_seed();
    let mut vals = Vec::with_capacity(7);
    for chunk in seed.chunks(8) {
        vals.push(f64::from_bits(u64::from_le_bytes(
            chunk.try_into().expect("seed is 32 bytes"),
        )));
    }
    vals.push(f64::from_bits(rng.get_stream()));
    let wp = rng.get_word_pos();
    vals.push(f64::from_bits(wp as u64));
    vals.push(f64::from_bits((wp >> 64) as u64));
    vals
}

fn rng_from_values(vals: &[f64]) -> Result<ChaCha8Rng> {
    if vals.len() != 7 {
        return Err(Error::checkpoint(format!(
            "{RNG_ENTRY}: expected 7 packed words, got {}",
            vals.len()
        )));
    }
    let mut seed = [0u8; 32];
    for (i, v) in vals[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&v.to_bits().to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(vals[4].to_bits());
    let wp = u128::from(vals[5].to_bits()) | (u128::from(vals[6].to_bits()) << 64);
    rng.set_word_pos(wp);
    Ok(rng)
}

/// Everything that evolves during a run: parameters, optimizer moments,
/// the sampling RNG, and the iteration counter. Saving and reloading this
/// state continues training bit for bit.
pub struct TrainState<T: Scalar> {
    pub model: Mpsi<T>,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

/// The RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0;
/// The RNG stream used for patch sampling.
pub const SAMPLE_STREAM: u64 = 1;

impl<T: Scalar> TrainState<T> {
    /// Fresh state: parameters from the seed's init stream, sampling RNG
    /// on its own stream.
    pub fn init(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        Ok(TrainState {
            model: Mpsi::new(&run.model, run.train.seed)?,
            optimizer: Adam::new(),
            rng: sampling_rng(run.train.seed, SAMPLE_STREAM),
            iteration: 0,
        })
    }

    /// Serialize parameters, Adam moments, RNG, and counters; a
    /// `<path>.meta` sidecar records the run configuration and entry list.
    pub fn save(&self, path: &Path, run: &RunConfig) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        checkpoint::store_params(&mut ckpt, &self.model);
        self.model.visit_params(&mut |p| {
            let (m, v) = self
                .optimizer
                .moments
                .get(p.name())
                .cloned()
                .unwrap_or_else(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            ckpt.insert(format!("{ADAM_M_PREFIX}{}", p.name()), vec![m.len()], m);
            ckpt.insert(format!("{ADAM_V_PREFIX}{}", p.name()), vec![v.len()], v);
        });
        ckpt.insert(ADAM_T_ENTRY, vec![1], vec![self.optimizer.t as f64]);
        ckpt.insert(ITER_ENTRY, vec![1], vec![self.iteration as f64]);
        ckpt.insert(RNG_ENTRY, vec![7], rng_to_values(&self.rng));
        ckpt.write_to(path)?;

        let meta_path = PathBuf::from(format!("{}.meta", path.display()));
        let meta = format!(
            "# training checkpoint at iteration {}\n{}\n# entries\n{}",
            self.iteration,
            run.to_kv_text(),
            ckpt.manifest()
        );
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }

    /// Rebuild state from a checkpoint produced by [`TrainState::save`]
    /// under the same configuration.
    pub fn resume(run: &RunConfig, path: &Path) -> Result<Self> {
        run.validate()?;
        let ckpt = Checkpoint::read_from(path)?;
        let mut model = Mpsi::new(&run.model, run.train.seed)?;
        checkpoint::load_params(&ckpt, &mut model)?;

        let mut optimizer = Adam::new();
        let mut first_err = None;
        model.visit_params(&mut |p| {
            if first_err.is_some() {
                return;
            }
            let fetch = |prefix: &str| -> std::result::Result<Vec<f64>, Error> {
                let key = format!("{prefix}{}", p.name());
                match ckpt.get(&key) {
                    Some((_, vals)) if vals.len() == p.numel() => Ok(vals.to_vec()),
                    Some((_, vals)) => Err(Error::checkpoint(format!(
                        "entry {key}: {} values for a parameter of {} elements",
                        vals.len(),
                        p.numel()
                    ))),
                    None => Err(Error::checkpoint(format!("missing entry {key}"))),
                }
            };
            match (fetch(ADAM_M_PREFIX), fetch(ADAM_V_PREFIX)) {
                (Ok(m), Ok(v)) => {
                    optimizer.moments.insert(p.name().to_string(), (m, v));
                }
                (Err(e), _) | (_, Err(e)) => first_err = Some(e),
            }
        });
        if let Some(e) = first_err {
            return Err(e);
        }
        let scalar_entry = |name: &str| -> Result<f64> {
            match ckpt.get(name) {
                Some((_, vals)) if vals.len() == 1 => Ok(vals[0]),
                _ => Err(Error::checkpoint(format!(
                    "missing or malformed entry {name}"
                ))),
            }
        };
        optimizer.t = scalar_entry(ADAM_T_ENTRY)? as u64;
        let iteration = scalar_entry(ITER_ENTRY)? as u64;
        let rng = match ckpt.get(RNG_ENTRY) {
            Some((_, vals)) => rng_from_values(vals)?,
            None => return Err(Error::checkpoint(format!("missing entry {RNG_ENTRY}"))),
        };
        Ok(TrainState {
            model,
            optimizer,
            rng,
            iteration,
        })
    }
}

// ---------------------------------------------------------------------------
// Training loop

/// One progress report line.
#[derive(Debug, Clone)]
pub struct TrainLogEntry {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub seconds: f64,
}

/// Run (or continue) training until `run.train.iterations`.
///
/// Side effects in `out_dir`: `train_log.tsv` (`iter lr loss seconds`,
/// appended on resume) and `checkpoint_<iter>.ckpt` at the checkpoint
/// cadence and at the end. `on_log` sees every logged entry.
pub fn train_loop<T: Scalar>(
    state: &mut TrainState<T>,
    sampler: &PatchSampler<T>,
    run: &RunConfig,
    out_dir: &Path,
    on_log: &mut dyn FnMut(&TrainLogEntry),
) -> Result<()> {
    run.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.tsv");
    let fresh = !log_path.exists();
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "iter\tlr\tloss\tseconds").map_err(|e| Error::io(&log_path, e))?;
    }

    let schedule = run.train.schedule();
    let start = Instant::now();
    while state.iteration < run.train.iterations {
        let i = state.iteration;
        let lr = schedule.lr_at(i);
        let (lr_batch, hr_batch, provenance) =
            sampler.sample_batch(&mut state.rng, run.train.batch_size, run.train.augment)?;
        let pred = state.model.forward(&lr_batch)?;
        let loss = l1_loss(&pred, &hr_batch)?;
        let loss_val = loss.item().to_c();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: i,
                provenance: provenance.iter().map(Provenance::to_string).collect(),
            });
        }
        zero_grads(&state.model);
        loss.backward()?;
        state.optimizer.step(&mut state.model, lr)?;
        state.iteration = i + 1;

        let is_log = state.iteration.is_multiple_of(run.train.log_every)
            || state.iteration == run.train.iterations
            || i == 0;
        if is_log {
            let entry = TrainLogEntry {
                iteration: state.iteration,
                lr,
                loss: loss_val,
                seconds: start.elapsed().as_secs_f64(),
            };
            writeln!(
                log,
                "{}\t{:e}\t{:.8}\t{:.3}",
                entry.iteration, entry.lr, entry.loss, entry.seconds
            )
            .map_err(|e| Error::io(&log_path, e))?;
            on_log(&entry);
        }
        if state.iteration.is_multiple_of(run.train.checkpoint_every)
            || state.iteration == run.train.iterations
        {
            let path = out_dir.join(format!("checkpoint_{}.ckpt", state.iteration));
            state.save(&path, run)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

/// Clamp to `[0, 1]` without building a graph (post-processing only).
pub fn clamp01<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|v| (*v).max(T::zero()).min(T::one()))
        .collect();
    Tensor::from_vec(data, x.shape()).expect("same shape")
}

/// Score the model over every image in `hr_dir`: each HR image is
/// bicubic-degraded by the model's scale, super-resolved, clamped, and
/// compared under the protocol.
pub fn evaluate_dir<T: Scalar>(model: &Mpsi<T>, hr_dir: &Path) -> Result<Vec<EvalRow>> {
    let scale = model.scale();
    let protocol = EvalProtocol::for_scale(scale);
    let paths = list_images(hr_dir)?;
    if paths.is_empty() {
        return Err(Error::config(format!(
            "no .png or .ppm images in {}",
            hr_dir.display()
        )));
    }
    let mut rows = Vec::new();
    for path in &paths {
        let hr = load_image::<T>(path)?;
        let (hr, lr) = degrade(&hr, scale)?;
        let sr = clamp01(&model.forward(&lr)?);
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.push(EvalRow {
            name,
            psnr: psnr(&sr, &hr, protocol)?,
            ssim: ssim(&sr, &hr, protocol)?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Ablation driver

/// Mean PSNR/SSIM of one trained variant on one evaluation set.
#[derive(Debug, Clone, Copy)]
pub struct AblationCell {
    pub psnr: f64,
    pub ssim: f64,
}

/// One table row: a variant scored on both evaluation sets.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub cells: [AblationCell; 2],
}

/// Results of the full ablation sweep.
#[derive(Debug, Clone)]
pub struct AblationReport {
    /// Component table: CMB and MCRM toggled in all four combinations.
    pub components: Vec<AblationRow>,
    /// Substitution table: the DDBM swapped against channel attention,
    /// and the recursion path removed from the MCRM.
    pub substitutions: Vec<AblationRow>,
}

const COMPONENT_VARIANTS: [(&str, bool, bool); 4] = [
    ("base", false, false),
    ("+cmb", true, false),
    ("+mcrm", false, true),
    ("+cmb+mcrm", true, true),
];

fn mean_cell(rows: &[EvalRow]) -> AblationCell {
    let n = rows.len() as f64;
    AblationCell {
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    }
}

/// Train and score all six variants behind the two ablation tables.
///
/// Each variant trains from scratch under `base` (only the ablation flags
/// change), writes its artifacts to `out_dir/<label>/`, and is scored on
/// both evaluation sets.
pub fn run_ablation<T: Scalar>(
    base: &RunConfig,
    train_dir: &Path,
    eval_dirs: [&Path; 2],
    out_dir: &Path,
    on_log: &mut dyn FnMut(&str, &TrainLogEntry),
) -> Result<AblationReport> {
    let mut variants: Vec<(String, RunConfig)> = Vec::new();
    for (label, use_cmb, use_mcrm) in COMPONENT_VARIANTS {
        let mut run = base.clone();
        run.model.use_cmb = use_cmb;
        run.model.use_mcrm = use_mcrm;
        run.model.ddbm_as_channel_attention = false;
        run.model.mcrm_recursive = true;
        variants.push((label.to_string(), run));
    }
    let mut ca = base.clone();
    ca.model.use_cmb = true;
    ca.model.use_mcrm = true;
    ca.model.ddbm_as_channel_attention = true;
    ca.model.mcrm_recursive = true;
    variants.push(("channel-attention".to_string(), ca));
    let mut nonrec = base.clone();
    nonrec.model.use_cmb = true;
    nonrec.model.use_mcrm = true;
    nonrec.model.ddbm_as_channel_attention = false;
    nonrec.model.mcrm_recursive = false;
    variants.push(("non-recursive-gate".to_string(), nonrec));

    let mut scored: HashMap<String, [AblationCell; 2]> = HashMap::new();
    for (label, run) in &variants {
        let sampler: PatchSampler<T> =
            PatchSampler::from_dir(train_dir, run.model.scale, run.train.lr_patch)?;
        let mut state = TrainState::<T>::init(run)?;
        let var_dir = out_dir.join(label);
        let mut fwd = |e: &TrainLogEntry| on_log(label, e);
        train_loop(&mut state, &sampler, run, &var_dir, &mut fwd)?;
        let cells = [
            mean_cell(&evaluate_dir(&state.model, eval_dirs[0])?),
            mean_cell(&evaluate_dir(&state.model, eval_dirs[1])?),
        ];
        scored.insert(label.clone(), cells);
    }

    let row = |label: &str| -> AblationRow {
        AblationRow {
            label: label.to_string(),
            cells: scored[label],
        }
    };
    Ok(AblationReport {
        components: COMPONENT_VARIANTS
            .iter()
            .map(|(label, _, _)| row(label))
            .collect(),
        substitutions: vec![
            row("channel-attention"),
            row("+cmb+mcrm"),
            row("non-recursive-gate"),
            row("+cmb+mcrm"),
        ],
    })
}

/// Render both tables as aligned text.
pub fn render_ablation_report(report: &AblationReport, eval_names: [&str; 2]) -> String {
    let mut out = String::new();
    let header = |title: &str, out: &mut String| {
        out.push_str(&format!("== {title} ==\n"));
        out.push_str(&format!(
            "{:<22}{:>12}{:>10}{:>12}{:>10}\n",
            "variant",
            format!("{}/psnr", eval_names[0]),
            "ssim",
            format!("{}/psnr", eval_names[1]),
            "ssim"
        ));
    };
    let rows = |rows: &[AblationRow], out: &mut String| {
        for r in rows {
            out.push_str(&format!(
                "{:<22}{:>12.4}{:>10.6}{:>12.4}{:>10.6}\n",
                r.label, r.cells[0].psnr, r.cells[0].ssim, r.cells[1].psnr, r.cells[1].ssim
            ));
        }
    };
    header("components", &mut out);
    rows(&report.components, &mut out);
    out.push('\n');
    header("substitutions", &mut out);
    rows(&report.substitutions, &mut out);
    out
}
