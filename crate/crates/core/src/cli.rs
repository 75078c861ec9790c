//! The `stgdance` command line.
//!
//! Exit codes: 0 ok, 1 validation failure, 2 usage or configuration error,
//! 3 I/O or file-format error, 4 divergence or non-finite numerics,
//! 5 artifact mismatch.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::bench::{self, BenchConfig, Kernel};
use crate::binio;
use crate::checkpoint::Checkpoint;
use crate::data::{self, gen_synthetic, MotionFile, MotionSample, NormStats, Style, SynthConfig};
use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::gradcheck::{self, Block};
use crate::kv::{self, KvMap};
use crate::metrics::{self, MetricReport};
use crate::model::DenoiserConfig;
use crate::tensor::Tensor;
use crate::train::{self, loss_curve_csv, moving_average, TrainConfig, TrainState};
use crate::validate::{self, ValidateOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

pub const MODEL_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const MOTION_FILE: &str = "motion.stgd";
pub const METRICS_FILE: &str = "metrics.json";
pub const BENCH_FILE: &str = "bench.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "stgdance", version, about = "Group dance generation with a spatial-temporal diffusion denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise group-dance motion files.
    GenData(GenDataArgs),
    /// Train the denoiser on motion files.
    Train(TrainArgs),
    /// Sample new motion from a checkpoint.
    Generate(GenerateArgs),
    /// Compute coordination metrics for motion files.
    Metrics(MetricsArgs),
    /// Run the invariant suite.
    Validate(ValidateArgs),
    /// Time kernels and fit scaling slopes.
    Bench(BenchArgs),
    /// Run the gradient-check registry.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// short (3 dancers, 120 frames) or long (3 dancers, 400 frames).
    #[arg(long, default_value = "short")]
    pub preset: String,
    /// circle, line, figure8 or crossover (default circle).
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub dancers: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Beats per frame.
    #[arg(long)]
    pub tempo: Option<f64>,
    /// Write the standard eight-sample training set instead of one file.
    #[arg(long)]
    pub default_set: bool,
    /// Also export frame,dancer,channel,value CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Motion files or directories of `.stgd` files.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Number of dancers (default 3).
    #[arg(long)]
    pub dancers: Option<usize>,
    /// Sampling steps; defaults to the training schedule.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Style used for the synthetic conditioning (default circle).
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub tempo: Option<f64>,
    /// Take the conditioning from this motion file instead.
    #[arg(long)]
    pub music: Option<PathBuf>,
    /// Use posterior means only (no sampling noise after the start).
    #[arg(long)]
    pub deterministic: bool,
    /// Also write metrics.json for the output.
    #[arg(long)]
    pub metrics: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Motion files; the first is scored, all of them feed diversity.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Collision threshold in scene units.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corrupt one block's gradient (harness self-test).
    #[arg(long)]
    pub perturb: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// full, ldt, diff, gcn or all (the default); comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub kernel: Option<Vec<String>>,
    /// Sequence lengths for the attention kernels.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// Dancer counts for the graph kernel.
    #[arg(long, value_delimiter = ',')]
    pub dancers: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corrupt one block's gradient (harness self-test).
    #[arg(long)]
    pub perturb: Option<String>,
}

/// Maps an error to its documented exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Metric(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Divergence { .. } | Error::Numeric { .. } => EXIT_DIVERGENCE,
        Error::Mismatch(_) => EXIT_MISMATCH,
        Error::Bench(_) | Error::Coverage(_) => EXIT_VALIDATION,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Validate(a) => validate_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

/// Config file, then `--set` overrides, then dedicated flags.
fn load_kv(common: &Common, flags: &[(&str, Option<String>)]) -> Result<KvMap> {
    let mut kv = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            KvMap::parse(&text)?
        }
        None => KvMap::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(s) = common.seed {
        kv.set("seed", &s.to_string());
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    Ok(kv)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let p = dir.join(name);
    binio::atomic_write(&p, bytes)?;
    Ok(p)
}

/// Prints the resolved configuration.
fn print_config(command: &str, config: &str) {
    println!("# {command} effective config");
    print!("{config}");
}

/// Writes `manifest.txt`: the effective config as plain `key=value` lines
/// (so the manifest can be passed back as `--config`) with the command,
/// version and input/output digests as `#` comments.
fn write_manifest(dir: &Path, command: &str, config: &str, inputs: &[PathBuf], outputs: &[&str]) -> Result<()> {
    let mut m = format!("# stgdance {} {command}\n", env!("CARGO_PKG_VERSION"));
    for p in inputs {
        let bytes = binio::read_file(p)?;
        let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        let _ = writeln!(m, "# input {} {name}", sha256_hex(&bytes));
    }
    for o in outputs {
        let bytes = binio::read_file(&dir.join(o))?;
        let _ = writeln!(m, "# output {} {o}", sha256_hex(&bytes));
    }
    m.push_str(config);
    write_out(dir, MANIFEST_FILE, m.as_bytes())?;
    Ok(())
}

/// The config lines of a manifest (everything that is not a comment).
pub fn manifest_config(manifest: &str) -> String {
    manifest
        .lines()
        .filter(|l| !l.starts_with('#'))
        .fold(String::new(), |mut s, l| {
            s.push_str(l);
            s.push('\n');
            s
        })
}

fn synth_config(kv: &mut KvMap, preset: &str) -> Result<SynthConfig> {
    let base = SynthConfig::preset(preset)?;
    Ok(SynthConfig {
        n_dancers: kv.take_or("n_dancers", base.n_dancers)?,
        length: kv.take_or("length", base.length)?,
        d_in: kv.take_or("d_in", base.d_in)?,
        tempo: kv.take_or("tempo", base.tempo)?,
        radius: kv.take_or("radius", base.radius)?,
        spacing: kv.take_or("spacing", base.spacing)?,
        clearance: kv.take_or("clearance", base.clearance)?,
    })
}

fn synth_kv(c: &SynthConfig, style: &str, seed: u64, default_set: bool) -> String {
    format!(
        "n_dancers={}\nlength={}\nd_in={}\ntempo={}\nradius={}\nspacing={}\nclearance={}\nstyle={style}\n\
         default_set={default_set}\nseed={seed}\n",
        c.n_dancers, c.length, c.d_in, c.tempo, c.radius, c.spacing, c.clearance
    )
}

fn motion_file(sample: MotionSample) -> Result<MotionFile> {
    let stats = NormStats::from_motions(&[&sample.motion])?;
    Ok(MotionFile {
        sample,
        stats,
        position_channels: DenoiserConfig::default().position_channels,
    })
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    let mut kv = load_kv(
        &a.common,
        &[
            ("n_dancers", a.dancers.map(|v| v.to_string())),
            ("length", a.frames.map(|v| v.to_string())),
            ("tempo", a.tempo.map(|v| v.to_string())),
            ("style", a.style.clone()),
            ("default_set", a.default_set.then(|| "true".to_string())),
        ],
    )?;
    let cfg = synth_config(&mut kv, &a.preset)?;
    let seed: u64 = kv.take_or("seed", 0)?;
    let style_name = kv.take_raw("style").unwrap_or_else(|| Style::Circle.as_str().to_string());
    let default_set: bool = kv.take_or("default_set", false)?;
    kv.finish()?;
    let samples = if default_set {
        data::default_dataset(seed)?
    } else {
        let style: Style = style_name.parse()?;
        vec![gen_synthetic(&cfg, style, seed)?]
    };
    let config = synth_kv(&cfg, &style_name, seed, default_set);
    print_config("gen-data", &config);
    ensure_dir(&a.common.out)?;
    let mut outputs = Vec::new();
    let single = samples.len() == 1;
    for (i, s) in samples.into_iter().enumerate() {
        let name = if single { MOTION_FILE.to_string() } else { format!("motion_{i:02}.stgd") };
        let file = motion_file(s)?;
        let (n, l, d) = file.sample.dims();
        let clearance = data::min_pairwise_distance(&file.sample.motion, file.position_channels);
        println!(
            "{name}: {n} dancers x {l} frames x {d} channels, style {}, min pairwise distance {clearance:.4}",
            file.sample.style.map_or("none", Style::as_str)
        );
        write_out(&a.common.out, &name, &file.to_bytes())?;
        if a.csv {
            let csv_name = name.replace(".stgd", ".csv");
            write_out(&a.common.out, &csv_name, file.to_csv().as_bytes())?;
        }
        outputs.push(name);
    }
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(&a.common.out, "gen-data", &config, &[], &refs)?;
    Ok(EXIT_OK)
}

/// Expands directories to their `.stgd` files, sorted by name.
fn collect_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "stgd"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!("no .stgd files in {}", p.display())));
            }
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let mut kv = load_kv(
        &a.common,
        &[
            ("epochs", a.epochs.map(|v| v.to_string())),
            ("lr", a.lr.map(|v| v.to_string())),
        ],
    )?;
    let model_cfg = DenoiserConfig::take_from(&mut kv)?;
    let train_cfg = TrainConfig::take_from(&mut kv, model_cfg.position_channels)?;
    kv.finish()?;
    let config = format!("{}{}", model_cfg.to_kv(), train_cfg.to_kv());
    print_config("train", &config);

    let inputs = collect_inputs(&a.data)?;
    let dataset: Vec<MotionSample> = inputs
        .iter()
        .map(|p| MotionFile::load(p).map(|f| f.sample))
        .collect::<Result<_>>()?;
    let mut prior_rows = Vec::new();
    let state = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model.config() != &model_cfg {
                return Err(Error::Mismatch(format!(
                    "checkpoint model config differs from the effective config:\n{}",
                    ckpt.model.config().to_kv()
                )));
            }
            if ckpt.schedule != train_cfg.schedule_spec() {
                return Err(Error::Mismatch("checkpoint noise schedule differs from the effective config".into()));
            }
            let state = ckpt.into_train_state()?;
            // Keep the loss rows of the epochs already run.
            let existing = a.common.out.join(LOSS_FILE);
            if let Ok(text) = fs::read_to_string(&existing) {
                prior_rows = text
                    .lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= state.epoch))
                    .map(str::to_string)
                    .collect();
            }
            println!("resuming at epoch {}", state.epoch);
            state
        }
        None => TrainState::fresh(model_cfg.clone(), &dataset, train_cfg.seed)?,
    };
    ensure_dir(&a.common.out)?;
    let initial = train::evaluation_loss(&dataset, &train_cfg, &state)?;
    let out_dir = a.common.out.clone();
    let schedule = train_cfg.schedule_spec();
    let every = train_cfg.checkpoint_every;
    let (state, curve) = train::train(&dataset, &train_cfg, state, |s, e| {
        if e.epoch % 10 == 0 || e.epoch == train_cfg.epochs {
            let eval = e.eval.map_or(String::new(), |v| format!(" eval {:.6}", v.total));
            println!("epoch {:>4} loss {:.6}{eval}", e.epoch, e.parts.total);
        }
        if every > 0 && e.epoch % every == 0 {
            Checkpoint::from_state(s, schedule).save(&out_dir.join(MODEL_FILE))?;
        }
        Ok(())
    })?;
    Checkpoint::from_state(&state, schedule).save(&a.common.out.join(MODEL_FILE))?;
    let mut csv = loss_curve_csv(&curve);
    if !prior_rows.is_empty() {
        let (header, body) = csv.split_once('\n').unwrap_or((&csv, ""));
        csv = format!("{header}\n{}\n{body}", prior_rows.join("\n"));
    }
    write_out(&a.common.out, LOSS_FILE, csv.as_bytes())?;
    write_manifest(&a.common.out, "train", &config, &inputs, &[MODEL_FILE, LOSS_FILE])?;

    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        let train_ratio = last.parts.total / first.parts.total;
        println!("training loss: first epoch {:.6}, last epoch {:.6}, ratio {train_ratio:.4}", first.parts.total, last.parts.total);
        if let (Some(init), Some(fin)) = (initial, last.eval) {
            let evals: Vec<f64> = curve.iter().filter_map(|e| e.eval.map(|v| v.total)).collect();
            let ma = moving_average(&evals, 10);
            let rises = ma.windows(2).filter(|w| w[1] > w[0]).count();
            println!(
                "evaluation loss: initial {:.6}, final {:.6}, final/initial ratio {:.4}, smoothed rises {rises}",
                init.total,
                fin.total,
                fin.total / init.total
            );
        }
    }
    Ok(EXIT_OK)
}

fn generate_cmd(a: GenerateArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut kv = load_kv(
        &a.common,
        &[
            ("frames", a.frames.map(|v| v.to_string())),
            ("dancers", a.dancers.map(|v| v.to_string())),
            ("steps", a.steps.map(|v| v.to_string())),
            ("style", a.style.clone()),
            ("tempo", a.tempo.map(|v| v.to_string())),
            ("deterministic", a.deterministic.then(|| "true".to_string())),
        ],
    )?;
    // Recorded for provenance; the checkpoint itself decides these.
    for key in ["checkpoint", "beta_start", "beta_end"] {
        kv.take_raw(key);
    }
    let style_name = kv.take_raw("style");
    let (music, style, tempo, default_frames) = match &a.music {
        Some(p) => {
            let f = MotionFile::load(p)?;
            let l = f.sample.music.rows();
            (Some(f.sample.music), f.sample.style, f.sample.tempo, l)
        }
        None => {
            let style = style_name.as_deref().unwrap_or(Style::Circle.as_str()).parse::<Style>()?;
            (None, Some(style), SynthConfig::short().tempo, 120)
        }
    };
    let frames: usize = kv.take_or("frames", default_frames)?;
    let steps: usize = kv.take_or("steps", ckpt.schedule.steps)?;
    let tempo: f64 = kv.take_or("tempo", tempo)?;
    let seed: u64 = kv.take_or("seed", 0)?;
    let dancers: usize = kv.take_or("dancers", 3)?;
    let deterministic: bool = kv.take_or("deterministic", false)?;
    let delta: f64 = kv.take_or("delta", metrics::DEFAULT_DELTA)?;
    kv.finish()?;
    let cfg = ckpt.model.config().clone();
    let music = match music {
        Some(m) if m.rows() != frames => {
            return Err(Error::Config(format!("conditioning has {} frames, asked for {frames}", m.rows())))
        }
        Some(m) => m,
        None => data::conditioning(frames, style.expect("style set without a music file"), tempo),
    };
    if steps == 0 || frames < 2 || dancers == 0 {
        return Err(Error::Config("need steps >= 1, frames >= 2 and dancers >= 1".into()));
    }
    let spec: ScheduleSpec = ckpt.schedule.with_steps(steps);
    let config = format!(
        "checkpoint={}\nframes={frames}\ndancers={dancers}\nsteps={steps}\nbeta_start={}\nbeta_end={}\n\
         style={}\ntempo={tempo}\ndeterministic={}\ndelta={delta}\nseed={seed}\n",
        a.checkpoint.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        spec.beta_start,
        spec.beta_end,
        style.map_or("none", Style::as_str),
        deterministic,
    );
    print_config("generate", &config);
    let motion = ckpt.sample(&music, dancers, Some(steps), seed, deterministic)?;
    let file = MotionFile {
        sample: MotionSample {
            contact_mask: Tensor::zeros(&[dancers, frames]),
            motion,
            music,
            style,
            seed,
            tempo,
        },
        stats: ckpt.stats.clone(),
        position_channels: cfg.position_channels,
    };
    ensure_dir(&a.common.out)?;
    write_out(&a.common.out, MOTION_FILE, &file.to_bytes())?;
    println!("{MOTION_FILE}: {dancers} dancers x {frames} frames x {} channels, sampling seed {seed}", cfg.d_in);
    let mut outputs = vec![MOTION_FILE];
    if a.metrics {
        let report = MetricReport::compute(&file.sample.motion, &[], delta, cfg.position_channels)?;
        write_out(&a.common.out, METRICS_FILE, report.to_json().as_bytes())?;
        println!("{}", report.to_json());
        outputs.push(METRICS_FILE);
    }
    write_manifest(&a.common.out, "generate", &config, std::slice::from_ref(&a.checkpoint), &outputs)?;
    Ok(EXIT_OK)
}

fn metrics_cmd(a: MetricsArgs) -> Result<i32> {
    let mut kv = load_kv(&a.common, &[("delta", a.delta.map(|v| v.to_string()))])?;
    let delta: f64 = kv.take_or("delta", metrics::DEFAULT_DELTA)?;
    kv.take_raw("seed");
    kv.finish()?;
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    let files: Vec<MotionFile> = a.input.iter().map(|p| MotionFile::load(p)).collect::<Result<_>>()?;
    let first = &files[0];
    let others: Vec<Tensor> = files[1..].iter().map(|f| f.sample.motion.clone()).collect();
    let config = format!("delta={delta}\ninputs={}\n", files.len());
    print_config("metrics", &config);
    let report = MetricReport::compute(&first.sample.motion, &others, delta, first.position_channels)?;
    ensure_dir(&a.common.out)?;
    write_out(&a.common.out, METRICS_FILE, report.to_json().as_bytes())?;
    println!("{}", report.to_json());
    write_manifest(&a.common.out, "metrics", &config, &a.input, &[METRICS_FILE])?;
    Ok(EXIT_OK)
}

fn parse_block(name: &Option<String>) -> Result<Option<Block>> {
    name.as_deref().map(str::parse).transpose()
}

fn validate_cmd(a: ValidateArgs) -> Result<i32> {
    let mut kv = load_kv(&a.common, &[])?;
    let seed: u64 = kv.take_or("seed", 0)?;
    kv.finish()?;
    let perturb = parse_block(&a.perturb)?;
    print_config("validate", &format!("seed={seed}\n"));
    let results = validate::run(&ValidateOptions { seed, perturb }, |r| {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    })?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let summary = serde_json::json!({
        "passed": failed.is_empty(),
        "failed": failed,
        "suites": results,
    });
    println!("{summary}");
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("validation failed: {}", failed.join(", "));
        Ok(EXIT_VALIDATION)
    }
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<i32> {
    let mut kv = load_kv(&a.common, &[])?;
    let seed: u64 = kv.take_or("seed", 0)?;
    let h: f64 = kv.take_or("h", gradcheck::DEFAULT_STEP)?;
    let tol: f64 = kv.take_or("tolerance", gradcheck::DEFAULT_TOLERANCE)?;
    kv.finish()?;
    let perturb = parse_block(&a.perturb)?;
    print_config("grad-check", &format!("seed={seed}\nh={h}\ntolerance={tol}\n"));
    let mut failed = Vec::new();
    for b in Block::ALL {
        let r = if perturb == Some(b) {
            gradcheck::check_block_corrupted(b, seed, h, tol)?
        } else {
            gradcheck::check_block(b, seed, h, tol)?
        };
        println!(
            "{} {:<15} checked {:>4} kinks {:>2} max rel err {:.3e} ({})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.kinks,
            r.max_rel_err,
            r.worst
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if let Err(e) = gradcheck::coverage(&DenoiserConfig::default()) {
        println!("FAIL coverage: {e}");
        failed.push("coverage".into());
    }
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(EXIT_VALIDATION)
    }
}

fn bench_cmd(a: BenchArgs) -> Result<i32> {
    let mut kv = load_kv(
        &a.common,
        &[
            ("kernels", a.kernel.as_ref().map(|v| v.join(","))),
            ("grid", a.grid.as_deref().map(kv::join)),
            ("dancers", a.dancers.as_deref().map(kv::join)),
            ("reps", a.reps.map(|v| v.to_string())),
            ("threads", a.threads.map(|v| v.to_string())),
        ],
    )?;
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        reps: kv.take_or("reps", d.reps)?,
        warmup: kv.take_or("warmup", d.warmup)?,
        threads: kv.take_or("threads", d.threads)?,
        seed: kv.take_or("seed", d.seed)?,
        heads: kv.take_or("heads", d.heads)?,
        window: kv.take_or("window", d.window)?,
        top_k: kv.take_or("top_k", d.top_k)?,
        epsilon: kv.take_or("epsilon", d.epsilon)?,
    };
    let width: usize = kv.take_or("d", 64)?;
    let gcn_width: usize = kv.take_or("gcn_d", 32)?;
    let gcn_length: usize = kv.take_or("gcn_length", 64)?;
    let lengths: Vec<usize> = kv::split(&kv.take_raw("grid").unwrap_or_else(|| "512,1024,2048,4096".into()))?;
    let dancers: Vec<usize> = kv::split(&kv.take_raw("dancers").unwrap_or_else(|| "4,8,16,32,64".into()))?;
    let kernel_names: Vec<String> = kv::split(&kv.take_raw("kernels").unwrap_or_else(|| "all".into()))?;
    kv.finish()?;
    let mut kernels = Vec::new();
    for k in &kernel_names {
        if k == "all" {
            kernels.extend(Kernel::ALL);
        } else {
            kernels.push(Kernel::parse(k)?);
        }
    }
    let join = kv::join::<usize>;
    let names: Vec<&str> = kernels.iter().map(|k| k.as_str()).collect();
    let config = format!(
        "kernels={}\ngrid={}\ndancers={}\nreps={}\nwarmup={}\nthreads={}\nheads={}\nwindow={}\ntop_k={}\n\
         epsilon={}\nd={width}\ngcn_d={gcn_width}\ngcn_length={gcn_length}\nseed={}\n",
        names.join(","),
        join(&lengths),
        join(&dancers),
        cfg.reps,
        cfg.warmup,
        cfg.threads,
        cfg.heads,
        cfg.window,
        cfg.top_k,
        cfg.epsilon,
        cfg.seed
    );
    print_config("bench", &config);
    let mut warn = |m: String| eprintln!("warning: {m}");
    let mut results = Vec::new();
    for k in kernels {
        let r = match k {
            Kernel::Gcn => bench::bench_gcn(&dancers, gcn_length, gcn_width, &cfg, &mut warn)?,
            _ => bench::bench_attention(k, &lengths, width, &cfg, &mut warn)?,
        };
        println!("{:<5} slope {:.3} R^2 {:.4}", k.as_str(), r.slope, r.r2);
        results.push(r);
    }
    ensure_dir(&a.common.out)?;
    write_out(&a.common.out, BENCH_FILE, bench::results_csv(&results).as_bytes())?;
    write_manifest(&a.common.out, "bench", &config, &[], &[BENCH_FILE])?;
    Ok(EXIT_OK)
}
