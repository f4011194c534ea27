//! Command-line driver.
//!
//! Every subcommand returns an exit code: 0 on success, 2 for usage,
//! validation and I/O problems, 3 for numeric failures.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;

use crate::error::{Result, SfsegError};
use crate::gaussian3d::GaussianKernelSpec;
use crate::learn::{
    history_csv, train, LossConfig, OptimizerConfig, PipelineWeights, TrainConfig, TrainingInstance,
};
use crate::metrics::{iou, tcont};
use crate::oracle::{
    angle_degrees, bench_compare, bench_csv, build_matrix_capped, leading_eigenvector, rotate_away,
    KernelKind, DEFAULT_NODE_CAP,
};
use crate::spectral::{
    combine_channels, hard_threshold, rescale_to_unit_max, segment_offline_observed, segment_online,
    SpectralConfig,
};
use crate::synth::{add_uniform_noise, ensemble_channels, generate, NoiseKind, SynthShape, SynthSpec};
use crate::volume::{
    export_pgm_sequence, load_vvf, save_vvf, ChannelStack, FlowField, Shape, VideoVolume,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "SFSEG_THREADS";

/// Parsed command line.
#[derive(Debug, Parser)]
#[command(name = "sfseg", version, about = "Spectral filtering video segmentation")]
#[command(args_override_self = true)]
pub struct RunConfig {
    /// Worker threads; falls back to SFSEG_THREADS, then to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` file supplying defaults for the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Refine a soft mask video.
    Segment(SegmentArgs),
    /// Learn channel weights from ground truth.
    Train(TrainArgs),
    /// Score predictions with IoU and TCONT.
    Eval(EvalArgs),
    /// Compare the filtering loop against the explicit eigenvector.
    Oracle(OracleArgs),
    /// Time filtering against explicit-matrix power iteration.
    Bench(BenchArgs),
    /// Write a synthetic moving-shape video, noisy variants and flows.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SpectralArgs {
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub p: f64,
    /// Total sweeps.
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    /// Sweeps before soft-binarization.
    #[arg(long, default_value_t = 3)]
    pub cont: usize,
    /// Temporal window half-width.
    #[arg(long, default_value_t = 6)]
    pub window: usize,
    /// Kernel radii as `t,y,x`.
    #[arg(long, default_value = "1,3,3", value_parser = parse_radii)]
    pub kernel_radii: [usize; 3],
    /// Kernel sigmas as `t,y,x`.
    #[arg(long, default_value = "1,2,2", value_parser = parse_sigmas)]
    pub kernel_sigmas: [f64; 3],
    #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
    pub steepness: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub steepness_growth: f64,
    /// Only update frames whose whole window lies inside the video.
    #[arg(long)]
    pub strict_bounds: bool,
}

impl SpectralArgs {
    pub fn to_config(&self) -> Result<SpectralConfig> {
        let cfg = SpectralConfig {
            alpha: self.alpha,
            p: self.p,
            n_iter: self.iters,
            n_cont: self.cont,
            window_radius_t: self.window,
            kernel: GaussianKernelSpec::new(self.kernel_radii, self.kernel_sigmas)?,
            binarize_steepness_start: self.steepness,
            binarize_steepness_growth: self.steepness_growth,
            strict_paper_bounds: self.strict_bounds,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Unary map (single-channel VVF).
    #[arg(long, conflicts_with = "channels")]
    pub unary: Option<PathBuf>,
    /// Pairwise map; the unary map is reused when absent.
    #[arg(long, requires = "unary")]
    pub pairwise: Option<PathBuf>,
    /// Multi-channel VVF combined with --weights.
    #[arg(long, requires = "weights")]
    pub channels: Option<PathBuf>,
    #[arg(long, requires = "channels")]
    pub weights: Option<PathBuf>,
    /// Soft mask output (VVF).
    #[arg(short, long)]
    pub output: PathBuf,
    /// Directory for the thresholded PGM frames; `<output>_frames` by default.
    #[arg(long)]
    pub pgm_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Process sliding sub-windows instead of the whole video.
    #[arg(long)]
    pub online: bool,
    #[arg(long, default_value_t = 5)]
    pub subwindow: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[command(flatten)]
    pub spectral: SpectralArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Channel VVF of one training video; repeat for more videos.
    #[arg(long, required = true)]
    pub channels: Vec<PathBuf>,
    /// Ground-truth VVF matching each --channels, in order.
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    /// Weights output.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Loss history CSV; `<output stem>_history.csv` by default.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Starting weights; the uniform average by default.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.5)]
    pub plateau_factor: f64,
    /// Frames per random training clip; 0 trains on whole videos.
    #[arg(long, default_value_t = 5)]
    pub clip_frames: usize,
    /// Learn separate weights for the pairwise map.
    #[arg(long)]
    pub independent_pairwise: bool,
    #[arg(long, default_value_t = 0.75)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub dice_eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub spectral: SpectralArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// IoU CSV; printed to stdout when absent.
    #[arg(long)]
    pub iou_csv: Option<PathBuf>,
    /// Also compute TCONT from --flow-dir and --flow-rev.
    #[arg(long)]
    pub tcont: bool,
    /// Direct flow (2-channel VVF: dx, dy).
    #[arg(long)]
    pub flow_dir: Option<PathBuf>,
    /// Reverse flow (2-channel VVF: dx, dy).
    #[arg(long)]
    pub flow_rev: Option<PathBuf>,
    /// TCONT CSV; printed to stdout when absent.
    #[arg(long)]
    pub tcont_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Unary map VVF; a noisy synthetic disk is generated when absent.
    #[arg(long)]
    pub unary: Option<PathBuf>,
    #[arg(long, requires = "unary")]
    pub pairwise: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub frames: usize,
    #[arg(long, default_value_t = 10)]
    pub height: usize,
    #[arg(long, default_value_t = 10)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Affinity of the explicit matrix: exponential or taylor.
    #[arg(long, default_value_t = KernelKind::Taylor)]
    pub kind: KernelKind,
    /// Angle in degrees between the start vector and the exact eigenvector.
    #[arg(long, default_value_t = 70.0)]
    pub misinit_angle: f64,
    #[arg(long, default_value_t = 50)]
    pub sweeps: usize,
    /// Largest explicit matrix allowed, in nodes.
    #[arg(long, default_value_t = DEFAULT_NODE_CAP)]
    pub nodes_cap: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 100_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    #[arg(long, default_value = "1,3,3", value_parser = parse_radii)]
    pub kernel_radii: [usize; 3],
    #[arg(long, default_value = "1,2,2", value_parser = parse_sigmas)]
    pub kernel_sigmas: [f64; 3],
    /// CSV output; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated `FxHxW` sizes.
    #[arg(long, default_value = "10x20x20,20x20x20", value_delimiter = ',', value_parser = parse_sizes)]
    pub sizes: Vec<Shape>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "1,3,3", value_parser = parse_radii)]
    pub kernel_radii: [usize; 3],
    #[arg(long, default_value = "1,2,2", value_parser = parse_sigmas)]
    pub kernel_sigmas: [f64; 3],
    /// CSV output; stdout when absent.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 11)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// `rect` or `disk`.
    #[arg(long, default_value = "rect")]
    pub shape: String,
    /// Rectangle size as `HxW`.
    #[arg(long, default_value = "8x10", value_parser = parse_pair_x)]
    pub size: (usize, usize),
    /// Disk radius.
    #[arg(long, default_value_t = 5)]
    pub radius: usize,
    /// Top-left corner (or disk centre) in frame 0 as `y,x`; drawn from the seed when absent.
    #[arg(long, value_parser = parse_ivec2, allow_hyphen_values = true)]
    pub start: Option<(i64, i64)>,
    /// Pixels per frame as `vy,vx`.
    #[arg(long, default_value = "0,1", value_parser = parse_ivec2, allow_hyphen_values = true)]
    pub velocity: (i64, i64),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise families to emit (uniform, sp, bwr).
    #[arg(long, value_delimiter = ',', default_value = "uniform,sp,bwr")]
    pub noise: Vec<NoiseKind>,
    /// Also write `channels.vvf` with this many clean copies...
    #[arg(long, default_value_t = 0)]
    pub ensemble_clean: usize,
    /// ...followed by this many U[0,1] channels.
    #[arg(long, default_value_t = 0)]
    pub ensemble_noise: usize,
    #[arg(short, long)]
    pub out_dir: PathBuf,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("bad value {p:?} in {s:?}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn parse_radii(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_triple(s)
}

fn parse_sigmas(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_triple(s)
}

fn parse_sizes(s: &str) -> std::result::Result<Shape, String> {
    let dims: Vec<&str> = s.split('x').collect();
    let [f, h, w] = dims[..] else {
        return Err(format!("expected FxHxW, got {s:?}"));
    };
    let n = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}"));
    Shape::new(n(f)?, n(h)?, n(w)?).map_err(|e| e.to_string())
}

fn parse_pair_x(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad size {s:?}"));
    Ok((n(a)?, n(b)?))
}

fn parse_ivec2(s: &str) -> std::result::Result<(i64, i64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected y,x, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<i64>().map_err(|_| format!("bad integer in {s:?}"));
    Ok((n(a)?, n(b)?))
}

impl clap::ValueEnum for KernelKind {
    fn value_variants<'a>() -> &'a [Self] {
        &[KernelKind::Exponential, KernelKind::Taylor]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            KernelKind::Exponential => "exponential",
            KernelKind::Taylor => "taylor",
        }))
    }
}

impl clap::ValueEnum for NoiseKind {
    fn value_variants<'a>() -> &'a [Self] {
        &NoiseKind::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            NoiseKind::Uniform => "uniform",
            NoiseKind::SaltPepper => "sp",
            NoiseKind::Rectangles => "bwr",
        }))
    }
}

/// Splices `key = value` lines from a config file into the argument list
/// right after the subcommand name, so flags given on the command line win.
fn apply_config_file(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    let mut sub_pos = None;
    let mut i = 1;
    while i < strs.len() {
        let a = strs[i].as_str();
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if a == "--config" {
            config = strs.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if a == "--threads" {
            i += 1;
        } else if !a.starts_with('-') && sub_pos.is_none() {
            sub_pos = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(pos)) = (config, sub_pos) else {
        return Ok(args);
    };
    let cmd = RunConfig::command();
    let Some(sub) = cmd.find_subcommand(&strs[pos]) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| SfsegError::io(&path, e))?;
    let mut extra: Vec<OsString> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| SfsegError::Validation(format!("{}:{}: {m}", path.display(), lineno + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad("expected `key = value`".into()))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| bad(format!("unknown key {key:?} for `{}`", strs[pos])))?;
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}").into());
            extra.push(value.into());
        } else {
            match value {
                "true" | "yes" | "1" => extra.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                other => return Err(bad(format!("{key} expects true or false, got {other:?}"))),
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(v.trim().parse::<usize>().map_err(|_| {
                SfsegError::Validation(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
            })?),
            _ => None,
        },
    };
    if n == Some(0) {
        return Err(SfsegError::Validation("--threads must be positive".into()));
    }
    Ok(n)
}

fn exit_code(e: &SfsegError) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Parses `args` (program name first), runs the command and returns its exit
/// code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match apply_config_file(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("SFSEG_LOG")
        .try_init();

    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: RunConfig) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| SfsegError::Validation(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Segment(a) => cmd_segment(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Synth(a) => cmd_synth(&a),
    })
}

fn load_single(path: &Path, what: &str) -> Result<VideoVolume> {
    let stack = load_vvf(path)?;
    if stack.len() != 1 {
        return Err(SfsegError::Validation(format!(
            "{what} {} has {} channels, expected 1",
            path.display(),
            stack.len()
        )));
    }
    Ok(stack.into_channels().remove(0))
}

fn load_flow(path: Option<&PathBuf>, flag: &str) -> Result<FlowField> {
    let path = path.ok_or_else(|| SfsegError::Validation(format!("--tcont needs {flag}")))?;
    FlowField::from_stack(load_vvf(path)?)
}

fn write_or_print(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| SfsegError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let cfg = a.spectral.to_config()?;
    let (s, f) = match (&a.unary, &a.channels) {
        (Some(u), None) => {
            let s = load_single(u, "--unary")?;
            let f = match &a.pairwise {
                Some(p) => load_single(p, "--pairwise")?,
                None => s.clone(),
            };
            (s, f)
        }
        (None, Some(c)) => {
            let stack = load_vvf(c)?;
            let weights = PipelineWeights::load(a.weights.as_ref().expect("clap requires --weights"))?;
            let s = combine_channels(&stack, &weights.unary)?;
            let f = combine_channels(&stack, weights.pairwise_weights())?;
            (s, f)
        }
        _ => {
            return Err(SfsegError::Validation(
                "give --unary [--pairwise] or --channels with --weights".into(),
            ))
        }
    };
    let x = if a.online {
        segment_online(&s, &f, &cfg, a.subwindow, a.stride)?
    } else {
        segment_offline_observed(&s, &f, &cfg, None, &mut |_, _| {})?.0
    };
    save_vvf(&ChannelStack::single(x.clone()), &a.output)?;
    let mask = hard_threshold(&x, a.threshold);
    let dir = a.pgm_dir.clone().unwrap_or_else(|| sibling(&a.output, "_frames"));
    std::fs::create_dir_all(&dir).map_err(|e| SfsegError::io(&dir, e))?;
    export_pgm_sequence(&mask, &dir, "mask")?;

    let mut out = String::from("frame,mean,foreground_fraction\n");
    for t in 0..x.frames() {
        let fr = x.frame(t);
        let mean = fr.iter().sum::<f64>() / fr.len() as f64;
        let fg = mask.frame(t).iter().sum::<f64>() / fr.len() as f64;
        let _ = writeln!(out, "{t},{mean:.6},{fg:.6}");
    }
    print!("{out}");
    info!("wrote {} and {}", a.output.display(), dir.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.channels.len() != a.gt.len() {
        return Err(SfsegError::Validation(format!(
            "{} --channels files but {} --gt files",
            a.channels.len(),
            a.gt.len()
        )));
    }
    let spectral = a.spectral.to_config()?;
    let mut instances = Vec::with_capacity(a.channels.len());
    for (c, g) in a.channels.iter().zip(&a.gt) {
        let gt = load_single(g, "--gt")?;
        instances.push(TrainingInstance::new(load_vvf(c)?, gt)?);
    }
    let initial = a.init.as_deref().map(PipelineWeights::load).transpose()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        fd_step: a.fd_step,
        optimizer: OptimizerConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.adam_eps,
            weight_decay: a.weight_decay,
        },
        plateau_patience: a.patience,
        plateau_factor: a.plateau_factor,
        clip_frames: (a.clip_frames > 0).then_some(a.clip_frames),
        independent_pairwise: a.independent_pairwise,
        initial,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let loss = LossConfig {
        gamma: a.gamma,
        epsilon_dice: a.dice_eps,
    };
    let out = train(&instances, &spectral, &loss, &cfg)?;
    out.weights.save(&a.output)?;
    let hist = a.history.clone().unwrap_or_else(|| sibling(&a.output, "_history.csv"));
    std::fs::write(&hist, history_csv(&out.history)).map_err(|e| SfsegError::io(&hist, e))?;
    println!(
        "best epoch {} loss {:.6e} (initial {:.6e})",
        out.best_epoch, out.history[out.best_epoch].loss, out.history[0].loss
    );
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let pred = load_single(&a.pred, "--pred")?;
    let gt = load_single(&a.gt, "--gt")?;
    // load the flows first so a missing file fails before any output
    let flows = if a.tcont {
        Some((
            load_flow(a.flow_dir.as_ref(), "--flow-dir")?,
            load_flow(a.flow_rev.as_ref(), "--flow-rev")?,
        ))
    } else {
        None
    };
    let report = iou(&pred, &gt, a.threshold)?;
    write_or_print(a.iou_csv.as_ref(), &report.to_csv())?;
    if let Some((fd, fr)) = flows {
        let t = tcont(&pred, &gt, &fd, &fr, a.threshold)?;
        if a.tcont_csv.is_none() {
            println!("# tcont");
        }
        write_or_print(a.tcont_csv.as_ref(), &t.to_csv())?;
    }
    Ok(())
}

pub fn cmd_oracle(a: &OracleArgs) -> Result<()> {
    let (s, f) = match &a.unary {
        Some(u) => {
            let s = load_single(u, "--unary")?;
            let f = match &a.pairwise {
                Some(p) => load_single(p, "--pairwise")?,
                None => s.clone(),
            };
            (s, f)
        }
        None => {
            let shape = Shape::new(a.frames, a.height, a.width)?;
            if shape.voxels() > a.nodes_cap {
                return Err(SfsegError::Size(format!(
                    "{shape} has {} nodes, above the explicit-matrix cap of {}",
                    shape.voxels(),
                    a.nodes_cap
                )));
            }
            let radius = (a.height.min(a.width) / 4).max(1);
            let video = generate(&SynthSpec {
                frames: a.frames,
                height: a.height,
                width: a.width,
                shape: SynthShape::Disk { radius },
                start: Some(((a.height / 2) as i64, (a.width / 2) as i64)),
                velocity: (0, 0),
                seed: a.seed,
            })?;
            let s = add_uniform_noise(&video.mask, 0.3, a.seed)?;
            (s.clone(), s)
        }
    };
    let kernel = GaussianKernelSpec::new(a.kernel_radii, a.kernel_sigmas)?;
    let g = build_matrix_capped(&s, &f, &kernel, a.alpha, a.p, a.kind, a.nodes_cap)?;
    let eig = leading_eigenvector(&g, a.tol, a.max_iter)?;
    let oracle = VideoVolume::new(s.shape(), eig.vector.clone())?;
    let oracle_mask = hard_threshold(&rescale_to_unit_max(&oracle), 0.5);

    let cfg = SpectralConfig {
        alpha: a.alpha,
        p: a.p,
        n_iter: a.sweeps,
        n_cont: a.sweeps,
        window_radius_t: s.frames(),
        kernel,
        ..SpectralConfig::default()
    };
    let start = VideoVolume::new(s.shape(), rotate_away(&eig.vector, a.misinit_angle)?)?;

    let mut csv = format!("# kind={}\niter,angle_deg,iou\n", a.kind);
    let mut row = |k: usize, x: &VideoVolume| -> Result<()> {
        let angle = angle_degrees(x.data(), &eig.vector)?;
        let j = iou(&rescale_to_unit_max(x), &oracle_mask, 0.5)?.mean;
        let _ = writeln!(csv, "{k},{angle:.9},{j:.9}");
        Ok(())
    };
    row(0, &start)?;
    let mut failure = None;
    segment_offline_observed(&s, &f, &cfg, Some(&start), &mut |k, x| {
        if failure.is_none() {
            failure = row(k, x).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    write_or_print(a.output.as_ref(), &csv)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let kernel = GaussianKernelSpec::new(a.kernel_radii, a.kernel_sigmas)?;
    let rows = bench_compare(&a.sizes, &kernel, a.reps, a.iters, a.seed)?;
    write_or_print(a.output.as_ref(), &bench_csv(&rows))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let shape = match a.shape.as_str() {
        "rect" | "rectangle" => SynthShape::Rectangle {
            height: a.size.0,
            width: a.size.1,
        },
        "disk" => SynthShape::Disk { radius: a.radius },
        other => {
            return Err(SfsegError::Validation(format!(
                "--shape must be rect or disk, got {other:?}"
            )))
        }
    };
    let video = generate(&SynthSpec {
        frames: a.frames,
        height: a.height,
        width: a.width,
        shape,
        start: a.start,
        velocity: a.velocity,
        seed: a.seed,
    })?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| SfsegError::io(&a.out_dir, e))?;
    let dir = &a.out_dir;
    save_vvf(&ChannelStack::single(video.mask.clone()), dir.join("mask.vvf"))?;
    save_vvf(&video.flow_dir.to_stack(), dir.join("flow_dir.vvf"))?;
    save_vvf(&video.flow_rev.to_stack(), dir.join("flow_rev.vvf"))?;
    for (k, kind) in a.noise.iter().enumerate() {
        let noisy = kind.apply(&video.mask, a.seed.wrapping_add(1 + k as u64))?;
        save_vvf(&ChannelStack::single(noisy), dir.join(format!("noisy_{kind}.vvf")))?;
    }
    if a.ensemble_clean + a.ensemble_noise > 0 {
        let stack = ensemble_channels(&video.mask, a.ensemble_clean, a.ensemble_noise, a.seed)?;
        save_vvf(&stack, dir.join("channels.vvf"))?;
    }
    println!("wrote {}", dir.display());
    Ok(())
}
