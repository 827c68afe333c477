//! Command-line front end: corpus synthesis, Retinex decomposition, two-phase
//! training, single-image inference, batch evaluation, and schedule
//! inspection. Runtime failures exit 1 with a single `error:` line on stderr;
//! bad usage exits 2 via the parser.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use relight_core::checkpoint;
use relight_core::pipeline::{
    self, CorpusConfig, CorpusManifest, DegradationSpec,
};
use relight_core::training::{self, EvalEvent, Optimizer, TrainHooks};
use relight_core::{Error, ModelConfig, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "relight", version, about = "Illumination-degraded image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired low-light corpus.
    MakeData(MakeDataArgs),
    /// Split an image into reflectance and illumination maps.
    Decompose(DecomposeArgs),
    /// Train the restorer (phase 1) or the prior samplers (phase 2).
    Train(TrainArgs),
    /// Restore one image with a trained checkpoint.
    Infer(InferArgs),
    /// Score candidate images against references; CSV plus readable table.
    Eval(EvalArgs),
    /// Print the beta/alpha/alpha-bar table of a diffusion schedule.
    InspectSchedule(ScheduleArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    /// Output directory; defaults to $RELIGHT_DATA_ROOT, then ./data.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Corpus sidecar (or bare config) TOML to reproduce; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Square image size; --height/--width override per axis.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Identity degradation (lq == gt) instead of the low-light default.
    #[arg(long)]
    identity: bool,
    #[arg(long)]
    gamma_min: Option<f64>,
    #[arg(long)]
    gamma_max: Option<f64>,
    #[arg(long)]
    scale_min: Option<f64>,
    #[arg(long)]
    scale_max: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Receives reflectance.png, illumination.png, and the sidecar.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    phase: u8,
    /// Corpus directory; defaults to $RELIGHT_DATA_ROOT, then ./data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    /// Phase 2: the phase-1 checkpoint to start from. A phase-2 checkpoint
    /// resumes instead.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Base settings: compact or full.
    #[arg(long, default_value = "compact")]
    profile: String,
    /// Complete training config TOML (or a checkpoint manifest); overrides
    /// the profile, and flags override it in turn.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Execution hint; only cpu is available in this build.
    #[arg(long, default_value = "cpu")]
    device: String,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    /// Retinex-loss weight in phase 1.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Reconstruction-loss weight in phase 2.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Retinex-loss weight in phase 2.
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop phase 1 once train PSNR clears this many dB.
    #[arg(long)]
    early_stop_psnr: Option<f64>,
    /// Phase 1: require train SSIM above this value as well before stopping.
    #[arg(long)]
    early_stop_ssim: Option<f64>,
    /// Stop phase 2 once prior cosine similarity clears this value.
    #[arg(long)]
    early_stop_cosine: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    /// Phase 2: freeze the restorer instead of refining it jointly.
    #[arg(long)]
    no_joint: bool,
    /// Backpropagate only through the final sampler step.
    #[arg(long)]
    no_full_unroll: bool,
    /// Ablation: condition the restorer directly on the encoded vectors.
    #[arg(long)]
    no_diffusion: bool,
    /// Ablation: plain attention without prior modulation.
    #[arg(long)]
    no_rg_mca: bool,
    /// Ablation: plain feed-forward without prior modulation.
    #[arg(long)]
    no_dfa: bool,
    /// Ablation: drop the auxiliary decomposition decoder.
    #[arg(long)]
    no_aux_decoder: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Execution hint; only cpu is available in this build.
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference (clean) image directory.
    #[arg(long)]
    reference: PathBuf,
    /// Candidate (restored) image directory; pairs by file name.
    #[arg(long)]
    candidate: PathBuf,
    /// CSV report path; the readable table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Number of diffusion steps.
    #[arg(long = "T", default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.99)]
    beta_end: f64,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(args) => run_make_data(args),
        Command::Decompose(args) => run_decompose(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval(args) => run_eval(args),
        Command::InspectSchedule(args) => run_inspect_schedule(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn check_device(device: &str) -> Result<()> {
    if device != "cpu" {
        return Err(Error::Config(format!(
            "device '{device}' is not available; this build only runs on cpu"
        )));
    }
    Ok(())
}

fn write_sidecar<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("sidecar serialization failed: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn data_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(pipeline::default_data_root)
}

fn run_make_data(args: MakeDataArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            // The sidecar wraps the config with the per-image records; accept
            // a bare config too.
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if let Ok(manifest) = toml::from_str::<CorpusManifest>(&text) {
                manifest.config
            } else {
                toml::from_str::<CorpusConfig>(&text).map_err(|e| {
                    Error::Config(format!("corpus config {}: {e}", path.display()))
                })?
            }
        }
        None => CorpusConfig {
            count: 8,
            height: 64,
            width: 64,
            seed: 0,
            spec: DegradationSpec::dim_default(),
        },
    };
    if let Some(v) = args.count {
        cfg.count = v;
    }
    if let Some(v) = args.size {
        cfg.height = v;
        cfg.width = v;
    }
    if let Some(v) = args.height {
        cfg.height = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.identity {
        cfg.spec = DegradationSpec::identity();
    }
    let ranges = [
        (&mut cfg.spec.gamma, args.gamma_min, args.gamma_max),
        (&mut cfg.spec.scale, args.scale_min, args.scale_max),
        (&mut cfg.spec.sigma, args.sigma_min, args.sigma_max),
    ];
    for (range, lo, hi) in ranges {
        if let Some(v) = lo {
            range[0] = v;
        }
        if let Some(v) = hi {
            range[1] = v;
        }
    }
    let root = data_root(args.root);
    let manifest = pipeline::make_data(&root, &cfg)?;
    println!(
        "wrote {} image pairs ({}x{}) under {}",
        manifest.images.len(),
        cfg.height,
        cfg.width,
        root.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DecomposeSidecar {
    input: PathBuf,
    reflectance: PathBuf,
    illumination: PathBuf,
}

fn run_decompose(args: DecomposeArgs) -> Result<()> {
    let img = pipeline::load_png(&args.input)?;
    let pair = relight_core::decompose(&img);
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let r_path = args.out_dir.join("reflectance.png");
    let l_path = args.out_dir.join("illumination.png");
    pipeline::save_png(&r_path, &pair.reflectance)?;
    pipeline::save_png_gray(&l_path, &pair.illumination)?;
    write_sidecar(
        &args.out_dir.join("decompose.toml"),
        &DecomposeSidecar {
            input: args.input,
            reflectance: r_path.clone(),
            illumination: l_path.clone(),
        },
    )?;
    println!("wrote {} and {}", r_path.display(), l_path.display());
    Ok(())
}

/// Either a bare training config or a checkpoint manifest wrapping one.
fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(cfg) = toml::from_str::<TrainConfig>(&text) {
        return Ok(cfg);
    }
    #[derive(Deserialize)]
    struct ManifestConfig {
        config: TrainConfig,
    }
    toml::from_str::<ManifestConfig>(&text)
        .map(|m| m.config)
        .map_err(|e| Error::Config(format!("training config {}: {e}", path.display())))
}

fn base_profile(name: &str, phase: u8) -> Result<TrainConfig> {
    match name {
        "compact" => Ok(TrainConfig::compact(phase)),
        "full" => Ok(TrainConfig::full(phase)),
        other => Err(Error::Config(format!(
            "unknown profile '{other}', expected compact or full"
        ))),
    }
}

fn apply_train_flags(cfg: &mut TrainConfig, args: &TrainArgs) {
    cfg.phase = args.phase;
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.patch {
        cfg.patch = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr_start {
        cfg.lr_start = v;
    }
    if let Some(v) = args.lr_end {
        cfg.lr_end = v;
    }
    if let Some(v) = args.lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = args.lambda3 {
        cfg.lambda3 = v;
    }
    if let Some(v) = args.log_every {
        cfg.log_every = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if args.early_stop_psnr.is_some() {
        cfg.early_stop_psnr = args.early_stop_psnr;
    }
    if args.early_stop_cosine.is_some() {
        cfg.early_stop_cosine = args.early_stop_cosine;
    }
    if args.no_augment {
        cfg.augment = false;
    }
    if args.no_joint {
        cfg.joint = false;
    }
    if args.no_full_unroll {
        cfg.full_unroll = false;
    }
    if args.no_diffusion {
        cfg.model.use_diffusion = false;
    }
    if args.no_rg_mca {
        cfg.model.use_rg_mca = false;
    }
    if args.no_dfa {
        cfg.model.use_dfa = false;
    }
    if args.no_aux_decoder {
        cfg.model.use_aux_decoder = false;
    }
}

fn print_eval(e: &EvalEvent) {
    if let Some(psnr) = e.train_psnr {
        println!("iter {:>6}  eval train PSNR {psnr:.2} dB", e.iteration);
    }
    if let Some(p) = e.prior {
        println!(
            "iter {:>6}  eval prior cosine {:.4}  sampled {:.2} dB  random {:.2} dB",
            e.iteration, p.mean_cosine, p.psnr_sampled, p.psnr_random
        );
    }
}

fn print_report(r: &training::LossReport) {
    let get = |k: &str| r.components.get(k).copied().unwrap_or(0.0);
    println!(
        "iter {:>6}  lr {:.3e}  loss {:.6}  rec {:.6}  retinex {:.6}  dif_r {:.6}  dif_l {:.6}",
        r.iteration,
        r.lr,
        r.total,
        get("rec"),
        get("retinex"),
        get("dif_r"),
        get("dif_l"),
    );
}

fn run_train(args: TrainArgs) -> Result<()> {
    check_device(&args.device)?;
    let mut cfg = match &args.config {
        Some(path) => load_train_config(path)?,
        None => base_profile(&args.profile, args.phase)?,
    };
    apply_train_flags(&mut cfg, &args);
    cfg.validate()?;
    if cfg.phase == 2 && args.init_from.is_none() {
        return Err(Error::Config(
            "phase 2 starts from a phase-1 run; pass --init-from <checkpoint dir>".into(),
        ));
    }

    let root = data_root(args.data);
    let data = pipeline::load_corpus(&root)?;
    println!("loaded {} training pairs from {}", data.len(), root.display());

    let mut start_iteration = 0;
    let mut history = Vec::new();
    let (mut params, mut opt) = match (cfg.phase, &args.init_from) {
        (1, None) => {
            let params = training::init_model(&cfg.model, cfg.seed);
            let opt = Optimizer::new(&params, &cfg);
            (params, opt)
        }
        (1, Some(path)) => {
            // Same-phase restart continues with the saved optimizer state.
            let ck = checkpoint::load(path)?;
            if ck.config.phase != 1 {
                return Err(Error::Config(format!(
                    "{} holds a phase {} run, expected phase 1",
                    path.display(),
                    ck.config.phase
                )));
            }
            require_same_model(&ck.config.model, &cfg.model, path)?;
            start_iteration = ck.iteration;
            history = ck.history;
            (ck.params, ck.opt)
        }
        (2, Some(path)) => {
            let ck = checkpoint::load(path)?;
            require_same_model(&ck.config.model, &cfg.model, path)?;
            if ck.config.phase == 2 {
                start_iteration = ck.iteration;
                history = ck.history;
                (ck.params, ck.opt)
            } else {
                // Fresh optimizer: phase 2 minimizes a different objective.
                let opt = Optimizer::new(&ck.params, &cfg);
                (ck.params, opt)
            }
        }
        (2, None) => unreachable!("guarded before data loading"),
        _ => unreachable!("validate() pinned phase to 1 or 2"),
    };

    let summary = training::run_training(
        &cfg,
        &data,
        &mut params,
        &mut opt,
        start_iteration,
        &mut history,
        TrainHooks {
            on_report: Some(&mut print_report),
            on_eval: Some(&mut print_eval),
        },
    )?;

    let end_iteration = start_iteration + summary.iterations_run;
    checkpoint::save(&args.out, &cfg, end_iteration, &params, &opt, &history)?;
    println!(
        "saved checkpoint at iteration {} to {}{}",
        end_iteration,
        args.out.display(),
        if summary.stopped_early { " (stopped early)" } else { "" }
    );
    if let Some(psnr) = summary.final_train_psnr {
        println!("train PSNR {psnr:.2} dB");
    }
    if let Some(pe) = summary.final_prior_eval {
        println!(
            "prior cosine {:.4}, sampled-prior PSNR {:.2} dB vs random-prior {:.2} dB",
            pe.mean_cosine, pe.psnr_sampled, pe.psnr_random
        );
    }
    Ok(())
}

fn require_same_model(saved: &ModelConfig, requested: &ModelConfig, path: &Path) -> Result<()> {
    if saved != requested {
        return Err(Error::Config(format!(
            "model settings disagree with the checkpoint at {}; drop the conflicting flags or rebuild",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct InferSidecar {
    checkpoint: PathBuf,
    config_digest: String,
    input: PathBuf,
    output: PathBuf,
    seed: u64,
}

fn run_infer(args: InferArgs) -> Result<()> {
    check_device(&args.device)?;
    let ck = checkpoint::load(&args.checkpoint)?;
    let lq = pipeline::load_png(&args.input)?;
    let out = pipeline::infer_image(&ck.params, &ck.config.model, &lq, args.seed)?;
    if let Some(parent) = args.output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    pipeline::save_png(&args.output, &out)?;
    let sidecar = PathBuf::from(format!("{}.toml", args.output.display()));
    write_sidecar(
        &sidecar,
        &InferSidecar {
            checkpoint: args.checkpoint,
            config_digest: ck.config.digest(),
            input: args.input,
            output: args.output.clone(),
            seed: args.seed,
        },
    )?;
    println!("wrote {}", args.output.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalSidecar {
    reference: PathBuf,
    candidate: PathBuf,
    out: PathBuf,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let pairs = pipeline::load_paired_dirs(&args.reference, &args.candidate)?;
    let report = pipeline::evaluate(&pairs)?;
    println!("{:<12} {:>10} {:>8}", "image", "psnr_db", "ssim");
    for row in &report.rows {
        println!("{:<12} {:>10} {:>8.4}", row.image, fmt_db(row.psnr_db), row.ssim);
    }
    println!(
        "{:<12} {:>10} {:>8.4}",
        "mean",
        fmt_db(report.mean_psnr_db),
        report.mean_ssim
    );
    if let Some(out) = args.out {
        fs::write(&out, pipeline::eval_csv(&report)).map_err(|e| Error::io(&out, e))?;
        let sidecar = PathBuf::from(format!("{}.toml", out.display()));
        write_sidecar(
            &sidecar,
            &EvalSidecar {
                reference: args.reference,
                candidate: args.candidate,
                out: out.clone(),
            },
        )?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

fn run_inspect_schedule(args: ScheduleArgs) -> Result<()> {
    if args.steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < args.beta_start && args.beta_start <= args.beta_end && args.beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range ({}, {}) must satisfy 0 < start <= end < 1",
            args.beta_start, args.beta_end
        )));
    }
    let sched = relight_core::rldm::make_schedule(args.steps, args.beta_start, args.beta_end);
    println!("{:>4} {:>12} {:>12} {:>14}", "t", "beta", "alpha", "alpha_bar");
    for t in 1..=args.steps {
        println!(
            "{:>4} {:>12.6} {:>12.6} {:>14.6e}",
            t,
            sched.beta[t - 1],
            sched.alpha[t - 1],
            sched.alpha_bar[t - 1],
        );
    }
    Ok(())
}
