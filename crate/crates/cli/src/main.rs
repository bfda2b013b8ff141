use clap::{Parser, Subcommand};
use sbgan_cli::commands::{self, Ctx, TrainOpts};
use sbgan_cli::RunConfig;
use sbgan_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sbgan", version, about = "Scene generation through a discrete semantic layout")]
struct Cli {
    /// Root for all relative paths.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// JSON run configuration (default: <workdir>/config.json if present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field: `--set seg.train.batch_size=8` (value is JSON, or a bare string).
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded kernels; same as SBGAN_DETERMINISTIC=1.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone, Default)]
struct Train {
    /// Step budget (per stage for train-seg).
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from the run's checkpoint.
    #[arg(long)]
    resume: bool,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
    /// Checkpoint and exit once this many steps are done.
    #[arg(long, value_name = "STEP")]
    stop_after: Option<u64>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Preset {
    Desk,
    Tiny,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the effective configuration as JSON.
    PrintConfig {
        /// Start from a built-in preset instead of the config file.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Generate the procedural toy dataset.
    MakeToyData {
        #[arg(long)]
        force: bool,
    },
    /// Train the layout generator (progressive WGAN-GP).
    TrainSeg(Train),
    /// Train the conditional image synthesizer.
    TrainSpade(Train),
    /// Fine-tune both generators end to end.
    Finetune {
        #[command(flatten)]
        train: Train,
        /// Start from fresh weights instead of the pretrained checkpoints.
        #[arg(long)]
        from_scratch: bool,
        /// Run the four freeze settings and write ablation.csv.
        #[arg(long)]
        ablate: bool,
    },
    /// Write composed samples and their colored layouts.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Synthesizer to pair with a seg checkpoint.
        #[arg(long)]
        spade_checkpoint: Option<PathBuf>,
        #[arg(short, long, default_value_t = 16)]
        n: usize,
        #[arg(long = "sample-seed", default_value_t = 0)]
        sample_seed: u64,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// FID and layout statistics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also synthesize from ground-truth validation layouts.
        #[arg(long)]
        gt_conditioning: bool,
        #[arg(long, default_value = "eval/report.json")]
        out: PathBuf,
    },
}

fn set_path(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Argument(format!("--set expects PATH=VALUE, got {assignment}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Argument(format!("--set {path}: {p} is not inside an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*p) {
                return Err(Error::Argument(format!("--set {path}: unknown field {p}")));
            }
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*p).ok_or_else(|| Error::Argument(format!("--set {path}: unknown field {p}")))?;
    }
    Ok(())
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(p) => Some(if p.is_absolute() { p.clone() } else { cli.workdir.join(p) }),
        None => Some(cli.workdir.join("config.json")).filter(|p| p.is_file()),
    };
    let base = match (&cli.cmd, file) {
        (Cmd::PrintConfig { preset: Some(Preset::Desk) }, _) => RunConfig::default(),
        (Cmd::PrintConfig { preset: Some(Preset::Tiny) }, _) => RunConfig::tiny(),
        (_, Some(p)) => RunConfig::load(&p)?,
        (_, None) => RunConfig::default(),
    };
    let mut v = base.to_json();
    for s in &cli.set {
        set_path(&mut v, s)?;
    }
    let mut cfg = RunConfig::from_json(&v)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    let steps = match &cli.cmd {
        Cmd::TrainSeg(t) | Cmd::TrainSpade(t) | Cmd::Finetune { train: t, .. } => t.steps,
        _ => None,
    };
    if let Some(n) = steps {
        match &cli.cmd {
            Cmd::TrainSeg(_) => cfg.seg.steps_per_stage = n,
            Cmd::TrainSpade(_) => cfg.spade.train.steps = n,
            _ => cfg.finetune.train.steps = n,
        }
    }
    Ok(cfg)
}

fn opts(t: &Train) -> TrainOpts {
    TrainOpts { resume: t.resume, force: t.force, stop_after: t.stop_after }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    if let Cmd::PrintConfig { .. } = cli.cmd {
        cfg.validate()?;
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let ctx = Ctx::new(cli.workdir.clone(), cfg)?;
    let out = match &cli.cmd {
        Cmd::PrintConfig { .. } => unreachable!(),
        Cmd::MakeToyData { force } => commands::make_toy_data(&ctx, *force)?,
        Cmd::TrainSeg(t) => commands::train_seg(&ctx, &opts(t))?,
        Cmd::TrainSpade(t) => commands::train_spade(&ctx, &opts(t))?,
        Cmd::Finetune { train, from_scratch, ablate } => commands::finetune(&ctx, &opts(train), *from_scratch, *ablate)?,
        Cmd::Sample { checkpoint, spade_checkpoint, n, sample_seed, out } => {
            commands::sample(&ctx, checkpoint, spade_checkpoint.as_deref(), *n, *sample_seed, out)?
        }
        Cmd::Eval { checkpoint, gt_conditioning, out } => {
            let report = commands::evaluate(&ctx, checkpoint, *gt_conditioning, out)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            ctx.resolve(out)
        }
    };
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("E_ARGUMENT: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
