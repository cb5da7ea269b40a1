use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sqwa::checkpoint::{self, Artifact};
use sqwa::losscape::{evaluate_surface, export_grid, GridSpec, LossPlane, SurfaceMode, DEFAULT_MARGIN};
use sqwa::nn::{evaluate, Network};
use sqwa::pipeline::{MetricsReport, Pipeline, RunConfig, Splits, BANK_DIR, FROZEN_CONFIG};
use sqwa::quant::ModelQuantizer;

#[derive(Parser)]
#[command(name = "sqwa", version, about = "Quantization-aware training with quantized weight averaging")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the full-precision model (or import one with --pretrained).
    Pretrain(RunArgs),
    /// Quantize the pretrained model directly.
    Quantize(RunArgs),
    /// Retrain with cyclical learning rates and capture models at cycle minima.
    RetrainCyclical(RunArgs),
    /// Average the most recent captures.
    Average(RunArgs),
    /// Re-quantize the averaged model and fine-tune it.
    Finetune(RunArgs),
    /// Run every stage and write the metrics report.
    Sqwa(RunArgs),
    /// Evaluate a loss surface on the plane through three checkpoints.
    Losscape(LosscapeArgs),
    /// Evaluate checkpoints, or re-check every number of a run's report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML). The built-in desk-scale recipe when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Target weight bit width.
    #[arg(long)]
    bits: Option<u32>,
    /// Number of most recent captures to average.
    #[arg(long)]
    average: Option<usize>,
    /// Full-precision checkpoint to use instead of pretraining.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    /// Cycle length in epochs.
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::desk_scale(self.seed.unwrap_or(0)),
        };
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.bits {
            cfg.bits = v;
        }
        if let Some(v) = self.average {
            cfg.average = v;
        }
        if let Some(v) = &self.pretrained {
            cfg.pretrain.checkpoint = Some(v.clone());
        }
        if let Some(v) = self.retrain_epochs {
            cfg.retrain.epochs = v;
        }
        if let Some(v) = self.period {
            cfg.retrain.period = v;
        }
        if let Some(v) = self.finetune_epochs {
            cfg.finetune.epochs = v;
        }
        if let Some(v) = self.finetune_lr {
            cfg.finetune.lr = Some(v);
        }
        if cfg.output_dir.as_os_str().is_empty() {
            bail!("no output directory: set output_dir in the config or pass --out");
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Quantized,
    FullPrecision,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Args)]
struct LosscapeArgs {
    /// Run directory holding the frozen config and capture bank.
    #[arg(short, long)]
    run: PathBuf,
    /// Three checkpoints spanning the plane. Defaults to the first, middle
    /// and last capture of the bank.
    #[arg(short, long, num_args = 3, value_delimiter = ',')]
    models: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "quantized")]
    mode: Mode,
    /// Grid points per axis.
    #[arg(long, default_value_t = 41)]
    resolution: usize,
    /// Margin beyond the anchors, as a fraction of their extent.
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: f64,
    #[arg(long, value_enum, default_value = "train")]
    split: Split,
    /// CSV destination; metadata goes next to it.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding the frozen config.
    #[arg(short, long)]
    run: PathBuf,
    /// Checkpoints to evaluate, relative to the run directory or absolute.
    /// Without any, every row of the run's report is recomputed and compared.
    checkpoints: Vec<PathBuf>,
}

fn open_run(dir: &Path) -> anyhow::Result<Pipeline> {
    let path = dir.join(FROZEN_CONFIG);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    cfg.output_dir = dir.to_path_buf();
    Ok(Pipeline::open(cfg)?)
}

fn resolve(run: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || p.exists() {
        p.to_path_buf()
    } else {
        run.join(p)
    }
}

/// Plane vector of a checkpoint: shadow weights for shadow models, the
/// stored weights otherwise.
fn plane_network(artifact: &Artifact) -> anyhow::Result<(Network, Option<ModelQuantizer>)> {
    Ok(match artifact {
        Artifact::FullPrecision(n) => (n.clone(), None),
        Artifact::Quantized(q) => (q.network().clone(), Some(q.quantizer().clone())),
        Artifact::Shadow(s) => (s.shadow().clone(), Some(s.quantizer().clone())),
        Artifact::Averaged(a) => (a.network().clone(), Some(a.base_quantizer().clone())),
        Artifact::Optimizer { .. } => bail!("optimizer state has no weights"),
    })
}

fn losscape(args: &LosscapeArgs) -> anyhow::Result<()> {
    let pipeline = open_run(&args.run)?;
    let paths: Vec<PathBuf> = if args.models.is_empty() {
        let bank = checkpoint::load_bank(args.run.join(BANK_DIR))?;
        let epochs = bank.epochs();
        if epochs.len() < 3 {
            bail!("the capture bank holds {} models; three are needed", epochs.len());
        }
        [0, epochs.len() / 2, epochs.len() - 1]
            .iter()
            .map(|&i| args.run.join(BANK_DIR).join(checkpoint::capture_dir_name(epochs[i])))
            .collect()
    } else {
        args.models.iter().map(|p| resolve(&args.run, p)).collect()
    };
    let mut nets = Vec::new();
    let mut quant = None;
    for p in &paths {
        let (artifact, _) = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
        let (net, q) = plane_network(&artifact)?;
        quant = quant.or(q);
        nets.push(net);
    }
    let mode = match args.mode {
        Mode::FullPrecision => SurfaceMode::FullPrecision,
        Mode::Quantized => match quant {
            Some(q) => SurfaceMode::Quantized(q),
            None => bail!("quantized mode needs at least one quantized checkpoint"),
        },
    };
    let plane = LossPlane::from_networks(&nets[0], &nets[1], &nets[2])?;
    let spec = GridSpec::around_anchors(&plane, args.margin, (args.resolution, args.resolution));
    let ds = pipeline.data().get(args.split.name())?;
    info!("losscape: {} points on {}", args.resolution * args.resolution, args.split.name());
    let mut grid = evaluate_surface(&plane, &nets[0], ds, &spec, &mode)?;
    grid.split = args.split.name().into();
    let meta = export_grid(&grid, &args.out)?;
    println!("wrote {} and {}", args.out.display(), meta.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let pipeline = open_run(&args.run)?;
    let data: &Splits = pipeline.data();
    let splits: Vec<(&str, _)> = std::iter::once(("train", &data.train))
        .chain(data.test.as_ref().map(|t| ("test", t)))
        .collect();
    if args.checkpoints.is_empty() {
        let report = MetricsReport::read(&args.run)?;
        let mut mismatches = 0;
        for row in report.baselines.iter().chain(&report.rows) {
            let (artifact, _) = checkpoint::load(args.run.join(&row.checkpoint))?;
            let net = artifact.inference_network().context("not a model checkpoint")?;
            let train = evaluate(net, &data.train)?;
            let test = data.test.as_ref().map(|t| evaluate(net, t)).transpose()?;
            let ok = train == row.scores.train && test == row.scores.test;
            mismatches += usize::from(!ok);
            println!(
                "{} {:<20} {:<28} train acc {:.4}{}",
                if ok { "ok      " } else { "MISMATCH" },
                row.label,
                row.checkpoint,
                train.accuracy,
                test.map(|e| format!(" test acc {:.4}", e.accuracy)).unwrap_or_default()
            );
        }
        if mismatches > 0 {
            bail!("{mismatches} report rows differ from their checkpoints");
        }
        return Ok(());
    }
    println!("checkpoint,split,loss,accuracy");
    for p in &args.checkpoints {
        let path = resolve(&args.run, p);
        let (artifact, _) = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        let net = artifact.inference_network().context("not a model checkpoint")?;
        for (name, ds) in &splits {
            let e = evaluate(net, ds)?;
            println!("{},{name},{},{}", p.display(), e.loss, e.accuracy);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (args, stage) = match &cli.command {
        Command::Losscape(a) => return losscape(a),
        Command::Eval(a) => return eval(a),
        Command::Pretrain(a) => (a, "pretrain"),
        Command::Quantize(a) => (a, "quantize"),
        Command::RetrainCyclical(a) => (a, "retrain-cyclical"),
        Command::Average(a) => (a, "average"),
        Command::Finetune(a) => (a, "finetune"),
        Command::Sqwa(a) => (a, "sqwa"),
    };
    let cfg = args.config()?;
    if args.dry_run {
        print!("{}", cfg.resolve()?.to_toml());
        return Ok(());
    }
    let pipeline = Pipeline::open(cfg)?;
    let out = pipeline.output_dir().display().to_string();
    match stage {
        "pretrain" => {
            pipeline.pretrain()?;
        }
        "quantize" => {
            pipeline.quantize()?;
        }
        "retrain-cyclical" => {
            let bank = pipeline.retrain()?;
            println!("captured epochs {:?}", bank.epochs());
        }
        "average" => {
            let avg = pipeline.average()?;
            println!("averaged {} models, effective bits {}", avg.count(), avg.effective_bits());
        }
        "finetune" => {
            pipeline.finetune()?;
        }
        _ => {
            let report = pipeline.report()?;
            print!("{}", report.summary());
        }
    }
    println!("{stage}: done ({out})");
    Ok(())
}

/// The error chain with causes already spelled out by their parent omitted.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
