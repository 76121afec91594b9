//! `ske2grid` command-line front end.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ske2grid::ablation::{run_ablation, Trend};
use ske2grid::config::{Noise, RunConfig};
use ske2grid::gradsuite;
use ske2grid::layout::Layout;
use ske2grid::network::{ModelKind, Preset};
use ske2grid::run::{final_top1, model_from_checkpoint, run_training, write_run_artifacts};
use ske2grid::skeleton::{save_dataset, Dataset, NoisePreset, Split};
use ske2grid::tensor::{DType, Scalar};
use ske2grid::train::{evaluate, Checkpoint, MetricRow};
use ske2grid::transform::{GitMode, GreedyOrder, GridSize};
use ske2grid::{Error, Result};

#[derive(Parser)]
#[command(name = "ske2grid", version, about = "Skeleton-to-grid action recognition")]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (overrides `train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Element type (overrides `train.dtype`).
    #[arg(long, global = true)]
    dtype: Option<DType>,
    /// Worker threads for parallel ablation runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData(GenDataArgs),
    /// Train one model (or the progressive schedule when enabled).
    Train(TrainArgs),
    /// Train over a growing grid schedule, one checkpoint per stage.
    Pls(PlsArgs),
    /// Evaluate a checkpoint and write its confusion matrix.
    Eval(EvalArgs),
    /// Run the f64 gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Compare design arms over several seeds.
    Ablate(AblateArgs),
    /// Export the learned grid layout of a checkpoint.
    VizLayout(VizArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Existing dataset file instead of the synthetic generator.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output file (default `<out-dir>/dataset.skds`).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    graph: Option<String>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// `clean`, `moderate`, `hard` or an explicit standard deviation.
    #[arg(long, value_parser = parse_noise)]
    noise: Option<Noise>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    kind: Option<ModelKind>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    grid: Option<GridSize>,
    #[arg(long)]
    git_mode: Option<GitMode>,
    #[arg(long)]
    greedy: Option<GreedyOrder>,
    /// Map joints straight to the grid without up-sampling.
    #[arg(long)]
    no_upt: bool,
    /// Up-sample without the adjacency factor.
    #[arg(long)]
    no_adjacency: bool,
    #[arg(long)]
    no_self_loops: bool,
    /// Keep the up-sampling matrices at their initial values.
    #[arg(long)]
    fixed_lambda: bool,
    /// Keep the index-transform assistants at their initial values.
    #[arg(long)]
    fixed_psi: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Train the progressive schedule from the config.
    #[arg(long)]
    pls: bool,
}

#[derive(Args)]
struct PlsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated grids, e.g. `5x5,6x6,7x7`.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<GridSize>,
    /// Comma-separated epochs per stage.
    #[arg(long, value_delimiter = ',')]
    stage_epochs: Vec<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per case.
    #[arg(long, default_value_t = 50)]
    instances: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated arms (default from the config).
    #[arg(long, value_delimiter = ',')]
    arms: Vec<String>,
    /// Comma-separated seeds (default from the config).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run one arm/seed at a time.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Dot,
    Svg,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_noise(s: &str) -> std::result::Result<Noise, String> {
    match s {
        "clean" => Ok(Noise::Preset(NoisePreset::Clean)),
        "moderate" => Ok(Noise::Preset(NoisePreset::Moderate)),
        "hard" => Ok(Noise::Preset(NoisePreset::Hard)),
        _ => s
            .parse::<f64>()
            .map(Noise::Sigma)
            .map_err(|_| format!("`{s}` is neither a noise preset nor a number")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = cli.dtype {
        cfg.train.dtype = d;
    }
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::GenData(a) => gen_data(cfg, a, out),
        Command::Train(a) => {
            apply_model_args(&mut cfg, &a.model);
            apply_data_args(&mut cfg, &a.data);
            if a.pls {
                cfg.pls.enabled = true;
                cfg.model.grid = cfg.pls.stages[0];
            }
            train(cfg, out)
        }
        Command::Pls(a) => {
            apply_model_args(&mut cfg, &a.model);
            apply_data_args(&mut cfg, &a.data);
            cfg.pls.enabled = true;
            if !a.stages.is_empty() {
                cfg.pls.stages = a.stages;
            }
            if !a.stage_epochs.is_empty() {
                cfg.pls.stage_epochs = Some(a.stage_epochs);
            }
            if cfg.pls.stages.is_empty() {
                return Err(Error::Config("pls: no stages given".into()));
            }
            cfg.model.grid = cfg.pls.stages[0];
            train(cfg, out)
        }
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, cli.seed.unwrap_or(0)),
        Command::Ablate(a) => {
            apply_data_args(&mut cfg, &a.data);
            if !a.arms.is_empty() {
                cfg.ablation.arms = a.arms;
            }
            if !a.seeds.is_empty() {
                cfg.ablation.seeds = a.seeds;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            ablate(cfg, out, !a.sequential)
        }
        Command::VizLayout(a) => viz_layout(a),
    }
}

fn apply_data_args(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.dataset {
        cfg.data.path = Some(p.clone());
    }
}

fn apply_model_args(cfg: &mut RunConfig, a: &ModelArgs) {
    let m = &mut cfg.model;
    if let Some(k) = a.kind {
        m.kind = k;
    }
    if let Some(p) = a.preset {
        m.preset = p;
    }
    if let Some(g) = a.grid {
        m.grid = g;
    }
    if let Some(g) = a.git_mode {
        m.git_mode = g;
    }
    if let Some(g) = a.greedy {
        m.greedy = g;
    }
    if a.no_upt {
        m.use_upt = false;
        m.use_adjacency = false;
    }
    if a.no_adjacency {
        m.use_adjacency = false;
    }
    if a.no_self_loops {
        m.self_loops = false;
    }
    if a.fixed_lambda {
        m.learnable_lambda = false;
    }
    if a.fixed_psi {
        m.learnable_psi = false;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
}

fn gen_data(mut cfg: RunConfig, a: GenDataArgs, out: &Path) -> Result<ExitCode> {
    let d = &mut cfg.data;
    d.path = None;
    if let Some(g) = a.graph {
        d.graph = g;
    }
    if let Some(c) = a.classes {
        d.n_classes = c;
    }
    if let Some(p) = a.per_class {
        d.per_class = p;
    }
    if let Some(f) = a.frames {
        d.frames = f;
    }
    if let Some(n) = a.noise {
        d.noise = n;
    }
    if let Some(s) = a.data_seed {
        d.seed = s;
    }
    cfg.validate()?;
    let ds = cfg.data.dataset()?;
    let path = a.output.unwrap_or_else(|| out.join("dataset.skds"));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&path, &ds)?;
    println!(
        "wrote {} ({} sequences, {} classes, {} train / {} val)",
        path.display(),
        ds.sequences.len(),
        ds.n_classes(),
        ds.manifest.train.len(),
        ds.manifest.val.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn print_row(stage: usize, row: &MetricRow) {
    println!(
        "stage {stage} epoch {:>3} {:<5} loss {:.4} top1 {:.2}%",
        row.epoch,
        row.split.to_string(),
        row.loss,
        100.0 * row.top1
    );
}

fn train(cfg: RunConfig, out: &Path) -> Result<ExitCode> {
    cfg.validate()?;
    let ds = cfg.data.dataset()?;
    let report = match cfg.train.dtype {
        DType::F32 => run_training::<f32>(&cfg, &ds, &mut print_row)?,
        DType::F64 => run_training::<f64>(&cfg, &ds, &mut print_row)?,
    };
    write_run_artifacts(&report, out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("config hash {}", cfg.hash());
    for (k, s) in report.stages.iter().enumerate() {
        println!("stage {} ({}) -> {}", k + 1, s.grid, out.join(format!("stage{}.sk2g", k + 1)).display());
    }
    println!("final val top-1 {:.2}%", 100.0 * final_top1(&report));
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs, out: &Path) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    match ckpt.dtype() {
        Some(DType::F64) => eval_as::<f64>(&ckpt, a.data, split, out),
        _ => eval_as::<f32>(&ckpt, a.data, split, out),
    }
}

fn eval_as<T: Scalar>(ckpt: &Checkpoint, data: DataArgs, split: Split, out: &Path) -> Result<ExitCode> {
    let (mut cfg, mut model) = model_from_checkpoint::<T>(ckpt)?;
    apply_data_args(&mut cfg, &data);
    let ds: Dataset = cfg.data.dataset()?;
    let report = evaluate(&mut model, &ds, split, cfg.train.frames, cfg.train.batch_size)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("confusion.csv");
    std::fs::write(&path, report.confusion.to_csv(&ds.manifest.class_names))?;
    println!("config hash {}", ckpt.meta.config_hash);
    println!("{split} top-1 {} loss {:.4}", report.top1, report.loss);
    println!("confusion matrix -> {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> Result<ExitCode> {
    if a.instances == 0 {
        return Err(Error::Config("--instances must be positive".into()));
    }
    let results = gradsuite::run_suite(a.instances, seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        println!("all {} cases passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} of {} cases failed", results.len());
        Ok(ExitCode::from(1))
    }
}

fn ablate(cfg: RunConfig, out: &Path, parallel: bool) -> Result<ExitCode> {
    cfg.validate()?;
    let ds = cfg.data.dataset()?;
    let report = match cfg.train.dtype {
        DType::F32 => run_ablation::<f32>(&cfg, &ds, Some(out), parallel)?,
        DType::F64 => run_ablation::<f64>(&cfg, &ds, Some(out), parallel)?,
    };
    print!("{}", report.table());
    for (better, worse) in [("git+upt", "git-only"), ("git+upt+pls", "git+upt")] {
        if let Some(t) = report.trend(better, worse) {
            let verdict = match t {
                Trend::Holds => "holds",
                Trend::Inconclusive => "inconclusive",
                Trend::Violated => "violated",
            };
            println!("{better} >= {worse}: {verdict}");
        }
    }
    println!("reports -> {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn viz_layout(a: VizArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let text = match ckpt.dtype() {
        Some(DType::F64) => render::<f64>(&ckpt, a.format)?,
        _ => render::<f32>(&ckpt, a.format)?,
    };
    match a.output {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn render<T: Scalar>(ckpt: &Checkpoint, format: Format) -> Result<String> {
    let (cfg, mut model) = model_from_checkpoint::<T>(ckpt)?;
    let graph = cfg.graph()?;
    let layout = Layout::from_model(&mut model)?;
    Ok(match format {
        Format::Csv => layout.to_csv(&graph),
        Format::Dot => layout.to_dot(&graph),
        Format::Svg => layout.to_svg(&graph),
    })
}
