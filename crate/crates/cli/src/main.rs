use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use s2ut_core::analysis::{render_reports, RunDumps, ShiftReport};
use s2ut_core::data::{generate_dataset, write_dataset, TaskSpec, TASK_FILE};
use s2ut_core::decoding::{DecodeMode, DecodeOptions};
use s2ut_core::experiment::{eval_run, load_run, run_id, train_run, RunManifest, EVAL_DIR, RUN_CONFIG};
use s2ut_core::gradsuite::{run_grad_suite, SuiteConfig};
use s2ut_core::model::MtpVariant;
use s2ut_core::tokens::text;
use s2ut_core::training::RunConfig;

mod matrix;

#[derive(Parser, Debug)]
#[command(
    name = "s2ut",
    version,
    about = "Speech-to-unit translation with multi-token prediction objectives on a synthetic task",
    arg_required_else_help = true
)]
struct Cli {
    /// Output root used when a command's --out is omitted.
    #[arg(long, env = "S2UT_OUT", default_value = "runs", global = true)]
    root: PathBuf,

    /// Log training progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its task spec.
    GenData(GenDataArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Decode a split with a trained run and score BLEU.
    Eval(EvalArgs),
    /// Entropy and first-occurrence reports for one run.
    Analyze(AnalyzeArgs),
    /// Finite-difference checks of every primitive and objective.
    GradCheck(GradCheckArgs),
    /// Aggregate several runs into tables and plots.
    Report(ReportArgs),
    /// Train and evaluate every (variant, seed) pair and build the comparison table.
    RunMatrix(matrix::MatrixArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Dataset directory [default: <root>/data].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Task spec TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

/// Run configuration sources shared by `train` and `run-matrix`.
#[derive(Args, Debug, Clone, Default)]
pub struct RunOverrides {
    /// Run config TOML with [model], [train] and [weights] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub mtp_n: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl RunOverrides {
    /// Config file, then flags, then task-derived widths.
    pub fn build(&self, spec: &TaskSpec, variant: Option<MtpVariant>, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml(&read(p)?)?,
            None => RunConfig::default(),
        };
        if let Some(v) = variant {
            cfg.model.mtp_variant = v;
        }
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(n) = self.mtp_n {
            cfg.model.mtp_n = n;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        cfg.model.feat_dim = spec.feat_dim;
        cfg.model.unit_vocab = spec.unit_vocab();
        cfg.model.text_vocab = spec.text_vocab();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory [default: <root>/data].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory [default: <root>/<variant>_s<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<MtpVariant>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    run: RunOverrides,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory [default: the one recorded by training].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, value_delimiter = ',', default_value = "greedy,beam5,beam10")]
    modes: Vec<String>,
    /// Rank finished beam hypotheses by per-token log-probability.
    #[arg(long)]
    length_norm: bool,
    /// Store full greedy next-unit distributions in the dumps.
    #[arg(long)]
    keep_distributions: bool,
    /// Generation limit [default: from the task spec].
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    run: PathBuf,
    /// Baseline run for entropy deltas.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Output directory [default: <run>/analysis].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report the pooled first-occurrence mean instead of per-sample-then-corpus.
    #[arg(long)]
    pooled: bool,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Coordinates probed per model parameter tensor.
    #[arg(long, default_value_t = 4)]
    coords: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories, or directories containing run directories.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output directory [default: <root>/report].
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn read_spec(data: &Path) -> Result<TaskSpec> {
    Ok(TaskSpec::from_toml(&read(&data.join(TASK_FILE))?)?)
}

fn gen_data(root: &Path, a: GenDataArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => TaskSpec::from_toml(&read(p)?)?,
        None => TaskSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.n_train = a.n_train.unwrap_or(spec.n_train);
    spec.n_dev = a.n_dev.unwrap_or(spec.n_dev);
    spec.n_test = a.n_test.unwrap_or(spec.n_test);
    let out = a.out.unwrap_or_else(|| root.join("data"));
    let d = generate_dataset(&spec)?;
    write_dataset(&out, &d)?;
    println!(
        "wrote {} ({} train / {} dev / {} test)",
        out.display(),
        d.train.len(),
        d.dev.len(),
        d.test.len()
    );
    Ok(())
}

fn train(root: &Path, a: TrainArgs) -> Result<()> {
    let data = a.data.unwrap_or_else(|| root.join("data"));
    let spec = read_spec(&data)?;
    let cfg = a.run.build(&spec, a.variant, a.seed)?;
    let out = a
        .out
        .unwrap_or_else(|| root.join(run_id(cfg.variant(), cfg.train.seed)));
    train_run(&data, &out, cfg, a.resume)?;
    RunManifest::read(&out)?.verify(&out)?;
    println!("trained {}", out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = match a.data {
        Some(d) => d,
        None => PathBuf::from(RunManifest::read(&a.run)?.dataset),
    };
    let spec = read_spec(&data)?;
    let modes = a
        .modes
        .iter()
        .map(|m| DecodeMode::parse(m))
        .collect::<s2ut_core::Result<Vec<_>>>()?;
    let opts = DecodeOptions {
        max_len: a.max_len.unwrap_or_else(|| spec.max_decode_len()),
        length_norm: a.length_norm,
        keep_distributions: a.keep_distributions,
    };
    let scores = eval_run(&a.run, &data, &a.split, &modes, &opts)?;
    RunManifest::read(&a.run)?.verify(&a.run)?;
    for (m, b) in scores {
        println!("{m}\t{b:.2}");
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let greedy = run
        .records("greedy")
        .context("analysis needs a greedy decode dump; run eval first")?;
    let shift = ShiftReport::new(greedy.iter().map(|r| r.frame_labels.as_slice()), text::BLANK)?;
    let entropies = run.entropies();
    let mut runs = Vec::new();
    if let Some(b) = &a.baseline {
        runs.push(load_run(b)?);
    }
    runs.push(run);
    let out = a.out.unwrap_or_else(|| a.run.join("analysis"));
    let files = render_reports(&runs, &out)?;
    println!(
        "first-occurrence {} {:.4} over {} tokens ({} all-blank samples skipped)",
        if a.pooled { "pooled mean" } else { "mean" },
        shift.statistic(a.pooled),
        shift.token_count,
        shift.skipped
    );
    if !entropies.is_empty() {
        println!(
            "mean next-unit entropy {:.4} over {} predictions",
            entropies.iter().sum::<f64>() / entropies.len() as f64,
            entropies.len()
        );
    }
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    let cfg = SuiteConfig {
        seeds: a.seeds,
        eps: a.eps,
        tol: a.tol,
        coords_per_param: a.coords,
    };
    let r = run_grad_suite(&cfg)?;
    println!("{:<28} {:>6} {:>12}  worst", "case", "seeds", "max_rel_err");
    for c in &r.cases {
        println!(
            "{:<28} {:>6} {:>12.3e}  {}{}",
            c.name,
            c.seeds,
            c.max_rel_error,
            c.worst,
            if c.passed() {
                String::new()
            } else {
                format!("  FAILED seeds {:?}", c.failed_seeds)
            }
        );
    }
    println!(
        "{} in {:.1}s, max relative error {:.3e} (tol {:.0e}, eps {:.0e})",
        if r.passed() { "passed" } else { "FAILED" },
        r.elapsed.as_secs_f64(),
        r.max_rel_error(),
        a.tol,
        a.eps
    );
    Ok(r.passed())
}

/// Run directories named directly or one level below.
pub fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunDumps>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join(RUN_CONFIG).exists() {
            dirs.push(p.clone());
            continue;
        }
        let mut sub: Vec<PathBuf> = std::fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(RUN_CONFIG).exists() && d.join(EVAL_DIR).is_dir())
            .collect();
        sub.sort();
        if sub.is_empty() {
            bail!("{} holds no evaluated runs", p.display());
        }
        dirs.extend(sub);
    }
    dirs.iter()
        .map(|d| load_run(d).with_context(|| format!("loading {}", d.display())))
        .collect()
}

fn report(root: &Path, a: ReportArgs) -> Result<()> {
    let runs = collect_runs(&a.runs)?;
    let out = a.out.unwrap_or_else(|| root.join("report"));
    let files = render_reports(&runs, &out)?;
    matrix::print_summary(&runs)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    let root = cli.root;
    match cli.command {
        Command::GenData(a) => gen_data(&root, a)?,
        Command::Train(a) => train(&root, a)?,
        Command::Eval(a) => eval(a)?,
        Command::Analyze(a) => analyze(a)?,
        Command::GradCheck(a) => return grad_check(a),
        Command::Report(a) => report(&root, a)?,
        Command::RunMatrix(a) => matrix::run_matrix(&root, cli.verbose, a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
