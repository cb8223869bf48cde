use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::Args;

use s2ut_core::analysis::{render_reports, summarize, RunDumps};
use s2ut_core::data::{generate_dataset, write_dataset, TaskSpec, TASK_FILE};
use s2ut_core::experiment::{load_run, matrix_run_dir, run_id, run_is_complete};
use s2ut_core::model::MtpVariant;

use crate::{read, RunOverrides};

pub const COMPARISON: &str = "comparison.csv";

#[derive(Args, Debug)]
pub struct MatrixArgs {
    /// Matrix directory [default: <root>/matrix].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "none,parallel_linear,deepseek_v3,vocalnet,s2ut"
    )]
    variants: Vec<MtpVariant>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[command(flatten)]
    run: RunOverrides,
    /// Existing dataset directory [default: generated under the matrix directory].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Task spec TOML used when the dataset is generated.
    #[arg(long)]
    task_config: Option<PathBuf>,
    /// Concurrent child processes [default: available cores].
    #[arg(long)]
    jobs: Option<usize>,
    /// Retrain runs whose artifacts are already complete.
    #[arg(long)]
    force: bool,
}

struct Job {
    variant: MtpVariant,
    seed: u64,
    dir: PathBuf,
}

fn child(exe: &Path, args: &[String], log: &Path) -> Result<()> {
    let file = fs::OpenOptions::new().create(true).append(true).open(log)?;
    let status = Command::new(exe)
        .args(args)
        .stdin(Stdio::null())
        .stdout(file.try_clone()?)
        .stderr(file)
        .status()
        .with_context(|| format!("launching {}", exe.display()))?;
    if !status.success() {
        bail!("`s2ut {}` failed ({status}); see {}", args.join(" "), log.display());
    }
    Ok(())
}

fn run_job(exe: &Path, job: &Job, data: &Path, run: &RunOverrides, verbose: bool, logs: &Path) -> Result<()> {
    let log = logs.join(format!("{}.log", run_id(job.variant, job.seed)));
    let _ = fs::remove_file(&log);
    let mut train = vec![
        "train".to_string(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        job.dir.display().to_string(),
        "--variant".into(),
        job.variant.to_string(),
        "--seed".into(),
        job.seed.to_string(),
        "--resume".into(),
    ];
    if let Some(c) = &run.config {
        train.extend(["--config".into(), c.display().to_string()]);
    }
    for (flag, v) in [
        ("--steps", run.steps),
        ("--mtp-n", run.mtp_n),
        ("--batch-size", run.batch_size),
    ] {
        if let Some(v) = v {
            train.extend([flag.to_string(), v.to_string()]);
        }
    }
    if verbose {
        train.push("--verbose".into());
    }
    child(exe, &train, &log)?;
    let eval = vec![
        "eval".to_string(),
        "--run".into(),
        job.dir.display().to_string(),
        "--data".into(),
        data.display().to_string(),
    ];
    child(exe, &eval, &log)
}

pub fn run_matrix(root: &Path, verbose: bool, a: MatrixArgs) -> Result<()> {
    if a.variants.is_empty() || a.seeds.is_empty() {
        bail!("need at least one variant and one seed");
    }
    let out = a.out.clone().unwrap_or_else(|| root.join("matrix"));
    fs::create_dir_all(&out)?;
    let out = out.canonicalize()?;
    let data = match &a.data {
        Some(d) => d.canonicalize().with_context(|| format!("dataset {}", d.display()))?,
        None => {
            let d = out.join("data");
            if !d.join(TASK_FILE).exists() {
                let spec = match &a.task_config {
                    Some(p) => TaskSpec::from_toml(&read(p)?)?,
                    None => TaskSpec::default(),
                };
                write_dataset(&d, &generate_dataset(&spec)?)?;
            }
            d
        }
    };
    let spec = TaskSpec::from_toml(&read(&data.join(TASK_FILE))?)?;
    let mut run = a.run.clone();
    if let Some(c) = &run.config {
        run.config = Some(c.canonicalize()?);
    }

    let logs = out.join("logs");
    fs::create_dir_all(&logs)?;
    let mut jobs = Vec::new();
    let mut skipped = 0;
    let mut all = Vec::new();
    for &variant in &a.variants {
        for &seed in &a.seeds {
            let job = Job {
                variant,
                seed,
                dir: matrix_run_dir(&out, variant, seed),
            };
            let expected = run.build(&spec, Some(variant), Some(seed))?;
            all.push(job.dir.clone());
            if !a.force && run_is_complete(&job.dir, &expected) {
                skipped += 1;
            } else {
                if a.force && job.dir.exists() {
                    fs::remove_dir_all(&job.dir)?;
                }
                jobs.push(job);
            }
        }
    }
    let workers = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len().max(1));
    eprintln!(
        "{} runs to train, {} already complete, {} worker(s)",
        jobs.len(),
        skipped,
        workers
    );

    let exe = std::env::current_exe()?;
    let next = AtomicUsize::new(0);
    let errors = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                match run_job(&exe, job, &data, &run, verbose, &logs) {
                    Ok(()) => eprintln!("done {}", run_id(job.variant, job.seed)),
                    Err(e) => errors.lock().expect("no worker panics").push(format!("{e:#}")),
                }
            });
        }
    });
    let errors = errors.into_inner().expect("no worker panics");
    if !errors.is_empty() {
        bail!("{} run(s) failed:\n{}", errors.len(), errors.join("\n"));
    }

    let dumps = all.iter().map(|d| load_run(d)).collect::<s2ut_core::Result<Vec<_>>>()?;
    let report = out.join("report");
    render_reports(&dumps, &report)?;
    fs::copy(report.join("bleu.csv"), out.join(COMPARISON))?;
    print_summary(&dumps)?;
    println!("comparison table: {}", out.join(COMPARISON).display());
    Ok(())
}

/// Seed-mean BLEU per decode mode and the forward-shift statistic per variant.
pub fn print_summary(runs: &[RunDumps]) -> Result<()> {
    let s = summarize(runs)?;
    print!("{:<16} {:>5}", "variant", "seeds");
    for m in &s.modes {
        print!(" {m:>8}");
    }
    println!(" {:>8}", "shift");
    for v in &s.variants {
        print!("{:<16} {:>5}", v.variant, v.seeds.len());
        for b in &v.bleu {
            print!(" {:>8}", b.map_or("-".into(), |x| format!("{x:.2}")));
        }
        println!(" {:>8}", v.shift.map_or("-".into(), |x| format!("{x:.4}")));
    }
    Ok(())
}
