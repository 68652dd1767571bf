use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{self, ExitCode};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gil_core::checkpoint;
use gil_core::data::{load_dataset_with, subsample_labels, DatasetBundle, LoadOptions};
use gil_core::trainer::{Experiment, MetaGradMode, RunConfig, RunOutcome, StepBucket, Variant};
use gil_core::verify;
use gil_core::Error;

#[derive(Parser)]
#[command(name = "gil", version, about = "Graph inference learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, meta-train and evaluate one model.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a checkpoint on the test split.
    Eval(CheckpointArgs),
    /// Train every variant (or a chosen subset) with the same seed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant names; all variants when omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Cumulative test accuracy by hop distance to the training nodes.
    Steps(CheckpointArgs),
    /// Retrain at several label rates.
    LabelSweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_value = "full,gcn_train_only")]
        variants: Vec<String>,
        /// Run every rate and variant in its own process.
        #[arg(long)]
        parallel: bool,
        /// Child mode of `--parallel`: print the result rows only.
        #[arg(long, hide = true)]
        job: bool,
    },
    /// Finite-difference check of the full model gradient.
    Gradcheck {
        /// Dataset directory; the bundled 8-node toy graph when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Coordinates checked per parameter block.
        #[arg(long, default_value_t = 50)]
        coords: usize,
    },
    /// Run the dense-power, finite-difference and permutation oracles.
    OracleTests {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Flat TOML file with `RunConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    meta_grad: Option<MetaGrad>,
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Resolved config of the run; defaults to `config.toml` beside the
    /// checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the result table; printed only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetaGrad {
    First,
    Full,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Train { run, out } => {
            let config = resolve_config(&run)?;
            let bundle = load(&run.dataset, &config)?;
            let outcome = Experiment::new(&bundle, config)?.run()?;
            create_dir(&out)?;
            write_run(&out, &bundle, &outcome)?;
            println!("test accuracy {:.4}", outcome.test.accuracy);
        }
        Command::Eval(args) => {
            let (bundle, exp_config, params) = load_checkpoint(&args)?;
            let exp = Experiment::new(&bundle, exp_config)?;
            let (eval, _) = exp.test(&params)?;
            let table = results_table(&bundle, exp.config(), &eval_row(&eval));
            emit(&args.out, "results.tsv", &table)?;
        }
        Command::Ablate { run, out, variants } => {
            let base = resolve_config(&run)?;
            let variants = parse_variants(&variants, &Variant::ALL)?;
            let bundle = load(&run.dataset, &base)?;
            create_dir(&out)?;
            let mut table = String::from("variant\taccuracy\tloss\ttest_nodes\n");
            for v in variants {
                let config = RunConfig { variant: v, ..base.clone() };
                let outcome = Experiment::new(&bundle, config)?.run()?;
                let dir = out.join(v.name());
                create_dir(&dir)?;
                write_run(&dir, &bundle, &outcome)?;
                let t = &outcome.test;
                writeln!(table, "{v}\t{:.6}\t{:.6}\t{}", t.accuracy, t.loss, t.queries.len()).ok();
            }
            write(&out.join("results.tsv"), &table)?;
            print!("{table}");
        }
        Command::Steps(args) => {
            let (bundle, config, params) = load_checkpoint(&args)?;
            let exp = Experiment::new(&bundle, config)?;
            let (_, buckets) = exp.test(&params)?;
            emit(&args.out, "steps.tsv", &steps_table(&buckets))?;
        }
        Command::LabelSweep {
            run,
            out,
            rates,
            variants,
            parallel,
            job,
        } => {
            let base = resolve_config(&run)?;
            let variants = parse_variants(&variants, &[])?;
            let bundle = load(&run.dataset, &base)?;
            create_dir(&out)?;
            let jobs: Vec<(f64, Variant)> = rates
                .iter()
                .flat_map(|&r| variants.iter().map(move |&v| (r, v)))
                .collect();
            let rows = if parallel && !job {
                match spawn_sweep(&run.dataset, &base, &out, &jobs)? {
                    Ok(rows) => rows,
                    Err(code) => return Ok(code),
                }
            } else {
                let mut rows = String::new();
                for &(rate, v) in &jobs {
                    rows.push_str(&sweep_job(&bundle, &base, rate, v, &out)?);
                }
                rows
            };
            if job {
                print!("{rows}");
                return Ok(ExitCode::SUCCESS);
            }
            let table = format!("rate\tvariant\ttrain_nodes\taccuracy\n{rows}");
            write(&out.join("results.tsv"), &table)?;
            print!("{table}");
        }
        Command::Gradcheck {
            dataset,
            config,
            seed,
            coords,
        } => {
            let mut cfg = match &config {
                Some(p) => read_config(p)?,
                None => RunConfig {
                    widths: vec![6, 4],
                    ..RunConfig::default()
                },
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let bundle = match &dataset {
                Some(p) => load(p, &cfg)?,
                None => gil_core::data::synthetic::toy8(),
            };
            let report = verify::gil_grad_check(&bundle, cfg, coords)?;
            println!("coordinates checked\t{}", report.checked);
            for (i, e) in report.per_block.iter().enumerate() {
                println!("block {i}\t{e:.3e}");
            }
            let pass = report.max_rel_error < 1e-4;
            println!(
                "{} max relative error {:.3e} (tolerance 1e-4)",
                if pass { "PASS" } else { "FAIL" },
                report.max_rel_error
            );
            if !pass {
                return Ok(ExitCode::from(1));
            }
        }
        Command::OracleTests { seed } => {
            let mut ok = true;
            for r in verify::oracle_suite(seed) {
                ok &= r.passed();
                println!(
                    "{} {}: {:.3e} (tolerance {:.0e})",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.error,
                    r.tolerance
                );
            }
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// One label-sweep run, written under `out`, as a result row.
fn sweep_job(
    bundle: &DatasetBundle,
    base: &RunConfig,
    rate: f64,
    variant: Variant,
    out: &Path,
) -> Result<String, Error> {
    let sub = subsample_labels(bundle, rate, base.seed)?;
    let config = RunConfig {
        variant,
        ..base.clone()
    };
    let outcome = Experiment::new(&sub, config)?.run()?;
    let dir = out.join(format!("{rate}_{variant}"));
    create_dir(&dir)?;
    write_run(&dir, &sub, &outcome)?;
    Ok(format!(
        "{rate}\t{variant}\t{}\t{:.6}\n",
        sub.split.train.len(),
        outcome.test.accuracy
    ))
}

/// Runs each sweep job as a child `gil` process sharing the resolved base
/// config. Rows come back in job order; a failing child's exit code is
/// returned as is.
fn spawn_sweep(
    dataset: &Path,
    base: &RunConfig,
    out: &Path,
    jobs: &[(f64, Variant)],
) -> Result<Result<String, ExitCode>, Error> {
    let exe = std::env::current_exe().map_err(|source| Error::Io {
        path: PathBuf::from("gil"),
        source,
    })?;
    let config = out.join("sweep_config.toml");
    write(&config, &base.to_toml())?;
    let spawn_error = |source| Error::Io {
        path: exe.clone(),
        source,
    };
    let mut children = Vec::with_capacity(jobs.len());
    for &(rate, v) in jobs {
        log::info!("label-sweep job: rate {rate}, variant {v}, seed {}", base.seed);
        let child = process::Command::new(&exe)
            .arg("label-sweep")
            .arg("--dataset")
            .arg(dataset)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .args(["--rates", &rate.to_string(), "--variants", v.name(), "--job"])
            .stdout(process::Stdio::piped())
            .spawn()
            .map_err(spawn_error)?;
        children.push(child);
    }
    let mut rows = String::new();
    let mut failed = None;
    for child in children {
        let output = child.wait_with_output().map_err(spawn_error)?;
        if output.status.success() {
            rows.push_str(&String::from_utf8_lossy(&output.stdout));
        } else if failed.is_none() {
            failed = Some(ExitCode::from(output.status.code().unwrap_or(1) as u8));
        }
    }
    Ok(failed.map_or(Ok(rows), Err))
}

fn read_config(path: &Path) -> Result<RunConfig, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_toml(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
}

/// Config file values, overridden by any flags given.
fn resolve_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut config = match &args.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(m) = args.meta_grad {
        config.meta_grad_mode = match m {
            MetaGrad::First => MetaGradMode::FirstOrder,
            MetaGrad::Full => MetaGradMode::Full,
        };
    }
    if let Some(v) = &args.variant {
        config.variant = v.parse()?;
    }
    config.validate()?;
    Ok(config)
}

fn parse_variants(names: &[String], default: &[Variant]) -> Result<Vec<Variant>, Error> {
    if names.is_empty() {
        return Ok(default.to_vec());
    }
    Ok(names
        .iter()
        .map(|n| n.trim().parse())
        .collect::<Result<_, _>>()?)
}

fn load(path: &Path, config: &RunConfig) -> Result<DatasetBundle, Error> {
    let opts = LoadOptions {
        row_normalize: config.row_normalize,
    };
    Ok(load_dataset_with(path, opts)?)
}

fn load_checkpoint(args: &CheckpointArgs) -> Result<(DatasetBundle, RunConfig, gil_core::model::GilParameters), Error> {
    let config_path = match &args.config {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("config.toml"),
    };
    let config = read_config(&config_path)?;
    let bundle = load(&args.dataset, &config)?;
    let exp = Experiment::new(&bundle, config.clone())?;
    let params = checkpoint::load(&args.checkpoint, &exp.init_params(), config.hash())?;
    drop(exp);
    Ok((bundle, config, params))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(out: &Option<PathBuf>, name: &str, table: &str) -> Result<(), Error> {
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join(name), table)?;
    }
    print!("{table}");
    Ok(())
}

fn eval_row(eval: &gil_core::trainer::Evaluation) -> String {
    let per_class: Vec<String> = eval
        .per_class
        .iter()
        .map(|t| format!("{}/{}", t.correct, t.total))
        .collect();
    format!(
        "{:.6}\t{:.6}\t{}\t{}",
        eval.accuracy,
        eval.loss,
        eval.queries.len(),
        per_class.join(",")
    )
}

fn results_table(bundle: &DatasetBundle, config: &RunConfig, row: &str) -> String {
    let mode = match config.meta_grad_mode {
        MetaGradMode::FirstOrder => "first",
        MetaGradMode::Full => "full",
    };
    format!(
        "dataset\tvariant\tseed\tmeta_grad\td_p\taccuracy\tloss\ttest_nodes\tper_class\n{}\t{}\t{}\t{}\t{}\t{row}\n",
        bundle.name,
        config.variant,
        config.seed,
        mode,
        config.d_p_override.map_or_else(|| "NA".into(), |d| d.to_string()),
    )
}

fn steps_table(buckets: &[StepBucket]) -> String {
    let mut out = String::from("steps\tcount\tcorrect\tcumulative_count\tcumulative_accuracy\n");
    for b in buckets {
        let steps = b.steps.map_or_else(|| "inf".to_string(), |s| s.to_string());
        writeln!(
            out,
            "{steps}\t{}\t{}\t{}\t{:.6}",
            b.count,
            b.correct,
            b.cumulative_count,
            b.cumulative_accuracy()
        )
        .ok();
    }
    out
}

/// `config.toml`, `checkpoint.bin`, `metrics.tsv`, `results.tsv` and
/// `steps.tsv` for one finished run.
fn write_run(dir: &Path, bundle: &DatasetBundle, outcome: &RunOutcome) -> Result<(), Error> {
    write(&dir.join("config.toml"), &outcome.config.to_toml())?;
    checkpoint::save(&dir.join("checkpoint.bin"), &outcome.params, outcome.config.hash())?;
    let mut metrics = format!("{}\n", gil_core::trainer::MetricRecord::TSV_HEADER);
    for r in &outcome.records {
        metrics.push_str(&r.to_tsv());
        metrics.push('\n');
    }
    write(&dir.join("metrics.tsv"), &metrics)?;
    write(
        &dir.join("results.tsv"),
        &results_table(bundle, &outcome.config, &eval_row(&outcome.test)),
    )?;
    write(&dir.join("steps.tsv"), &steps_table(&outcome.buckets))?;
    Ok(())
}
