use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raa_core::bench::{bench_csv, ratio_checks, run_bench, BenchConfig};
use raa_core::config::ExperimentConfig;
use raa_core::data::{self, Sample};
use raa_core::gradcheck::{run_gradcheck, DEFAULT_EPS, DEFAULT_TOLERANCE};
use raa_core::model::{model_forward, ModelParams};
use raa_core::pgm::write_pgm;
use raa_core::raa::{summarize_affinity, Mode};
use raa_core::tensor::load_set;
use raa_core::trainer::{evaluate, prepare_batch, run_cv, write_outputs, EvalReport};
use raa_core::RaaError;

#[derive(Parser)]
#[command(name = "raa", version, about = "Region-affinity attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` assignments applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset. `--out` ending in `.rts1` names the
    /// file; otherwise it is `<out>/dataset.rts1`.
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Overrides `data.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Overrides `data.size`.
        #[arg(long)]
        size: Option<usize>,
    },
    /// k-fold training; writes metrics, throughput and per-fold checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on the tiny configuration.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Local versus global affinity cost; writes `<out>/bench.csv`.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "3,5")]
        windows: Vec<usize>,
        #[arg(long, default_value_t = 11)]
        repeats: usize,
    },
    /// Write the attention summary of one sample as `<out>/attnmap.pgm`.
    Attnmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Position of the sample in the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

/// A run that completed but whose checks did not pass.
struct CheckFailed(String);

enum Failure {
    Check(CheckFailed),
    Error(RaaError),
}

impl From<RaaError> for Failure {
    fn from(e: RaaError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn resolve(common: &Common) -> Result<ExperimentConfig, RaaError> {
    let mut c = ExperimentConfig::default();
    if let Some(path) = &common.config {
        c.apply_text(&at_path(path, std::fs::read_to_string(path).map_err(RaaError::from))?)?;
    }
    for s in &common.set {
        c.apply_override(s)?;
    }
    if let Some(seed) = common.seed {
        c.train.seed = seed;
    }
    c.finalize()
}

/// Names the file in I/O errors.
fn at_path<T>(path: &Path, r: Result<T, RaaError>) -> Result<T, RaaError> {
    r.map_err(|e| match e {
        RaaError::Io(io) => RaaError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn dataset(config: &ExperimentConfig, path: Option<&Path>) -> Result<Vec<Sample>, RaaError> {
    match path {
        Some(p) => at_path(p, data::load_dataset(p)),
        None => data::generate(config.n, config.size, config.train.seed),
    }
}

fn print_report(r: &EvalReport) {
    let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
    println!("tp={} fp={} tn={} fn={}", r.tp, r.fp, r.tn, r.fn_);
    println!(
        "accuracy={:.4} precision={:.4} recall={:.4} f1={:.4} kappa={} auc={}",
        r.accuracy,
        r.precision,
        r.recall,
        r.f1,
        opt(r.kappa),
        opt(r.auc)
    );
}

fn datagen(common: &Common, n: Option<usize>, size: Option<usize>) -> Outcome {
    let mut common = common.clone();
    common.set.extend(n.map(|n| format!("data.n={n}")));
    common.set.extend(size.map(|s| format!("data.size={s}")));
    let c = resolve(&common)?;
    let samples = data::generate(c.n, c.size, c.train.seed)?;
    let path = if common.out.extension().is_some_and(|e| e == "rts1") {
        common.out.clone()
    } else {
        common.out.join("dataset.rts1")
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    data::save_dataset(&samples, &path)?;
    println!("{} samples of {}x{} -> {}", samples.len(), c.size, c.size, path.display());
    println!("mean-intensity threshold accuracy {:.4}", data::threshold_accuracy(&samples));
    Ok(())
}

fn train(common: &Common, data_path: Option<&Path>) -> Outcome {
    let c = resolve(common)?;
    let samples = dataset(&c, data_path)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let plan = data::kfold(&labels, c.train.folds, c.train.seed)?;
    let result = run_cv(&samples, &plan, &c.model, &c.train)?;
    write_outputs(&result, &c.model, &common.out)?;
    std::fs::write(common.out.join("config.txt"), c.to_text())?;
    let mut emb = String::from("fold,best_epoch,intra_class_distance\n");
    for f in &result.folds {
        println!(
            "fold {} best epoch {} accuracy {:.4} auc {}",
            f.fold,
            f.best_epoch,
            f.best.report.accuracy,
            f.best.report.auc.map_or_else(|| "undefined".into(), |a| format!("{a:.4}"))
        );
        emb.push_str(&format!("{},{},{}\n", f.fold, f.best_epoch, f.intra_class_distance));
    }
    std::fs::write(common.out.join("embedding.csv"), emb)?;
    for m in &result.summary {
        match (m.mean, m.std) {
            (Some(mean), Some(std)) => println!("{} {mean:.6} +- {std:.6}", m.name),
            _ => println!("{} undefined", m.name),
        }
    }
    println!("intra_class_distance {:.6}", result.mean_intra_class_distance());
    Ok(())
}

fn load_checkpoint(c: &ExperimentConfig, path: &Path) -> Result<ModelParams, RaaError> {
    ModelParams::from_named_set(&at_path(path, load_set(path))?, &c.model)
}

fn eval(common: &Common, checkpoint: &Path, data_path: Option<&Path>) -> Outcome {
    let c = resolve(common)?;
    let params = load_checkpoint(&c, checkpoint)?;
    let samples = dataset(&c, data_path)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let (rec, _) = evaluate(&params, &c.model, &c.train.loss, &refs)?;
    println!(
        "loss_ce={:.6} loss_cl={:.6} loss_total={:.6}",
        rec.loss_ce, rec.loss_cl, rec.loss_total
    );
    print_report(&rec.report);
    Ok(())
}

fn gradcheck(common: &Common, eps: f64, tolerance: f64) -> Outcome {
    let seed = common.seed.unwrap_or(42);
    let suite = run_gradcheck(seed, eps, tolerance)?;
    print!("{}", suite.table());
    if suite.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure::Check(CheckFailed("gradcheck failed".into())))
    }
}

fn bench(common: &Common, sizes: Vec<usize>, windows: Vec<usize>, repeats: usize) -> Outcome {
    let cfg = BenchConfig {
        sizes,
        windows,
        repeats,
        seed: common.seed.unwrap_or(42),
        ..Default::default()
    };
    let rows = run_bench(&cfg)?;
    std::fs::create_dir_all(&common.out)?;
    let csv = bench_csv(&rows);
    std::fs::write(common.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    let mut failed = 0;
    for check in ratio_checks(&rows) {
        let status = if check.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:>9.4} in [{}, {}] {status}", check.label, check.observed, check.lo, check.hi);
        failed += usize::from(!check.passed());
    }
    if failed > 0 {
        return Err(Failure::Check(CheckFailed(format!("{failed} scaling checks failed"))));
    }
    Ok(())
}

fn attnmap(common: &Common, checkpoint: &Path, data_path: Option<&Path>, index: usize) -> Outcome {
    let c = resolve(common)?;
    let params = load_checkpoint(&c, checkpoint)?;
    let samples = dataset(&c, data_path)?;
    let sample = samples.get(index).ok_or_else(|| {
        RaaError::Config(format!("sample index {index} out of range for {} samples", samples.len()))
    })?;
    let x = prepare_batch(&[sample])?;
    let (_, cache) = model_forward(&x, &params, &c.model, Mode::Eval)?;
    let g = c.model.grid();
    let map = summarize_affinity(&cache.raa.samples[0].affinity, g, g)?;
    std::fs::create_dir_all(&common.out)?;
    let path = common.out.join("attnmap.pgm");
    write_pgm(&map, &path)?;
    println!("sample {} (label {}) -> {} ({g}x{g})", sample.id, sample.label, path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Datagen { common, n, size } => datagen(common, *n, *size),
        Command::Train { common, data } => train(common, data.as_deref()),
        Command::Eval { common, checkpoint, data } => eval(common, checkpoint, data.as_deref()),
        Command::Gradcheck { common, eps, tolerance } => gradcheck(common, *eps, *tolerance),
        Command::Bench {
            common,
            sizes,
            windows,
            repeats,
        } => bench(common, sizes.clone(), windows.clone(), *repeats),
        Command::Attnmap {
            common,
            checkpoint,
            data,
            index,
        } => attnmap(common, checkpoint, data.as_deref(), *index),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                RaaError::Invariant(_) | RaaError::NonFinite { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
