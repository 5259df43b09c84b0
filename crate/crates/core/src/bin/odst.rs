use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use odst::calib::Calibration;
use odst::dedup::{dedup_run, DedupConfig, ImageSet};
use odst::experiment::{
    compare_modes, emit_report, evaluate_model, read_metrics_csv, read_selection_csv, run_experiment, Datasets,
    ExperimentConfig, RunControl, METRICS_FILE, SELECTION_FILE,
};
use odst::oracle::{bayes_base, bayes_iter_closed, bayes_iter_recursive, OraclePoint};
use odst::{ClassifierModel, Error, Mode, Result, RngSeed};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "ODST_THREADS";

#[derive(Parser)]
#[command(name = "odst", version, about = "Out-distribution aware self-training on a synthetic open world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and write every dataset.
    Gen(Common),
    /// Train and evaluate the base teacher only.
    TrainBase(Common),
    /// Run the full self-training loop.
    Iterate {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many student iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a saved model on the configured test sets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare closed-form and recursive oracles, and optionally a model.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        points: usize,
        #[arg(long, default_value_t = 50)]
        max_t: usize,
    },
    /// Near-duplicate removal of a corpus against reference sets.
    Dedup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        out_mask: Option<PathBuf>,
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Run several modes over several seeds on shared data.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "ODST,ST,ST_OT")]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Rebuild plots from the CSVs of a finished run.
    Report(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::TrainBase(_) => "train-base",
            Command::Iterate { .. } => "iterate",
            Command::Eval { .. } => "eval",
            Command::OracleCheck { .. } => "oracle-check",
            Command::Dedup { .. } => "dedup",
            Command::Compare { .. } => "compare",
            Command::Report(_) => "report",
        }
    }
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = RngSeed(seed);
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", cfg.mode, cfg.seed.0)));
    Ok((cfg, out))
}

fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::at(dir))
}

fn oracle_check(cfg: &ExperimentConfig, out: &Path, model: Option<&Path>, points: usize, max_t: usize) -> Result<()> {
    let world = cfg.compile_world()?;
    let pts = world.sample_unlabeled(points, cfg.seed.derive("oracle_points", 0))?;
    let model = model.map(ClassifierModel::load).transpose()?;
    let preds = match &model {
        Some(m) => Some(Calibration::identity().predict_all(m, pts.features())?),
        None => None,
    };
    create(out)?;
    let path = out.join("oracle_check.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["point_id", "r", "max_t", "max_abs_closed_minus_recursive", "model_gap"])?;
    let mut worst = 0.0f64;
    for (i, x) in pts.features().rows().enumerate() {
        let pt = OraclePoint::from_world(&world, x)?;
        let mut diff = 0.0f64;
        for t in 0..=max_t {
            let a = bayes_iter_closed(&pt, t)?;
            let b = bayes_iter_recursive(&pt, t)?;
            diff = a.as_slice().iter().zip(b.as_slice()).fold(diff, |m, (u, v)| m.max((u - v).abs()));
        }
        worst = worst.max(diff);
        let gap = match &preds {
            Some(p) => p[i].l1_distance(&bayes_base(&pt)?).to_string(),
            None => String::new(),
        };
        w.write_record([i.to_string(), pt.ratio()?.to_string(), max_t.to_string(), diff.to_string(), gap])?;
    }
    w.flush().map_err(Error::at(&path))?;
    println!("max |closed - recursive| over {points} points, t <= {max_t}: {worst:e}");
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(c) => {
            let (cfg, out) = load_config(&c)?;
            cfg.validate()?;
            let data = Datasets::generate(&cfg)?;
            data.write_to(&out)?;
            println!("{:#?}", data.checksums());
        }
        Command::TrainBase(c) => {
            let (mut cfg, out) = load_config(&c)?;
            cfg.iterations = 0;
            let run = run_experiment(&cfg, &out, &RunControl::default())?;
            let r = &run.state.history[0];
            println!("base test error {:.4}, AUROC {:.4}, T {:.4}", r.test_error, r.auroc, r.temperature);
        }
        Command::Iterate {
            common,
            resume,
            stop_after,
        } => {
            let (cfg, out) = load_config(&common)?;
            let ctl = RunControl {
                resume,
                stop_after,
                write_data: false,
            };
            let run = run_experiment(&cfg, &out, &ctl)?;
            for r in &run.state.history {
                println!(
                    "t={} test error {:.4} AUROC {:.4} selection precision {}",
                    r.iteration,
                    r.test_error,
                    r.auroc,
                    r.selection_precision.map_or("-".into(), |p| format!("{p:.4}"))
                );
            }
            println!("results in {}", out.display());
        }
        Command::Eval { common, model } => {
            let (cfg, out) = load_config(&common)?;
            let m = ClassifierModel::load(&model)?;
            let data = Datasets::generate(&cfg)?;
            let ev = evaluate_model(&m, &data)?;
            let json = serde_json::json!({
                "model": model.display().to_string(),
                "test_error": ev.test_error,
                "auroc": ev.auroc,
                "auroc_far": ev.auroc_far,
                "temperature": ev.fit.calibration.temperature(),
                "ece_before": ev.fit.ece_before,
                "ece_after": ev.fit.ece_after,
            });
            create(&out)?;
            let path = out.join("eval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(Error::at(&path))?;
            println!("{json:#}");
        }
        Command::OracleCheck {
            common,
            model,
            points,
            max_t,
        } => {
            let (cfg, out) = load_config(&common)?;
            oracle_check(&cfg, &out, model.as_deref(), points, max_t)?;
        }
        Command::Dedup {
            common,
            corpus,
            refs,
            out_mask,
            audit,
        } => {
            let cfg = match &common.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(Error::at(p))?;
                    toml::from_str::<DedupConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => DedupConfig::default(),
            };
            let out = common.out.unwrap_or_else(|| PathBuf::from("."));
            create(&out)?;
            let corpus_set = ImageSet::read_from(&corpus)?;
            let ref_sets = refs.iter().map(|p| ImageSet::read_from(p)).collect::<Result<Vec<_>>>()?;
            let outcome = dedup_run(&corpus_set, &ref_sets, &cfg)?;
            outcome.write_mask(&out_mask.unwrap_or_else(|| out.join("mask.txt")))?;
            outcome.write_audit(&audit.unwrap_or_else(|| out.join("audit.csv")))?;
            println!("removed {} of {} corpus images", outcome.removed(), corpus_set.len());
        }
        Command::Compare { common, modes, seeds } => {
            let (cfg, out) = load_config(&common)?;
            let cmp = compare_modes(&cfg, &modes, &seeds, &out)?;
            for r in &cmp.rows {
                println!(
                    "{:<16} base {:.4} final {:.4} ± {:.4}  AUROC {:.4}",
                    r.mode.name(),
                    r.base_test_error.mean,
                    r.final_test_error.mean,
                    r.final_test_error.std,
                    r.final_auroc.mean
                );
            }
        }
        Command::Report(c) => {
            let (_, out) = load_config(&c)?;
            let history = read_metrics_csv(&out.join(METRICS_FILE))?;
            let selections = read_selection_csv(&out.join(SELECTION_FILE))?;
            emit_report(&out, &history, &selections)?;
            println!("rewrote report for {} rows in {}", history.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("could not size thread pool: {e}");
                }
                info!("using {n} worker threads");
            }
            _ => {
                eprintln!("{THREADS_ENV} must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("odst {name}: {e}");
            ExitCode::FAILURE
        }
    }
}
