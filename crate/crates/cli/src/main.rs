use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gencp::datasets::{gen_synthetic_with_axis, load_csv, split, write_split_cache, ResponseAxis, SyntheticKind};
use gencp::experiment::{
    ablate_m, build_sampler, prepare_data, read_records, run_experiment, summarize, tune_k, write_report,
    ExperimentConfig, MethodKind, ReportFormat, RunOutput, Setting,
};
use gencp::genmodel::fm_train;
use gencp::mixture::default_beta_sq;
use gencp::numerics::{derive_seed, Rng};

#[derive(Parser)]
#[command(name = "gencp", version, about = "Conformal prediction sets for sample-only generative models")]
struct Cli {
    /// Print the default experiment config as TOML and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write its train/calib/test split.
    GenData {
        name: SyntheticKind,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use the first coordinate as the response.
        #[arg(long)]
        swap_axes: bool,
    },
    /// Train a flow-matching sampler on a CSV file and save a checkpoint.
    TrainFm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full calibration/prediction pipeline and write reports.
    RunCp {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select K (and the nugget) on the preliminary split for each seed.
    TuneK {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rerun the pipeline over a grid of ensemble sizes.
    AblateM {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50,60,70,80,90,100")]
        grid: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit a records file as CSV or JSON tables.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: ReportFormat,
        /// Defaults to the directory holding the input file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<gencp::Error> for Failure {
    fn from(e: gencp::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn emit(out: &RunOutput, dir: &Path) -> Result<(), Failure> {
    for format in [ReportFormat::Csv, ReportFormat::Json] {
        for path in write_report(&out.records, dir, format)? {
            log::info!("wrote {}", path.display());
        }
    }
    println!("{:<14} {:<7} {:>4} {:>6} {:>9} {:>11} {:>11}", "dataset", "method", "M", "seeds", "coverage", "volume", "complexity");
    for s in summarize(&out.records) {
        println!(
            "{:<14} {:<7} {:>4} {:>6} {:>9.4} {:>11.5} {:>11.2}",
            s.dataset, s.method, s.m, s.n_seeds, s.coverage_mean, s.volume_mean, s.complexity_mean
        );
    }
    for check in &out.reduction_checks {
        if check.mismatches > 0 {
            eprintln!(
                "warning: K = M reduction disagreed with PCP on {} of {} points (seed {}, M = {})",
                check.mismatches, check.n_points, check.seed, check.m
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.print_config {
        let text = toml::to_string(&ExperimentConfig::default()).map_err(|e| Failure::Runtime(e.to_string()))?;
        print!("{text}");
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::Config("no subcommand given (see --help)".into()));
    };
    match command {
        Command::GenData { name, n, seed, out, swap_axes } => {
            let axis = if swap_axes { ResponseAxis::First } else { ResponseAxis::Second };
            let data = gen_synthetic_with_axis(name, n, axis, &mut Rng::new(seed).child(0));
            let spec = ExperimentConfig::default().split_spec(derive_seed(seed, 1));
            let (tr, ca, te) = split(&data, &spec)?;
            for path in write_split_cache(&out, name.name(), &tr, &ca, &te)? {
                println!("{}", path.display());
            }
        }
        Command::TrainFm { data, config, out } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::default(),
            };
            let train = load_csv(&data, cfg.p, cfg.d)?;
            let trained = fm_train(&train, &cfg.fm_config(derive_seed(cfg.seeds[0], 2)))?;
            trained.model.save(&out)?;
            if let Some(loss) = trained.epoch_losses.last() {
                println!("final epoch loss {loss:.6}");
            }
            println!("{}", out.display());
        }
        Command::RunCp { config, out } => {
            let cfg = load_config(&config)?;
            let result = run_experiment(&cfg)?;
            emit(&result, out.as_deref().unwrap_or(&cfg.out_dir))?;
        }
        Command::TuneK { config } => {
            let cfg = load_config(&config)?;
            for &seed in &cfg.seeds {
                let data = prepare_data(&cfg, seed)?;
                let sampler = build_sampler(&cfg, &data, seed)?;
                let base = match cfg.beta_sq {
                    Setting::Value(b) => b,
                    Setting::Auto => default_beta_sq(&data.train.y, data.train.d)?,
                };
                let spec = cfg.tune_spec(base);
                let outcome = tune_k(&data.train, &sampler, &spec, &Rng::new(seed).child(3))?;
                println!("seed {seed}: K = {}, beta_sq = {}", outcome.k, outcome.beta_sq);
                for (k, b, v) in &outcome.volumes {
                    println!("  K = {k:>3}  beta_sq = {b:<12e} held-out volume {v:.6}");
                }
            }
        }
        Command::AblateM { config, grid, out } => {
            let mut cfg = load_config(&config)?;
            if !cfg.methods.contains(&MethodKind::Pcp) {
                cfg.methods.insert(0, MethodKind::Pcp);
            }
            if grid.is_empty() || grid.contains(&0) {
                return Err(Failure::Config("grid entries must be at least 1".into()));
            }
            let result = ablate_m(&cfg, &grid)?;
            emit(&result, out.as_deref().unwrap_or(&cfg.out_dir))?;
        }
        Command::Report { input, format, out } => {
            let records = read_records(&input)?;
            let dir = out.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            for path in write_report(&records, &dir, format)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
