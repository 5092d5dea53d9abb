use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rip_core::adaptation::{adaptation_curve, calibrate_tau, AdaptationConfig, CurveSettings, DEFAULT_TARGET_FNR};
use rip_core::bench::{evaluate, forecast, forecast_row, run_matrix, to_csv, EvalSettings, Method, SuiteRun, DEFAULT_SAMPLES};
use rip_core::density::{Arch, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS};
use rip_core::ensemble::{train_ensemble, EnsembleConfig, EnsemblePosterior};
use rip_core::io::{read_demonstrations, read_logs, write_demonstrations, write_logs};
use rip_core::planner::{build_library, Aggregator, PlanConfig, RipConfig, TrajectoryLibrary, DEFAULT_LIBRARY_SIZE};
use rip_core::seeds;
use rip_core::world::{generate_demonstrations, generate_suite, EpisodeConfig, Suite, DEFAULT_GOAL_TOLERANCE};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "rip", version, about = "Robust imitative planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expert demonstrations for a generated suite, as JSON Lines.
    Generate {
        #[arg(long)]
        suite: Suite,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits a bootstrap ensemble of density models.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_EPOCHS)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clusters demonstration plans into a trajectory library.
    Library {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LIBRARY_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop evaluation of planners on a suite.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "rip-wcm,rip-ma,rip-bcm,dim")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Also write every episode log here.
        #[arg(long)]
        logs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline forecasting metrics on held-out demonstrations.
    Forecast {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value = "rip-wcm")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate of online adaptation as a function of the query budget.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        /// Variance threshold, or AUTO to calibrate on a validation suite.
        #[arg(long, default_value = "AUTO")]
        tau: String,
        #[arg(long, default_value_t = DEFAULT_TARGET_FNR)]
        fnr: f64,
        /// One or more query budgets, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,20")]
        budget: Vec<usize>,
        #[arg(long, default_value = "rip-wcm")]
        method: String,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// In-distribution demonstrations for measuring forgetting.
        #[arg(long)]
        id_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Variance threshold from episode logs at a target miss rate.
    Calibrate {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TARGET_FNR)]
        fnr: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    suite: Suite,
    /// Number of generated scenarios.
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long, default_value_t = PlanConfig::default().max_iters)]
    max_iters: usize,
}

struct Loaded {
    posterior: EnsemblePosterior,
    library: Option<TrajectoryLibrary>,
    suite: SuiteRun,
    episode: EpisodeConfig,
    plan: PlanConfig,
}

impl RunArgs {
    fn load(&self) -> Result<Loaded> {
        let posterior = EnsemblePosterior::load_dir(&self.models)
            .with_context(|| format!("loading models from {}", self.models.display()))?;
        let library = self.library.as_ref().map(TrajectoryLibrary::load).transpose()?;
        let scenarios = generate_suite(self.suite, self.episodes, self.seed)?;
        let episode = EpisodeConfig::from_arch(posterior.arch());
        let plan = PlanConfig { max_iters: self.max_iters, ..PlanConfig::default() };
        Ok(Loaded { posterior, library, suite: SuiteRun { name: self.suite.to_string(), scenarios }, episode, plan })
    }
}

impl Loaded {
    fn settings(&self, trials: usize, seed: u64) -> EvalSettings<'_> {
        EvalSettings {
            posterior: &self.posterior,
            library: self.library.as_ref(),
            episode: self.episode,
            plan: self.plan,
            goal_tolerance: DEFAULT_GOAL_TOLERANCE,
            trials,
            seed,
        }
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    names.iter().map(|n| Ok(Method::parse(n.trim())?)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { suite, episodes, seed, out } => {
            let demos = generate_demonstrations(suite, episodes, seed, &Arch::default())?;
            write_demonstrations(&out, &demos)?;
            eprintln!("wrote {} records to {}", demos.len(), out.display());
        }
        Command::Train { data, k, epochs, batch_size, seed, hidden, out } => {
            let mut arch = Arch::default();
            if let Some(h) = hidden {
                arch.hidden = h;
            }
            let demos = read_demonstrations(&data, arch.dt)?;
            let cfg = EnsembleConfig { k, epochs, batch_size, seed, ..EnsembleConfig::default() };
            let (posterior, reports) = train_ensemble(&demos, arch, &cfg)?;
            posterior.save_dir(&out)?;
            for (i, r) in reports.iter().enumerate() {
                if let Some(last) = r.epoch_nll.last() {
                    eprintln!("member {i}: final training nll {last:.4}");
                }
            }
        }
        Command::Library { data, size, seed, out } => {
            let demos = read_demonstrations(&data, Arch::default().dt)?;
            let plans: Vec<_> = demos.into_iter().map(|d| d.plan).collect();
            let lib = build_library(&plans, size, seed)?;
            lib.save(&out)?;
            eprintln!("{} centroids from {} distinct plans", lib.centroids.len(), lib.meta.distinct_plans);
        }
        Command::Eval { run, methods, trials, logs, out } => {
            let methods = parse_methods(&methods)?;
            let loaded = run.load()?;
            let (rows, all_logs) = run_matrix(&methods, std::slice::from_ref(&loaded.suite), &loaded.settings(trials, run.seed));
            write_text(&out, &to_csv(&rows))?;
            if let Some(path) = logs {
                write_logs(path, &all_logs)?;
            }
        }
        Command::Forecast { models, data, samples, method, seed, out } => {
            let posterior = EnsemblePosterior::load_dir(&models)?;
            let demos = read_demonstrations(&data, posterior.arch().dt)?;
            let agg: Aggregator = method.parse()?;
            let records = forecast(&demos, &posterior, agg, samples, seed)?;
            let suite = data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
            write_text(&out, &to_csv(&[forecast_row(&method, &suite, &records)?]))?;
        }
        Command::Adapt { run, tau, fnr, budget, method, trials, id_data, out } => {
            let method = Method::parse(&method)?;
            let loaded = run.load()?;
            let (tau, source) = if tau.eq_ignore_ascii_case("auto") {
                let val_seed = seeds::derive(run.seed, seeds::CALIBRATION, 0);
                let scenarios = generate_suite(run.suite, run.episodes, val_seed)?;
                let val = SuiteRun { name: run.suite.to_string(), scenarios };
                let logs = evaluate(&method, &val, &loaded.settings(1, val_seed));
                let tau = calibrate_tau(&logs, fnr).context("calibrating tau on the validation suite")?;
                (tau, format!("calibrated on {} validation episodes", logs.len()))
            } else {
                (tau.parse::<f64>().with_context(|| format!("invalid tau `{tau}`"))?, "given".to_string())
            };
            let id_check = id_data.as_ref().map(|p| read_demonstrations(p, loaded.posterior.arch().dt)).transpose()?;
            let settings = CurveSettings {
                library: loaded.library.as_ref(),
                rip: RipConfig {
                    agg: method.agg,
                    plan: loaded.plan,
                    goal_tolerance: DEFAULT_GOAL_TOLERANCE,
                    seed: run.seed,
                },
                episode: loaded.episode,
                trials,
                seed: run.seed,
                id_check: id_check.as_deref(),
            };
            let mut budgets = budget.clone();
            budgets.sort_unstable();
            let curve = adaptation_curve(
                &loaded.suite.scenarios,
                &loaded.posterior,
                &AdaptationConfig::new(tau),
                &budgets,
                &settings,
            )?;
            let mut csv = String::from("budget,success_rate,success_se,queries,id_nll_before,id_nll_after\n");
            for p in &curve {
                let (a, b) = p.id_nll.map_or(("NA".into(), "NA".into()), |(a, b)| (format!("{a:.6}"), format!("{b:.6}")));
                csv += &format!("{},{:.6},{:.6},{},{a},{b}\n", p.budget, p.success_rate, p.success_se, p.queries);
            }
            write_text(&out, &csv)?;
            let meta = json!({
                "suite": run.suite.to_string(),
                "episodes": run.episodes,
                "trials": trials,
                "seed": run.seed,
                "method": method.name,
                "tau": tau,
                "tau_source": source,
                "target_fnr": fnr,
                "budgets": budgets,
                "buffer": "persists across the episodes of one budget; every budget starts from the loaded models and an empty buffer",
            });
            let mut meta_path = out.into_os_string();
            meta_path.push(".meta.json");
            write_text(Path::new(&meta_path), &serde_json::to_string_pretty(&meta)?)?;
        }
        Command::Calibrate { logs, fnr } => {
            let logs = read_logs(&logs)?;
            if logs.is_empty() {
                bail!("no episode logs");
            }
            println!("{}", calibrate_tau(&logs, fnr)?);
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
