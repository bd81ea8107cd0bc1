//! Command-line front end: configuration resolution, experiment
//! orchestration, and metrics persistence.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fedalign::bounds::run_all_sweeps;
use fedalign::config::{DroMode, Strategy};
use fedalign::data::{heterogeneity, write_client_csv};
use fedalign::evaluation::{distortion_probe, per_client_report};
use fedalign::federation::{build_clients, run_experiment};
use fedalign::persist::{
    load_model, read_metrics_jsonl, save_model, write_config, write_metrics_jsonl,
};
use fedalign::{Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(
    name = "fedalign",
    version,
    about = "Federated two-tower contrastive pre-training simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config file plus per-key overrides; flag names mirror config keys.
#[derive(Args, Clone, Default)]
struct ConfigOpts {
    /// Path to a JSON config; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fedaid | fedavg | centralized | decentralized
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    n_clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// step_scale | loss_weight
    #[arg(long)]
    dro_mode: Option<String>,
    #[arg(long)]
    dirichlet_concentration: Option<f64>,
    #[arg(long)]
    k_classes: Option<usize>,
    #[arg(long)]
    x_dim: Option<usize>,
    #[arg(long)]
    y_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    aligner_layers: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    eval_pool_size: Option<usize>,
    /// Comma-separated, e.g. 1,5,10
    #[arg(long, value_delimiter = ',')]
    eval_k_list: Option<Vec<usize>>,
    #[arg(long)]
    loss_eval_batches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigOpts {
    /// Precedence: flag > FEDALIGN_OUT_DIR (out_dir only) > config file >
    /// default.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Ok(dir) = std::env::var("FEDALIGN_OUT_DIR") {
            cfg.out_dir = dir;
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = s.parse::<Strategy>()?;
        }
        if let Some(m) = &self.dro_mode {
            cfg.dro_mode = m.parse::<DroMode>()?;
        }
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        take!(
            n_clients,
            rounds,
            local_steps,
            batch_size,
            lr,
            tau,
            alpha,
            beta,
            gamma,
            rho,
            dirichlet_concentration,
            k_classes,
            x_dim,
            y_dim,
            hidden_dim,
            embed_dim,
            encoder_layers,
            aligner_layers,
            samples_per_class,
            test_fraction,
            sigma,
            eval_pool_size,
            eval_k_list,
            loss_eval_batches,
            seed,
            threads
        );
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic partition and export per-client CSVs.
    Partition(ConfigOpts),
    /// Run a full experiment and persist config, metrics, and the model.
    Train(ConfigOpts),
    /// Score a saved model snapshot on the configured client test sets.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigOpts,
        /// Snapshot path; defaults to <out_dir>/final_model.bin.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Measure per-client similarity distortion after local retraining.
    ProbeDistortion {
        #[command(flatten)]
        cfg: ConfigOpts,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        retrain_steps: usize,
    },
    /// Run the three bound-verification sweeps and print a JSON report.
    CheckBounds {
        #[command(flatten)]
        cfg: ConfigOpts,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
    /// Summarize finished run directories into a CSV keyed by
    /// strategy/seed.
    Report {
        /// Run directories containing config.json and metrics.jsonl.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Serialize)]
struct RunSummary {
    config_hash: String,
    duration_ms: u128,
    heterogeneity: f64,
    rounds: usize,
    final_mean_recall_at_1: Option<f64>,
    final_worst_recall_at_1: Option<f64>,
}

fn cmd_partition(opts: &ConfigOpts) -> Result<()> {
    let cfg = opts.resolve()?;
    let clients = build_clients(&cfg)?;
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    #[derive(Serialize)]
    struct ClientSummary {
        client_id: usize,
        n_train: usize,
        n_test: usize,
        class_histogram: Vec<usize>,
    }
    let mut summaries = Vec::new();
    for c in &clients {
        let mut file = std::fs::File::create(out.join(format!("client_{}.csv", c.client_id)))?;
        write_client_csv(c, &mut file)?;
        summaries.push(ClientSummary {
            client_id: c.client_id,
            n_train: c.train.len(),
            n_test: c.test.len(),
            class_histogram: c.class_histogram.clone(),
        });
    }
    let het = heterogeneity(&clients);
    let doc = serde_json::json!({
        "heterogeneity": het,
        "clients": summaries,
    });
    std::fs::write(
        out.join("histograms.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn cmd_train(opts: &ConfigOpts) -> Result<()> {
    let cfg = opts.resolve()?;
    let out = Path::new(&cfg.out_dir).to_path_buf();
    std::fs::create_dir_all(&out)?;
    write_config(&out.join("config.json"), &cfg)?;
    let started = Instant::now();
    let result = run_experiment(&cfg)?;
    let duration = started.elapsed();
    write_metrics_jsonl(&out.join("metrics.jsonl"), &result.metrics)?;
    save_model(&out.join("final_model.bin"), &result.model)?;
    for (i, m) in result.local_models.iter().enumerate() {
        save_model(&out.join(format!("client_model_{i}.bin")), m)?;
    }
    let summary = RunSummary {
        config_hash: format!("{:016x}", fnv1a(serde_json::to_string(&cfg)?.as_bytes())),
        duration_ms: duration.as_millis(),
        heterogeneity: result.heterogeneity,
        rounds: result.metrics.len(),
        final_mean_recall_at_1: result.metrics.last().map(|m| m.mean_recall_at_1),
        final_worst_recall_at_1: result.metrics.last().map(|m| m.worst_recall_at_1),
    };
    std::fs::write(
        out.join("run_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    eprintln!(
        "trained {} rounds ({} strategy) into {}",
        summary.rounds,
        serde_json::to_value(cfg.strategy)?.as_str().unwrap_or("?"),
        out.display()
    );
    Ok(())
}

fn default_model_path(cfg: &ExperimentConfig, model: &Option<PathBuf>) -> PathBuf {
    model
        .clone()
        .unwrap_or_else(|| Path::new(&cfg.out_dir).join("final_model.bin"))
}

fn cmd_evaluate(opts: &ConfigOpts, model: &Option<PathBuf>) -> Result<()> {
    let cfg = opts.resolve()?;
    let model = load_model(&default_model_path(&cfg, model))?;
    if model.dims != cfg.dims() {
        return Err(Error::config(
            "x_dim/y_dim/hidden_dim/embed_dim",
            "model snapshot dimensions do not match the config",
        ));
    }
    let clients = build_clients(&cfg)?;
    let report = per_client_report(&model, &clients, cfg.eval_pool_size, cfg.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_probe(opts: &ConfigOpts, model: &Option<PathBuf>, retrain_steps: usize) -> Result<()> {
    let cfg = opts.resolve()?;
    let model = load_model(&default_model_path(&cfg, model))?;
    if model.dims != cfg.dims() {
        return Err(Error::config(
            "x_dim/y_dim/hidden_dim/embed_dim",
            "model snapshot dimensions do not match the config",
        ));
    }
    let clients = build_clients(&cfg)?;
    let table = distortion_probe(
        &model,
        &clients,
        retrain_steps,
        cfg.lr,
        cfg.tau,
        cfg.batch_size,
        cfg.seed,
    )?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    Ok(())
}

fn cmd_check_bounds(opts: &ConfigOpts, instances: usize) -> Result<()> {
    let cfg = opts.resolve()?;
    let report = run_all_sweeps(instances, cfg.seed, cfg.tau)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let total = report.contrastive_ceiling.violations
        + report.decomposition.violations
        + report.guidance_surrogate.violations;
    if total > 0 {
        return Err(Error::invalid(format!(
            "{total} asserted-bound violations across sweeps"
        )));
    }
    Ok(())
}

fn cmd_report(runs: &[PathBuf], output: &Option<PathBuf>) -> Result<()> {
    let mut lines =
        vec!["strategy,seed,rounds,mean1,worst1,mean5,worst5,mean_pair_sim".to_string()];
    for dir in runs {
        let cfg = ExperimentConfig::from_json_file(&dir.join("config.json"))?;
        let metrics = read_metrics_jsonl(&dir.join("metrics.jsonl"))?;
        let last = metrics.last().ok_or_else(|| {
            Error::invalid(format!("{}: metrics.jsonl has no rounds", dir.display()))
        })?;
        let mean_sim = last.pair_similarity.iter().sum::<f64>()
            / last.pair_similarity.len().max(1) as f64;
        let strategy = serde_json::to_value(cfg.strategy)?;
        lines.push(format!(
            "{},{},{},{},{},{},{},{}",
            strategy.as_str().unwrap_or("?"),
            cfg.seed,
            metrics.len(),
            last.mean_recall_at_1,
            last.worst_recall_at_1,
            last.mean_recall_at_5,
            last.worst_recall_at_5,
            mean_sim
        ));
    }
    let text = lines.join("\n") + "\n";
    match output {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Partition(opts) => cmd_partition(opts),
        Cmd::Train(opts) => cmd_train(opts),
        Cmd::Evaluate { cfg, model } => cmd_evaluate(cfg, model),
        Cmd::ProbeDistortion {
            cfg,
            model,
            retrain_steps,
        } => cmd_probe(cfg, model, *retrain_steps),
        Cmd::CheckBounds { cfg, instances } => cmd_check_bounds(cfg, *instances),
        Cmd::Report { runs, output } => cmd_report(runs, output),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes; anything else is usage
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
