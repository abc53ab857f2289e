use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use edgeloop::harness::{emit_report, run_experiment, summary_table, ExperimentConfig, PolicyName, Scenario};
use edgeloop::metacontrol::AdapterConfig;
use edgeloop::router::RouterPolicy;

#[derive(Parser)]
#[command(
    name = "edgeloop",
    version,
    about = "Edge generative-inference simulator and closed-loop resource manager"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// warmup, semantic, churn or drift.
    #[arg(long)]
    scenario: Option<String>,
    /// Warmup budget in tasks.
    #[arg(long)]
    warmup: Option<usize>,
    /// Comma-separated subset of e3, fixed_heuristic, round_robin, oracle.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// Profile JSONL; the embedded fixture pool when omitted.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Initial router: sect or explore_risk.
    #[arg(long)]
    router: Option<String>,
    #[arg(long)]
    explore_weight_ms: Option<f64>,
    #[arg(long)]
    risk_penalty_ms: Option<f64>,
    /// Chat-completions endpoint for the optional external controller.
    #[arg(long)]
    adapter_url: Option<String>,
    #[arg(long, default_value = "gpt-4o-mini")]
    adapter_model: String,
    /// Environment variable holding the adapter API key.
    #[arg(long)]
    adapter_key_env: Option<String>,
    /// Also write decisions.log with every routing decision.
    #[arg(long)]
    trace_decisions: bool,
}

fn build_config(args: RunArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("bad config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &args.scenario {
        config.scenario = s.parse::<Scenario>()?;
    }
    if let Some(w) = args.warmup {
        config.warmup_budget = Some(w);
    }
    if let Some(list) = &args.policies {
        config.policies = list
            .iter()
            .map(|p| p.trim().parse::<PolicyName>())
            .collect::<Result<_, _>>()?;
    }
    if args.profiles.is_some() {
        config.profiles = args.profiles;
    }
    if args.out.is_some() {
        config.out_dir = args.out;
    }
    if let Some(h) = args.horizon {
        config.horizon = h;
    }
    if let Some(l) = args.lambda {
        config.lambda = l;
    }
    if let Some(r) = &args.router {
        config.router.policy = r.parse::<RouterPolicy>()?;
    }
    if let Some(c) = args.explore_weight_ms {
        config.router.explore_weight_ms = c;
    }
    if let Some(m) = args.risk_penalty_ms {
        config.router.risk_penalty_ms = m;
    }
    if let Some(url) = args.adapter_url {
        config.adapter = Some(AdapterConfig {
            url,
            model: args.adapter_model,
            api_key_env: args.adapter_key_env,
            timeout_ms: edgeloop::metacontrol::adapter::DEFAULT_TIMEOUT.as_millis() as u64,
        });
    }
    config.trace_decisions |= args.trace_decisions;
    Ok(config)
}

fn run(args: RunArgs) -> Result<()> {
    let config = build_config(args)?;
    let experiment = run_experiment(&config)?;
    print!("{}", summary_table(&experiment.report));
    if let Some(dir) = &config.out_dir {
        let files = emit_report(&experiment, dir)?;
        log::info!("wrote {} files to {}", files.len(), dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
