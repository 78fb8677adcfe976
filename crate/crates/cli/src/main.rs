//! `guardad`: run guarded driving experiments, inspect traces and validate
//! rule catalogs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guardad_core::guard::{GuardConfig, GuardMode};
use guardad_core::policy::PolicySpec;
use guardad_core::rules::{default_catalog, parse_catalog, RuleCatalog};
use guardad_core::scene::Action;
use guardad_core::sim::{
    compute_metrics, generate_scenarios, run_suite, standard_suite, trace_from_jsonl,
    trace_to_jsonl, EpisodeOutcome, MetricsReport, Scenario, ScenarioParams, Template,
};
use thiserror::Error;

const SEED_ENV: &str = "GUARDAD_SEED";

#[derive(Debug, Error)]
enum CliError {
    /// Bad arguments, unreadable inputs, invalid catalogs. Exit status 1.
    #[error("{code}: {message}")]
    Config { code: &'static str, message: String },
    /// Failures while running an otherwise valid command. Exit status 2.
    #[error("{code}: {message}")]
    Runtime { code: &'static str, message: String },
}

impl CliError {
    fn config(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Config {
            code,
            message: message.into(),
        }
    }

    fn runtime(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Runtime {
            code,
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 1,
            CliError::Runtime { .. } => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "guardad",
    version,
    about = "Runtime safeguard for driving decision policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run guarded episodes and write traces plus metrics.
    Run(RunArgs),
    /// Recompute metrics from trace files or directories.
    Eval(EvalArgs),
    /// Explain the guard's decision at one step of a trace.
    Explain(ExplainArgs),
    /// Write generated scenarios as JSON files.
    Gen(GenArgs),
    /// Run the experiment for every (n, k) pair and print one metrics row each.
    Sweep(SweepArgs),
    /// Validate a rule catalog.
    Check(CheckArgs),
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario template, or `all` for every template.
    #[arg(long, default_value = "all")]
    template: String,
    /// Scenarios per template.
    #[arg(long, default_value_t = 40)]
    count: usize,
    /// Scenario seed. The GUARDAD_SEED environment variable takes precedence.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-entity, per-step perception dropout probability.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Onset-to-collision gap of the pedestrian template [default: 2, or 5 with --flicker].
    #[arg(long)]
    pedestrian_gap: Option<u64>,
    /// Pedestrian seen for two steps, then occluded until the collision.
    #[arg(long)]
    flicker: bool,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Rule catalog; the shipped catalog when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Scenario JSON files or directories; replaces generation when given.
    #[arg(long = "scenarios", num_args = 1..)]
    scenarios: Vec<PathBuf>,
    #[command(flatten)]
    generation: ScenarioArgs,
    /// Policy spec: `oracle`, `faulty:blind=B,comply=C,seed=S` or `external:<command>`.
    #[arg(long, default_value = "oracle")]
    policy: String,
    /// full, predicate-static, predicate-targets, forced-fallback, constrained-select or monitor.
    #[arg(long, default_value = "full")]
    mode: String,
    /// Markov order of the temporal window.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Past frames handed to the policy.
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    /// Prompted re-queries before constrained selection.
    #[arg(long, default_value_t = 1)]
    retries: usize,
    /// Action used by forced-fallback mode.
    #[arg(long, default_value = "Stop")]
    fallback: String,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Output directory for traces/ and metrics files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Trace files or directories of `*.jsonl` traces.
    #[arg(required = true)]
    traces: Vec<PathBuf>,
}

#[derive(Args)]
struct ExplainArgs {
    trace: PathBuf,
    /// Step index t.
    #[arg(long)]
    step: u64,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    generation: ScenarioArgs,
    #[arg(long, default_value = "scenarios")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Inclusive range `A..B` or comma list of Markov orders.
    #[arg(long, default_value = "1..6")]
    n_range: String,
    /// Inclusive range `A..B` or comma list of history lengths; defaults to --k.
    #[arg(long)]
    k_range: Option<String>,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    rules: PathBuf,
    /// Print the catalog in canonical form.
    #[arg(long)]
    print: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ");
            eprintln!("guardad: error: bad-argument: {first}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("guardad: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Check(args) => cmd_check(args),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::config("missing-file", format!("{}: {e}", path.display())))
}

/// Writes through a temporary sibling so readers never see partial files.
fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let io_err = |e: std::io::Error| CliError::runtime("io", format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

fn load_catalog(path: Option<&Path>) -> CliResult<RuleCatalog> {
    match path {
        None => Ok(default_catalog().clone()),
        Some(p) => {
            let text = read_text(p)?;
            parse_catalog(&text)
                .map_err(|e| CliError::config("bad-catalog", format!("{}: {e}", p.display())))
        }
    }
}

fn effective_seed(flag: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            CliError::config("bad-seed", format!("{SEED_ENV}=`{v}` is not an integer"))
        }),
        Err(_) => Ok(flag),
    }
}

fn generate(args: &ScenarioArgs) -> CliResult<Vec<Scenario>> {
    if !(0.0..=1.0).contains(&args.dropout) {
        return Err(CliError::config(
            "bad-argument",
            "--dropout must be within [0, 1]",
        ));
    }
    let seed = effective_seed(args.seed)?;
    let base = if args.flicker {
        ScenarioParams::flicker()
    } else {
        ScenarioParams::default()
    };
    let params = ScenarioParams {
        pedestrian_gap: args.pedestrian_gap.unwrap_or(base.pedestrian_gap),
        dropout: args.dropout,
        ..base
    };
    if args.template == "all" {
        return Ok(standard_suite(args.count, seed, &params));
    }
    let template: Template = args
        .template
        .parse()
        .map_err(|e| CliError::config("unknown-template", format!("{e}")))?;
    generate_scenarios(template, args.count, seed, &params)
        .map_err(|e| CliError::config("bad-scenario", e.to_string()))
}

fn collect_files(paths: &[PathBuf], extension: &str) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = fs::read_dir(p)
                .map_err(|e| CliError::config("missing-file", format!("{}: {e}", p.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == extension))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(CliError::config(
                "missing-file",
                format!("{} does not exist", p.display()),
            ));
        }
    }
    Ok(files)
}

fn load_scenarios(exp: &ExperimentArgs) -> CliResult<Vec<Scenario>> {
    if exp.scenarios.is_empty() {
        return generate(&exp.generation);
    }
    let files = collect_files(&exp.scenarios, "json")?;
    if files.is_empty() {
        return Err(CliError::config("missing-file", "no scenario files found"));
    }
    files
        .iter()
        .map(|f| {
            Scenario::from_json(&read_text(f)?)
                .map_err(|e| CliError::config("bad-scenario", format!("{}: {e}", f.display())))
        })
        .collect()
}

struct Experiment {
    catalog: RuleCatalog,
    scenarios: Vec<Scenario>,
    policy: PolicySpec,
    config: GuardConfig,
}

fn prepare(exp: &ExperimentArgs) -> CliResult<Experiment> {
    let catalog = load_catalog(exp.rules.as_deref())?;
    let policy: PolicySpec = exp
        .policy
        .parse()
        .map_err(|e| CliError::config("bad-policy", format!("{e}")))?;
    let mode: GuardMode = exp
        .mode
        .parse()
        .map_err(|e| CliError::config("bad-mode", format!("{e}")))?;
    let fallback_action: Action = exp.fallback.parse().map_err(|_| {
        CliError::config("bad-argument", format!("unknown action `{}`", exp.fallback))
    })?;
    let config = GuardConfig {
        n: exp.n,
        k: exp.k,
        theta: exp.theta,
        max_retries: exp.retries,
        mode,
        fallback_action,
    };
    config
        .validate()
        .map_err(|e| CliError::config("bad-config", e.to_string()))?;
    let scenarios = load_scenarios(exp)?;
    if scenarios.is_empty() {
        return Err(CliError::config("bad-argument", "no scenarios to run"));
    }
    Ok(Experiment {
        catalog,
        scenarios,
        policy,
        config,
    })
}

fn execute(
    exp: &Experiment,
    config: &GuardConfig,
) -> CliResult<Vec<(guardad_core::sim::EpisodeTrace, EpisodeOutcome)>> {
    run_suite(&exp.scenarios, &exp.policy, config, &exp.catalog)
        .map_err(|e| CliError::runtime("episode", e.to_string()))
}

fn metrics(outcomes: &[EpisodeOutcome]) -> CliResult<MetricsReport> {
    compute_metrics(outcomes).map_err(|e| CliError::runtime("metrics", e.to_string()))
}

fn print_table(text: &str) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::runtime("io", e.to_string()))
}

fn warn_policy_errors(results: &[(guardad_core::sim::EpisodeTrace, EpisodeOutcome)]) {
    let failed = results
        .iter()
        .filter(|(t, _)| t.policy_error.is_some())
        .count();
    if failed > 0 {
        eprintln!("guardad: warning: {failed} episode(s) ended on a policy error (counted as OT)");
    }
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let exp = prepare(&args.experiment)?;
    let results = execute(&exp, &exp.config)?;
    warn_policy_errors(&results);

    let traces_dir = args.out.join("traces");
    for (trace, outcome) in &results {
        write_atomic(
            &traces_dir.join(format!("{}.jsonl", trace.scenario_id)),
            &trace_to_jsonl(trace, outcome),
        )?;
    }
    let outcomes: Vec<EpisodeOutcome> = results.into_iter().map(|(_, o)| o).collect();
    let report = metrics(&outcomes)?;
    let table = format!(
        "{}\n{}\n",
        MetricsReport::tsv_header(&[]),
        report.tsv_row(&[])
    );
    write_atomic(&args.out.join("metrics.tsv"), &table)?;
    let json = serde_json::to_string_pretty(&report).expect("metrics serialize") + "\n";
    write_atomic(&args.out.join("metrics.json"), &json)?;
    print_table(&table)
}

fn read_trace(path: &Path) -> CliResult<(guardad_core::sim::EpisodeTrace, EpisodeOutcome)> {
    trace_from_jsonl(&read_text(path)?)
        .map_err(|e| CliError::config("bad-trace", format!("{}: {e}", path.display())))
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let files = collect_files(&args.traces, "jsonl")?;
    if files.is_empty() {
        return Err(CliError::config("missing-file", "no trace files found"));
    }
    let outcomes = files
        .iter()
        .map(|f| read_trace(f).map(|(_, o)| o))
        .collect::<CliResult<Vec<_>>>()?;
    let report = metrics(&outcomes)?;
    print_table(&format!(
        "{}\n{}\n",
        MetricsReport::tsv_header(&[]),
        report.tsv_row(&[])
    ))
}

fn cmd_explain(args: ExplainArgs) -> CliResult<()> {
    let (trace, _) = read_trace(&args.trace)?;
    let record = trace
        .steps
        .iter()
        .find(|s| s.t == args.step)
        .ok_or_else(|| {
            CliError::runtime(
                "step-out-of-range",
                format!(
                    "step {} not in trace ({} steps)",
                    args.step,
                    trace.steps.len()
                ),
            )
        })?;
    print_table(&record.explain())
}

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    let scenarios = generate(&args.generation)?;
    for s in &scenarios {
        write_atomic(
            &args.out.join(format!("{}.json", s.id)),
            &(s.to_json() + "\n"),
        )?;
    }
    println!(
        "wrote {} scenario(s) to {}",
        scenarios.len(),
        args.out.display()
    );
    Ok(())
}

/// Parses `A..B` (inclusive) or `a,b,c`.
fn parse_range(text: &str, flag: &str) -> CliResult<Vec<usize>> {
    let bad = || {
        CliError::config(
            "bad-range",
            format!("{flag} `{text}`: expected A..B or a comma list"),
        )
    };
    let text = text.trim();
    let values: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b
            .trim_start_matches('=')
            .trim()
            .parse()
            .map_err(|_| bad())?;
        (a..=b).collect()
    } else if text.is_empty() {
        Vec::new()
    } else {
        text.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<CliResult<_>>()?
    };
    if values.is_empty() {
        return Err(CliError::config(
            "empty-range",
            format!("{flag} `{text}` is empty"),
        ));
    }
    Ok(values)
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let ns = parse_range(&args.n_range, "--n-range")?;
    let ks = match &args.k_range {
        Some(r) => parse_range(r, "--k-range")?,
        None => vec![args.experiment.k],
    };
    let exp = prepare(&args.experiment)?;
    let mut table = MetricsReport::tsv_header(&["n", "k"]) + "\n";
    for &n in &ns {
        for &k in &ks {
            let config = GuardConfig {
                n,
                k,
                ..exp.config.clone()
            };
            config
                .validate()
                .map_err(|e| CliError::config("bad-config", e.to_string()))?;
            let results = execute(&exp, &config)?;
            warn_policy_errors(&results);
            let outcomes: Vec<EpisodeOutcome> = results.into_iter().map(|(_, o)| o).collect();
            let report = metrics(&outcomes)?;
            table.push_str(&report.tsv_row(&[n.to_string(), k.to_string()]));
            table.push('\n');
        }
    }
    if let Some(path) = &args.out {
        write_atomic(path, &table)?;
    }
    print_table(&table)
}

fn cmd_check(args: CheckArgs) -> CliResult<()> {
    let catalog = load_catalog(Some(&args.rules))?;
    if args.print {
        return print_table(&catalog.to_string());
    }
    println!(
        "ok: {} predicates, {} constraints, {} horn rules, {} temporal rules",
        catalog.predicates().len(),
        catalog.constraints().len(),
        catalog.horn_rules().len(),
        catalog.temporal_rules().len()
    );
    Ok(())
}
