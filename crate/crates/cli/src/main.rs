use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sidepath::orchestrator::{JsonlSink, MemorySink, SummarySink};
use sidepath::script::{generate_synthetic, load_and_validate, SyntheticProfile};
use sidepath::verify::{run_suite, BrokenEvict, Suite, VerifyOptions};
use sidepath::{
    compare_strategies, run_conversation_with, CacheOps, ClassificationMode, CountingBackend, Error,
    ModelBackend, PriorityOrder, RetentionMode, SegmentCacheOps, StrategyConfig, Tokenizer, ToyBackend,
    ToyTransformerConfig,
};

const FIXTURES_ENV: &str = "SIDEPATH_FIXTURES";

#[derive(Parser)]
#[command(name = "sidepath", version, about = "Task-level KV-cache reuse engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one script under one strategy.
    Run(RunArgs),
    /// Run one script under several strategies and tabulate the costs.
    Compare(CompareArgs),
    /// Generate a synthetic script from a profile.
    Synth(SynthArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Counting,
    Toy,
}

#[derive(Args)]
struct EngineArgs {
    /// Script path; relative paths also resolve under $SIDEPATH_FIXTURES.
    #[arg(long)]
    script: PathBuf,
    #[arg(long, value_enum, default_value = "counting")]
    backend: BackendKind,
    /// Counting-backend tokenizer.
    #[arg(long, value_parser = parse_from_str::<Tokenizer>, default_value = "whitespace")]
    tokenizer: Tokenizer,
    /// Toy transformer config file.
    #[arg(long)]
    toy_config: Option<PathBuf>,
    #[arg(long, value_parser = parse_from_str::<RetentionMode>)]
    retention: Option<RetentionMode>,
    #[arg(long, value_parser = parse_from_str::<ClassificationMode>)]
    classification: Option<ClassificationMode>,
    /// Recent re-load window in turns.
    #[arg(long)]
    window: Option<usize>,
    /// Comma-separated priority order of the four actionable kinds.
    #[arg(long, value_parser = parse_from_str::<PriorityOrder>)]
    priority: Option<PriorityOrder>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// `name` or `name:classification`, e.g. `full-reload:multichoice`.
    #[arg(long, value_parser = parse_from_str::<StrategyConfig>, default_value = "ciflex")]
    strategy: StrategyConfig,
    /// Where to write the session report (JSON).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Append chat summaries to this JSON-lines file.
    #[arg(long)]
    summary_sink: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Repeat or comma-separate; at least two.
    #[arg(long = "strategy", value_delimiter = ',', value_parser = parse_from_str::<StrategyConfig>, required = true)]
    strategies: Vec<StrategyConfig>,
    /// Where to write the comparison table (CSV).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Where to write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Profile file (TOML). Defaults to the bundled paper-like profile.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    turns: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    BrokenEvict,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_parser = parse_from_str::<Suite>, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = VerifyOptions::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = VerifyOptions::default().cases)]
    cases: usize,
    #[arg(long, default_value_t = VerifyOptions::default().scripts)]
    scripts: usize,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Outcome {
    Ok,
    Failed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Synth(a) => cmd_synth(a).map(|_| Outcome::Ok),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            if let Some(Error::Validation(issues)) = err.downcast_ref::<Error>() {
                for issue in issues {
                    eprintln!("  {issue}");
                }
            }
            ExitCode::from(1)
        }
    }
}

fn resolve(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    if let Some(dir) = std::env::var_os(FIXTURES_ENV).map(PathBuf::from) {
        for candidate in [Some(dir.join(path)), path.file_name().map(|f| dir.join(f))].into_iter().flatten() {
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

fn backend(args: &EngineArgs) -> anyhow::Result<Box<dyn ModelBackend>> {
    Ok(match args.backend {
        BackendKind::Counting => Box::new(CountingBackend::new(args.tokenizer)),
        BackendKind::Toy => {
            let config = match &args.toy_config {
                Some(p) => ToyTransformerConfig::load(resolve(p))?,
                None => ToyTransformerConfig::default(),
            };
            Box::new(ToyBackend::new(config)?)
        }
    })
}

fn apply_overrides(cfg: &mut StrategyConfig, args: &EngineArgs) -> anyhow::Result<()> {
    if let Some(r) = args.retention {
        cfg.retention_mode = r;
    }
    if let Some(c) = args.classification {
        cfg.classification_mode = c;
    }
    if let Some(w) = args.window {
        cfg.recent_window = w;
    }
    if let Some(p) = &args.priority {
        cfg.priority = p.clone();
    }
    cfg.validate()?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<Outcome> {
    let path = resolve(&args.engine.script);
    let script = load_and_validate(&path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = args.strategy;
    apply_overrides(&mut cfg, &args.engine)?;
    let backend = backend(&args.engine)?;

    let mut memory = MemorySink::default();
    let mut file_sink;
    let sink: &mut dyn SummarySink = match &args.summary_sink {
        Some(p) => {
            file_sink = JsonlSink::open(p)?;
            &mut file_sink
        }
        None => &mut memory,
    };
    let report = run_conversation_with(&script, &cfg, backend.as_ref(), &SegmentCacheOps, sink)?;

    for (m, rec) in report.metrics.iter().zip(&report.turns) {
        println!(
            "turn {:>3}  subtask={:<13} classification={:>7} subtask={:>7} main_answer={:>7} turn_update={:>5}",
            m.turn,
            rec.selected_subtask.as_str(),
            m.classification.prefill,
            m.subtask.prefill,
            m.main_answer.prefill,
            m.turn_update.prefill
        );
    }
    let total = report.total();
    println!(
        "{} on {}: {} turns, prefill {} generated {}",
        report.strategy,
        report.script_id,
        report.turns.len(),
        total.prefill,
        total.generated
    );
    if let Some(out) = &args.output {
        std::fs::write(out, report.to_json_pretty()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(Outcome::Ok)
}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<Outcome> {
    if args.strategies.len() < 2 {
        use clap::CommandFactory;
        Cli::command()
            .error(clap::error::ErrorKind::TooFewValues, "compare needs at least two strategies")
            .exit();
    }
    let path = resolve(&args.engine.script);
    let script = load_and_validate(&path).with_context(|| format!("loading {}", path.display()))?;
    let mut configs = args.strategies.clone();
    for cfg in &mut configs {
        apply_overrides(cfg, &args.engine)?;
    }
    let backend = backend(&args.engine)?;
    let table = compare_strategies(&script, &configs, backend.as_ref())?;

    for t in &table.totals {
        println!(
            "{:<28} cum_prefill={:>9} cum_generated={:>7} classification_prefill={:>9}",
            t.strategy, t.prefill, t.generated, t.classification_prefill
        );
    }
    if !table.transcripts_match {
        println!("warning: transcripts differ between strategies");
    }
    let csv = table.to_csv()?;
    match &args.output {
        Some(out) => std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?,
        None => print!("{csv}"),
    }
    if let Some(json) = &args.json {
        let mut text = serde_json::to_string_pretty(&table)?;
        text.push('\n');
        std::fs::write(json, text)?;
    }
    Ok(Outcome::Ok)
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut profile = match &args.profile {
        Some(p) => SyntheticProfile::load(resolve(p))?,
        None => SyntheticProfile::paper_like(),
    };
    if let Some(seed) = args.seed {
        profile.seed = seed;
    }
    if let Some(turns) = args.turns {
        profile.turn_count = turns;
    }
    let script = generate_synthetic(&profile)?;
    let text = script.to_json_pretty();
    match &args.output {
        Some(out) => std::fs::write(out, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<Outcome> {
    let opts = VerifyOptions {
        seed: args.seed,
        cases: args.cases,
        scripts: args.scripts,
    };
    if opts.cases == 0 || opts.scripts == 0 {
        bail!("--cases and --scripts must be positive");
    }
    let broken = BrokenEvict(SegmentCacheOps);
    let ops: &dyn CacheOps = match args.inject_fault {
        Some(Fault::BrokenEvict) => &broken,
        None => &SegmentCacheOps,
    };
    let outcomes = run_suite(args.suite, ops, &opts)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<14} {:<32} {}", o.suite, o.property, o.detail);
        if !o.passed {
            failed.push(o.property.clone());
        }
    }
    if failed.is_empty() {
        println!("{} properties passed", outcomes.len());
        Ok(Outcome::Ok)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(Outcome::Failed)
    }
}
