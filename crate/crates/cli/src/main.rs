mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use quantile_rules::adaptation::{self, AdaptFailure, AdaptationConfig, SoftmaxModel};
use quantile_rules::bounds::{read_rules, write_rules, RuleStatus};
use quantile_rules::data::{load_table, load_table_with_edges, Dataset, Derivation};
use quantile_rules::schema::enumerate_abstract_rules;
use quantile_rules::stats::load_boxes;
use quantile_rules::violations::{self, Batching, ViolationReport};
use quantile_rules::{learn_and_select, BoundJob, ConcreteRule, EvalContext, RuleSchema, StatisticRegistry};

use config::{require, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "qrules", version, about = "Mine quantile rules, audit predictions, adapt a model")]
struct Cli {
    #[arg(long, global = true, default_value = "qrules.toml")]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated evaluation seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the built-in classifier on labelled training data.
    Train,
    /// Enumerate rules from the schema, learn bounds and select rules.
    Mine,
    /// Count rule violations on the test set.
    Evaluate,
    /// Adapt the model to reduce rule violations on the test set.
    Adapt,
    /// Print a violation report.
    Report {
        /// Report file; defaults to the configured report path.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<quantile_rules::Error>() {
            return if e.is_numeric() { 3 } else { 2 };
        }
        if let Some(f) = cause.downcast_ref::<AdaptFailure>() {
            return if f.error.is_numeric() { 3 } else { 2 };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    if let Command::Report { input: Some(path) } = &cli.command {
        return cmd_report(path, cli.format);
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if !cli.seeds.is_empty() {
        cfg.evaluate.seeds = cli.seeds.clone();
    }
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Mine => cmd_mine(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg, cli.format),
        Command::Adapt => cmd_adapt(&cfg),
        Command::Report { .. } => cmd_report(&cfg.evaluate.report_out, cli.format),
    }
}

fn load_any(path: &Path, cfg: &RunConfig, train: Option<&Dataset>) -> Result<Dataset> {
    let ds = if path.extension().is_some_and(|e| e == "json") {
        load_boxes(path)?
    } else {
        match train {
            Some(t) => load_table_with_edges(path, &cfg.data.features, t.bucket_edges())?,
            None => load_table(path, &cfg.data.features)?,
        }
    };
    Ok(ds)
}

fn needs_edges(cfg: &RunConfig) -> bool {
    cfg.data.features.iter().any(|f| matches!(f.derivation, Derivation::Bucket(_)))
}

/// Loads the test set, bucketing with edges learned on the training set.
fn load_test(cfg: &RunConfig) -> Result<Dataset> {
    let test = require(&cfg.data.test, "data.test")?;
    if needs_edges(cfg) {
        let train = load_any(require(&cfg.data.train, "data.train")?, cfg, None)?;
        load_any(test, cfg, Some(&train))
    } else {
        load_any(test, cfg, None)
    }
}

fn with_predictions(ds: Dataset, model: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    match model {
        Some(path) => Ok(SoftmaxModel::load(path)?.predict(&ds, &cfg.data.prediction_column)?),
        None => Ok(ds),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let Some(t) = &cfg.train else {
        bail!(ConfigError("missing [train] section".into()));
    };
    let train = load_any(require(&cfg.data.train, "data.train")?, cfg, None)?;
    let model = SoftmaxModel::fit(&train, &t.features, &cfg.data.label_column, t.iterations, t.learning_rate)?;
    model.save(&t.model_out)?;
    println!(
        "train rows={} classes={} features={} model_out={}",
        train.rows(),
        model.n_classes(),
        model.n_features(),
        t.model_out.display()
    );
    Ok(())
}

fn cmd_mine(cfg: &RunConfig) -> Result<()> {
    let m = &cfg.mine;
    let train = load_any(require(&cfg.data.train, "data.train")?, cfg, None)?;
    let valid = match (&cfg.data.valid, m.select) {
        (Some(p), true) => Some(load_any(p, cfg, Some(&train))?),
        (None, true) => bail!(ConfigError("rule selection needs `data.valid` (or set mine.select = false)".into())),
        _ => None,
    };
    let train = with_predictions(train, m.model.as_deref(), cfg)?;
    let valid = valid.map(|v| with_predictions(v, m.model.as_deref(), cfg)).transpose()?;

    let schema_path = require(&cfg.data.schema, "data.schema")?;
    let text = fs::read_to_string(schema_path).with_context(|| format!("reading schema {}", schema_path.display()))?;
    let registry = StatisticRegistry::for_dataset(&train);
    let schema = RuleSchema::parse(&text, &registry)?;
    let exclude = [cfg.data.label_column.as_str(), cfg.data.prediction_column.as_str()];
    let features = train.boolean_features(&exclude);
    let rules = enumerate_abstract_rules(&schema, &features)?;

    let job = BoundJob {
        train_batches: m.train_batches,
        valid_batches: m.valid_batches,
        epsilon: m.epsilon,
        seed: m.seed,
    };
    let ctx = EvalContext::new(&cfg.data.label_column);
    let selection = learn_and_select(&rules, &train, valid.as_ref(), &job, &ctx)?;
    for o in &selection.outcomes {
        if let RuleStatus::Skipped { reason } = &o.status {
            println!("skip rule=\"{}\" reason=\"{reason}\"", o.signature);
        }
    }
    write_rules(&m.rules_out, &selection.rules)?;
    println!(
        "mine enumerated={} skipped={} rejected={} selected={} seed={} rules_out={}",
        rules.len(),
        selection.skipped(),
        selection.rejected(),
        selection.rules.len(),
        m.seed,
        m.rules_out.display()
    );
    Ok(())
}

fn load_rules(cfg: &RunConfig) -> Result<Vec<ConcreteRule>> {
    let path = cfg.rules_path();
    read_rules(path).with_context(|| format!("loading rules {}", path.display()))
}

fn batching(cfg: &RunConfig, seed: u64) -> Batching {
    Batching {
        batch_size: cfg.evaluate.batch_size,
        count: cfg.evaluate.batches,
        seed,
    }
}

fn log_report(cmd: &str, report: &ViolationReport, extra: &str) {
    println!(
        "{cmd} rules={} skipped={} total_violations={} mean_per_sample={} std_per_sample={}{extra}",
        report.rules.len(),
        report.skipped.len(),
        report.totals.total_violations,
        report.totals.mean_per_sample,
        report.totals.std_per_sample
    );
}

fn cmd_evaluate(cfg: &RunConfig, format: Format) -> Result<()> {
    let rules = load_rules(cfg)?;
    let test = with_predictions(load_test(cfg)?, cfg.evaluate.model.as_deref(), cfg)?;
    let ctx = EvalContext::new(&cfg.data.prediction_column);
    let e = &cfg.evaluate;
    let seeds = if e.seeds.is_empty() { vec![e.seed] } else { e.seeds.clone() };
    let (reports, summary) = violations::evaluate_seeds(&rules, &test, &batching(cfg, e.seed), &seeds, &ctx)?;
    for s in &reports[0].skipped {
        println!("skip rule=\"{}\" reason=\"{}\"", s.signature, s.reason);
    }
    violations::write_report(&e.report_out, &reports[0])?;
    if format == Format::Csv {
        fs::write(e.report_out.with_extension("csv"), violations::report_csv(&reports[0])?)
            .with_context(|| format!("writing {}", e.report_out.with_extension("csv").display()))?;
    }
    log_report("evaluate", &reports[0], &format!(" report_out={}", e.report_out.display()));
    if seeds.len() > 1 {
        let totals: Vec<String> = summary.totals.iter().map(u64::to_string).collect();
        println!(
            "evaluate seeds={} totals={} mean_total={} std_total={}",
            seeds.len(),
            totals.join(","),
            summary.mean,
            summary.std
        );
    }
    Ok(())
}

fn cmd_adapt(cfg: &RunConfig) -> Result<()> {
    let Some(a) = &cfg.adapt else {
        bail!(ConfigError("missing [adapt] section".into()));
    };
    let rules = load_rules(cfg)?;
    let test = load_test(cfg)?;
    let model = SoftmaxModel::load(&a.model_in)?;
    let ctx = EvalContext::new(&cfg.data.prediction_column);
    let batch = batching(cfg, cfg.evaluate.seed);
    let predict = |m: &SoftmaxModel| m.predict(&test, &cfg.data.prediction_column);

    let before = violations::evaluate(&rules, &predict(&model)?, &batch, &ctx)?;
    violations::write_report(&a.report_before, &before)?;
    log_report("before", &before, "");
    if rules.is_empty() {
        println!("adapt iterations=0 note=\"no rules to adapt to\"");
        violations::write_report(&a.report_after, &before)?;
        model.save(&a.model_out)?;
        adaptation::AdaptationTrace::default().write(&a.trace_out)?;
        println!("reduced_percent=0");
        return Ok(());
    }

    let config = AdaptationConfig {
        iterations: a
            .iterations
            .or_else(|| a.epochs.map(|e| adaptation::iterations_for_epochs(e, test.rows(), a.batch_size)))
            .unwrap_or(AdaptationConfig::default().iterations),
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        grad_clip: a.grad_clip,
        temperature: a.temperature,
    };
    let (adapted, trace) = match adaptation::adapt(&model, &rules, &test, &config) {
        Ok(r) => r,
        Err(failure) => {
            failure.trace.write(&a.trace_out)?;
            return Err(failure.into());
        }
    };
    trace.write(&a.trace_out)?;
    adapted.save(&a.model_out)?;
    let after = violations::evaluate(&rules, &predict(&adapted)?, &batch, &ctx)?;
    violations::write_report(&a.report_after, &after)?;
    log_report("after", &after, "");
    let first = trace.steps.first().map_or(0.0, |s| s.loss);
    let last = trace.steps.last().map_or(0.0, |s| s.loss);
    println!(
        "adapt iterations={} first_loss={first} last_loss={last} trace_out={} model_out={}",
        trace.steps.len(),
        a.trace_out.display(),
        a.model_out.display()
    );
    let b = before.totals.total_violations;
    let f = after.totals.total_violations;
    if b == 0 {
        println!("reduced_percent=0 note=\"no violations before adaptation\"");
    } else {
        println!("reduced_percent={}", 100.0 * (b as f64 - f as f64) / b as f64);
    }
    println!(
        "% Reduced: {:.1}",
        if b == 0 { 0.0 } else { 100.0 * (b as f64 - f as f64) / b as f64 }
    );
    Ok(())
}

fn cmd_report(path: &Path, format: Format) -> Result<()> {
    let report = violations::read_report(path)?;
    match format {
        Format::Json => {
            let mut out = Vec::new();
            violations::write_report_to(&mut out, &report)?;
            print!("{}", String::from_utf8(out)?);
        }
        Format::Csv => print!("{}", violations::report_csv(&report)?),
    }
    Ok(())
}
