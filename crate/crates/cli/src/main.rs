//! `larslab`: activation-memory sweeps, gradient checks, estimates and
//! toy training runs for the LARS, LoRA and IA3 adapters.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or
//! configuration error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use larslab_core::adapters::{AdapterSet, AdapterSpec, Pooling};
use larslab_core::config::{parse_bytes, ExperimentConfig};
use larslab_core::exec::Exec;
use larslab_core::harness::{
    check_adapter_gradients, default_spec, fit_slopes, make_task, measure_step, run_sweep, sweep_points, train,
    write_csv, GridValue, NiahConfig, RunReport, SweepDimension, SweepMode, SweepSettings, TaskSpec, TrainOptions,
    GRADCHECK_TOL,
};
use larslab_core::memory::estimate_peak;
use larslab_core::tensor::{BackwardFault, DType};
use larslab_core::transformer::Backbone;
use larslab_core::Error;

const SEED_VAR: &str = "LARSLAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "larslab", version, about = "Adapter activation-memory lab")]
struct Cli {
    /// JSON experiment config; omitted sections take the defaults listed below.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads for independent runs; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Measure saved activation bytes over a sweep grid and fit growth slopes.
    Memscan(MemscanArgs),
    /// Finite-difference check of every adapter tensor at f64.
    Gradcheck(GradcheckArgs),
    /// Train the configured adapters and write their run reports.
    Train(TrainArgs),
    /// Analytic peak-memory breakdown, optionally checked against the ledger.
    Estimate(EstimateArgs),
    /// Passkey retrieval: train each adapter on niah_toy and compare held-out accuracy.
    Niah(NiahArgs),
}

#[derive(Debug, Args)]
struct MemscanArgs {
    /// Sequence lengths to sweep, comma separated; overrides the config grid.
    #[arg(long = "S-grid", alias = "s-grid", value_delimiter = ',', value_name = "S,..")]
    s_grid: Option<Vec<usize>>,

    /// CSV output path.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,

    /// Activation budget per run (e.g. 64MB); runs over it are marked exceeds_budget.
    #[arg(long, value_name = "BYTES")]
    budget: Option<String>,

    /// Batch size of each measured step [config default: 2].
    #[arg(short = 'B', long)]
    batch: Option<usize>,

    /// Train every grid point instead of measuring one step.
    #[arg(long)]
    train: bool,

    /// Record tokens/sec (makes the CSV time-dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Fixed,
    Learned,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check only this adapter (lars, lars_learned, lora, ia3).
    #[arg(long)]
    adapter: Option<String>,

    /// Override the adapter rank.
    #[arg(long)]
    rank: Option<usize>,

    /// Override LARS pooling.
    #[arg(long, value_enum)]
    pooling: Option<PoolingArg>,

    /// Scale one primitive's input gradient, `op:factor` (negative control).
    #[arg(long, hide = true, value_name = "OP:FACTOR")]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON report path (an array, one report per adapter).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Train only this adapter (lars, lars_learned, lora, ia3).
    #[arg(long)]
    adapter: Option<String>,

    /// Override train.steps; 0 writes an untrained report.
    #[arg(long)]
    steps: Option<usize>,

    /// Keep tokens_per_sec in the JSON report (makes it time-dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Batch size [config default: sweep.batch = 2].
    #[arg(short = 'B', long)]
    batch: Option<usize>,

    /// Sequence length [config default: task seq_len = 64].
    #[arg(short = 'S', long = "seq")]
    seq: Option<usize>,

    /// Estimate only this adapter.
    #[arg(long)]
    adapter: Option<String>,

    /// Measure one step and compare against the ledger; mismatches exit 1.
    #[arg(long)]
    verify: bool,

    /// Assume attention probabilities are recomputed rather than stored.
    #[arg(long)]
    flash: bool,

    /// Fraction of base activations kept under checkpointing, in (0, 1].
    #[arg(long, value_name = "F")]
    gc_factor: Option<f64>,
}

#[derive(Debug, Args)]
struct NiahArgs {
    /// Sequence length of the haystack.
    #[arg(short = 'S', long = "seq", default_value_t = 64)]
    seq: usize,

    /// Override train.steps.
    #[arg(long)]
    steps: Option<usize>,

    /// JSON report path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let defaults = ExperimentConfig::default().to_json();
    let command = Cli::command().after_long_help(format!(
        "Config defaults (an empty `{{}}` file means exactly this):\n{defaults}\n\n\
         {SEED_VAR} overrides backbone.seed and train.seed.\n\
         Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error."
    ));
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_VAR) {
        let seed = raw
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_VAR}=`{raw}` is not an unsigned integer")))?;
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn select_adapters(cfg: &ExperimentConfig, name: Option<&str>) -> anyhow::Result<Vec<AdapterSpec>> {
    let Some(name) = name else {
        return Ok(cfg.adapters.clone());
    };
    let configured = cfg.adapters.iter().find(|a| match name {
        "lars_learned" => a.pooling() == "learned",
        "lars_fixed" => a.pooling() == "fixed",
        _ => a.kind() == name,
    });
    Ok(vec![match configured {
        Some(spec) => spec.clone(),
        None => default_spec(name)?,
    }])
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    let exec = Exec::from_jobs(cli.jobs);
    match cli.command {
        Command::Memscan(args) => memscan(cfg, args, exec),
        Command::Gradcheck(args) => gradcheck(cfg, args, exec),
        Command::Train(args) => train_cmd(cfg, args, exec),
        Command::Estimate(args) => estimate(cfg, args),
        Command::Niah(args) => niah(cfg, args, exec),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn memscan(mut cfg: ExperimentConfig, args: MemscanArgs, exec: Exec) -> anyhow::Result<ExitCode> {
    if let Some(grid) = args.s_grid {
        cfg.sweep.dimension = SweepDimension::S;
        cfg.sweep.grid = grid.into_iter().map(GridValue::Int).collect();
    }
    if let Some(b) = args.batch {
        cfg.sweep.batch = b;
    }
    if args.train {
        cfg.sweep.mode = SweepMode::Train;
    }
    let budget = args.budget.as_deref().map(parse_bytes).transpose()?;
    let points = sweep_points(&cfg.sweep, &cfg.adapters)?;
    // fail on an unwritable path before any work is done
    let mut out = create(&args.out)?;

    let settings = SweepSettings {
        backbone: &cfg.backbone,
        task: &cfg.task,
        train: &cfg.train,
        mode: cfg.sweep.mode,
        budget,
        exec,
        timing: args.timing,
    };
    let rows = run_sweep(&settings, &points);
    write_csv(&rows, &mut out)?;
    out.flush().with_context(|| format!("cannot write {}", args.out.display()))?;

    let ok = rows.iter().filter(|r| r.is_ok()).count();
    let over = rows.iter().filter(|r| r.status == "exceeds_budget").count();
    println!("{} rows -> {} ({ok} ok, {over} exceeds_budget)", rows.len(), args.out.display());
    for row in rows.iter().filter(|r| !r.is_ok() && r.status != "exceeds_budget") {
        println!("  {} S={} R={:?}: {}", row.adapter, row.seq, row.rank, row.status);
    }
    if cfg.sweep.dimension == SweepDimension::S {
        let fits = fit_slopes(&rows);
        for fit in &fits {
            println!(
                "{:<36} adapter slope {:>12.3} B/token (R² {:.6})  total slope {:>12.3} B/token",
                fit.label, fit.adapter.slope, fit.adapter.r_squared, fit.total.slope
            );
        }
        let lora = fits.iter().find(|f| f.label.starts_with("lora/"));
        for lars in fits.iter().filter(|f| f.label.starts_with("lars/")) {
            if let Some(lora) = lora.filter(|l| l.total.slope > 0.0) {
                let cut = 100.0 * (1.0 - lars.total.slope / lora.total.slope);
                println!("growth-rate reduction {} vs {}: {cut:.2}%", lars.label, lora.label);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_fault(text: &str) -> anyhow::Result<BackwardFault> {
    let (op, factor) = text
        .split_once(':')
        .ok_or_else(|| usage(format!("--inject-fault expects op:factor, got `{text}`")))?;
    let factor = factor
        .parse()
        .map_err(|_| usage(format!("--inject-fault factor `{factor}` is not a number")))?;
    Ok(BackwardFault {
        op: op.to_string(),
        factor,
    })
}

fn gradcheck(cfg: ExperimentConfig, args: GradcheckArgs, exec: Exec) -> anyhow::Result<ExitCode> {
    let fault = args.inject_fault.as_deref().map(parse_fault).transpose()?;
    let mut failed = false;
    for mut spec in select_adapters(&cfg, args.adapter.as_deref())? {
        if let Some(r) = args.rank {
            spec.set_rank(r);
        }
        if let (Some(p), AdapterSpec::Lars(c)) = (args.pooling, &mut spec) {
            c.pooling = match p {
                PoolingArg::Fixed => Pooling::Fixed,
                PoolingArg::Learned => Pooling::Learned,
            };
        }
        let checks = check_adapter_gradients(&spec, cfg.backbone.seed, exec, fault.clone())?;
        println!("{spec} pooling={}", spec.pooling());
        for c in &checks {
            let verdict = if c.passed() { "ok" } else { "FAIL" };
            println!(
                "  {:<28} {:>6} elems  max rel err {:.3e}  {verdict}",
                c.label(),
                c.elements,
                c.max_rel_error
            );
        }
        if let Some(bad) = checks.iter().find(|c| !c.max_rel_error.is_finite()) {
            bail!("non-finite gradient check for {} ({})", bad.label(), spec.kind());
        }
        failed |= checks.iter().any(|c| !c.passed());
    }
    if failed {
        eprintln!("gradient check failed (tolerance {GRADCHECK_TOL:e})");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn train_all(cfg: &ExperimentConfig, specs: &[AdapterSpec], exec: Exec) -> anyhow::Result<Vec<RunReport>> {
    cfg.train.validate()?;
    let model = Backbone::<f32>::build(&cfg.backbone)?;
    let task = make_task(cfg.task.clone(), cfg.backbone.vocab, cfg.train.seed)?;
    let runs = exec.map(specs, |spec| -> larslab_core::Result<RunReport> {
        let mut set = AdapterSet::<f32>::new(spec.clone(), &cfg.backbone, cfg.train.seed)?;
        let opts = TrainOptions {
            exec: Exec::Sequential,
            timing: true,
            budget: None,
        };
        train(&model, &mut set, &task, &cfg.train, opts)
    });
    let mut reports = Vec::with_capacity(runs.len());
    for (spec, run) in specs.iter().zip(runs) {
        reports.push(run.with_context(|| format!("training {spec}"))?);
    }
    Ok(reports)
}

fn write_reports(path: &Path, reports: &[RunReport]) -> anyhow::Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, reports)?;
    writeln!(out)?;
    out.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn summary(r: &RunReport) -> String {
    let loss = r.final_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
    let tps = r.tokens_per_sec.map_or_else(|| "-".to_string(), |t| format!("{t:.0}"));
    format!(
        "{} ({}) steps={} final_loss={loss} final_acc={:.4} peak bytes: adapter={} base={} loss={} tokens/sec={tps}",
        r.adapter, r.pooling, r.steps, r.final_acc, r.peak_adapter_bytes, r.peak_base_bytes, r.peak_loss_bytes
    )
}

fn train_cmd(mut cfg: ExperimentConfig, args: TrainArgs, exec: Exec) -> anyhow::Result<ExitCode> {
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let specs = select_adapters(&cfg, args.adapter.as_deref())?;
    let mut reports = train_all(&cfg, &specs, exec)?;
    for r in &reports {
        println!("{}", summary(r));
    }
    if let Some(path) = &args.out {
        if !args.timing {
            reports.iter_mut().for_each(|r| r.tokens_per_sec = None);
        }
        write_reports(path, &reports)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn estimate(mut cfg: ExperimentConfig, args: EstimateArgs) -> anyhow::Result<ExitCode> {
    if args.flash {
        cfg.memory.flash = true;
    }
    if let Some(g) = args.gc_factor {
        cfg.memory.gc_factor = g;
    }
    let toggles = cfg.memory.toggles();
    toggles.validate()?;
    let batch = args.batch.unwrap_or(cfg.sweep.batch);
    let seq = args.seq.unwrap_or(cfg.task.seq_len());
    let model = args.verify.then(|| Backbone::<f32>::build(&cfg.backbone)).transpose()?;
    let mut mismatches = 0;
    for spec in select_adapters(&cfg, args.adapter.as_deref())? {
        let est = estimate_peak(&cfg.backbone, &spec, batch, seq, cfg.memory.optimizer, toggles, DType::F32)?;
        println!("{spec} pooling={} B={batch} S={seq}", spec.pooling());
        let Some(model) = &model else {
            println!("{est}");
            continue;
        };
        let set = AdapterSet::<f32>::new(spec.clone(), &cfg.backbone, cfg.train.seed)?;
        let mut task_spec = cfg.task.clone();
        task_spec.set_seq_len(seq);
        let task = make_task(task_spec, cfg.backbone.vocab, cfg.train.seed)?;
        let m = measure_step(model, &set, &task, batch, None)?;
        println!("{:<12} {:>14} {:>14}  flag", "part", "estimate", "ledger");
        for (name, bytes) in est.parts() {
            let measured = match name {
                "adapter_act" => Some(m.adapter_bytes),
                // the ledger records what was actually saved, without toggles
                "base_act" if !toggles.flash && toggles.gc_factor == 1.0 => Some(m.base_bytes),
                _ => None,
            };
            match measured {
                Some(v) => {
                    let flag = if v == bytes { "match" } else { "MISMATCH" };
                    mismatches += usize::from(v != bytes);
                    println!("{name:<12} {bytes:>14} {v:>14}  {flag}");
                }
                None => println!("{name:<12} {bytes:>14} {:>14}", "-"),
            }
        }
        println!("{:<12} {:>14}", "total", est.total_bytes);
    }
    if mismatches > 0 {
        eprintln!("{mismatches} estimate/ledger mismatches");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn niah(mut cfg: ExperimentConfig, args: NiahArgs, exec: Exec) -> anyhow::Result<ExitCode> {
    let mut task = match &cfg.task {
        TaskSpec::NiahToy(_) => cfg.task.clone(),
        TaskSpec::Seqclass(_) => TaskSpec::NiahToy(NiahConfig::default()),
    };
    task.set_seq_len(args.seq);
    cfg.task = task;
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    let mut reports = train_all(&cfg, &cfg.adapters, exec)?;
    let chance = 1.0 / make_task(cfg.task.clone(), cfg.backbone.vocab, 0)?.num_labels() as f64;
    for r in &reports {
        let held = r.heldout_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        println!(
            "{} ({}) S={} heldout_acc={held} train_acc={:.4} chance={chance:.4}",
            r.adapter, r.pooling, r.seq_len, r.final_acc
        );
    }
    let acc = |kind: &str| reports.iter().find(|r| r.adapter == kind).and_then(|r| r.heldout_acc);
    if let (Some(lars), Some(lora)) = (acc("lars"), acc("lora")) {
        println!("lars - lora = {:+.1} points", 100.0 * (lars - lora));
    }
    if let Some(path) = &args.out {
        reports.iter_mut().for_each(|r| r.tokens_per_sec = None);
        write_reports(path, &reports)?;
    }
    Ok(ExitCode::SUCCESS)
}
