//! Workbench binary for the n-stream residual experiments.
//!
//! Exit codes: 0 success, 1 validation error, 2 training divergence,
//! 3 invariant violation.

use clap::{Args, Parser, Subcommand};
use mhc_cli::analyze::{analyze_stack, demo_reports, resolve_stack};
use mhc_cli::checks::{grad_check, sinkhorn_check};
use mhc_cli::config::{ExperimentConfig, Task};
use mhc_cli::harness::{train, Checkpoint, TrainOutcome};
use mhc_core::{io_cost, plan_recompute, plan_recompute_staged, CostVariant, InitPolicy,
    LayerFnKind, MhcError, Variant};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "mhc",
    about = "n-stream residual propagation workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, config, and a checkpoint.
    Train(TrainArgs),
    /// Profile mapping gains and export heatmaps for a model.
    Analyze(AnalyzeArgs),
    /// Sweep the projection and report stochasticity diagnostics.
    SinkhornCheck(SinkhornCheckArgs),
    /// Emit the per-token memory access breakdown.
    CostModel(CostModelArgs),
    /// Choose the recompute block size minimizing resident memory.
    PlanRecompute(PlanRecomputeArgs),
    /// Compare taped gradients against finite differences.
    GradCheck(GradCheckArgs),
}

/// Fields shared by commands that accept config overrides.
#[derive(Args, Clone)]
struct ConfigOverrides {
    /// JSON config file; omitted fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    c: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    layer_fn: Option<LayerFnKind>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    init: Option<InitPolicy>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Disable the input-reading mapping (ablation).
    #[arg(long)]
    no_pre: bool,
    /// Disable the output-writing mapping (ablation).
    #[arg(long)]
    no_post: bool,
    /// Disable the stream-mixing mapping (ablation).
    #[arg(long)]
    no_res: bool,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<ExperimentConfig, MhcError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        apply!(
            variant, n, c, l, layer_fn, t_max, init, step_size, steps, batch_size, momentum,
            task, seed, log_every
        );
        if self.no_pre {
            cfg.use_pre = false;
        }
        if self.no_post {
            cfg.use_post = false;
        }
        if self.no_res {
            cfg.use_res = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Directory that receives the per-run output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// metrics.csv of a finished run; writes loss_gap.csv against it.
    #[arg(long)]
    baseline_metrics: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint written by train; omit to analyze a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Held-out tokens to average over.
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    /// Also emit scripted noisy-trace demonstration gain profiles.
    #[arg(long)]
    demo: bool,
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
}

#[derive(Args)]
struct SinkhornCheckArgs {
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    t_max: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the summary JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostModelArgs {
    #[arg(long)]
    variant: CostVariant,
    /// Stream count; the plain residual table requires 1.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    c: u64,
    /// Emit JSON instead of CSV.
    #[arg(long)]
    json: bool,
    /// Report bytes instead of elements, at this element width.
    #[arg(long)]
    bytes_per_element: Option<u64>,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanRecomputeArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    l: u64,
    #[arg(long)]
    c: u64,
    /// Restrict block sizes to divisors of this per-stage layer count.
    #[arg(long)]
    stage_layers: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[arg(long, default_value_t = 1e-5)]
    rtol: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is a validation
            // failure per the exit-code contract.
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), MhcError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| MhcError::invalid(format!("cannot write {}: {e}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), MhcError> {
    std::fs::write(path, text)
        .map_err(|e| MhcError::invalid(format!("cannot write {}: {e}", path.display())))
}

fn run(cmd: Cmd) -> Result<ExitCode, MhcError> {
    match cmd {
        Cmd::Train(args) => run_train(args),
        Cmd::Analyze(args) => run_analyze(args),
        Cmd::SinkhornCheck(args) => {
            let summary = sinkhorn_check(args.n, args.t_max, args.trials, args.seed)?;
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            write_or_print(args.out.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::CostModel(args) => {
            let breakdown = io_cost(args.variant, args.n as u64, args.c)?;
            let text = if args.json {
                serde_json::to_string_pretty(&breakdown).expect("breakdown serializes")
            } else {
                breakdown.to_csv(args.bytes_per_element)
            };
            write_or_print(args.out.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::PlanRecompute(args) => {
            let plan = match args.stage_layers {
                Some(stage) => plan_recompute_staged(args.n, args.c, args.l, stage)?,
                None => plan_recompute(args.n, args.c, args.l)?,
            };
            let text = serde_json::to_string_pretty(&plan).expect("plan serializes");
            write_or_print(args.out.as_deref(), &text)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GradCheck(args) => {
            let cfg = args.overrides.resolve()?;
            let summary = grad_check(&cfg, args.rtol)?;
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            println!("{text}");
            if summary.pass {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(EXIT_INVARIANT))
            }
        }
    }
}

fn run_train(args: TrainArgs) -> Result<ExitCode, MhcError> {
    let cfg = args.overrides.resolve()?;
    let run_dir = args.out.join(cfg.run_name());
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| MhcError::invalid(format!("cannot create {}: {e}", run_dir.display())))?;
    write_file(&run_dir.join("config.json"), &cfg.canonical_json())?;

    let result = train(&cfg)?;
    let csv = result.trace.to_csv(cfg.l);
    write_file(&run_dir.join("metrics.csv"), &csv)?;

    if let Some(base) = &args.baseline_metrics {
        let gap = loss_gap_csv(&csv, base)?;
        write_file(&run_dir.join("loss_gap.csv"), &gap)?;
    }

    match result.outcome {
        TrainOutcome::Completed => {
            let ckpt = Checkpoint {
                config: cfg,
                stack: result.stack,
            };
            let text = serde_json::to_string_pretty(&ckpt).expect("checkpoint serializes");
            write_file(&run_dir.join("checkpoint.json"), &text)?;
            println!("{}", run_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        TrainOutcome::Diverged => {
            eprintln!("training diverged; trace written to {}", run_dir.display());
            Ok(ExitCode::from(EXIT_DIVERGENCE))
        }
        TrainOutcome::InvariantViolation => {
            eprintln!(
                "invariant violation: {}",
                result.violation.as_deref().unwrap_or("unknown")
            );
            Ok(ExitCode::from(EXIT_INVARIANT))
        }
    }
}

/// Joins two metrics CSVs on the step column: `step,loss_gap` rows.
fn loss_gap_csv(own_csv: &str, baseline_path: &Path) -> Result<String, MhcError> {
    let baseline = std::fs::read_to_string(baseline_path).map_err(|e| {
        MhcError::invalid(format!("cannot read {}: {e}", baseline_path.display()))
    })?;
    let parse = |csv: &str| -> Vec<(usize, f64)> {
        csv.lines()
            .skip(1)
            .filter_map(|line| {
                let mut cells = line.split(',');
                let step = cells.next()?.parse().ok()?;
                let loss = cells.next()?.parse().ok()?;
                Some((step, loss))
            })
            .collect()
    };
    let own = parse(own_csv);
    let base: std::collections::BTreeMap<usize, f64> = parse(&baseline).into_iter().collect();
    let mut out = String::from("step,loss_gap\n");
    let mut matched = 0;
    for (step, loss) in own {
        if let Some(b) = base.get(&step) {
            out.push_str(&format!("{step},{}\n", loss - b));
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(MhcError::invalid(
            "baseline metrics share no logged steps with this run",
        ));
    }
    Ok(out)
}

fn run_analyze(args: AnalyzeArgs) -> Result<ExitCode, MhcError> {
    let cfg = args.overrides.resolve()?;
    let (stack, resolved) = resolve_stack(args.checkpoint.as_deref(), &cfg)?;
    let analysis = analyze_stack(&stack, args.tokens, resolved.seed)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| MhcError::invalid(format!("cannot create {}: {e}", args.out.display())))?;
    write_file(&args.out.join("gains.csv"), &analysis.report.per_layer_csv())?;
    write_file(
        &args.out.join("composite_gains.csv"),
        &analysis.report.composite_csv(),
    )?;
    let final_heatmap =
        serde_json::to_string_pretty(&analysis.final_layer_heatmap).expect("heatmap serializes");
    write_file(&args.out.join("heatmap_final_layer.json"), &final_heatmap)?;
    let composite_heatmap =
        serde_json::to_string_pretty(&analysis.composite_heatmap).expect("heatmap serializes");
    write_file(&args.out.join("heatmap_composite.json"), &composite_heatmap)?;

    if args.demo {
        let (unconstrained, contained) = demo_reports(60, resolved.n.max(2), 0.2, resolved.seed)?;
        write_file(
            &args.out.join("demo_unconstrained_gains.csv"),
            &unconstrained.composite_csv(),
        )?;
        write_file(
            &args.out.join("demo_projected_gains.csv"),
            &contained.composite_csv(),
        )?;
    }
    println!("{}", args.out.display());
    Ok(ExitCode::SUCCESS)
}
