use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dgd_core::harness::pipeline::{run_pipeline, Run, RunOptions, Stage};
use dgd_core::harness::{attack_all_classes, emit_report, RunConfig};
use dgd_core::{DgdError, Result};

/// Discriminative-generative distillation laboratory.
#[derive(Parser)]
#[command(name = "dgd", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (for `report`, a directory of runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Skip stages whose outputs already exist.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Victim {
    Baseline,
    Student,
}

#[derive(Subcommand)]
enum Command {
    GenData,
    TrainBaseline,
    TrainTeachers,
    TrainGenerator,
    Synthesize,
    TrainVae,
    Query,
    BuildTriples,
    TrainStudent,
    /// Inversion attack on every class of a trained model.
    Attack {
        #[arg(long, value_enum, default_value = "student")]
        victim: Victim,
    },
    /// Writes and prints the privacy budget of the configured run.
    Budget,
    /// Summarizes one run or a directory of runs.
    Report,
    /// Every stage in order.
    RunAll,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn single_stage(cfg: RunConfig, dir: &Path, stage: Stage) -> Result<()> {
    let run = Run::new(cfg, dir)?;
    std::fs::create_dir_all(dir).map_err(|e| DgdError::io(dir, e))?;
    run.write_config()?;
    run.run_stage(stage)
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| DgdError::Config(format!("--jobs: {e}")))?;
    }
    let cfg = load_config(&cli.common)?;
    let dir = cfg.resolve_output(cli.common.out.as_deref());
    let stage = match cli.command {
        Command::GenData => Stage::GenData,
        Command::TrainBaseline => Stage::TrainBaseline,
        Command::TrainTeachers => Stage::TrainTeachers,
        Command::TrainGenerator => Stage::TrainGenerator,
        Command::Synthesize => Stage::Synthesize,
        Command::TrainVae => Stage::TrainVae,
        Command::Query => Stage::Query,
        Command::BuildTriples => Stage::BuildTriples,
        Command::TrainStudent => Stage::TrainStudent,
        Command::Budget => {
            std::fs::create_dir_all(&dir).map_err(|e| DgdError::io(&dir, e))?;
            let file = Run::new(cfg, &dir)?.budget()?;
            println!("{}", serde_json::to_string_pretty(&file).map_err(|e| DgdError::Data(e.to_string()))?);
            return Ok(());
        }
        Command::Report => {
            let report = emit_report(&dir)?;
            for r in &report.rows {
                println!(
                    "{}\tq={}\tstudent_acc={:.4}\teps={}",
                    r.run,
                    r.query_count,
                    r.student_acc,
                    r.eps_total.map_or("n/a".into(), |e| format!("{e:.3}"))
                );
            }
            println!("tables written to {}", report.dir.display());
            return Ok(());
        }
        Command::Attack { victim } => {
            let run = Run::new(cfg, &dir)?;
            let net = match victim {
                Victim::Baseline => run.baseline()?,
                Victim::Student => run.student()?,
            };
            let a = &run.cfg.attack;
            let templates = run.cfg.dataset.templates(run.cfg.stage_seed("dataset"))?;
            let summary = attack_all_classes(&net, &templates, a.steps, a.lr, a.l2_weight, a.bounds, run.cfg.stage_seed("attack"))?;
            let name = match victim {
                Victim::Baseline => "attack_baseline.json",
                Victim::Student => "attack_student.json",
            };
            let text = serde_json::to_string_pretty(&summary).map_err(|e| DgdError::Data(e.to_string()))?;
            let path = run.paths.file(name);
            std::fs::write(&path, text + "\n").map_err(|e| DgdError::io(&path, e))?;
            println!(
                "agreement_rate={:.3} mean_margin={:.4} -> {}",
                summary.agreement_rate,
                summary.mean_margin,
                path.display()
            );
            return Ok(());
        }
        Command::RunAll => {
            let outcome = run_pipeline(&cfg, &dir, RunOptions { resume: cli.common.resume })?;
            let s = &outcome.summary;
            println!(
                "run {}: stages run {}; student_acc={:.4} baseline_acc={:.4} eps_total={}",
                outcome.run_dir.display(),
                outcome.stages_run.len(),
                s.student_acc,
                s.baseline_acc,
                s.eps_total.map_or("n/a".into(), |e| format!("{e:.3}"))
            );
            return Ok(());
        }
    };
    single_stage(cfg, &dir, stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
