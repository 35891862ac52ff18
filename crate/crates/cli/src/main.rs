use clap::{Parser, Subcommand};
use lrd_cli::commands;
use lrd_cli::config::ExperimentConfig;
use lrd_core::error::Error;
use lrd_core::targets::LeadLabel;
use std::path::PathBuf;
use std::process::ExitCode;

/// Desk-scale long-range distillation laboratory: a chaotic teacher, a
/// single-timestep diffusion student, and the experiments that compare
/// them against climatology.
#[derive(Parser)]
#[command(name = "lrd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the teacher corpus, reference member and climatologies.
    Generate,
    /// Train the distilled student for one lead.
    Train {
        #[arg(long, default_value = "s2s")]
        lead: String,
    },
    /// Sweep classifier-free guidance on the medium-range student.
    Calibrate,
    /// Run the perfect-model evaluation protocol for one lead.
    PerfectModel {
        #[arg(long, default_value = "s2s")]
        lead: String,
    },
    /// Dataset-size scaling study at the S2S lead.
    Scaling,
    /// Domain-shift fine-tuning experiment with bias-corrected scoring.
    FinetuneEval,
    /// Quintile-classification baseline.
    QrBaseline,
    /// Consolidate artifacts in the output directory.
    Report,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Format { .. } | Error::Json(_) => 2,
        Error::MissingInput(_) | Error::Io(_) | Error::InsufficientData { .. } => 3,
        Error::Numeric(_)
        | Error::NonFinite { .. }
        | Error::Instability { .. }
        | Error::ShapeMismatch { .. } => 4,
    }
}

fn load_config(cli: &Cli) -> lrd_core::error::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.experiment.seed = seed;
        config.generation.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.experiment.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn parse_lead(s: &str) -> lrd_core::error::Result<LeadLabel> {
    s.parse()
}

fn run(cli: &Cli) -> lrd_core::error::Result<()> {
    if cli.workers > 0 {
        // Ignore failure if a pool already exists (tests, reentry).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global();
    }
    match &cli.command {
        Command::Generate => {
            let config = load_config(cli)?;
            let summary = commands::cmd_generate(&config)?;
            println!(
                "generated {} members ({} stable) in {}",
                summary.members,
                summary.stable_members,
                config.corpus_dir().display()
            );
        }
        Command::Train { lead } => {
            let config = load_config(cli)?;
            let summary = commands::cmd_train(&config, parse_lead(lead)?)?;
            println!(
                "trained {} model: best val loss {:.6} at step {}",
                summary.lead, summary.best_val_loss, summary.best_step
            );
        }
        Command::Calibrate => {
            let config = load_config(cli)?;
            let report = commands::cmd_calibrate(&config)?;
            for p in &report.sweep {
                println!(
                    "w={:>5.2}  spread={:.4}  rmse={:.4}  crps={:.4}  spread/skill={:.3}",
                    p.weight, p.spread, p.rmse, p.crps, p.spread_skill
                );
            }
        }
        Command::PerfectModel { lead } => {
            let config = load_config(cli)?;
            let report = commands::cmd_perfect_model(&config, parse_lead(lead)?)?;
            println!(
                "student CRPS {:.4} | teacher {:.4} | det clim {:.4} | prob clim {:.4} | perfect-IC teacher RMSE {:.3e}",
                report.student.global_mean,
                report.teacher_ensemble.global_mean,
                report.det_climatology.global_mean,
                report.prob_climatology.global_mean,
                report.teacher_perfect_rmse
            );
        }
        Command::Scaling => {
            let config = load_config(cli)?;
            let report = commands::cmd_scaling(&config)?;
            for row in &report.rows {
                println!(
                    "{:>8} years: min val loss {:.5}, s2s crps {:.4} [{:.4}, {:.4}]",
                    row.years, row.min_val_loss, row.s2s_crps, row.ci_lo, row.ci_hi
                );
            }
        }
        Command::FinetuneEval => {
            let config = load_config(cli)?;
            let report = commands::cmd_finetune_eval(&config)?;
            for row in &report.rows {
                println!(
                    "{:<10} corrected={}  crps={:.4}  vs prob clim {:+.2}% [{:+.2}, {:+.2}]",
                    row.system,
                    row.bias_corrected,
                    row.crps,
                    row.pct_vs_prob_clim,
                    row.ci_lo,
                    row.ci_hi
                );
            }
        }
        Command::QrBaseline => {
            let config = load_config(cli)?;
            let report = commands::cmd_qr_baseline(&config)?;
            println!(
                "qr baseline ({}): rps {:.4} vs uniform {:.4} over {} cases",
                report.lead, report.model_rps, report.uniform_rps, report.eval_cases
            );
        }
        Command::Report => {
            let config = load_config(cli)?;
            commands::cmd_report(&config.experiment.out_dir)?;
            println!("report written to {}", config.experiment.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
