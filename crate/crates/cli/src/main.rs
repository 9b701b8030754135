//! Command-line surface for the continual Gaussian splatting engine.

use chronosplat_core::commands;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "chronosplat", version, about = "Continual 3D Gaussian splatting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh field at step 0 from a dataset directory.
    Init {
        /// Dataset directory (images/, poses.json, meta.json, seed points).
        #[arg(long)]
        dataset: PathBuf,
        /// Key-value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Update a checkpoint with the next step's captures.
    Update {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Config override; the checkpoint's embedded config applies when
        /// omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the JSON update report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a recalled step at given poses into PNG files.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// poses.json file or a dataset directory.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        step: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM tables plus the forgetting matrix over checkpoints.
    Eval {
        /// One checkpoint per recorded step, any order.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// One test dataset directory per step.
        #[arg(long = "test-set", required = true)]
        test_set: Vec<PathBuf>,
        /// Write the forgetting matrix as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export geometric changes between two steps as an ASCII PLY cloud
    /// (added primitives green, removed red).
    Changes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "from")]
        step_a: u32,
        #[arg(long = "to")]
        step_b: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Write the machine-readable JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), commands::CommandError> {
    match cli.command {
        Command::Init { dataset, config, out } => {
            let summary = commands::cmd_init(&dataset, config.as_deref(), &out)?;
            println!(
                "initialized {} primitives ({} active), final loss {:.6}",
                summary.primitives, summary.active, summary.final_loss
            );
            println!("checkpoint written to {}", out.display());
        }
        Command::Update { checkpoint, dataset, config, out, report } => {
            let r = commands::cmd_update(
                &checkpoint,
                &dataset,
                config.as_deref(),
                &out,
                report.as_deref(),
            )?;
            println!(
                "step {}: {} -> {} active ({} added, {} removed)",
                r.step, r.active_before, r.active_after, r.added, r.removed
            );
            for sl in &r.stage_losses {
                println!("  stage {}: final loss {:.6}", sl.stage, sl.final_loss);
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Render { checkpoint, poses, step, out } => {
            let files = commands::cmd_render(&checkpoint, &poses, step, &out)?;
            println!("wrote {} images to {}", files.len(), out.display());
        }
        Command::Eval { checkpoint, test_set, csv } => {
            let summary = commands::cmd_eval(&checkpoint, &test_set, csv.as_deref())?;
            println!("step  psnr_db  ssim");
            for row in &summary.rows {
                println!("{:>4}  {:>7.2}  {:.4}", row.checkpoint_step, row.psnr, row.ssim);
            }
            println!("forgetting matrix (mean PSNR, train step x test step):");
            print!("{}", summary.forgetting_csv);
        }
        Command::Changes { checkpoint, step_a, step_b, out } => {
            commands::cmd_changes(&checkpoint, step_a, step_b, &out)?;
            println!("change cloud written to {}", out.display());
        }
        Command::Gradcheck { seed, scenes, out } => {
            let summary = commands::cmd_gradcheck(seed, scenes, out.as_deref())?;
            for r in &summary.scenes {
                println!(
                    "seed {:>3}: max rel err {:.3e} [{}]",
                    r.seed,
                    r.max_rel_err,
                    if r.pass { "pass" } else { "FAIL" }
                );
            }
            println!(
                "overall max rel err {:.3e}: {}",
                summary.max_rel_err,
                if summary.pass { "pass" } else { "FAIL" }
            );
            if !summary.pass {
                return Err(commands::CommandError::Invalid(
                    "gradient audit failed".into(),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
