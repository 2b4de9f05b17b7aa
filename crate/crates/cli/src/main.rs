use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mecdiff::{Error, Phase};
use mecdiff_cli::commands::write_metric_rows;
use mecdiff_cli::{
    cmd_couple, cmd_evaluate, cmd_pretrain, cmd_translate, exit_code, CoupleArgs, Direction, EvaluateArgs, Metric, PretrainArgs, RunConfig,
    TranslateArgs, EXIT_OK, EXIT_USAGE,
};

#[derive(Parser)]
#[command(name = "mecdiff", version, about = "Unpaired translation by minimum-entropy coupling of diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, repeatable (`--set rl.lr=1e-4`).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an unconditional model on one modality.
    #[command(after_help = RunConfig::keys_help())]
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Loss curve CSV (default: <out>.loss.csv).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a coupling from two pretrained anchors.
    #[command(after_help = RunConfig::keys_help())]
    Couple {
        #[arg(long)]
        x_data: PathBuf,
        #[arg(long)]
        y_data: PathBuf,
        #[arg(long)]
        x_anchor: PathBuf,
        #[arg(long)]
        y_anchor: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate one row per input row.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// x2y or y2x.
        #[arg(long)]
        direction: String,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        ddim_steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// Snap outputs to their nearest rows of this dataset.
        #[arg(long)]
        project: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute a metric; prints `metric,value,stderr,n`.
    #[command(after_help = EVALUATE_INPUTS)]
    Evaluate {
        /// foscttm, label_transfer, celltype, entropy or oracle_gap.
        #[arg(long)]
        metric: String,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        sublabels: bool,
        /// Directory written by `couple`.
        #[arg(long)]
        coupling: Option<PathBuf>,
        #[arg(long)]
        cond: Option<PathBuf>,
        /// theta or phi.
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        x_data: Option<PathBuf>,
        #[arg(long)]
        y_data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        k_mc: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

const EVALUATE_INPUTS: &str = "\
Required inputs per metric:
  foscttm         --source, --target (row i of each is a true pair)
  label_transfer  --source, --target (both with a label column); --k
  celltype        --generated, --reference (both labeled); --k, --sublabels
  entropy         --coupling (directory from `couple`), --cond; --phase, --k-mc
  oracle_gap      --source, --target (paired rows), --x-data, --y-data

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.";

fn overrides(set: &[String]) -> Result<Vec<(String, String)>, Error> {
    set.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { data, out, steps, loss_csv, common } => {
            let losses = cmd_pretrain(&PretrainArgs {
                data,
                out,
                steps,
                config: common.config,
                seed: common.seed,
                overrides: overrides(&common.set)?,
                loss_csv,
            })?;
            if let Some(l) = losses.last() {
                eprintln!("pretrained {} steps, final loss {l:.4}", losses.len());
            }
        }
        Command::Couple { x_data, y_data, x_anchor, y_anchor, out_dir, common } => {
            let log = cmd_couple(&CoupleArgs {
                x_data,
                y_data,
                x_anchor,
                y_anchor,
                out_dir: out_dir.clone(),
                config: common.config,
                seed: common.seed,
                overrides: overrides(&common.set)?,
            })?;
            eprintln!("{} coupling iterations written to {}", log.len() / 2, out_dir.display());
        }
        Command::Translate { ckpt, input, direction, guidance, ddim_steps, eta, project, out, common } => {
            let t = cmd_translate(&TranslateArgs {
                ckpt,
                input,
                direction: direction.parse::<Direction>()?,
                guidance,
                ddim_steps,
                eta,
                project,
                seed: common.seed,
                out: out.clone(),
                config: common.config,
                overrides: overrides(&common.set)?,
            })?;
            eprintln!("wrote {} rows to {}", t.rows(), out.display());
        }
        Command::Evaluate {
            metric,
            source,
            target,
            generated,
            reference,
            sublabels,
            coupling,
            cond,
            phase,
            x_data,
            y_data,
            k,
            k_mc,
            out,
            common,
        } => {
            let metric: Metric = metric.parse()?;
            let phase = phase.map(|p| p.parse::<Phase>()).transpose()?;
            let rows = cmd_evaluate(
                metric,
                &EvaluateArgs {
                    source,
                    target,
                    generated,
                    reference,
                    sublabels,
                    coupling,
                    cond,
                    phase,
                    x_data,
                    y_data,
                    k,
                    k_mc,
                    out,
                    seed: common.seed,
                    config: common.config,
                    overrides: overrides(&common.set)?,
                },
            )?;
            write_metric_rows(&mut csv::Writer::from_writer(std::io::stdout()), &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
