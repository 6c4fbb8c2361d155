use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use p2g_core::data::{export_sequence, generate_sequence};
use p2g_core::domain::load_centroids;
use p2g_core::encoder::{load_encoder, save_encoder, DualEncoder};
use p2g_core::harness::{
    ablation_csv, accuracy_csv, confusion_csv, evaluate_final, final_metrics, metrics_csv, pretrain_encoder,
    read_report, run_ablations, run_continual, write_json, write_jsonl, write_run, Progress, RunConfig,
    CENTROIDS_FILE, CONFIG_FILE, ENCODER_DIR, PROMPTS_FILE,
};
use p2g_core::prompt_bank::load_bank;
use p2g_core::{Error, Result};

#[derive(Parser)]
#[command(name = "p2g", version, about = "Continual deepfake detection with read-only prompts")]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-align a fresh dual encoder on caption pairs.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every domain in sequence and evaluate after each one.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `pretrain`.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a finished run on every test set.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Write per-image decision records to `<run>/scores.jsonl`.
        #[arg(long)]
        dump_scores: bool,
    },
    /// Conditioning on/off × mean/max/max-mean grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pre-aligned encoder; pre-aligns a new one when omitted.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Print the report of a run.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Write the domain sequence as PNG files plus a manifest.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn progress(quiet: bool) -> impl FnMut(Progress) {
    move |p| {
        if quiet {
            return;
        }
        match p {
            Progress::Pretrain { step, loss } if step % 50 == 0 => eprintln!("pretrain step {step}: loss {loss:.4}"),
            Progress::Pretrain { .. } => {}
            Progress::Epoch(e) => eprintln!("task {} epoch {}: loss {:.4} lr {:.5}", e.task_id, e.epoch, e.mean_loss, e.lr),
            Progress::Evaluated { after_task, row } => {
                let cells: Vec<String> = row.iter().map(|a| format!("{a:.2}")).collect();
                eprintln!("after task {after_task}: accuracy [{}]", cells.join(", "));
            }
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_checked_encoder(dir: &Path, config: &RunConfig) -> Result<DualEncoder> {
    let enc = load_encoder(dir)?;
    enc.verify()?;
    if enc.config() != &config.encoder {
        return Err(Error::Config(format!(
            "encoder in {} does not match the configured architecture",
            dir.display()
        )));
    }
    Ok(enc)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut log = progress(cli.quiet);
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let (enc, report) = pretrain_encoder(&cfg, &mut log)?;
            mkdir(&out)?;
            save_encoder(&enc, &out)?;
            write_json(&out.join("pretrain.json"), &report)?;
            println!("encoder checksum {:08x} written to {}", enc.checksum(), out.display());
        }
        Command::Train { config, encoder, out } => {
            let cfg = RunConfig::load(&config)?;
            let enc = load_checked_encoder(&encoder, &cfg)?;
            let output = run_continual(&cfg, &enc, &mut log)?;
            write_run(&out, &cfg, &enc, &output)?;
            print_json(&output.report)?;
        }
        Command::Eval { run, dump_scores } => {
            let cfg = RunConfig::load(&run.join(CONFIG_FILE))?;
            let enc = load_checked_encoder(&run.join(ENCODER_DIR), &cfg)?;
            let bank = load_bank(&run.join(PROMPTS_FILE))?;
            let centroids = load_centroids(&run.join(CENTROIDS_FILE))?;
            let records = evaluate_final(&cfg, &enc, &bank, &centroids)?;
            let metrics = final_metrics(&records, bank.len())?;
            write_json(&run.join("eval.json"), &metrics)?;
            if dump_scores {
                write_jsonl(&run.join("scores.jsonl"), &records)?;
            }
            print_json(&metrics)?;
        }
        Command::Ablate { config, out, encoder } => {
            let cfg = RunConfig::load(&config)?;
            let enc = match encoder {
                Some(dir) => load_checked_encoder(&dir, &cfg)?,
                None => pretrain_encoder(&cfg, &mut log)?.0,
            };
            let (report, with, without) = run_ablations(&cfg, &enc, &mut log)?;
            write_run(&out.join("conditioned"), &cfg, &enc, &with)?;
            let mut off = cfg.clone();
            off.train.conditioning = false;
            write_run(&out.join("unconditioned"), &off, &enc, &without)?;
            write_json(&out.join("ablation.json"), &report)?;
            let table = ablation_csv(&report)?;
            std::fs::write(out.join("ablation.csv"), &table).map_err(|e| Error::Io {
                path: out.join("ablation.csv"),
                source: e,
            })?;
            print!("{table}");
        }
        Command::Report { run, format } => {
            let report = read_report(&run)?;
            match format {
                Format::Json => print_json(&report)?,
                Format::Csv => {
                    print!("{}", metrics_csv(&report)?);
                    println!();
                    print!("{}", accuracy_csv(&report)?);
                    println!();
                    print!("{}", confusion_csv(&report)?);
                }
            }
        }
        Command::ExportData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let data = generate_sequence(&cfg.domains, cfg.encoder.image_size)?;
            mkdir(&out)?;
            export_sequence(&data, &out)?;
            println!("{} domains written to {}", data.len(), out.display());
        }
        Command::PrintConfig => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
