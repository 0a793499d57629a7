// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nkb_cli::commands::{Lab, INJECT_CKPT, PRETRAIN_CKPT};
use nkb_cli::config::LabConfig;
use nkb_core::config::Settings;
use nkb_core::{Error, Result};

#[derive(Parser)]
#[command(name = "nkb", version, about = "Neural Knowledge Bank laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for evaluation, probing and sweeps.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print every n-th training metric to stderr.
    #[arg(long, global = true, default_value_t = 0)]
    echo_every: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the fact world, corpora and QA files.
    GenData,
    /// Pretrain on the base corpus; `--checkpoint` resumes.
    Pretrain,
    /// Mount a knowledge bank and train only the bank (default base: pretrain.ckpt).
    Inject,
    /// QA fine-tuning of `--checkpoint`.
    Finetune,
    /// Copy-task fine-tuning of `--checkpoint`.
    ProxyFinetune,
    /// Exact match per split and copy-task accuracy.
    Eval,
    /// Vocabulary projection of the top bank values.
    ProbeValues,
    /// Top-triggering questions per bank key and key cohesion.
    ProbeKeys,
    /// Apply the configured λ to every edit and save the edited model.
    Edit,
    /// Success and destruction rates over the λ grid (default: finetune-inject.ckpt).
    Sweep,
    /// Every stage in order on one run directory.
    RunAll,
}

fn required(ckpt: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    ckpt.ok_or_else(|| Error::config(format!("{what} needs --checkpoint")))
}

fn run(cli: Cli) -> Result<()> {
    let settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::new(),
    };
    let mut cfg = LabConfig::from_settings(settings, cli.seed)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        cfg.threads = t;
    }
    let mut lab = Lab::new(cfg, &cli.out_dir)?;
    lab.echo_every = cli.echo_every;
    let ckpt = cli.checkpoint;
    match cli.command {
        Command::GenData => {
            lab.gen_data()?;
        }
        Command::Pretrain => {
            let (_, r) = lab.pretrain(ckpt.as_deref())?;
            println!("{r}");
        }
        Command::Inject => {
            let base = ckpt.unwrap_or_else(|| lab.path(PRETRAIN_CKPT));
            let (_, r) = lab.inject(&base)?;
            println!("{r}");
        }
        Command::Finetune => {
            let (_, r) = lab.finetune(&required(ckpt, "finetune")?)?;
            println!("{r}");
        }
        Command::ProxyFinetune => {
            let (_, r) = lab.proxy_finetune(&required(ckpt, "proxy-finetune")?)?;
            println!("{r}");
        }
        Command::Eval => print!("{}", lab.eval(&required(ckpt, "eval")?)?),
        Command::ProbeValues => print!("{}", lab.probe_values(&required(ckpt, "probe-values")?)?),
        Command::ProbeKeys => print!("{}", lab.probe_keys(&required(ckpt, "probe-keys")?)?),
        Command::Edit => {
            let out = lab.edit(&required(ckpt, "edit")?)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep => {
            let c = ckpt.unwrap_or_else(|| lab.path(&format!("finetune-{}", INJECT_CKPT)));
            print!("{}", lab.sweep(&c)?);
        }
        Command::RunAll => {
            lab.run_all()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
