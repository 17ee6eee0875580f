use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim_core::corpus::synthetic::{write_corpus, LanguageSpec};
use fedsim_core::sim::CONFIG_FILE;
use fedsim_core::{evaluate, run_simulation, Corpus, Error, GruLmConfig, ParamSet, Result, SimConfig, Split};
use log::info;

mod sweep;

use sweep::{sweep_row, Vary, SWEEP_HEADER};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated GRU language-model simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Override a config key, e.g. `--set master_seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for records, summary, and checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split watched by `ppl_threshold` (valid or test).
    #[arg(long)]
    threshold_split: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one simulation per value of a config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=lo..hi[:step]` or `key=v1,v2,...`.
        #[arg(long)]
        vary: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Perplexity of a saved checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Run config; defaults to the config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic train/valid/test corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200_000)]
        train_tokens: usize,
        #[arg(long, default_value_t = 15_000)]
        valid_tokens: usize,
        #[arg(long, default_value_t = 15_000)]
        test_tokens: usize,
        #[arg(long, default_value_t = LanguageSpec::default().word_types)]
        word_types: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let out = run_simulation(cfg)?;
            for r in &out.records {
                println!("round {:>3}  val {}  test {}", r.round, show(r.val_ppl), show(r.test_ppl));
            }
            if let Some((round, val, test)) = out.best {
                println!("best validation at round {round}: val {val:.3} test {test:.3}");
            }
            Ok(())
        }
        Command::Sweep { config, vary, overrides } => {
            let base = load_config(&config, &overrides)?;
            let vary = Vary::parse(&vary)?;
            let runs = vary.configs(&base)?;
            let mut table = vec![format!("{},{}", vary.key, &SWEEP_HEADER["value,".len()..])];
            for (value, cfg) in runs {
                info!("sweep {}={value}", vary.key);
                let out = run_simulation(cfg)?;
                let row = sweep_row(&value, base.ppl_threshold, &out);
                println!("{row}");
                table.push(row);
            }
            if let Some(dir) = &base.out_dir {
                let path = dir.join("sweep.csv");
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                fs::write(&path, table.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
        Command::Eval { checkpoint, split, config } => {
            let split: Split = split.parse()?;
            let config = config.unwrap_or_else(|| checkpoint.with_file_name(CONFIG_FILE));
            let cfg = SimConfig::from_file(&config)?;
            let params = ParamSet::<f64>::load(&checkpoint)?;
            let corpus = Corpus::load(&cfg.train_path, &cfg.valid_path, &cfg.test_path, cfg.model.vocab_size)?;
            // Runs size the model to the vocabulary actually built.
            let model = GruLmConfig { vocab_size: corpus.vocab.len(), ..cfg.model };
            let ppl = evaluate(&params, corpus.stream(split), &model, cfg.eval_batch_size)?;
            println!("{split} perplexity {ppl:.6}");
            Ok(())
        }
        Command::GenCorpus { out, seed, train_tokens, valid_tokens, test_tokens, word_types } => {
            let spec = LanguageSpec { word_types, ..LanguageSpec::default() };
            let files = write_corpus(&out, spec, seed, (train_tokens, valid_tokens, test_tokens))?;
            println!("train_path = {}", files.train.display());
            println!("valid_path = {}", files.valid.display());
            println!("test_path = {}", files.test.display());
            Ok(())
        }
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<SimConfig> {
    let mut cfg = SimConfig::from_file(path)?;
    for kv in &overrides.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(dir) = &overrides.out {
        cfg.out_dir = Some(dir.clone());
    }
    if let Some(split) = &overrides.threshold_split {
        cfg.set("threshold_split", split)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn show(p: Option<f64>) -> String {
    p.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}
