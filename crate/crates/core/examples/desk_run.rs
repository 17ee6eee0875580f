//! Runs one simulation on a generated corpus, printing per-round perplexity.
//!
//! ```text
//! cargo run --release --example desk_run -- strategy=fedatt rounds=10 master_seed=3
//! ```
//!
//! Every argument is a `key=value` pair in config-file syntax.

use fedsim_core::corpus::synthetic::{write_corpus, LanguageSpec};
use fedsim_core::{run_simulation, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("fedsim-desk-corpus");
    let files = write_corpus(&dir, LanguageSpec::default(), 7, (200_000, 15_000, 15_000))?;
    let mut cfg = SimConfig {
        k_clients: 10,
        fraction: 0.5,
        rounds: 25,
        train_path: files.train,
        valid_path: files.valid,
        test_path: files.test,
        ..SimConfig::default()
    };
    cfg.model.vocab_size = 5000;
    cfg.client.local_epochs = 1;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("arguments are key=value")?;
        cfg.set(k, v)?;
    }
    let start = std::time::Instant::now();
    let out = run_simulation(cfg)?;
    for r in &out.records {
        println!(
            "round {:>3} val {:>9.3} test {:>9.3} train_loss {:.4}",
            r.round,
            r.val_ppl.unwrap_or(f64::NAN),
            r.test_ppl.unwrap_or(f64::NAN),
            r.mean_train_loss.unwrap_or(f64::NAN)
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
