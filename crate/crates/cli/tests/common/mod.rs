#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsim_core::corpus::synthetic::{write_corpus, LanguageSpec};

pub const TINY_CONFIG: &str = "\
train_path = data/train.txt
valid_path = data/valid.txt
test_path = data/test.txt
k_clients = 4
fraction = 0.5
rounds = 3
vocab_size = 120
embed_dim = 8
hidden_dim = 8
bptt_len = 6
batch_size = 4
local_epochs = 1
block_len = 32
eval_batch_size = 4
";

/// Writes a small synthetic corpus under `dir/data` and a config pointing
/// at it; returns the config path.
pub fn tiny_setup(dir: &Path, extra: &str) -> PathBuf {
    let spec = LanguageSpec { word_types: 150, classes: 8, ..LanguageSpec::default() };
    write_corpus(&dir.join("data"), spec, 5, (8_000, 1_000, 1_000)).unwrap();
    let cfg = dir.join("config.txt");
    std::fs::write(&cfg, format!("{TINY_CONFIG}{extra}")).unwrap();
    cfg
}

pub fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}
