//! The server loop: client sampling, local training, aggregation,
//! evaluation and result files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate, fedsgd_round_config, AggregatorConfig, AttentionRecord, Strategy};
use crate::client::{add_dp_noise, client_update, ClientConfig, ClientUpdate, DpConfig};
use crate::corpus::{batchify, partition_iid, Corpus, Partition, Split, TokenStream};
use crate::error::{Error, Result};
use crate::gru::{perplexity, GruLm, GruLmConfig};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Floating-point type the simulation trains in. Result files are the
/// same either way; checkpoints always store `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" | "single" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub k_clients: usize,
    pub fraction: f64,
    pub rounds: usize,
    pub aggregator: AggregatorConfig,
    pub client: ClientConfig,
    pub dp: DpConfig,
    /// `vocab_size` caps the vocabulary; the model uses the built size.
    pub model: GruLmConfig,
    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    pub test_path: PathBuf,
    pub block_len: usize,
    pub master_seed: u64,
    pub ppl_threshold: Option<f64>,
    pub threshold_split: Split,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    pub out_dir: Option<PathBuf>,
    pub export_attention: bool,
    pub precision: Precision,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            k_clients: 100,
            fraction: 0.1,
            rounds: 50,
            aggregator: AggregatorConfig::default(),
            client: ClientConfig::default(),
            dp: DpConfig { enabled: false, beta_mag: 0.0, sigma: 1.0 },
            model: GruLmConfig::default(),
            train_path: PathBuf::from("data/train.txt"),
            valid_path: PathBuf::from("data/valid.txt"),
            test_path: PathBuf::from("data/test.txt"),
            block_len: 64,
            master_seed: 1,
            ppl_threshold: None,
            threshold_split: Split::Valid,
            eval_every: 1,
            eval_batch_size: 10,
            out_dir: None,
            export_attention: false,
            precision: Precision::F64,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_clients == 0 {
            return Err(Error::Config("k_clients must be >= 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        if self.rounds == 0 || self.eval_every == 0 || self.eval_batch_size == 0 || self.block_len == 0 {
            return Err(Error::Config("rounds, eval_every, eval_batch_size and block_len must be >= 1".into()));
        }
        if let Some(t) = self.ppl_threshold {
            if t.is_nan() || t <= 0.0 {
                return Err(Error::Config(format!("ppl_threshold must be positive, got {t}")));
            }
        }
        if self.threshold_split == Split::Train {
            return Err(Error::Config("threshold_split must be valid or test".into()));
        }
        self.aggregator.validate()?;
        self.client.validate()?;
        self.dp.validate()?;
        self.model.validate()
    }

    /// Clients per round.
    pub fn clients_per_round(&self) -> usize {
        participants(self.k_clients, self.fraction)
    }

    /// Fraction and local epochs actually used, after the FedSGD override.
    fn effective(&self) -> (f64, ClientConfig) {
        let mut client = self.client.clone();
        if self.aggregator.strategy == Strategy::FedSgd {
            let sgd = fedsgd_round_config();
            client.local_epochs = sgd.local_epochs;
            (sgd.fraction, client)
        } else {
            (self.fraction, client)
        }
    }
}

/// `max(floor(C * K), 1)`.
pub fn participants(k_total: usize, fraction: f64) -> usize {
    // The small slack keeps products like 0.29 * 100 = 28.999... at 29.
    (((fraction * k_total as f64) + 1e-9).floor() as usize).clamp(1, k_total.max(1))
}

/// Distinct client ids for round `round`, sorted ascending. Depends only on
/// the master stream's seed and the round index.
pub fn select_clients(k_total: usize, fraction: f64, round: usize, master: &SeededRng) -> Vec<usize> {
    let m = participants(k_total, fraction);
    let mut ids = master.derive(&format!("select/{round}")).sample_distinct(k_total, m);
    ids.sort_unstable();
    ids
}

/// Perplexity over a full pass of `stream`, hidden state reset per batch.
pub fn evaluate<T: Scalar>(params: &ParamSet<T>, stream: &TokenStream, model: &GruLmConfig, batch_size: usize) -> Result<f64> {
    let lm = GruLm::from_params(model.clone(), params.clone())?;
    let batches = batchify(&stream.ids, batch_size, model.bptt_len)?;
    let losses = batches.par_iter().map(|b| lm.batch_loss(b).map(T::to_f64_lossless)).collect::<Result<Vec<f64>>>()?;
    // Equal-sized batches: the mean of batch means is the token mean.
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let ppl = perplexity(mean);
    if !ppl.is_finite() {
        return Err(Error::NonFinite(format!("{} perplexity (mean loss {mean})", stream.split)));
    }
    Ok(ppl)
}

/// 1-based position of the first record whose validation perplexity is
/// below `threshold`.
pub fn rounds_to_threshold(records: &[RoundRecord], threshold: f64) -> Option<usize> {
    records.iter().position(|r| r.val_ppl.is_some_and(|p| p < threshold)).map(|i| i + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    pub val_ppl: Option<f64>,
    pub test_ppl: Option<f64>,
    pub mean_train_loss: Option<f64>,
    /// Kept out of the records file so reruns are byte-identical; written
    /// to `timing.csv` instead.
    #[serde(skip)]
    pub wall_seconds: f64,
    /// Per layer: min/max distance score and min/max weight (FedAtt only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attention: Option<BTreeMap<String, [f64; 4]>>,
}

#[derive(Clone, Debug)]
pub struct RoundOutput<T = f64> {
    pub params: ParamSet<T>,
    pub record: RoundRecord,
    pub updates: Vec<ClientUpdate<T>>,
    pub attention: Option<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct SimOutcome<T = f64> {
    pub records: Vec<RoundRecord>,
    pub final_params: ParamSet<T>,
    /// Round with the lowest validation perplexity and the test perplexity
    /// measured there.
    pub best: Option<(usize, f64, f64)>,
    pub stopped_early: bool,
}

impl<T> SimOutcome<T> {
    pub fn final_test_ppl(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.test_ppl)
    }
}

/// Loaded corpus, client shards and initial model for one configuration,
/// training in scalar type `T`. The `precision` config field is ignored
/// here; [`run_simulation`] uses it to pick `T`.
pub struct Simulation<T = f64> {
    config: SimConfig,
    model: GruLmConfig,
    corpus: Corpus,
    partition: Partition,
    master: SeededRng,
    _scalar: PhantomData<T>,
}

impl<T: Scalar> Simulation<T> {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let corpus = Corpus::load(&config.train_path, &config.valid_path, &config.test_path, config.model.vocab_size)?;
        Self::with_corpus(config, corpus)
    }

    pub fn with_corpus(config: SimConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let master = SeededRng::new(config.master_seed);
        let partition = partition_iid(&corpus.train, config.k_clients, config.block_len, &mut master.derive("partition"))?;
        let (_, client) = config.effective();
        for (k, shard) in partition.shards.iter().enumerate() {
            let need = client.batch_size * (config.model.bptt_len + 1);
            if shard.len() < need {
                return Err(Error::InsufficientData { what: format!("shard of client {k}"), required: need, actual: shard.len() });
            }
        }
        for split in [Split::Valid, Split::Test] {
            let need = config.eval_batch_size * (config.model.bptt_len + 1);
            let have = corpus.stream(split).len();
            if have < need {
                return Err(Error::InsufficientData { what: format!("{split} split"), required: need, actual: have });
            }
        }
        let model = GruLmConfig { vocab_size: corpus.vocab.len(), ..config.model.clone() };
        Ok(Simulation { config, model, corpus, partition, master, _scalar: PhantomData })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn model_config(&self) -> &GruLmConfig {
        &self.model
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn initial_params(&self) -> Result<ParamSet<T>> {
        Ok(GruLm::init(&self.model, &mut self.master.derive("init"))?.into_params())
    }

    pub fn evaluate(&self, params: &ParamSet<T>, split: Split) -> Result<f64> {
        evaluate(params, self.corpus.stream(split), &self.model, self.config.eval_batch_size)
    }

    /// Trains the round's selected clients against `state` without
    /// aggregating. Updates come back sorted by client id.
    pub fn client_updates(&self, round: usize, state: &ParamSet<T>) -> Result<Vec<ClientUpdate<T>>> {
        let (fraction, client) = self.config.effective();
        let selected = select_clients(self.config.k_clients, fraction, round, &self.master);
        selected
            .par_iter()
            .map(|&k| {
                let up = client_update(k, state, &self.partition.shards[k], &self.model, &client)?;
                if self.config.dp.is_active() {
                    let mut rng = self.master.derive(&format!("dp/{round}/{k}"));
                    let params = add_dp_noise(&up.params, state, &self.config.dp, &mut rng)?;
                    Ok(ClientUpdate { params, ..up })
                } else {
                    Ok(up)
                }
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_round(round))
    }

    /// One communication round.
    pub fn run_round(&self, round: usize, state: &ParamSet<T>) -> Result<RoundOutput<T>> {
        let start = Instant::now();
        state.check_compatible(&self.initial_params_layout()).map_err(|e| e.in_round(round))?;
        let updates = self.client_updates(round, state)?;
        let (params, weights) = aggregate(state, &updates, &self.config.aggregator).map_err(|e| e.in_round(round))?;
        if !params.is_finite() {
            return Err(Error::NonFinite("aggregated server parameters".into()).in_round(round));
        }
        if let Some(w) = &weights {
            for (name, s) in w.summary() {
                debug!("round {round} {name}: score [{:.4}, {:.4}] alpha [{:.4}, {:.4}]", s[0], s[1], s[2], s[3]);
            }
        }

        let evaluate_now = round.is_multiple_of(self.config.eval_every) || round == self.config.rounds;
        let (val_ppl, test_ppl) = if evaluate_now {
            let v = self.evaluate(&params, Split::Valid).map_err(|e| e.in_round(round))?;
            let t = self.evaluate(&params, Split::Test).map_err(|e| e.in_round(round))?;
            (Some(v), Some(t))
        } else {
            (None, None)
        };
        let losses: Vec<f64> = updates.iter().filter_map(ClientUpdate::final_loss).collect();
        let mean_train_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        let record = RoundRecord {
            round,
            selected: updates.iter().map(|u| u.client_id).collect(),
            val_ppl,
            test_ppl,
            mean_train_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
            attention: weights.as_ref().map(|w| w.summary()),
        };
        Ok(RoundOutput { params, record, attention: weights.map(|w| w.to_record(round)), updates })
    }

    fn initial_params_layout(&self) -> ParamSet<T> {
        let mut shapes = ParamSet::new();
        for (name, (r, c)) in self.model.layout() {
            shapes.push(name, crate::tensor::Tensor2::zeros(r, c)).expect("layout names are unique");
        }
        shapes
    }

    /// Runs every round (or until the perplexity threshold is crossed),
    /// writing result files when `out_dir` is set.
    pub fn run(&self) -> Result<SimOutcome<T>> {
        let mut writer = match &self.config.out_dir {
            Some(dir) => Some(OutputWriter::create(dir, &self.config)?),
            None => None,
        };
        let mut state = self.initial_params()?;
        let mut records = Vec::new();
        let mut stopped_early = false;
        for round in 1..=self.config.rounds {
            let out = self.run_round(round, &state)?;
            state = out.params;
            info!(
                "round {round}/{}: clients {:?} val {} test {} ({:.1}s)",
                self.config.rounds,
                out.record.selected,
                fmt_ppl(out.record.val_ppl),
                fmt_ppl(out.record.test_ppl),
                out.record.wall_seconds
            );
            if let Some(w) = writer.as_mut() {
                w.write_round(&out.record, out.attention.as_ref().filter(|_| self.config.export_attention))?;
            }
            let watched = match self.config.threshold_split {
                Split::Test => out.record.test_ppl,
                _ => out.record.val_ppl,
            };
            records.push(out.record);
            if let (Some(threshold), Some(ppl)) = (self.config.ppl_threshold, watched) {
                if ppl < threshold {
                    info!("{} perplexity {ppl:.3} below {threshold} after round {round}", self.config.threshold_split);
                    stopped_early = round < self.config.rounds;
                    break;
                }
            }
        }
        let best = records
            .iter()
            .filter_map(|r| Some((r.round, r.val_ppl?, r.test_ppl?)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some(w) = writer {
            w.finish(&records, &state)?;
        }
        Ok(SimOutcome { records, final_params: state, best, stopped_early })
    }
}

fn fmt_ppl(p: Option<f64>) -> String {
    p.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Runs a configuration end to end in its configured precision.
pub fn run_simulation(config: SimConfig) -> Result<SimOutcome> {
    match config.precision {
        Precision::F64 => Simulation::<f64>::new(config)?.run(),
        Precision::F32 => {
            let out = Simulation::<f32>::new(config)?.run()?;
            Ok(SimOutcome {
                records: out.records,
                final_params: out.final_params.cast(),
                best: out.best,
                stopped_early: out.stopped_early,
            })
        }
    }
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ATTENTION_FILE: &str = "attention.jsonl";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.txt";

struct OutputWriter {
    dir: PathBuf,
    records: BufWriter<File>,
    timing: BufWriter<File>,
    attention: Option<BufWriter<File>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

impl OutputWriter {
    fn create(dir: &Path, config: &SimConfig) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        // Absolute corpus paths keep the saved copy usable from inside `dir`.
        let mut saved = config.clone();
        for p in [&mut saved.train_path, &mut saved.valid_path, &mut saved.test_path] {
            if let Ok(abs) = std::path::absolute(&*p) {
                *p = abs;
            }
        }
        std::fs::write(&cfg_path, saved.to_config_string()).map_err(|e| Error::io(&cfg_path, e))?;
        let mut timing = create(&dir.join(TIMING_FILE))?;
        writeln!(timing, "round,wall_seconds").map_err(|e| Error::io(dir.join(TIMING_FILE), e))?;
        let attention = if config.export_attention && config.aggregator.strategy == Strategy::FedAtt {
            Some(create(&dir.join(ATTENTION_FILE))?)
        } else {
            None
        };
        Ok(OutputWriter { dir: dir.to_path_buf(), records: create(&dir.join(RECORDS_FILE))?, timing, attention })
    }

    fn write_round(&mut self, record: &RoundRecord, attention: Option<&AttentionRecord>) -> Result<()> {
        let io = |dir: &Path, name: &str| {
            let p = dir.join(name);
            move |e| Error::io(p, e)
        };
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(self.records, "{line}").and_then(|_| self.records.flush()).map_err(io(&self.dir, RECORDS_FILE))?;
        writeln!(self.timing, "{},{:.6}", record.round, record.wall_seconds).map_err(io(&self.dir, TIMING_FILE))?;
        if let (Some(w), Some(att)) = (self.attention.as_mut(), attention) {
            let line = serde_json::to_string(att).expect("attention serializes");
            writeln!(w, "{line}").map_err(io(&self.dir, ATTENTION_FILE))?;
        }
        Ok(())
    }

    fn finish<T: Scalar>(mut self, records: &[RoundRecord], params: &ParamSet<T>) -> Result<()> {
        let path = self.dir.join(SUMMARY_FILE);
        let mut csv = String::from("round,val_ppl,test_ppl\n");
        for r in records.iter().filter(|r| r.val_ppl.is_some() || r.test_ppl.is_some()) {
            let f = |p: Option<f64>| p.map_or_else(String::new, |v| v.to_string());
            csv.push_str(&format!("{},{},{}\n", r.round, f(r.val_ppl), f(r.test_ppl)));
        }
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        self.timing.flush().map_err(|e| Error::io(self.dir.join(TIMING_FILE), e))?;
        if let Some(mut w) = self.attention.take() {
            w.flush().map_err(|e| Error::io(self.dir.join(ATTENTION_FILE), e))?;
        }
        params.save(&self.dir.join(CHECKPOINT_FILE))
    }
}

/// Reads a records file back.
pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn participation_counts() {
        assert_eq!(participants(100, 1.0), 100);
        assert_eq!(participants(100, 0.001), 1);
        assert_eq!(participants(100, 0.1), 10);
        assert_eq!(participants(100, 0.29), 29);
        assert_eq!(participants(10, 0.5), 5);
    }

    #[test]
    fn selection_is_seeded_by_round() {
        let master = SeededRng::new(17);
        let all = select_clients(8, 1.0, 3, &master);
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        let a = select_clients(100, 0.1, 4, &master);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, select_clients(100, 0.1, 4, &SeededRng::new(17)));
        assert_ne!(a, select_clients(100, 0.1, 5, &master));
        assert_eq!(select_clients(100, 0.001, 1, &master).len(), 1);
    }

    fn rec(round: usize, val: Option<f64>) -> RoundRecord {
        RoundRecord { round, selected: vec![], val_ppl: val, test_ppl: val, mean_train_loss: None, wall_seconds: 0.0, attention: None }
    }

    #[test]
    fn threshold_scan() {
        let recs: Vec<_> = [120.0, 95.0, 89.0, 85.0].iter().enumerate().map(|(i, &v)| rec(i + 1, Some(v))).collect();
        assert_eq!(rounds_to_threshold(&recs, 90.0), Some(3));
        assert_eq!(rounds_to_threshold(&recs, 80.0), None);
        assert_eq!(rounds_to_threshold(&recs, 500.0), Some(1));
        let gappy = vec![rec(1, None), rec(2, Some(10.0))];
        assert_eq!(rounds_to_threshold(&gappy, 20.0), Some(2));
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::default();
        assert!(c.validate().is_ok());
        c.fraction = 0.0;
        assert!(c.validate().is_err());
        c.fraction = 1.5;
        assert!(c.validate().is_err());
        let c = SimConfig { rounds: 0, ..SimConfig::default() };
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let c = SimConfig { threshold_split: Split::Train, ..SimConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn records_omit_wall_time() {
        let mut r = rec(2, Some(3.5));
        r.wall_seconds = 12.0;
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("wall"));
        assert_eq!(json, r#"{"round":2,"selected":[],"val_ppl":3.5,"test_ppl":3.5,"mean_train_loss":null}"#);
    }
}
