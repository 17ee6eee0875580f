mod common;

use fedsim_core::corpus::synthetic::{Language, LanguageSpec};
use fedsim_core::sim::{read_records, CHECKPOINT_FILE, RECORDS_FILE, SUMMARY_FILE};
use fedsim_core::{
    aggregate, client_update, evaluate, select_clients, AggregatorConfig, ClientConfig, Corpus, Error, GruLmConfig,
    NormOrder, ParamSet, Precision, SeededRng, SimConfig, Simulation, Split, Strategy, TokenStream,
};

fn corpus(seed: u64) -> Corpus {
    let spec = LanguageSpec { word_types: 120, classes: 8, ..LanguageSpec::default() };
    let lang = Language::new(spec, seed).unwrap();
    let root = SeededRng::new(seed);
    let text = |label: &str, n| lang.sample_text(n, &mut root.derive(label));
    Corpus::from_texts(&text("train", 6_000), &text("valid", 800), &text("test", 800), 100).unwrap()
}

fn config() -> SimConfig {
    let mut c = SimConfig { k_clients: 4, fraction: 0.5, rounds: 3, master_seed: 9, eval_batch_size: 4, block_len: 32, ..SimConfig::default() };
    c.model = GruLmConfig { vocab_size: 100, embed_dim: 8, hidden_dim: 8, num_layers: 1, tied: false, bptt_len: 6, init_scale: 0.1 };
    c.client = ClientConfig { batch_size: 4, local_epochs: 1, learning_rate: 0.5, momentum: 0.9, clip_norm: 5.0 };
    c
}

fn sim(c: SimConfig) -> Simulation {
    Simulation::with_corpus(c, corpus(3)).unwrap()
}

#[test]
fn zero_epoch_round_leaves_server_unchanged() {
    let mut c = config();
    c.k_clients = 1;
    c.fraction = 1.0;
    c.client.local_epochs = 0;
    c.aggregator.strategy = Strategy::FedAvg;
    let s = sim(c);
    let init = s.initial_params().unwrap();
    let out = s.run_round(1, &init).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.record.selected, vec![0]);
}

#[test]
fn identical_clients_give_uniform_attention() {
    let s = sim(config());
    let init = s.initial_params().unwrap();
    let shard = &s.partition().shards[0];
    let updates: Vec<_> = (0..3).map(|k| client_update(k, &init, shard, s.model_config(), &s.config().client).unwrap()).collect();
    let (next, weights) = aggregate(&init, &updates, &AggregatorConfig { strategy: Strategy::FedAtt, epsilon: 1.0, norm_order: NormOrder::L2 }).unwrap();
    for layer in weights.unwrap().layers {
        assert!(layer.alphas.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    }
    assert!(next.max_abs_diff(&updates[0].params).unwrap() < 1e-15);
}

#[test]
fn strategies_share_round_one_client_work() {
    let mut results = Vec::new();
    for strategy in [Strategy::FedAvg, Strategy::FedAtt] {
        let mut c = config();
        c.aggregator.strategy = strategy;
        let s = sim(c);
        let init = s.initial_params().unwrap();
        results.push((init.clone(), s.client_updates(1, &init).unwrap(), s.run_round(1, &init).unwrap().params));
    }
    assert_eq!(results[0].0, results[1].0);
    assert_eq!(results[0].1, results[1].1);
    assert_ne!(results[0].2, results[1].2);
}

#[test]
fn runs_are_reproducible() {
    let a = sim(config()).run().unwrap();
    let b = sim(config()).run().unwrap();
    assert_eq!(a.records.len(), 3);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!((x.round, &x.selected, x.val_ppl, x.test_ppl, x.mean_train_loss), (y.round, &y.selected, y.val_ppl, y.test_ppl, y.mean_train_loss));
        assert_eq!(x.attention, y.attention);
        assert_eq!(x.selected.len(), 2);
    }
    assert_eq!(a.final_params, b.final_params);

    let mut other = config();
    other.master_seed = 10;
    let c = sim(other).run().unwrap();
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn selection_depends_on_seed_and_round_only() {
    let c = config();
    let s = sim(c.clone());
    let init = s.initial_params().unwrap();
    let ups = s.client_updates(2, &init).unwrap();
    let ids: Vec<usize> = ups.iter().map(|u| u.client_id).collect();
    assert_eq!(ids, select_clients(c.k_clients, c.fraction, 2, &SeededRng::new(c.master_seed)));
}

#[test]
fn zero_model_is_uniform() {
    let s = sim(config());
    let zeros = s.initial_params().unwrap().zeros_like();
    for split in [Split::Valid, Split::Test] {
        let ppl = s.evaluate(&zeros, split).unwrap();
        let v = s.model_config().vocab_size as f64;
        assert!((ppl - v).abs() < 1e-9 * v, "{ppl} vs {v}");
        assert_eq!(ppl, s.evaluate(&zeros, split).unwrap());
    }
}

#[test]
fn single_token_stream_is_perfectly_predictable() {
    let cfg = GruLmConfig { vocab_size: 3, embed_dim: 2, hidden_dim: 2, num_layers: 1, tied: false, bptt_len: 4, init_scale: 0.1 };
    let mut p = ParamSet::new();
    for (name, (r, c)) in cfg.layout() {
        p.push(name, fedsim_core::Tensor2::zeros(r, c)).unwrap();
    }
    // All mass on token 2, whatever the hidden state.
    p.get_mut("out.b").unwrap().set(2, 0, 40.0);
    let stream = TokenStream { ids: vec![2; 200], split: Split::Test };
    let ppl = evaluate(&p, &stream, &cfg, 5).unwrap();
    assert!((ppl - 1.0).abs() < 1e-6, "{ppl}");
}

#[test]
fn short_eval_stream_is_an_error() {
    let cfg = GruLmConfig { vocab_size: 3, embed_dim: 2, hidden_dim: 2, num_layers: 1, tied: false, bptt_len: 4, init_scale: 0.1 };
    let p = fedsim_core::GruLm::<f64>::init(&cfg, &mut SeededRng::new(1)).unwrap().into_params();
    let stream = TokenStream { ids: vec![1; 9], split: Split::Valid };
    assert!(evaluate(&p, &stream, &cfg, 2).is_err());
}

#[test]
fn threshold_stops_early() {
    let mut c = config();
    c.rounds = 5;
    c.ppl_threshold = Some(1e9);
    let out = sim(c).run().unwrap();
    assert_eq!(out.records.len(), 1);
    assert!(out.stopped_early);

    let mut c = config();
    c.ppl_threshold = Some(1e-3);
    let out = sim(c).run().unwrap();
    assert_eq!(out.records.len(), 3);
    assert!(!out.stopped_early);
}

#[test]
fn fedsgd_uses_every_client_for_one_epoch() {
    let mut c = config();
    c.aggregator.strategy = Strategy::FedSgd;
    c.fraction = 0.25;
    c.client.local_epochs = 4;
    let s = sim(c);
    let ups = s.client_updates(1, &s.initial_params().unwrap()).unwrap();
    assert_eq!(ups.len(), 4);
    assert!(ups.iter().all(|u| u.epoch_losses.len() == 1));
}

#[test]
fn noise_changes_uploads_deterministically() {
    let mut c = config();
    c.dp.enabled = true;
    c.dp.beta_mag = 0.01;
    c.dp.sigma = 1.0;
    let noisy = sim(c.clone());
    let clean = sim(config());
    let init = clean.initial_params().unwrap();
    let a = noisy.client_updates(1, &init).unwrap();
    let b = clean.client_updates(1, &init).unwrap();
    assert_eq!(a, noisy.client_updates(1, &init).unwrap());
    for (x, y) in a.iter().zip(&b) {
        let d = x.params.max_abs_diff(&y.params).unwrap();
        assert!(d > 0.0 && d < 0.1, "{d}");
    }
}

#[test]
fn single_precision_run_tracks_double() {
    let mut c = config();
    c.precision = Precision::F32;
    let single = Simulation::<f32>::with_corpus(c, corpus(3)).unwrap().run().unwrap();
    let double = sim(config()).run().unwrap();
    for (a, b) in single.records.iter().zip(&double.records) {
        let (a, b) = (a.val_ppl.unwrap(), b.val_ppl.unwrap());
        assert!((a - b).abs() / b < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn result_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config();
    c.out_dir = Some(dir.path().join("run"));
    c.export_attention = true;
    let out = sim(c).run().unwrap();
    let run = dir.path().join("run");
    let back = read_records(&run.join(RECORDS_FILE)).unwrap();
    assert_eq!(back.len(), out.records.len());
    for (a, b) in back.iter().zip(&out.records) {
        assert_eq!((a.round, &a.selected, a.val_ppl, a.test_ppl), (b.round, &b.selected, b.val_ppl, b.test_ppl));
    }
    let summary = std::fs::read_to_string(run.join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.lines().next(), Some("round,val_ppl,test_ppl"));
    assert_eq!(summary.lines().count(), 4);
    assert_eq!(ParamSet::<f64>::load(&run.join(CHECKPOINT_FILE)).unwrap(), out.final_params);
    assert_eq!(std::fs::read_to_string(run.join("attention.jsonl")).unwrap().lines().count(), 3);
    let cfg_back = SimConfig::from_file(&run.join("config.txt")).unwrap();
    assert_eq!(cfg_back.master_seed, 9);
}

#[test]
fn undersized_shards_are_rejected_up_front() {
    let mut c = config();
    c.k_clients = 500;
    c.block_len = 16;
    match Simulation::<f64>::with_corpus(c, corpus(3)) {
        Err(e @ Error::InsufficientData { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected a data error, got {:?}", other.err()),
    }
}

#[test]
fn attention_is_recorded_for_fedatt_only() {
    let out = sim(config()).run().unwrap();
    assert!(out.records.iter().all(|r| r.attention.is_some()));
    let mut c = config();
    c.aggregator.strategy = Strategy::FedAvg;
    let out = sim(c).run().unwrap();
    assert!(out.records.iter().all(|r| r.attention.is_none()));
}
