//! Deterministic federated-learning simulator for word-level GRU language
//! models.
//!
//! Clients train local copies of a shared model on disjoint shards of a
//! corpus; the server combines their uploads with FedSGD, FedAvg, or
//! layer-wise attentive aggregation (FedAtt). Uploads can be randomized with
//! Gaussian noise before they leave the client.
//!
//! The numeric core ([`Tensor2`], [`ParamSet`], [`GruLm`], the aggregators)
//! is generic over [`Scalar`] (`f32` or `f64`), and so is [`Simulation`].
//! Checkpoints, metrics, and the aliases below use `f64`; the `precision`
//! config key picks the type a run trains in.

pub mod aggregate;
pub mod client;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gru;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod tensor;

pub use aggregate::{
    aggregate, attention_scores, fedatt_update, fedavg_update, fedsgd_round_config, AggregatorConfig, AttentionWeights,
    Strategy,
};
pub use client::{add_dp_noise, client_update, ClientConfig, ClientUpdate, DpConfig};
pub use corpus::{batchify, partition_iid, Corpus, Partition, Split, TokenStream, Vocabulary};
pub use error::{Error, Result};
pub use gru::{loss, param_count, perplexity, GruLm, GruLmConfig};
pub use params::ParamSet;
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use sim::{evaluate, rounds_to_threshold, run_simulation, select_clients, Precision, RoundRecord, SimConfig, SimOutcome, Simulation};
pub use tensor::{matmul, p_norm_diff, softmax, NormOrder, Tensor2};

/// Double-precision tensor.
pub type Tensor = Tensor2<f64>;
/// Double-precision parameter set, the unit exchanged with clients.
pub type Params = ParamSet<f64>;
/// Double-precision language model.
pub type Model = GruLm<f64>;
/// Double-precision client upload.
pub type Update = ClientUpdate<f64>;
