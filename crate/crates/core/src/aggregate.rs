//! Server-side aggregation: FedSGD, FedAvg and layer-wise attentive
//! aggregation (FedAtt).
//!
//! FedAtt scores every client per named tensor ("layer") by the distance
//! between the server and client tensors, turns the scores into weights with
//! a softmax, and takes a step of size `epsilon` along the weighted pull
//! towards the clients:
//!
//! ```text
//! s[l][k]  = || server[l] - client_k[l] ||_p
//! a[l][.]  = softmax(s[l][.])
//! next[l]  = server[l] - epsilon * sum_k a[l][k] * (server[l] - client_k[l])
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{p_norm_diff, softmax, NormOrder, Tensor2};

impl<T> AsRef<ParamSet<T>> for ParamSet<T> {
    fn as_ref(&self) -> &ParamSet<T> {
        self
    }
}

impl<T> AsRef<ParamSet<T>> for ClientUpdate<T> {
    fn as_ref(&self) -> &ParamSet<T> {
        &self.params
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedSgd,
    FedAvg,
    #[default]
    FedAtt,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::FedSgd => "fedsgd",
            Strategy::FedAvg => "fedavg",
            Strategy::FedAtt => "fedatt",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedsgd" => Ok(Strategy::FedSgd),
            "fedavg" => Ok(Strategy::FedAvg),
            "fedatt" => Ok(Strategy::FedAtt),
            other => Err(Error::Config(format!("unknown aggregation strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub strategy: Strategy,
    /// Server step size; FedAtt only.
    pub epsilon: f64,
    pub norm_order: NormOrder,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig { strategy: Strategy::FedAtt, epsilon: 1.0, norm_order: NormOrder::L2 }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Participation settings under which FedAvg becomes FedSGD.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FedSgdRound {
    pub fraction: f64,
    pub local_epochs: usize,
    pub aggregator: Strategy,
}

/// Every client, one local epoch, sample-weighted averaging.
pub fn fedsgd_round_config() -> FedSgdRound {
    FedSgdRound { fraction: 1.0, local_epochs: 1, aggregator: Strategy::FedAvg }
}

/// Scores and weights of every client for one named tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention<T> {
    pub name: String,
    pub scores: Vec<T>,
    pub alphas: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub layers: Vec<LayerAttention<T>>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn num_clients(&self) -> usize {
        self.layers.first().map_or(0, |l| l.alphas.len())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerAttention<T>> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Per-layer `(min score, max score, min alpha, max alpha)`.
    pub fn summary(&self) -> BTreeMap<String, [f64; 4]> {
        self.layers
            .iter()
            .map(|l| {
                let f = |v: &[T], init: f64, pick: fn(f64, f64) -> f64| {
                    v.iter().map(|x| x.to_f64_lossless()).fold(init, pick)
                };
                (
                    l.name.clone(),
                    [
                        f(&l.scores, f64::INFINITY, f64::min),
                        f(&l.scores, f64::NEG_INFINITY, f64::max),
                        f(&l.alphas, f64::INFINITY, f64::min),
                        f(&l.alphas, f64::NEG_INFINITY, f64::max),
                    ],
                )
            })
            .collect()
    }

    /// JSON-ready record for one round.
    pub fn to_record(&self, round: usize) -> AttentionRecord {
        let conv = |v: &[T]| v.iter().map(|x| x.to_f64_lossless()).collect::<Vec<f64>>();
        AttentionRecord {
            round,
            alpha: self.layers.iter().map(|l| (l.name.clone(), conv(&l.alphas))).collect(),
            scores: self.layers.iter().map(|l| (l.name.clone(), conv(&l.scores))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub round: usize,
    pub alpha: BTreeMap<String, Vec<f64>>,
    pub scores: BTreeMap<String, Vec<f64>>,
}

fn check_clients<T: Scalar, C: AsRef<ParamSet<T>>>(server: &ParamSet<T>, clients: &[C]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("aggregation needs at least one client".into()));
    }
    for c in clients {
        server.check_compatible(c.as_ref())?;
    }
    Ok(())
}

/// Layer-wise softmax over server-to-client distances.
pub fn attention_scores<T: Scalar, C: AsRef<ParamSet<T>>>(server: &ParamSet<T>, clients: &[C], p: NormOrder) -> Result<AttentionWeights<T>> {
    check_clients(server, clients)?;
    let layers = server
        .iter()
        .enumerate()
        .map(|(i, (name, w))| {
            let scores = clients.iter().map(|c| p_norm_diff(w, c.as_ref().tensor(i), p)).collect::<Result<Vec<T>>>()?;
            let alphas = softmax(&scores)?;
            Ok(LayerAttention { name: name.to_string(), scores, alphas })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionWeights { layers })
}

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy)]
struct CompensatedSum<T> {
    sum: T,
    carry: T,
}

impl<T: Scalar> CompensatedSum<T> {
    fn new() -> Self {
        CompensatedSum { sum: T::zero(), carry: T::zero() }
    }

    fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> T {
        self.sum + self.carry
    }
}

/// `server - epsilon * sum_k alpha_k * (server - client_k)`, per layer.
pub fn fedatt_update<T: Scalar, C: AsRef<ParamSet<T>>>(
    server: &ParamSet<T>,
    clients: &[C],
    weights: &AttentionWeights<T>,
    epsilon: T,
) -> Result<ParamSet<T>> {
    check_clients(server, clients)?;
    if weights.layers.len() != server.len() || weights.layers.iter().any(|l| l.alphas.len() != clients.len()) {
        return Err(Error::InvalidArgument(format!(
            "attention weights cover {} clients over {} layers, aggregation has {} clients over {} layers",
            weights.num_clients(),
            weights.layers.len(),
            clients.len(),
            server.len()
        )));
    }
    let mut out = ParamSet::new();
    for (i, ((name, w), att)) in server.iter().zip(&weights.layers).enumerate() {
        if att.name != name {
            return Err(Error::Incompatible(format!("attention layer {} vs parameter {name}", att.name)));
        }
        let mut next = Vec::with_capacity(w.len());
        for (j, &theta) in w.as_slice().iter().enumerate() {
            let mut pull = CompensatedSum::new();
            for (c, &alpha) in clients.iter().zip(&att.alphas) {
                pull.add(alpha * (theta - c.as_ref().tensor(i).as_slice()[j]));
            }
            next.push(theta - epsilon * pull.value());
        }
        out.push(name, Tensor2::from_vec(w.rows(), w.cols(), next)?)?;
    }
    Ok(out)
}

/// Sample-count weighted mean of the client parameters, accumulated in
/// client-id order.
pub fn fedavg_update<T: Scalar>(server: &ParamSet<T>, updates: &[ClientUpdate<T>]) -> Result<ParamSet<T>> {
    let sorted = by_client_id(updates);
    check_clients(server, &sorted)?;
    let total: usize = sorted.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("every client reported zero samples".into()));
    }
    let total = T::from_usize(total).expect("count fits in scalar");
    let weights: Vec<T> = sorted.iter().map(|u| T::from_usize(u.n_samples).expect("count fits in scalar") / total).collect();
    weighted_mean(server, &sorted, &weights)
}

fn by_client_id<T>(updates: &[ClientUpdate<T>]) -> Vec<&ClientUpdate<T>> {
    let mut sorted: Vec<&ClientUpdate<T>> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    sorted
}

pub(crate) fn weighted_mean<T: Scalar, C: AsRef<ParamSet<T>>>(server: &ParamSet<T>, clients: &[C], weights: &[T]) -> Result<ParamSet<T>> {
    let mut out = ParamSet::new();
    for (i, (name, w)) in server.iter().enumerate() {
        let mut next = Vec::with_capacity(w.len());
        for j in 0..w.len() {
            let mut acc = CompensatedSum::new();
            for (c, &weight) in clients.iter().zip(weights) {
                acc.add(weight * c.as_ref().tensor(i).as_slice()[j]);
            }
            next.push(acc.value());
        }
        out.push(name, Tensor2::from_vec(w.rows(), w.cols(), next)?)?;
    }
    Ok(out)
}

/// Runs the configured strategy. Updates are accumulated in client-id
/// order whatever order they arrive in, so the result is bit-reproducible.
/// Returns the attention weights (indexed in client-id order) for FedAtt.
pub fn aggregate<T: Scalar>(
    server: &ParamSet<T>,
    updates: &[ClientUpdate<T>],
    cfg: &AggregatorConfig,
) -> Result<(ParamSet<T>, Option<AttentionWeights<T>>)> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::FedAvg | Strategy::FedSgd => Ok((fedavg_update(server, updates)?, None)),
        Strategy::FedAtt => {
            let sorted = by_client_id(updates);
            let weights = attention_scores(server, &sorted, cfg.norm_order)?;
            let next = fedatt_update(server, &sorted, &weights, T::from_f64_lossy(cfg.epsilon))?;
            Ok((next, Some(weights)))
        }
    }
}
