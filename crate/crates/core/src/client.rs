//! Local client training and upload randomization.

use serde::{Deserialize, Serialize};

use crate::corpus::{batchify, TokenId};
use crate::error::{Error, Result};
use crate::gru::{clip_global_norm, GruLm, GruLmConfig};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub batch_size: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm ceiling applied before the momentum update.
    pub clip_norm: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig { batch_size: 20, local_epochs: 5, learning_rate: 0.5, momentum: 0.9, clip_norm: 5.0 }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Gaussian randomization of uploaded parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub enabled: bool,
    /// Magnitude coefficient on the noise.
    pub beta_mag: f64,
    pub sigma: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enabled {
            if !(self.beta_mag > 0.0 && self.beta_mag <= 1.0) {
                return Err(Error::Config(format!("noise magnitude must be in (0, 1], got {}", self.beta_mag)));
            }
            if self.sigma < 0.0 || !self.sigma.is_finite() {
                return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {}", self.sigma)));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.enabled && self.beta_mag * self.sigma != 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    pub params: ParamSet<T>,
    /// Token count of the client's shard.
    pub n_samples: usize,
    /// Mean training loss of each local epoch.
    pub epoch_losses: Vec<f64>,
}

impl<T> ClientUpdate<T> {
    /// Mean loss of the final epoch, if any training ran.
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Momentum SGD over `local_epochs` passes of the client's shard, starting
/// from the server parameters. Velocity starts at zero every call.
pub fn client_update<T: Scalar>(
    client_id: usize,
    server_params: &ParamSet<T>,
    shard: &[TokenId],
    model: &GruLmConfig,
    cfg: &ClientConfig,
) -> Result<ClientUpdate<T>> {
    cfg.validate()?;
    let batches = batchify(shard, cfg.batch_size, model.bptt_len)?;
    let mut lm = GruLm::from_params(model.clone(), server_params.clone())?;
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let momentum = T::from_f64_lossy(cfg.momentum);
    let clip = T::from_f64_lossy(cfg.clip_norm);
    let mut velocity = server_params.zeros_like();
    let mut epoch_losses = Vec::with_capacity(cfg.local_epochs);

    for epoch in 0..cfg.local_epochs {
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let fwd = lm.forward_batch(batch)?;
            let (loss, mut grads) = lm.loss_and_grad(&fwd.cache, fwd.logits, &batch.targets, T::one())?;
            let loss = loss.to_f64_lossless();
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { client: client_id, epoch, batch: bi });
            }
            total += loss;
            clip_global_norm(&mut grads, clip);
            sgd_momentum_step(lm.params_mut(), &mut velocity, &grads, lr, momentum);
        }
        epoch_losses.push(total / batches.len() as f64);
    }

    Ok(ClientUpdate { client_id, params: lm.into_params(), n_samples: shard.len(), epoch_losses })
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step<T: Scalar>(params: &mut ParamSet<T>, velocity: &mut ParamSet<T>, grads: &ParamSet<T>, lr: T, momentum: T) {
    for ((p, v), g) in params.tensors_mut().zip(velocity.tensors_mut()).zip(grads.tensors()) {
        for ((p, v), &g) in p.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Perturbs an upload so the update `server - params` gains
/// `beta_mag * N(0, sigma^2)` in every coordinate.
pub fn add_dp_noise<T: Scalar>(params: &ParamSet<T>, server_params: &ParamSet<T>, dp: &DpConfig, rng: &mut SeededRng) -> Result<ParamSet<T>> {
    params.check_compatible(server_params)?;
    dp.validate()?;
    if !dp.is_active() {
        return Ok(params.clone());
    }
    let beta = T::from_f64_lossy(dp.beta_mag);
    let sigma = T::from_f64_lossy(dp.sigma);
    let mut out = params.clone();
    for t in out.tensors_mut() {
        let noise = rng.gaussian(t.len(), sigma)?;
        for (v, n) in t.as_mut_slice().iter_mut().zip(noise) {
            *v -= beta * n;
        }
    }
    Ok(out)
}
