//! Word-level GRU language model with exact truncated-BPTT gradients.
//!
//! Each gate matrix acts on `[h_prev, x, 1]`, so a layer with input width
//! `d_in` stores `h x (h + d_in + 1)` weights with the bias in the last
//! column:
//!
//! ```text
//! z  = sigmoid(Wz [h_prev, x, 1])
//! r  = sigmoid(Wr [h_prev, x, 1])
//! hc = tanh(W [r * h_prev, x, 1])
//! h  = (1 - z) * h_prev + z * hc
//! ```
//!
//! The output head maps the top hidden state to vocabulary logits through
//! `out.w` (or the embedding matrix when tied) plus `out.b`.

use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, TokenId};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{exp_shifted_in_place, Tensor2};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub tied: bool,
    pub bptt_len: usize,
    pub init_scale: f64,
}

impl Default for GruLmConfig {
    fn default() -> Self {
        GruLmConfig { vocab_size: 10_000, embed_dim: 64, hidden_dim: 64, num_layers: 1, tied: false, bptt_len: 20, init_scale: 0.1 }
    }
}

impl GruLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.bptt_len == 0 {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.tied && self.embed_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "tied embeddings need embed_dim == hidden_dim, got {} and {}",
                self.embed_dim, self.hidden_dim
            )));
        }
        if self.init_scale < 0.0 || !self.init_scale.is_finite() {
            return Err(Error::Config(format!("init_scale must be finite and >= 0, got {}", self.init_scale)));
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// Names and shapes of every stored tensor, in serialization order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let mut out = vec![("embed".to_string(), (v, d))];
        for l in 0..self.num_layers {
            let k = h + self.layer_input(l) + 1;
            for gate in ["wz", "wr", "w"] {
                out.push((format!("gru{l}.{gate}"), (h, k)));
            }
        }
        if !self.tied {
            out.push(("out.w".to_string(), (v, h)));
        }
        out.push(("out.b".to_string(), (v, 1)));
        out
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (v, d, h) = (self.vocab_size, self.embed_dim, self.hidden_dim);
        let gates: usize = (0..self.num_layers).map(|l| 3 * h * (h + self.layer_input(l) + 1)).sum();
        v * d + gates + if self.tied { 0 } else { v * h } + v
    }
}

pub fn param_count(config: &GruLmConfig) -> usize {
    config.param_count()
}

/// `exp(mean_nll)`.
pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    wz: usize,
    wr: usize,
    w: usize,
}

/// GRU language model parameters viewed through their [`ParamSet`].
#[derive(Clone, Debug)]
pub struct GruLm<T> {
    config: GruLmConfig,
    params: ParamSet<T>,
    embed: usize,
    layers: Vec<LayerIdx>,
    out_w: usize,
    out_b: usize,
}

/// Batch logits, rows ordered `b * seq_len + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<T> {
    pub batch: usize,
    pub seq_len: usize,
    pub values: Tensor2<T>,
}

#[derive(Clone, Debug)]
struct StepCache<T> {
    /// `[h_prev, x, 1]`, `B x K`.
    a: Vec<T>,
    /// `[r * h_prev, x, 1]`, `B x K`.
    ar: Vec<T>,
    z: Vec<T>,
    r: Vec<T>,
    hc: Vec<T>,
    h: Vec<T>,
}

/// Activations retained by [`GruLm::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    config: GruLmConfig,
    batch: usize,
    seq_len: usize,
    inputs: Vec<TokenId>,
    /// Per layer, per time step.
    steps: Vec<Vec<StepCache<T>>>,
    /// Top-layer hidden states, `(B * T) x h`, rows ordered like logits.
    top: Tensor2<T>,
}

impl<T> ForwardCache<T> {
    /// Number of time steps cached.
    pub fn depth(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub logits: Logits<T>,
    /// Final hidden state per layer, each `B x h`.
    pub final_hidden: Vec<Tensor2<T>>,
    pub cache: ForwardCache<T>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> GruLm<T> {
    /// Uniform weights in `[-init_scale, init_scale]`, zero biases.
    pub fn init(config: &GruLmConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let scale = T::from_f64_lossy(config.init_scale);
        let mut params = ParamSet::new();
        for (name, (rows, cols)) in config.layout() {
            let mut t = Tensor2::zeros(rows, cols);
            if name == "out.b" {
                params.push(name, t)?;
                continue;
            }
            let is_gate = name.starts_with("gru");
            for r in 0..rows {
                for c in 0..cols {
                    // Gate biases live in the last column.
                    if is_gate && c == cols - 1 {
                        continue;
                    }
                    let v = if config.init_scale == 0.0 { T::zero() } else { rng.uniform(-scale, scale) };
                    t.set(r, c, v);
                }
            }
            params.push(name, t)?;
        }
        Self::from_params(config.clone(), params)
    }

    /// Wraps a parameter set after checking it matches `config`'s layout.
    pub fn from_params(config: GruLmConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Incompatible(format!(
                "model expects {} tensors, parameter set has {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(params.iter()) {
            if name != pname || *shape != t.shape() {
                return Err(Error::Incompatible(format!("expected {name} {shape:?}, found {pname} {:?}", t.shape())));
            }
        }
        let idx = |n: &str| params.index_of(n).expect("layout checked above");
        let layers = (0..config.num_layers)
            .map(|l| LayerIdx { wz: idx(&format!("gru{l}.wz")), wr: idx(&format!("gru{l}.wr")), w: idx(&format!("gru{l}.w")) })
            .collect();
        let embed = idx("embed");
        let out_w = if config.tied { embed } else { idx("out.w") };
        let out_b = idx("out.b");
        Ok(GruLm { config, params, embed, layers, out_w, out_b })
    }

    /// Infers dimensions from a parameter set's shapes.
    pub fn config_from_params(params: &ParamSet<T>, bptt_len: usize, init_scale: f64) -> Result<GruLmConfig> {
        let embed = params.get("embed").ok_or_else(|| Error::Incompatible("missing embed".into()))?;
        let wz = params.get("gru0.wz").ok_or_else(|| Error::Incompatible("missing gru0.wz".into()))?;
        let num_layers = (0..).take_while(|l| params.get(&format!("gru{l}.wz")).is_some()).count();
        Ok(GruLmConfig {
            vocab_size: embed.rows(),
            embed_dim: embed.cols(),
            hidden_dim: wz.rows(),
            num_layers,
            tied: params.get("out.w").is_none(),
            bptt_len,
            init_scale,
        })
    }

    pub fn config(&self) -> &GruLmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Mutable access for optimizers; names and shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Output projection, `V x h`; the embedding matrix when tied.
    pub fn output_weight(&self) -> &Tensor2<T> {
        self.params.tensor(self.out_w)
    }

    pub fn forward_batch(&self, batch: &Batch) -> Result<Forward<T>> {
        self.forward(&batch.inputs, batch.batch_size, batch.seq_len, None)
    }

    /// Runs the model over `batch x seq_len` token ids (row-major).
    ///
    /// `h0` gives the initial hidden state of each layer (`batch x h`);
    /// `None` starts from zeros.
    pub fn forward(&self, inputs: &[TokenId], batch: usize, seq_len: usize, h0: Option<&[Tensor2<T>]>) -> Result<Forward<T>> {
        let cfg = &self.config;
        let (v, h) = (cfg.vocab_size, cfg.hidden_dim);
        if batch == 0 || seq_len == 0 || inputs.len() != batch * seq_len {
            return Err(Error::InvalidArgument(format!("{} token ids do not form a {batch}x{seq_len} batch", inputs.len())));
        }
        if let Some(&id) = inputs.iter().find(|&&id| id as usize >= v) {
            return Err(Error::TokenOutOfRange { id: id as usize, vocab: v });
        }
        if let Some(h0) = h0 {
            if h0.len() != cfg.num_layers || h0.iter().any(|t| t.shape() != (batch, h)) {
                return Err(Error::InvalidArgument(format!("initial state must be {} tensors of shape ({batch}, {h})", cfg.num_layers)));
            }
        }

        let embed = self.params.tensor(self.embed);
        // Layer input per time step, `B x d_in`.
        let mut xs: Vec<Vec<T>> = (0..seq_len)
            .map(|t| {
                let mut x = Vec::with_capacity(batch * cfg.embed_dim);
                for b in 0..batch {
                    x.extend_from_slice(embed.row(inputs[b * seq_len + t] as usize));
                }
                x
            })
            .collect();

        let mut steps_all = Vec::with_capacity(cfg.num_layers);
        let mut final_hidden = Vec::with_capacity(cfg.num_layers);
        for (l, idx) in self.layers.iter().enumerate() {
            let d_in = cfg.layer_input(l);
            let k = h + d_in + 1;
            let (wz, wr, w) = (self.params.tensor(idx.wz), self.params.tensor(idx.wr), self.params.tensor(idx.w));
            let mut h_prev = match h0 {
                Some(h0) => h0[l].as_slice().to_vec(),
                None => vec![T::zero(); batch * h],
            };
            let mut steps = Vec::with_capacity(seq_len);
            for x in xs.iter() {
                let mut a = vec![T::one(); batch * k];
                for b in 0..batch {
                    a[b * k..b * k + h].copy_from_slice(&h_prev[b * h..(b + 1) * h]);
                    a[b * k + h..b * k + h + d_in].copy_from_slice(&x[b * d_in..(b + 1) * d_in]);
                }
                let mut z = vec![T::zero(); batch * h];
                let mut r = vec![T::zero(); batch * h];
                gemm(T::one(), MatRef::new(&a, batch, k), wz.view().t(), T::zero(), &mut z);
                gemm(T::one(), MatRef::new(&a, batch, k), wr.view().t(), T::zero(), &mut r);
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
                r.iter_mut().for_each(|v| *v = sigmoid(*v));

                let mut ar = a.clone();
                for b in 0..batch {
                    for j in 0..h {
                        ar[b * k + j] = r[b * h + j] * h_prev[b * h + j];
                    }
                }
                let mut hc = vec![T::zero(); batch * h];
                gemm(T::one(), MatRef::new(&ar, batch, k), w.view().t(), T::zero(), &mut hc);
                hc.iter_mut().for_each(|v| *v = v.tanh());

                let hn: Vec<T> = (0..batch * h).map(|i| (T::one() - z[i]) * h_prev[i] + z[i] * hc[i]).collect();
                h_prev = hn.clone();
                steps.push(StepCache { a, ar, z, r, hc, h: hn });
            }
            final_hidden.push(Tensor2::from_vec(batch, h, h_prev)?);
            // This layer's outputs feed the next one.
            for (x, s) in xs.iter_mut().zip(&steps) {
                x.clone_from(&s.h);
            }
            steps_all.push(steps);
        }

        let mut top = Tensor2::zeros(batch * seq_len, h);
        for (t, x) in xs.iter().enumerate() {
            for b in 0..batch {
                top.row_mut(b * seq_len + t).copy_from_slice(&x[b * h..(b + 1) * h]);
            }
        }
        let n = batch * seq_len;
        let bias = self.params.tensor(self.out_b).as_slice();
        let mut logits = Tensor2::zeros(n, v);
        for row in 0..n {
            logits.row_mut(row).copy_from_slice(bias);
        }
        gemm(T::one(), top.view(), self.output_weight().view().t(), T::one(), logits.as_mut_slice());

        Ok(Forward {
            logits: Logits { batch, seq_len, values: logits },
            final_hidden,
            cache: ForwardCache { config: cfg.clone(), batch, seq_len, inputs: inputs.to_vec(), steps: steps_all, top },
        })
    }

    /// Exact gradient of the mean negative log-likelihood.
    pub fn backward(&self, cache: &ForwardCache<T>, logits: &Logits<T>, targets: &[TokenId]) -> Result<ParamSet<T>> {
        self.backward_scaled(cache, logits, targets, T::one())
    }

    /// Gradient of `scale * mean_nll`.
    pub fn backward_scaled(&self, cache: &ForwardCache<T>, logits: &Logits<T>, targets: &[TokenId], scale: T) -> Result<ParamSet<T>> {
        Ok(self.loss_and_grad(cache, logits.clone(), targets, scale)?.1)
    }

    /// Mean NLL and its gradient (times `scale`), consuming the logits buffer.
    pub fn loss_and_grad(&self, cache: &ForwardCache<T>, logits: Logits<T>, targets: &[TokenId], scale: T) -> Result<(T, ParamSet<T>)> {
        let cfg = &self.config;
        self.check_cache(cache, &logits, targets)?;
        let (v, h) = (cfg.vocab_size, cfg.hidden_dim);
        let (batch, seq_len) = (cache.batch, cache.seq_len);
        let n = batch * seq_len;
        let inv_n = T::one() / T::from_usize(n).expect("count fits in scalar");

        // Softmax minus one-hot, scaled, in place.
        let mut dlogits = logits.values;
        let mut total = T::zero();
        for (row_i, row) in dlogits.as_mut_slice().chunks_mut(v).enumerate() {
            let b = row_i / seq_len;
            let t = row_i % seq_len;
            let target = targets[b * seq_len + t] as usize;
            let picked = row[target];
            let (max, sum) = exp_shifted_in_place(row);
            total += max + sum.ln() - picked;
            let w = inv_n * scale / sum;
            row.iter_mut().for_each(|x| *x *= w);
            row[target] -= inv_n * scale;
        }
        let loss = total * inv_n;

        let mut grads = self.params.zeros_like();
        gemm(T::one(), dlogits.view().t(), cache.top.view(), T::one(), grads.tensor_mut(self.out_w).as_mut_slice());
        {
            let db = grads.tensor_mut(self.out_b).as_mut_slice();
            for row in dlogits.as_slice().chunks(v) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        let mut dtop = Tensor2::zeros(n, h);
        gemm(T::one(), dlogits.view(), self.output_weight().view(), T::zero(), dtop.as_mut_slice());
        drop(dlogits);

        // Gradient arriving at each time step's layer output, `B x h`.
        let mut d_out: Vec<Vec<T>> = (0..seq_len)
            .map(|t| {
                let mut g = Vec::with_capacity(batch * h);
                for b in 0..batch {
                    g.extend_from_slice(dtop.row(b * seq_len + t));
                }
                g
            })
            .collect();

        for l in (0..cfg.num_layers).rev() {
            let d_in = cfg.layer_input(l);
            let k = h + d_in + 1;
            let idx = self.layers[l];
            let (wz, wr, w) = (self.params.tensor(idx.wz), self.params.tensor(idx.wr), self.params.tensor(idx.w));
            let mut dwz = vec![T::zero(); h * k];
            let mut dwr = vec![T::zero(); h * k];
            let mut dw = vec![T::zero(); h * k];
            let mut d_inputs: Vec<Vec<T>> = vec![Vec::new(); seq_len];
            let mut dh_next = vec![T::zero(); batch * h];

            let mut dpre_h = vec![T::zero(); batch * h];
            let mut dpre_z = vec![T::zero(); batch * h];
            let mut dpre_r = vec![T::zero(); batch * h];
            let mut d_ar = vec![T::zero(); batch * k];
            let mut d_a = vec![T::zero(); batch * k];
            for t in (0..seq_len).rev() {
                let s = &cache.steps[l][t];
                let dh: Vec<T> = d_out[t].iter().zip(&dh_next).map(|(&a, &b)| a + b).collect();
                let mut dhp = vec![T::zero(); batch * h];
                for b in 0..batch {
                    for j in 0..h {
                        let i = b * h + j;
                        let hp = s.a[b * k + j];
                        let (z, hc) = (s.z[i], s.hc[i]);
                        dpre_z[i] = dh[i] * (hc - hp) * z * (T::one() - z);
                        dpre_h[i] = dh[i] * z * (T::one() - hc * hc);
                        dhp[i] = dh[i] * (T::one() - z);
                    }
                }
                gemm(T::one(), MatRef::new(&dpre_h, batch, h).t(), MatRef::new(&s.ar, batch, k), T::one(), &mut dw);
                gemm(T::one(), MatRef::new(&dpre_h, batch, h), w.view(), T::zero(), &mut d_ar);
                for b in 0..batch {
                    for j in 0..h {
                        let i = b * h + j;
                        let hp = s.a[b * k + j];
                        let d_rh = d_ar[b * k + j];
                        let r = s.r[i];
                        dpre_r[i] = d_rh * hp * r * (T::one() - r);
                        dhp[i] += d_rh * r;
                    }
                }
                gemm(T::one(), MatRef::new(&dpre_z, batch, h).t(), MatRef::new(&s.a, batch, k), T::one(), &mut dwz);
                gemm(T::one(), MatRef::new(&dpre_r, batch, h).t(), MatRef::new(&s.a, batch, k), T::one(), &mut dwr);
                gemm(T::one(), MatRef::new(&dpre_z, batch, h), wz.view(), T::zero(), &mut d_a);
                gemm(T::one(), MatRef::new(&dpre_r, batch, h), wr.view(), T::one(), &mut d_a);

                let mut dx = Vec::with_capacity(batch * d_in);
                for b in 0..batch {
                    for j in 0..h {
                        dhp[b * h + j] += d_a[b * k + j];
                    }
                    for j in h..h + d_in {
                        dx.push(d_a[b * k + j] + d_ar[b * k + j]);
                    }
                }
                d_inputs[t] = dx;
                dh_next = dhp;
            }
            grads.tensor_mut(idx.wz).as_mut_slice().copy_from_slice(&dwz);
            grads.tensor_mut(idx.wr).as_mut_slice().copy_from_slice(&dwr);
            grads.tensor_mut(idx.w).as_mut_slice().copy_from_slice(&dw);
            d_out = d_inputs;
        }

        let d = cfg.embed_dim;
        let dembed = grads.tensor_mut(self.embed);
        for (t, dx) in d_out.iter().enumerate() {
            for b in 0..batch {
                let id = cache.inputs[b * seq_len + t] as usize;
                for (e, &g) in dembed.row_mut(id).iter_mut().zip(&dx[b * d..(b + 1) * d]) {
                    *e += g;
                }
            }
        }
        Ok((loss, grads))
    }

    fn check_cache(&self, cache: &ForwardCache<T>, logits: &Logits<T>, targets: &[TokenId]) -> Result<()> {
        let n = cache.batch * cache.seq_len;
        let stale = cache.config != self.config
            || cache.depth() != cache.seq_len
            || logits.batch != cache.batch
            || logits.seq_len != cache.seq_len
            || logits.values.shape() != (n, self.config.vocab_size);
        if stale {
            return Err(Error::InvalidArgument("forward cache does not match this model and batch".into()));
        }
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!("{} targets for {n} positions", targets.len())));
        }
        if let Some(&id) = targets.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id: id as usize, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Mean NLL over a batch without building gradients.
    pub fn batch_loss(&self, batch: &Batch) -> Result<T> {
        let fwd = self.forward_batch(batch)?;
        loss(&fwd.logits, &batch.targets)
    }
}

/// Mean over all positions of `-log softmax(logits)[target]`, in nats.
pub fn loss<T: Scalar>(logits: &Logits<T>, targets: &[TokenId]) -> Result<T> {
    let (n, v) = logits.values.shape();
    if targets.len() != n || n != logits.batch * logits.seq_len {
        return Err(Error::ShapeMismatch { op: "loss", left: (logits.batch, logits.seq_len), right: (targets.len(), 1) });
    }
    let mut total = T::zero();
    let mut scratch = vec![T::zero(); v];
    for (row_i, row) in logits.values.as_slice().chunks(v).enumerate() {
        let target = targets[row_i] as usize;
        if target >= v {
            return Err(Error::TokenOutOfRange { id: target, vocab: v });
        }
        scratch.copy_from_slice(row);
        let (max, sum) = exp_shifted_in_place(&mut scratch);
        total += max + sum.ln() - row[target];
    }
    Ok(total / T::from_usize(n).expect("count fits in scalar"))
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: T) -> T {
    let norm = grads.global_norm();
    if norm > max_norm && norm > T::zero() {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: usize, d: usize, h: usize, tied: bool) -> GruLmConfig {
        GruLmConfig { vocab_size: v, embed_dim: d, hidden_dim: h, num_layers: 1, tied, bptt_len: 5, init_scale: 0.1 }
    }

    #[test]
    fn zero_init_is_all_zero() {
        let mut c = cfg(10, 4, 4, false);
        c.init_scale = 0.0;
        let m = GruLm::<f64>::init(&c, &mut SeededRng::new(1)).unwrap();
        assert!(m.params().tensors().all(|t| t.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tied_layout_has_no_output_weight() {
        let m = GruLm::<f64>::init(&cfg(10, 4, 4, true), &mut SeededRng::new(1)).unwrap();
        let names: Vec<&str> = m.params().names().collect();
        assert_eq!(names, ["embed", "gru0.wz", "gru0.wr", "gru0.w", "out.b"]);
    }

    #[test]
    fn untied_layout_and_biases() {
        let m = GruLm::<f64>::init(&cfg(10, 3, 4, false), &mut SeededRng::new(2)).unwrap();
        let names: Vec<&str> = m.params().names().collect();
        assert_eq!(names, ["embed", "gru0.wz", "gru0.wr", "gru0.w", "out.w", "out.b"]);
        let wz = m.params().get("gru0.wz").unwrap();
        assert_eq!(wz.shape(), (4, 4 + 3 + 1));
        assert!((0..4).all(|r| wz.get(r, 7) == 0.0));
        assert!(m.params().get("out.b").unwrap().as_slice().iter().all(|&b| b == 0.0));
        assert!(m.params().get("embed").unwrap().as_slice().iter().all(|&v| v.abs() <= 0.1));
    }

    #[test]
    fn init_is_deterministic() {
        let a = GruLm::<f64>::init(&cfg(12, 4, 5, false), &mut SeededRng::new(9)).unwrap();
        let b = GruLm::<f64>::init(&cfg(12, 4, 5, false), &mut SeededRng::new(9)).unwrap();
        assert_eq!(a.params().to_bytes(), b.params().to_bytes());
    }

    #[test]
    fn tied_requires_square() {
        assert!(GruLm::<f64>::init(&cfg(10, 4, 5, true), &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn zero_params_give_zero_state_and_logits() {
        let mut c = cfg(6, 3, 3, false);
        c.init_scale = 0.0;
        let m = GruLm::<f64>::init(&c, &mut SeededRng::new(0)).unwrap();
        let f = m.forward(&[1, 2, 3, 4, 5, 0], 2, 3, None).unwrap();
        assert!(f.logits.values.as_slice().iter().all(|&v| v == 0.0));
        assert!(f.final_hidden[0].as_slice().iter().all(|&v| v == 0.0));
        let z = &f.cache.steps[0][0].z;
        assert!(z.iter().all(|&v| v == 0.5));

        // Non-zero start state halves each step: z = 0.5, candidate = 0.
        let h0 = Tensor2::from_vec(2, 3, vec![1.0, -2.0, 4.0, 8.0, 0.5, 0.0]).unwrap();
        let f = m.forward(&[1, 2, 3, 4, 5, 0], 2, 3, Some(std::slice::from_ref(&h0))).unwrap();
        assert_eq!(f.final_hidden[0], h0.scale(0.125));
    }

    #[test]
    fn scalar_hand_rolled_step() {
        // V=2, d=h=1, one step from h0=0 on token 1.
        let c = GruLmConfig { vocab_size: 2, embed_dim: 1, hidden_dim: 1, num_layers: 1, tied: false, bptt_len: 1, init_scale: 0.1 };
        let mut p = ParamSet::new();
        p.push("embed", Tensor2::from_vec(2, 1, vec![0.3, -0.7]).unwrap()).unwrap();
        p.push("gru0.wz", Tensor2::from_vec(1, 3, vec![0.2, 0.5, 0.1]).unwrap()).unwrap();
        p.push("gru0.wr", Tensor2::from_vec(1, 3, vec![-0.4, 0.9, 0.0]).unwrap()).unwrap();
        p.push("gru0.w", Tensor2::from_vec(1, 3, vec![0.6, 1.5, -0.2]).unwrap()).unwrap();
        p.push("out.w", Tensor2::from_vec(2, 1, vec![2.0, -1.0]).unwrap()).unwrap();
        p.push("out.b", Tensor2::from_vec(2, 1, vec![0.05, 0.0]).unwrap()).unwrap();
        let m = GruLm::from_params(c, p).unwrap();
        let f = m.forward(&[1], 1, 1, None).unwrap();

        let x = -0.7f64;
        let z = 1.0 / (1.0 + (-(0.5 * x + 0.1f64)).exp());
        let hc = (1.5 * x - 0.2f64).tanh();
        let h = z * hc;
        let expect = [2.0 * h + 0.05, -h];
        let got = f.logits.values.as_slice();
        assert!((got[0] - expect[0]).abs() < 1e-15 && (got[1] - expect[1]).abs() < 1e-15);
        assert_eq!(f.final_hidden[0].as_slice(), f.cache.steps[0][0].h.as_slice());
    }

    #[test]
    fn out_of_range_token() {
        let m = GruLm::<f64>::init(&cfg(5, 2, 2, false), &mut SeededRng::new(0)).unwrap();
        assert!(matches!(m.forward(&[5], 1, 1, None), Err(Error::TokenOutOfRange { id: 5, vocab: 5 })));
    }

    #[test]
    fn loss_uniform_and_confident() {
        let uniform = Logits { batch: 1, seq_len: 2, values: Tensor2::<f64>::zeros(2, 4) };
        assert!((loss(&uniform, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((perplexity(loss(&uniform, &[1, 2]).unwrap()) - 4.0).abs() < 1e-9);

        let mut sharp = Tensor2::<f64>::zeros(1, 4);
        sharp.set(0, 2, 100.0);
        let l = loss(&Logits { batch: 1, seq_len: 1, values: sharp }, &[2]).unwrap();
        assert!(l < 1e-40);
        assert!(loss(&uniform, &[0]).is_err());
    }

    #[test]
    fn loss_matches_direct_summation() {
        let mut rng = SeededRng::new(77);
        let values: Vec<f64> = (0..30).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let logits = Logits { batch: 2, seq_len: 3, values: Tensor2::from_vec(6, 5, values.clone()).unwrap() };
        let targets = [4, 0, 2, 2, 1, 3];
        let mut naive = 0.0;
        for (i, &tgt) in targets.iter().enumerate() {
            let row = &values[i * 5..(i + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            naive += -(row[tgt as usize].exp() / z).ln();
        }
        naive /= 6.0;
        assert!((loss(&logits, &targets).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn perplexity_cases() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(50f64.ln()) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn param_count_formula() {
        let (v, d, h) = (10, 4, 4);
        let untied = cfg(v, d, h, false);
        assert_eq!(param_count(&untied), v * d + 3 * h * (h + d + 1) + v * h + v);
        let tied = cfg(v, d, h, true);
        assert_eq!(param_count(&tied), param_count(&untied) - v * h);
        let m = GruLm::<f64>::init(&tied, &mut SeededRng::new(0)).unwrap();
        assert_eq!(m.params().numel(), param_count(&tied));
        assert!(param_count(&cfg(1, 1, 1, false)) > 0);
    }

    #[test]
    fn stale_cache_rejected() {
        let m = GruLm::<f64>::init(&cfg(8, 3, 3, false), &mut SeededRng::new(0)).unwrap();
        let other = GruLm::<f64>::init(&cfg(8, 3, 4, false), &mut SeededRng::new(0)).unwrap();
        let f = other.forward(&[1, 2], 1, 2, None).unwrap();
        assert!(m.backward(&f.cache, &f.logits, &[2, 3]).is_err());
        let f = m.forward(&[1, 2], 1, 2, None).unwrap();
        assert!(m.backward(&f.cache, &f.logits, &[2]).is_err());
    }

    #[test]
    fn doubling_scale_doubles_gradient() {
        let m = GruLm::<f64>::init(&cfg(7, 3, 3, false), &mut SeededRng::new(4)).unwrap();
        let f = m.forward(&[1, 2, 3, 4], 2, 2, None).unwrap();
        let g1 = m.backward(&f.cache, &f.logits, &[2, 3, 4, 5]).unwrap();
        let g2 = m.backward_scaled(&f.cache, &f.logits, &[2, 3, 4, 5], 2.0).unwrap();
        let mut doubled = g1.clone();
        doubled.scale_in_place(2.0);
        assert_eq!(doubled, g2);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut g = ParamSet::new();
        g.push("a", Tensor2::from_vec(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.get("a").unwrap().as_slice(), &[3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 1.0f64).abs() < 1e-15);
    }
}
