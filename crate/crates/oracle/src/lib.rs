//! Reference implementations for checking `fedsim-core`.
//!
//! Everything here is written as plain loops over `f64` straight from the
//! model and aggregation equations. None of it shares code with the
//! optimized crate beyond the [`ParamSet`] container, so agreement between
//! the two is evidence that both are right.

use fedsim_core::{GruLmConfig, ParamSet, Tensor2};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn tensor<'a>(p: &'a ParamSet<f64>, name: &str) -> &'a Tensor2<f64> {
    p.get(name).unwrap_or_else(|| panic!("parameter {name} missing"))
}

fn output_name(cfg: &GruLmConfig) -> &'static str {
    if cfg.tied {
        "embed"
    } else {
        "out.w"
    }
}

fn layer_input(cfg: &GruLmConfig, l: usize) -> usize {
    if l == 0 {
        cfg.embed_dim
    } else {
        cfg.hidden_dim
    }
}

/// `W v` for a row-major matrix.
fn matvec(w: &Tensor2<f64>, v: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|j| (0..w.cols()).map(|c| w.get(j, c) * v[c]).sum()).collect()
}

/// `W^T v`.
fn matvec_t(w: &Tensor2<f64>, v: &[f64]) -> Vec<f64> {
    (0..w.cols()).map(|c| (0..w.rows()).map(|j| w.get(j, c) * v[j]).sum()).collect()
}

fn add_outer(g: &mut Tensor2<f64>, u: &[f64], v: &[f64]) {
    for (j, &uj) in u.iter().enumerate() {
        for (c, &vc) in v.iter().enumerate() {
            g.set(j, c, g.get(j, c) + uj * vc);
        }
    }
}

struct Step {
    hp: Vec<f64>,
    a: Vec<f64>,
    ar: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    hc: Vec<f64>,
}

struct Sequence {
    /// `steps[l][t]`.
    steps: Vec<Vec<Step>>,
    top: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

fn run_sequence(cfg: &GruLmConfig, p: &ParamSet<f64>, tokens: &[u32]) -> Sequence {
    let h = cfg.hidden_dim;
    let embed = tensor(p, "embed");
    let mut state = vec![vec![0.0; h]; cfg.num_layers];
    let mut steps: Vec<Vec<Step>> = (0..cfg.num_layers).map(|_| Vec::new()).collect();
    let mut top = Vec::new();
    for &tok in tokens {
        let mut x = embed.row(tok as usize).to_vec();
        for l in 0..cfg.num_layers {
            let wz = tensor(p, &format!("gru{l}.wz"));
            let wr = tensor(p, &format!("gru{l}.wr"));
            let w = tensor(p, &format!("gru{l}.w"));
            let hp = state[l].clone();
            let a: Vec<f64> = hp.iter().chain(&x).copied().chain([1.0]).collect();
            let z: Vec<f64> = matvec(wz, &a).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = matvec(wr, &a).into_iter().map(sigmoid).collect();
            let ar: Vec<f64> = (0..h).map(|j| r[j] * hp[j]).chain(x.iter().copied()).chain([1.0]).collect();
            let hc: Vec<f64> = matvec(w, &ar).into_iter().map(f64::tanh).collect();
            let hn: Vec<f64> = (0..h).map(|j| (1.0 - z[j]) * hp[j] + z[j] * hc[j]).collect();
            state[l] = hn.clone();
            steps[l].push(Step { hp, a, ar, z, r, hc });
            x = hn;
        }
        top.push(x);
    }
    let out_w = tensor(p, output_name(cfg));
    let out_b = tensor(p, "out.b");
    let logits = top
        .iter()
        .map(|hv| matvec(out_w, hv).into_iter().enumerate().map(|(v, s)| s + out_b.get(v, 0)).collect())
        .collect();
    Sequence { steps, top, logits }
}

fn nll(logits: &[f64], target: u32) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

/// Logits for a `batch x seq_len` block of token ids (row-major), one row
/// per position in `b * seq_len + t` order. Hidden state starts at zero.
pub fn logits(cfg: &GruLmConfig, p: &ParamSet<f64>, inputs: &[u32], batch: usize, seq_len: usize) -> Vec<Vec<f64>> {
    assert_eq!(inputs.len(), batch * seq_len);
    (0..batch).flat_map(|b| run_sequence(cfg, p, &inputs[b * seq_len..(b + 1) * seq_len]).logits).collect()
}

/// Mean negative log-likelihood over every position.
pub fn loss(cfg: &GruLmConfig, p: &ParamSet<f64>, inputs: &[u32], targets: &[u32], batch: usize, seq_len: usize) -> f64 {
    let rows = logits(cfg, p, inputs, batch, seq_len);
    rows.iter().zip(targets).map(|(row, &t)| nll(row, t)).sum::<f64>() / rows.len() as f64
}

/// Mean NLL and its exact gradient by hand-written backpropagation through
/// time, one sequence and one scalar at a time.
pub fn loss_and_gradient(
    cfg: &GruLmConfig,
    p: &ParamSet<f64>,
    inputs: &[u32],
    targets: &[u32],
    batch: usize,
    seq_len: usize,
) -> (f64, ParamSet<f64>) {
    let h = cfg.hidden_dim;
    let n = (batch * seq_len) as f64;
    let out_name = output_name(cfg);
    let mut g = p.zeros_like();
    let mut total = 0.0;
    for b in 0..batch {
        let toks = &inputs[b * seq_len..(b + 1) * seq_len];
        let tgts = &targets[b * seq_len..(b + 1) * seq_len];
        let seq = run_sequence(cfg, p, toks);

        // Output head.
        let mut dtop = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let row = &seq.logits[t];
            total += nll(row, tgts[t]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let mut dl: Vec<f64> = row.iter().map(|&x| (x - max).exp() / z / n).collect();
            dl[tgts[t] as usize] -= 1.0 / n;
            dtop.push(matvec_t(tensor(p, out_name), &dl));
            add_outer(g.get_mut(out_name).expect("output weight"), &dl, &seq.top[t]);
            let db = g.get_mut("out.b").expect("output bias");
            for (v, d) in dl.iter().enumerate() {
                db.set(v, 0, db.get(v, 0) + d);
            }
        }

        // Recurrence, newest step first; within a step, top layer first.
        let mut carry = vec![vec![0.0; h]; cfg.num_layers];
        for t in (0..seq_len).rev() {
            let mut from_above = dtop[t].clone();
            for l in (0..cfg.num_layers).rev() {
                let d_in = layer_input(cfg, l);
                let s = &seq.steps[l][t];
                let dh: Vec<f64> = (0..h).map(|j| from_above[j] + carry[l][j]).collect();
                let mut dhp: Vec<f64> = (0..h).map(|j| dh[j] * (1.0 - s.z[j])).collect();
                let dpre_z: Vec<f64> = (0..h).map(|j| dh[j] * (s.hc[j] - s.hp[j]) * s.z[j] * (1.0 - s.z[j])).collect();
                let dpre_hc: Vec<f64> = (0..h).map(|j| dh[j] * s.z[j] * (1.0 - s.hc[j] * s.hc[j])).collect();

                let w = tensor(p, &format!("gru{l}.w"));
                let dar = matvec_t(w, &dpre_hc);
                add_outer(g.get_mut(&format!("gru{l}.w")).expect("gate"), &dpre_hc, &s.ar);
                let dpre_r: Vec<f64> = (0..h).map(|j| dar[j] * s.hp[j] * s.r[j] * (1.0 - s.r[j])).collect();
                for j in 0..h {
                    dhp[j] += dar[j] * s.r[j];
                }

                let wz = tensor(p, &format!("gru{l}.wz"));
                let wr = tensor(p, &format!("gru{l}.wr"));
                let da_z = matvec_t(wz, &dpre_z);
                let da_r = matvec_t(wr, &dpre_r);
                add_outer(g.get_mut(&format!("gru{l}.wz")).expect("gate"), &dpre_z, &s.a);
                add_outer(g.get_mut(&format!("gru{l}.wr")).expect("gate"), &dpre_r, &s.a);
                for j in 0..h {
                    dhp[j] += da_z[j] + da_r[j];
                }
                from_above = (0..d_in).map(|c| da_z[h + c] + da_r[h + c] + dar[h + c]).collect();
                carry[l] = dhp;
            }
            let de = g.get_mut("embed").expect("embedding");
            let row = toks[t] as usize;
            for (c, d) in from_above.iter().enumerate() {
                de.set(row, c, de.get(row, c) + d);
            }
        }
    }
    (total / n, g)
}

/// Central differences of `f` with respect to every scalar of `p`.
pub fn finite_difference(p: &ParamSet<f64>, eps: f64, f: impl Fn(&ParamSet<f64>) -> f64) -> ParamSet<f64> {
    let mut out = p.zeros_like();
    let mut probe = p.clone();
    for i in 0..p.len() {
        for j in 0..p.tensor(i).len() {
            let orig = p.tensor(i).as_slice()[j];
            probe.tensor_mut(i).as_mut_slice()[j] = orig + eps;
            let up = f(&probe);
            probe.tensor_mut(i).as_mut_slice()[j] = orig - eps;
            let down = f(&probe);
            probe.tensor_mut(i).as_mut_slice()[j] = orig;
            out.tensor_mut(i).as_mut_slice()[j] = (up - down) / (2.0 * eps);
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Input/target windows exactly as a PTB-style language-model loader lays
/// them out: `batch` rows of `len / batch` tokens, cut into `bptt`-long
/// windows with targets one token ahead.
pub fn windows(shard: &[u32], batch: usize, bptt: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    let row_len = shard.len() / batch;
    let count = if row_len == 0 { 0 } else { (row_len - 1) / bptt };
    (0..count)
        .map(|i| {
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for b in 0..batch {
                for t in 0..bptt {
                    let pos = b * row_len + i * bptt + t;
                    inputs.push(shard[pos]);
                    targets.push(shard[pos + 1]);
                }
            }
            (inputs, targets)
        })
        .collect()
}

/// Local training settings for [`train_client`].
#[derive(Clone, Debug)]
pub struct Sgd {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
}

/// Momentum SGD with global-norm clipping, velocity starting at zero.
pub fn train_client(cfg: &GruLmConfig, start: &ParamSet<f64>, shard: &[u32], sgd: &Sgd) -> ParamSet<f64> {
    let mut p = start.clone();
    let mut vel = start.zeros_like();
    let windows = windows(shard, sgd.batch_size, cfg.bptt_len);
    for _ in 0..sgd.epochs {
        for (inputs, targets) in &windows {
            let (_, mut g) = loss_and_gradient(cfg, &p, inputs, targets, sgd.batch_size, cfg.bptt_len);
            let norm = g.tensors().flat_map(|t| t.as_slice()).map(|x| x * x).sum::<f64>().sqrt();
            if norm > sgd.clip_norm {
                let s = sgd.clip_norm / norm;
                g.tensors_mut().for_each(|t| t.as_mut_slice().iter_mut().for_each(|x| *x *= s));
            }
            for i in 0..p.len() {
                for j in 0..p.tensor(i).len() {
                    let v = sgd.momentum * vel.tensor(i).as_slice()[j] + g.tensor(i).as_slice()[j];
                    vel.tensor_mut(i).as_mut_slice()[j] = v;
                    p.tensor_mut(i).as_mut_slice()[j] -= sgd.learning_rate * v;
                }
            }
        }
    }
    p
}

/// `sum_k weights[k] * clients[k]`, entry by entry.
pub fn weighted_sum(clients: &[&ParamSet<f64>], weights: &[f64]) -> ParamSet<f64> {
    let mut out = clients[0].zeros_like();
    for i in 0..out.len() {
        for j in 0..out.tensor(i).len() {
            out.tensor_mut(i).as_mut_slice()[j] = clients.iter().zip(weights).map(|(c, w)| w * c.tensor(i).as_slice()[j]).sum();
        }
    }
    out
}

/// Per named tensor: distance scores and their softmax.
pub fn attention(server: &ParamSet<f64>, clients: &[&ParamSet<f64>], p: u32) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..server.len())
        .map(|i| {
            let scores: Vec<f64> = clients
                .iter()
                .map(|c| {
                    let diffs = server.tensor(i).as_slice().iter().zip(c.tensor(i).as_slice()).map(|(a, b)| (a - b).abs());
                    match p {
                        1 => diffs.sum(),
                        2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
                        _ => panic!("unsupported norm order {p}"),
                    }
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let alphas = scores.iter().map(|s| (s - max).exp() / z).collect();
            (scores, alphas)
        })
        .collect()
}

/// `server - eps * sum_k alpha_k (server - client_k)`, layer by layer.
pub fn attentive_step(server: &ParamSet<f64>, clients: &[&ParamSet<f64>], eps: f64, p: u32) -> ParamSet<f64> {
    let att = attention(server, clients, p);
    let mut out = server.clone();
    for (i, (_, alphas)) in att.iter().enumerate() {
        for j in 0..server.tensor(i).len() {
            let theta = server.tensor(i).as_slice()[j];
            let pull: f64 = clients.iter().zip(alphas).map(|(c, a)| a * (theta - c.tensor(i).as_slice()[j])).sum();
            out.tensor_mut(i).as_mut_slice()[j] = theta - eps * pull;
        }
    }
    out
}

/// 1-based index of the first value strictly below `threshold`.
pub fn first_below(values: &[Option<f64>], threshold: f64) -> Option<usize> {
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = v {
            if *v < threshold {
                return Some(i + 1);
            }
        }
    }
    None
}

/// Largest absolute entrywise difference between two same-layout sets.
pub fn max_abs_diff(a: &ParamSet<f64>, b: &ParamSet<f64>) -> f64 {
    a.tensors()
        .zip(b.tensors())
        .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}
