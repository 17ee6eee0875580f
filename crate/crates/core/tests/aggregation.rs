mod common;

use common::random_set;
use fedsim_core::aggregate::AggregatorConfig;
use fedsim_core::{aggregate, attention_scores, fedatt_update, fedavg_update, softmax, ClientUpdate, NormOrder, ParamSet, SeededRng, Strategy, Tensor2};
use fedsim_oracle as oracle;
use proptest::prelude::*;

fn shapes(rng: &mut SeededRng) -> Vec<(usize, usize)> {
    (0..1 + rng.below(4)).map(|_| (1 + rng.below(5), 1 + rng.below(4))).collect()
}

fn updates(clients: &[ParamSet<f64>], n: &[usize]) -> Vec<ClientUpdate<f64>> {
    clients
        .iter()
        .zip(n)
        .enumerate()
        .map(|(k, (p, &n))| ClientUpdate { client_id: k, params: p.clone(), n_samples: n, epoch_losses: vec![] })
        .collect()
}

/// Clients whose offset from the server is a reshuffle of one vector per
/// layer, so every client sits at the same distance.
fn equidistant(server: &ParamSet<f64>, m: usize, rng: &mut SeededRng) -> Vec<ParamSet<f64>> {
    let offsets: Vec<Vec<f64>> = server.tensors().map(|t| (0..t.len()).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
    (0..m)
        .map(|_| {
            let mut c = server.clone();
            for (t, off) in c.tensors_mut().zip(&offsets) {
                let mut o = off.clone();
                rng.shuffle(&mut o);
                for (v, d) in t.as_mut_slice().iter_mut().zip(o) {
                    *v += d;
                }
            }
            c
        })
        .collect()
}

#[test]
fn scores_and_weights_match_reference() {
    let mut rng = SeededRng::new(41);
    for _ in 0..100 {
        let sh = shapes(&mut rng);
        let server = random_set(&sh, 2.0, &mut rng);
        let clients: Vec<_> = (0..1 + rng.below(6)).map(|_| random_set(&sh, 2.0, &mut rng)).collect();
        let refs: Vec<&ParamSet<f64>> = clients.iter().collect();
        for (order, p) in [(NormOrder::L1, 1), (NormOrder::L2, 2)] {
            let att = attention_scores(&server, &clients, order).unwrap();
            for (layer, (scores, alphas)) in att.layers.iter().zip(oracle::attention(&server, &refs, p)) {
                for (a, b) in layer.scores.iter().zip(&scores) {
                    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                }
                for (a, b) in layer.alphas.iter().zip(&alphas) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            let eps = rng.uniform(0.1, 1.5);
            let got = fedatt_update(&server, &clients, &att, eps).unwrap();
            let want = oracle::attentive_step(&server, &refs, eps, p);
            assert!(oracle::max_abs_diff(&got, &want) < 1e-12);
        }
    }
}

#[test]
fn known_weights() {
    let a = softmax(&[0.0, 3f64.ln()]).unwrap();
    assert!((a[0] - 0.25).abs() < 1e-12 && (a[1] - 0.75).abs() < 1e-12);

    // Scalar layer: distances 0 and ln 3 from the server.
    let server = ParamSet::from_entries([("w".to_string(), Tensor2::from_vec(1, 1, vec![0.5]).unwrap())]).unwrap();
    let near = server.clone();
    let mut far = server.clone();
    far.tensor_mut(0).as_mut_slice()[0] += 3f64.ln();
    let att = attention_scores(&server, &[near, far], NormOrder::L2).unwrap();
    let alphas = &att.layers[0].alphas;
    assert!((alphas[0] - 0.25).abs() < 1e-12 && (alphas[1] - 0.75).abs() < 1e-12);
}

#[test]
fn weighted_average_known_value() {
    let set = |v: f64| ParamSet::from_entries([("w".to_string(), Tensor2::from_vec(1, 1, vec![v]).unwrap())]).unwrap();
    let ups = updates(&[set(0.0), set(4.0)], &[1, 3]);
    let out = fedavg_update(&set(100.0), &ups).unwrap();
    assert_eq!(out.tensor(0).as_slice(), &[3.0]);
    let single = fedavg_update(&set(100.0), &ups[1..]).unwrap();
    assert_eq!(single, set(4.0));
    assert!(fedavg_update(&set(0.0), &updates(&[set(1.0)], &[0])).is_err());
}

#[test]
fn fedavg_matches_reference_and_ignores_arrival_order() {
    let mut rng = SeededRng::new(42);
    for _ in 0..50 {
        let sh = shapes(&mut rng);
        let server = random_set(&sh, 1.0, &mut rng);
        let m = 1 + rng.below(7);
        let clients: Vec<_> = (0..m).map(|_| random_set(&sh, 1.0, &mut rng)).collect();
        let n: Vec<usize> = (0..m).map(|_| 1 + rng.below(500)).collect();
        let total: usize = n.iter().sum();
        let ups = updates(&clients, &n);
        let got = fedavg_update(&server, &ups).unwrap();
        let w: Vec<f64> = n.iter().map(|&x| x as f64 / total as f64).collect();
        let want = oracle::weighted_sum(&clients.iter().collect::<Vec<_>>(), &w);
        assert!(oracle::max_abs_diff(&got, &want) < 1e-12);

        let mut shuffled = ups.clone();
        rng.shuffle(&mut shuffled);
        for strategy in [Strategy::FedAvg, Strategy::FedAtt] {
            let cfg = AggregatorConfig { strategy, ..AggregatorConfig::default() };
            assert_eq!(aggregate(&server, &ups, &cfg).unwrap(), aggregate(&server, &shuffled, &cfg).unwrap());
        }
    }
}

#[test]
fn equidistant_clients_reduce_to_plain_mean() {
    let mut rng = SeededRng::new(43);
    for _ in 0..100 {
        let sh = shapes(&mut rng);
        let server = random_set(&sh, 3.0, &mut rng);
        let m = 1 + rng.below(6);
        let clients = equidistant(&server, m, &mut rng);
        let att = attention_scores(&server, &clients, NormOrder::L2).unwrap();
        for layer in &att.layers {
            for a in &layer.alphas {
                assert!((a - 1.0 / m as f64).abs() < 1e-12);
            }
        }
        let got = fedatt_update(&server, &clients, &att, 1.0).unwrap();
        let mean = fedavg_update(&server, &updates(&clients, &vec![7; m])).unwrap();
        assert!(oracle::max_abs_diff(&got, &mean) < 1e-12);
    }
}

#[test]
fn fixed_point_is_exact() {
    let mut rng = SeededRng::new(44);
    for _ in 0..50 {
        let server = random_set(&shapes(&mut rng), 10.0, &mut rng);
        let clients = vec![server.clone(); 1 + rng.below(5)];
        let att = attention_scores(&server, &clients, NormOrder::L2).unwrap();
        assert!(att.layers.iter().all(|l| l.scores.iter().all(|&s| s == 0.0)));
        for eps in [0.5, 1.0, 1.5, 7.0] {
            assert_eq!(fedatt_update(&server, &clients, &att, eps).unwrap(), server);
        }
    }
}

fn distance(a: &Tensor2<f64>, b: &[f64]) -> f64 {
    a.as_slice().iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_lie_on_the_simplex(seed in any::<u64>(), m in 1usize..8, scale in 0.01f64..50.0) {
        let mut rng = SeededRng::new(seed);
        let sh = shapes(&mut rng);
        let server = random_set(&sh, scale, &mut rng);
        let clients: Vec<_> = (0..m).map(|_| random_set(&sh, scale, &mut rng)).collect();
        let att = attention_scores(&server, &clients, NormOrder::L2).unwrap();
        for layer in &att.layers {
            prop_assert!((layer.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(layer.alphas.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn permuting_clients_permutes_weights(seed in any::<u64>(), m in 2usize..7) {
        let mut rng = SeededRng::new(seed);
        let sh = shapes(&mut rng);
        let server = random_set(&sh, 1.0, &mut rng);
        let clients: Vec<_> = (0..m).map(|_| random_set(&sh, 1.0, &mut rng)).collect();
        let mut order: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut order);
        let permuted: Vec<_> = order.iter().map(|&i| clients[i].clone()).collect();
        let a = attention_scores(&server, &clients, NormOrder::L2).unwrap();
        let b = attention_scores(&server, &permuted, NormOrder::L2).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (pos, &i) in order.iter().enumerate() {
                // The softmax denominator is summed in list order.
                prop_assert!((la.alphas[i] - lb.alphas[pos]).abs() < 1e-15);
            }
        }
        let ua = fedatt_update(&server, &clients, &a, 1.0).unwrap();
        let ub = fedatt_update(&server, &permuted, &b, 1.0).unwrap();
        prop_assert!(ua.max_abs_diff(&ub).unwrap() < 1e-14);
    }

    #[test]
    fn step_contracts_toward_weighted_mean(seed in any::<u64>(), m in 1usize..6, eps in 0.01f64..=1.0) {
        let mut rng = SeededRng::new(seed);
        let sh = shapes(&mut rng);
        let server = random_set(&sh, 2.0, &mut rng);
        let clients: Vec<_> = (0..m).map(|_| random_set(&sh, 2.0, &mut rng)).collect();
        let att = attention_scores(&server, &clients, NormOrder::L2).unwrap();
        let next = fedatt_update(&server, &clients, &att, eps).unwrap();
        for (i, layer) in att.layers.iter().enumerate() {
            let center: Vec<f64> = (0..server.tensor(i).len())
                .map(|j| clients.iter().zip(&layer.alphas).map(|(c, a)| a * c.tensor(i).as_slice()[j]).sum())
                .collect();
            let before = distance(server.tensor(i), &center);
            let after = distance(next.tensor(i), &center);
            prop_assert!(after <= before * (1.0 + 1e-12) + 1e-12);
            prop_assert!((after - (1.0 - eps) * before).abs() <= 1e-9 * before.max(1.0));
        }
    }

    #[test]
    fn single_client_gets_full_weight(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let sh = shapes(&mut rng);
        let server = random_set(&sh, 1.0, &mut rng);
        let client = random_set(&sh, 1.0, &mut rng);
        let att = attention_scores(&server, std::slice::from_ref(&client), NormOrder::L1).unwrap();
        prop_assert!(att.layers.iter().all(|l| l.alphas == vec![1.0]));
        let next = fedatt_update(&server, std::slice::from_ref(&client), &att, 1.0).unwrap();
        prop_assert!(next.max_abs_diff(&client).unwrap() < 1e-15);
    }
}
