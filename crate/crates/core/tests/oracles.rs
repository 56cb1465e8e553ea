//! Independent scalar-loop re-implementations checked against the library.

use csicl_core::attention::{
    adapter_init_prefix, mhsa, mhsa_with_prefixes, AttentionBase, ParallelAdapter, PrefixBlock,
    PrefixStack,
};
use csicl_core::distill::{logits_loss, value_relation_loss};
use csicl_core::encoding::{EncodingConfig, GaussianRangeEncoding};
use csicl_core::mlp::average_activations;
use csicl_core::numeric::{randn, softplus, ParamStore, Tensor2, SIGMA_FLOOR};
use csicl_core::trainer::average_accuracy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x0AC1E + seed)
}

fn random_encoding(
    r: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    g: usize,
) -> (ParamStore, GaussianRangeEncoding) {
    let mut store = ParamStore::new();
    let enc =
        GaussianRangeEncoding::init(&mut store, r, n, d, EncodingConfig { ranges: g, sigma: 2.0 })
            .unwrap();
    store.get_mut(enc.mu).value = Tensor2::from_vec(
        1,
        g,
        (0..g).map(|_| r.gen_range(0.0..n as f64 + 1.0)).collect(),
    )
    .unwrap();
    store.get_mut(enc.raw_sigma).value = randn(r, 1, g, 1.0);
    (store, enc)
}

fn oracle_logits(mu: &[f64], sigma: &[f64], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; mu.len()]; n];
    for (i, row) in out.iter_mut().enumerate() {
        let pos = (i + 1) as f64;
        for j in 0..mu.len() {
            let z = (pos - mu[j]) / sigma[j];
            row[j] = -0.5 * z * z - sigma[j].ln();
        }
    }
    out
}

fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut total = 0.0;
    let mut e = Vec::with_capacity(row.len());
    for &v in row {
        let x = (v - m).exp();
        total += x;
        e.push(x);
    }
    e.into_iter().map(|x| x / total).collect()
}

fn sigmas_of(store: &ParamStore, enc: &GaussianRangeEncoding) -> Vec<f64> {
    store
        .value(enc.raw_sigma)
        .data()
        .iter()
        .map(|&r| softplus(r) + SIGMA_FLOOR)
        .collect()
}

#[test]
fn range_logits_match_per_cell_evaluation() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (store, enc) = random_encoding(&mut r, 5, 4, 3);
        let mu = store.value(enc.mu).data().to_vec();
        let expected = oracle_logits(&mu, &sigmas_of(&store, &enc), 5);
        let b = enc.compute_b(&store, 5).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert!((b.get(i, j) - expected[i][j]).abs() < 1e-9, "seed {seed} ({i},{j})");
            }
        }
    }
}

#[test]
fn range_weights_match_row_softmax() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (store, enc) = random_encoding(&mut r, 7, 4, 4);
        let mu = store.value(enc.mu).data().to_vec();
        let logits = oracle_logits(&mu, &sigmas_of(&store, &enc), 7);
        let beta = enc.compute_beta(&store, 7).unwrap();
        for (i, row) in logits.iter().enumerate() {
            let s = oracle_softmax(row);
            let sum: f64 = beta.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert!((beta.get(i, j) - s[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encode_matches_two_step_composition() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (store, enc) = random_encoding(&mut r, 6, 5, 3);
        let x = randn(&mut r, 6, 5, 1.0);
        let beta = enc.compute_beta(&store, 6).unwrap();
        let table = store.value(enc.table);
        let out = enc.encode(&store, &x).unwrap();
        for i in 0..6 {
            for c in 0..5 {
                let mut v = x.get(i, c);
                for j in 0..3 {
                    v += beta.get(i, j) * table.get(j, c);
                }
                assert!((out.get(i, c) - v).abs() < 1e-12);
            }
        }
    }
}

/// Scalar attention over explicit key and value rows for one head.
fn oracle_head(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let hd = q.len() as f64;
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / hd.sqrt())
        .collect();
    let w = oracle_softmax(&scores);
    let mut out = vec![0.0; values[0].len()];
    for (wi, v) in w.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi * x;
        }
    }
    out
}

fn project(x: &[f64], w: &Tensor2) -> Vec<f64> {
    (0..w.cols())
        .map(|c| (0..x.len()).map(|i| x[i] * w.get(i, c)).sum())
        .collect()
}

fn rows_of(t: &Tensor2) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Full multi-head attention where `prefix[h]` holds the (key rows, value
/// rows) placed in front of head `h`'s own keys and values.
fn oracle_mhsa(
    store: &ParamStore,
    base: &AttentionBase,
    prefix: &[(Vec<Vec<f64>>, Vec<Vec<f64>>)],
    x: &Tensor2,
) -> Tensor2 {
    let n = x.rows();
    let mut cat = vec![Vec::with_capacity(base.dim); n];
    for h in 0..base.heads {
        let wq = store.value(base.query[h]);
        let wk = store.value(base.key[h]);
        let wv = store.value(base.value[h]);
        let mut keys = Vec::new();
        let mut values = Vec::new();
        if let Some((pk, pv)) = prefix.get(h) {
            keys.extend(pk.iter().cloned());
            values.extend(pv.iter().cloned());
        }
        for r in 0..n {
            keys.push(project(x.row(r), wk));
            values.push(project(x.row(r), wv));
        }
        for (r, row) in cat.iter_mut().enumerate() {
            let q = project(x.row(r), wq);
            row.extend(oracle_head(&q, &keys, &values));
        }
    }
    let wo = store.value(base.output);
    let rows: Vec<Vec<f64>> = cat.iter().map(|row| project(row, wo)).collect();
    Tensor2::from_rows(&rows)
}

#[test]
fn mhsa_matches_scalar_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let base = AttentionBase::init(&mut store, &mut r, 8, 2).unwrap();
        let x = randn(&mut r, 4, 8, 1.0);
        let out = mhsa(&store, &base, &x).unwrap();
        let expected = oracle_mhsa(&store, &base, &[], &x);
        assert!(out.max_abs_diff(&expected) < 1e-5, "seed {seed}");
    }
}

#[test]
fn zero_prefix_renormalizes_base_attention() {
    let mut r = rng(0);
    let mut store = ParamStore::new();
    let base = AttentionBase::init(&mut store, &mut r, 6, 2).unwrap();
    let p = 3;
    let block = PrefixBlock::from_values(
        &mut store,
        1,
        vec![Tensor2::zeros(p, 3); 2],
        vec![Tensor2::zeros(p, 3); 2],
    )
    .unwrap();
    let x = randn(&mut r, 5, 6, 1.0);
    let out = mhsa_with_prefixes(&store, &base, &[&block], &x).unwrap();

    // Zero keys score 0, so each row's base weights are rescaled by
    // sum(exp(s)) / (p + sum(exp(s))) and the zero values add nothing.
    let hd = 3.0f64;
    let mut cat = vec![Vec::new(); 5];
    for h in 0..2 {
        let wq = store.value(base.query[h]);
        let wk = store.value(base.key[h]);
        let wv = store.value(base.value[h]);
        for (i, row) in cat.iter_mut().enumerate() {
            let q = project(x.row(i), wq);
            let e: Vec<f64> = (0..5)
                .map(|j| {
                    let k = project(x.row(j), wk);
                    (q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / hd.sqrt()).exp()
                })
                .collect();
            let z: f64 = e.iter().sum::<f64>() + p as f64;
            let mut o = vec![0.0; 3];
            for j in 0..5 {
                let v = project(x.row(j), wv);
                for c in 0..3 {
                    o[c] += e[j] / z * v[c];
                }
            }
            row.extend(o);
        }
    }
    let wo = store.value(base.output);
    let expected = Tensor2::from_rows(&cat.iter().map(|row| project(row, wo)).collect::<Vec<_>>());
    assert!(out.max_abs_diff(&expected) < 1e-9);
}

#[test]
fn stacked_prefixes_follow_newest_first_order() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let base = AttentionBase::init(&mut store, &mut r, 8, 2).unwrap();
        let mut stack = PrefixStack::new();
        let old = PrefixBlock::from_values(
            &mut store,
            1,
            vec![randn(&mut r, 2, 4, 1.0), randn(&mut r, 2, 4, 1.0)],
            vec![randn(&mut r, 2, 4, 1.0), randn(&mut r, 2, 4, 1.0)],
        )
        .unwrap();
        stack.push(old).unwrap();
        stack.freeze_and_accumulate(&mut store, 1).unwrap();
        let new = PrefixBlock::from_values(
            &mut store,
            2,
            vec![randn(&mut r, 2, 4, 1.0), randn(&mut r, 2, 4, 1.0)],
            vec![randn(&mut r, 2, 4, 1.0), randn(&mut r, 2, 4, 1.0)],
        )
        .unwrap();
        stack.push(new).unwrap();
        assert_eq!(stack.blocks()[0].task, 2);
        assert_eq!(stack.total_rows(&store), 4);

        let x = randn(&mut r, 5, 8, 1.0);
        let out = mhsa_with_prefixes(&store, &base, &stack.refs(), &x).unwrap();
        let (b1, b2) = (&stack.blocks()[1], &stack.blocks()[0]);
        let prefix: Vec<_> = (0..2)
            .map(|h| {
                let mut k = rows_of(store.value(b2.keys[h]));
                k.extend(rows_of(store.value(b1.keys[h])));
                let mut v = rows_of(store.value(b2.values[h]));
                v.extend(rows_of(store.value(b1.values[h])));
                (k, v)
            })
            .collect();
        let expected = oracle_mhsa(&store, &base, &prefix, &x);
        assert!(out.max_abs_diff(&expected) < 1e-5, "seed {seed}");

        // the order matters: keys and values are paired row by row, so
        // swapping whole blocks of keys alone changes the output
        let swapped: Vec<_> = (0..2)
            .map(|h| {
                let mut k = rows_of(store.value(b1.keys[h]));
                k.extend(rows_of(store.value(b2.keys[h])));
                (k, prefix[h].1.clone())
            })
            .collect();
        let wrong = oracle_mhsa(&store, &base, &swapped, &x);
        assert!(out.max_abs_diff(&wrong) > 1e-6);
    }
}

#[test]
fn adapter_prefix_matches_recomputation() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let adapter = ParallelAdapter::init(&mut r, 6, 2).unwrap();
        let batch: Vec<Tensor2> = (0..3).map(|_| randn(&mut r, 7, 6, 1.0)).collect();
        let p = 3;
        let heads = adapter_init_prefix(&adapter, &batch, p, 2).unwrap();

        let mut mean = vec![vec![0.0; 6]; 7];
        for x in &batch {
            for (i, row) in mean.iter_mut().enumerate() {
                let hidden: Vec<f64> = project(x.row(i), &adapter.down)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                for (m, v) in row.iter_mut().zip(project(&hidden, &adapter.up)) {
                    *m += v / batch.len() as f64;
                }
            }
        }
        for k in 0..p {
            let (lo, hi) = (k * 7 / p, (k + 1) * 7 / p);
            for c in 0..6 {
                let avg = (lo..hi).map(|i| mean[i][c]).sum::<f64>() / (hi - lo) as f64;
                let got = heads[c / 3].get(k, c % 3);
                assert!((got - avg).abs() < 1e-12, "seed {seed}");
            }
        }
    }
}

#[test]
fn average_activations_match_direct_mean() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let batch: Vec<Tensor2> = (0..4).map(|_| randn(&mut r, 5, 3, 1.0)).collect();
        let got = average_activations(&batch).unwrap();
        for c in 0..3 {
            let mut total = 0.0;
            for s in &batch {
                for t in 0..5 {
                    total += s.get(t, c);
                }
            }
            assert!((got[c] - total / 20.0).abs() < 1e-12);
        }
    }
}

fn oracle_mse(a: &Tensor2, b: &Tensor2) -> f64 {
    let mut total = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let d = a.get(r, c) - b.get(r, c);
            total += d * d;
        }
    }
    total / a.len() as f64
}

#[test]
fn value_and_logit_losses_match_scalar_mse() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let t: Vec<Tensor2> = (0..2).map(|_| randn(&mut r, 5, 3, 1.0)).collect();
        let s: Vec<Tensor2> = (0..2).map(|_| randn(&mut r, 5, 3, 1.0)).collect();
        let expected = (oracle_mse(&t[0], &s[0]) + oracle_mse(&t[1], &s[1])) / 2.0;
        assert!((value_relation_loss(&t, &s).unwrap() - expected).abs() < 1e-12);

        let tl = randn(&mut r, 4, 6, 1.0);
        let sl = randn(&mut r, 4, 6, 1.0);
        assert!((logits_loss(&tl, &sl).unwrap() - oracle_mse(&tl, &sl)).abs() < 1e-12);
        assert_eq!(logits_loss(&tl, &tl).unwrap(), 0.0);
    }
}

#[test]
fn average_accuracy_matches_mean() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let len = r.gen_range(1..10);
        let acc: Vec<f64> = (0..len).map(|_| r.gen::<f64>()).collect();
        let mut total = 0.0;
        for a in &acc {
            total += a;
        }
        let got = average_accuracy(&acc).unwrap();
        assert!((got - total / len as f64).abs() < 1e-12);
    }
    assert!((average_accuracy(&[0.9, 0.7, 0.5]).unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(average_accuracy(&[0.42]).unwrap(), 0.42);
}
