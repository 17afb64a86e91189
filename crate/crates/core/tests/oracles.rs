mod common;

use std::collections::HashSet;

use common::paths::{audit_masks, one_hot_chain, random_supernet, small_config};
use common::{
    brute_metrics, flat, mm, quadratic_attention, random_batch, random_tensor, reference_block, reference_embed,
    reference_scores, rel_err, tally_block_flops, to_m,
};
use dnsrec::autodiff::Tape;
use dnsrec::compact::build_compact_model;
use dnsrec::flops::{block_flops, block_flops_breakdown, BlockShape, FlopsTable};
use dnsrec::metrics::{metrics_at_k, target_rank, MetricsReport};
use dnsrec::model::{
    block_forward, ce_loss, embed, gate_forward, linear_attention, score_items, BlockMasks, BlockParams, EmbeddingParams,
    GateParams,
};
use dnsrec::params::{Graph, ParamStore};
use dnsrec::rng::{stream, Stream};
use dnsrec::search::ArchChoice;
use dnsrec::supernet::{make_masks, SupernetConfig};
use dnsrec::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_vs_quadratic(rng: &mut ChaCha8Rng, n: usize, d: usize) -> f64 {
    let (q, k, v) = (random_tensor(rng, &[n, d], 1.0), random_tensor(rng, &[n, d], 1.0), random_tensor(rng, &[n, d], 1.0));
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = linear_attention(&mut g, qv, kv, vv).unwrap();
    let oracle = quadratic_attention(&to_m(&q), &to_m(&k), &to_m(&v), d as f64);
    rel_err(g.value(out).data(), &flat(&oracle))
}

#[test]
fn linear_attention_matches_quadratic_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let err = linear_vs_quadratic(&mut rng, 32, 8);
        assert!(err <= 1e-6, "{err:e}");
    }
    let err = linear_vs_quadratic(&mut rng, 4, 2);
    assert!(err <= 1e-12, "{err:e}");
}

#[test]
fn attention_of_zero_values_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let q = g.constant(random_tensor(&mut rng, &[6, 4], 1.0));
    let k = g.constant(random_tensor(&mut rng, &[6, 4], 1.0));
    let v = g.constant(Tensor::zeros(&[6, 4]));
    let out = linear_attention(&mut g, q, k, v).unwrap();
    assert!(g.value(out).data().iter().all(|&x| x == 0.0));
}

#[test]
fn embedding_rows_are_table_sums() {
    let mut rng = stream(2, Stream::Init);
    let mut store = ParamStore::new();
    let emb = EmbeddingParams::init(&mut store, "", 9, 4, 3, &mut rng);
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(3), 9, 4, 5);
    let mut g = Graph::eval(&store);
    let (e, _) = embed(&mut g, &emb, &batch).unwrap();
    let (oracle, _) = reference_embed(&store, emb.items, emb.positions, &batch);
    assert_eq!(g.value(e).data(), flat(&oracle).as_slice());
}

#[test]
fn scores_match_item_loop() {
    let mut rng = stream(4, Stream::Init);
    let mut store = ParamStore::new();
    let emb = EmbeddingParams::init(&mut store, "", 5, 3, 4, &mut rng);
    let y = random_tensor(&mut rng, &[6, 4], 1.0);
    let mut g = Graph::eval(&store);
    let yv = g.constant(y.clone());
    let pad = g.constant(Tensor::ones(&[6, 1]));
    let rows = dnsrec::model::Rows { batch: 2, seq: 3, pad };
    let logits = score_items(&mut g, yv, &emb, rows).unwrap();
    let oracle = reference_scores(&store, emb.items, &to_m(&y), 3);
    assert!(rel_err(g.value(logits).data(), &flat(&oracle)) <= 1e-14);
    assert_eq!(g.value(logits).shape(), &[2, 5]);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let z = [0.3, -1.2, 2.0, 0.7];
    let store = ParamStore::new();
    let mut g = Graph::eval(&store);
    let logits = g.constant(Tensor::row(&z));
    let loss = ce_loss(&mut g, logits, &[3]).unwrap();
    let direct = -(z[2].exp() / z.iter().map(|x: &f64| x.exp()).sum::<f64>()).ln();
    assert!((g.value(loss).data()[0] - direct).abs() <= 1e-14);
    let uniform = g.constant(Tensor::zeros(&[2, 100]));
    let loss = ce_loss(&mut g, uniform, &[1, 100]).unwrap();
    assert!((g.value(loss).data()[0] - 100f64.ln()).abs() <= 1e-12);
    assert!((100f64.ln() - 4.6052).abs() < 1e-4);
}

#[test]
fn one_by_one_gate_matches_formula() {
    let mut store = ParamStore::new();
    let gate = GateParams::init(&mut store, "g", 1, 1, 2, &mut stream(0, Stream::Init));
    let vals = [(0.7, -0.2), (-1.5, 0.4)];
    for (&(w, b), &(wi, bi)) in vals.iter().zip(&gate.layers) {
        store.set(wi, Tensor::scalar(w)).unwrap();
        store.set(bi, Tensor::scalar(b)).unwrap();
    }
    let mut g = Graph::eval(&store);
    let x = g.constant(Tensor::scalar(0.9));
    let delta = gate_forward(&mut g, &gate, x, None, 2.0).unwrap().unwrap();
    let hidden = (0.9f64 * 0.7 - 0.2).max(0.0);
    let expected = 2.0 / (1.0 + (-(hidden * -1.5 + 0.4f64)).exp());
    assert!((g.value(delta).data()[0] - expected).abs() <= 1e-15);
}

fn block_case(cfg: &SupernetConfig, candidate: usize, seed: u64, batch_size: usize) -> f64 {
    let spec = make_masks(cfg).unwrap().remove(candidate);
    let mut rng = stream(seed, Stream::Init);
    let mut store = ParamStore::new();
    let emb = EmbeddingParams::init(&mut store, "", cfg.num_items, cfg.seq_len, cfg.hidden, &mut rng);
    let block = BlockParams::init(&mut store, "b", cfg.hidden, cfg.inner, cfg.gate_layers, &mut rng);
    common::randomize(&mut store, &mut rng, 0.7);
    let batch = random_batch(&mut rng, cfg.num_items, cfg.seq_len, batch_size);
    let mut g = Graph::eval(&store);
    let (e, rows) = embed(&mut g, &emb, &batch).unwrap();
    let prev = {
        let t = g.value(e).clone();
        t.zip_map(&t, |a, _| (a * 3.0).sin())
    };
    let pad: Vec<bool> = batch.items.iter().map(|&i| i != 0).collect();
    let prev = Tensor::new(
        prev.shape().to_vec(),
        prev.data().iter().enumerate().map(|(i, &x)| if pad[i / cfg.hidden] { x } else { 0.0 }).collect(),
    )
    .unwrap();
    let pv = g.constant(prev.clone());
    let t = block_forward(&mut g, &block, &BlockMasks::from_spec(&spec), &cfg.block_config(), pv, e, rows).unwrap();
    let (e_oracle, _) = reference_embed(&store, emb.items, emb.positions, &batch);
    let oracle = reference_block(&store, &block, &spec, cfg.gate_scale, &to_m(&prev), &e_oracle, &pad, cfg.seq_len);
    rel_err(g.value(t).data(), &flat(&oracle))
}

#[test]
fn tiny_block_matches_step_by_step_evaluation() {
    let cfg = SupernetConfig {
        num_items: 3,
        hidden: 2,
        inner: 2,
        seq_len: 2,
        layers: 1,
        heads: 1,
        gammas: vec![0.0],
        gamma_primes: vec![0.0],
        gate_layers: 2,
        dropout: 0.0,
        gate_scale: 2.0,
    };
    for seed in 0..5 {
        let err = block_case(&cfg, 0, seed, 1);
        assert!(err <= 1e-12, "seed {seed}: {err:e}");
    }
}

#[test]
fn masked_multi_head_blocks_match_step_by_step_evaluation() {
    for gate_layers in 0..=3 {
        let cfg = SupernetConfig {
            gate_layers,
            ..small_config()
        };
        for candidate in 0..cfg.candidates() {
            let err = block_case(&cfg, candidate, 10 + candidate as u64, 3);
            assert!(err <= 1e-12, "L_d {gate_layers} candidate {candidate}: {err:e}");
        }
    }
}

#[test]
fn flops_match_operation_tally() {
    for &(n, d, inner, heads, gl) in &[(10, 16, 32, 4, 2), (7, 8, 12, 2, 0), (200, 128, 256, 4, 2), (3, 6, 5, 3, 4), (1, 1, 1, 1, 1)] {
        let shape = BlockShape {
            seq_len: n,
            hidden_eff: d,
            inner_eff: inner,
            heads,
            gate_layers: gl,
        };
        assert_eq!(block_flops(&shape), tally_block_flops(n, d, inner, heads, gl), "{shape:?}");
    }
}

#[test]
fn attention_flops_are_linear_in_sequence_length() {
    for n in [4, 10, 50, 200] {
        let at = |n| {
            let b = block_flops_breakdown(&BlockShape {
                seq_len: n,
                hidden_eff: 16,
                inner_eff: 32,
                heads: 4,
                gate_layers: 2,
            });
            b.attention_core + b.attention_pointwise
        };
        assert_eq!(at(2 * n), 2 * at(n));
    }
}

#[test]
fn flops_table_is_cumulative_over_depth() {
    let cfg = small_config();
    let table = FlopsTable::build(&cfg).unwrap();
    for (i, spec) in make_masks(&cfg).unwrap().iter().enumerate() {
        let one = block_flops(&BlockShape::of(spec, cfg.seq_len, cfg.gate_layers));
        for depth in 1..=cfg.layers {
            assert_eq!(table.get(i, depth), depth as u64 * one);
        }
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let none = HashSet::new();
    let mut ranks = Vec::new();
    let mut sums = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
        let target = rng.gen_range(1..=n);
        let rank = target_rank(&logits, target, &none).unwrap();
        let got = metrics_at_k(rank, 10);
        let want = brute_metrics(&logits, target - 1, 10);
        assert_eq!(got, want, "logits {logits:?} target {target}");
        ranks.push(rank);
        sums = (sums.0 + want.0, sums.1 + want.1, sums.2 + want.2);
    }
    let report = MetricsReport::from_ranks(&ranks, 10);
    assert_eq!((report.recall, report.mrr, report.ndcg), (sums.0 / 100.0, sums.1 / 100.0, sums.2 / 100.0));
    assert_eq!(metrics_at_k(1, 10), (1.0, 1.0, 1.0));
    assert_eq!(metrics_at_k(3, 10), (1.0, 1.0 / 3.0, 0.5));
    assert_eq!(metrics_at_k(11, 10), (0.0, 0.0, 0.0));
}

#[test]
fn one_hot_supernet_masked_path_and_compact_model_agree() {
    for gate_layers in [0, 2] {
        let net = random_supernet(SupernetConfig { gate_layers, ..small_config() }, 21);
        for link in one_hot_chain(&net, 6, 5) {
            assert!(link.supernet_vs_masked <= 1e-6, "{link:?}");
            assert!(link.masked_vs_compact <= 1e-6, "{link:?}");
        }
    }
}

#[test]
fn masked_channels_are_silent_forward_and_backward() {
    let net = random_supernet(small_config(), 8);
    for (i, audit) in audit_masks(&net, 3).iter().enumerate() {
        assert_eq!(audit.leaked_outputs, 0, "candidate {i}");
        assert_eq!(audit.leaked_gradients, 0, "candidate {i}");
        if i > 0 {
            assert!(audit.checked_outputs > 0 && audit.checked_gradients > 0);
        }
    }
}

#[test]
fn unpruned_candidate_is_bit_identical_to_a_dense_block() {
    let net = random_supernet(small_config(), 4);
    let table = FlopsTable::build(&net.config).unwrap();
    let choice = ArchChoice::resolve(&net, &table, 0, net.config.layers, 0).unwrap();
    let compact = build_compact_model(&net, &choice).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let batch = random_batch(&mut rng, 20, 5, 3);
        let mut g = Graph::eval(&net.store);
        let a = net.hard_forward(&mut g, &batch, 0, net.config.layers).unwrap();
        let a = g.value(a).clone();
        let mut g = Graph::eval(&compact.store);
        let b = compact.forward(&mut g, &batch).unwrap();
        assert_eq!(&a, g.value(b));
    }
}

#[test]
fn hand_matmul_agrees_with_tensor_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[3, 5], 1.0);
    let b = random_tensor(&mut rng, &[5, 2], 1.0);
    let mut t = Tape::new();
    let (av, bv) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let c = t.matmul(av, bv).unwrap();
    assert!(rel_err(t.value(c).data(), &flat(&mm(&to_m(&a), &to_m(&b)))) <= 1e-15);
}
