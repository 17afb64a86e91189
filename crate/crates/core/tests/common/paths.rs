use dnsrec::compact::build_compact_model;
use dnsrec::data::{make_batches, Purpose, SplitSpec};
use dnsrec::flops::FlopsTable;
use dnsrec::model::{block_forward, ce_loss, embed, score_items};
use dnsrec::params::{Graph, Mode, ParamGroup};
use dnsrec::rng::{stream, Stream};
use dnsrec::search::{ArchChoice, LogEntry, Searcher, TrainConfig};
use dnsrec::supernet::{FusionSpec, Supernet, SupernetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{random_batch, randomize, rel_err};

pub fn small_config() -> SupernetConfig {
    SupernetConfig {
        num_items: 20,
        hidden: 8,
        inner: 12,
        seq_len: 5,
        layers: 3,
        heads: 2,
        gammas: vec![0.0, 0.5, 0.75],
        gamma_primes: vec![0.0, 0.5, 0.25],
        gate_layers: 2,
        dropout: 0.2,
        gate_scale: 2.0,
    }
}

/// A supernet whose weights are all random, so no path is trivially zero.
pub fn random_supernet(cfg: SupernetConfig, seed: u64) -> Supernet {
    let mut net = Supernet::new(cfg, seed).unwrap();
    randomize(&mut net.store, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), 0.5);
    net
}

#[derive(Debug)]
pub struct ChainLink {
    pub candidate: usize,
    pub depth: usize,
    pub supernet_vs_masked: f64,
    pub masked_vs_compact: f64,
}

/// For every candidate and `batches` random batches (depth cycling through
/// `1..=L`): one-hot supernet forward vs masked hard path vs compact model.
pub fn one_hot_chain(net: &Supernet, batches: usize, seed: u64) -> Vec<ChainLink> {
    let cfg = &net.config;
    let table = FlopsTable::build(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for candidate in 0..cfg.candidates() {
        let compacts: Vec<_> = (1..=cfg.layers)
            .map(|depth| {
                let choice = ArchChoice::resolve(net, &table, candidate, depth, seed).unwrap();
                build_compact_model(net, &choice).unwrap()
            })
            .collect();
        for b in 0..batches {
            let depth = 1 + b % cfg.layers;
            let batch = random_batch(&mut rng, cfg.num_items, cfg.seq_len, 4);
            let mut g = Graph::eval(&net.store);
            let spec = FusionSpec::one_hot(cfg.candidates(), candidate, cfg.layers, depth);
            let fused = net.forward(&mut g, &batch, &spec, None).unwrap().logits;
            let fused = g.value(fused).clone();
            let mut g = Graph::eval(&net.store);
            let masked = net.hard_forward(&mut g, &batch, candidate, depth).unwrap();
            let masked = g.value(masked).clone();
            let compact = &compacts[depth - 1];
            let mut g = Graph::eval(&compact.store);
            let small = compact.forward(&mut g, &batch).unwrap();
            let small = g.value(small).clone();
            out.push(ChainLink {
                candidate,
                depth,
                supernet_vs_masked: rel_err(fused.data(), masked.data()),
                masked_vs_compact: rel_err(masked.data(), small.data()),
            });
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct MaskAudit {
    /// Masked output entries that were not exactly zero.
    pub leaked_outputs: usize,
    /// Gradient entries on masked channels that were not exactly zero.
    pub leaked_gradients: usize,
    pub checked_outputs: usize,
    pub checked_gradients: usize,
}

/// Runs each candidate's full stack in training mode (dropout on) and checks
/// that masked channels carry exact zeros forward and backward.
pub fn audit_masks(net: &Supernet, seed: u64) -> Vec<MaskAudit> {
    let cfg = &net.config;
    let block_cfg = cfg.block_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.candidates())
        .map(|i| {
            let spec = &net.masks[i];
            let hm = spec.hidden_mask();
            let im = spec.inner_mask();
            let batch = random_batch(&mut rng, cfg.num_items, cfg.seq_len, 6);
            let mut dropout = stream(seed + i as u64, Stream::Dropout);
            let mut g = Graph::new(&net.store, Mode::Train, Some(&mut dropout));
            let (e, rows) = embed(&mut g, &net.embedding, &batch).unwrap();
            let mut prev = e;
            let mut audit = MaskAudit::default();
            for block in &net.blocks[i] {
                prev = block_forward(&mut g, block, net.block_masks(i), &block_cfg, prev, e, rows).unwrap();
                let t = g.value(prev);
                for r in 0..t.rows() {
                    for (c, &m) in hm.iter().enumerate() {
                        if m == 0.0 {
                            audit.checked_outputs += 1;
                            if t.get(r, c) != 0.0 {
                                audit.leaked_outputs += 1;
                            }
                        }
                    }
                }
            }
            let logits = score_items(&mut g, prev, &net.embedding, rows).unwrap();
            let loss = ce_loss(&mut g, logits, &batch.targets).unwrap();
            let grads = g.param_grads(loss).unwrap();
            let cand = format!("cand{i}.");
            for (id, grad) in net.store.ids().zip(&grads) {
                let name = net.store.name(id);
                if !(name.starts_with(&cand) || name.ends_with("embedding")) {
                    continue;
                }
                let inner = ["ffn_w1", "ffn_b1", "gate_inner"].iter().any(|s| name.contains(s));
                let mask = if inner { &im } else { &hm };
                assert_eq!(grad.cols(), mask.len(), "{name}");
                for r in 0..grad.rows() {
                    for (c, &m) in mask.iter().enumerate() {
                        if m == 0.0 {
                            audit.checked_gradients += 1;
                            if grad.get(r, c) != 0.0 {
                                audit.leaked_gradients += 1;
                            }
                        }
                    }
                }
            }
            audit
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct Isolation {
    pub iterations: usize,
    /// Weight steps after which some controller bit changed.
    pub weight_steps_touching_arch: usize,
    /// Controller steps after which some weight bit changed.
    pub arch_steps_touching_weights: usize,
    /// Steps that did move their own group (guards against a vacuous pass).
    pub weight_steps_moving_weights: usize,
    pub arch_steps_moving_arch: usize,
}

fn bits(store: &dnsrec::params::ParamStore, group: ParamGroup) -> Vec<u64> {
    store
        .ids_in(group)
        .into_iter()
        .flat_map(|id| store.get(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

/// Runs `iterations` logged search iterations and compares parameter bits
/// around each half-step.
pub fn isolation_trace(net: Supernet, cfg: TrainConfig, split: &SplitSpec, iterations: usize) -> Isolation {
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let n = net.config.seq_len;
    let train = make_batches(split, n, cfg.search_batch, Purpose::Train, cfg.sliding, &mut shuffle).unwrap();
    let valid = make_batches(split, n, cfg.search_batch, Purpose::Valid, false, &mut shuffle).unwrap();
    let mut s = Searcher::new(net, cfg).unwrap();
    let mut out = Isolation::default();
    for t in 0..iterations {
        s.begin_iteration();
        let (w0, a0) = (bits(&s.net.store, ParamGroup::Weights), bits(&s.net.store, ParamGroup::Architecture));
        let step = s.weight_step(&train[t % train.len()]).unwrap();
        let (w1, a1) = (bits(&s.net.store, ParamGroup::Weights), bits(&s.net.store, ParamGroup::Architecture));
        out.weight_steps_touching_arch += usize::from(a1 != a0);
        out.weight_steps_moving_weights += usize::from(w1 != w0);
        s.arch_step(&valid[t % valid.len()]).unwrap();
        let (w2, a2) = (bits(&s.net.store, ParamGroup::Weights), bits(&s.net.store, ParamGroup::Architecture));
        out.arch_steps_touching_weights += usize::from(w2 != w1);
        out.arch_steps_moving_arch += usize::from(a2 != a1);
        s.log.push(LogEntry {
            t: s.state.t,
            tau: s.state.tau,
            dynamic_depth: s.state.dynamic_depth,
            ce: step.ce,
            rc: step.rc,
            p: step.fusion.p,
            q: step.fusion.q,
        });
        s.state.t += 1;
    }
    out.iterations = s.log.len();
    out
}
