use std::rc::Rc;

use dnsrec::autodiff::{Broadcast, NormAxis, Tape, Var};
use dnsrec::data::SequenceBatch;
use dnsrec::model::{block_forward, ce_loss, embed, score_items, BlockMasks, BlockParams, EmbeddingParams};
use dnsrec::params::{Graph, Mode, ParamStore};
use dnsrec::rng::{stream, Stream};
use dnsrec::supernet::{make_masks, SupernetConfig};
use dnsrec::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{grad_check, randomize, random_away_from_zero, random_batch, random_tensor, rel_err, FD_STEP};

type Op = Box<dyn Fn(&mut Tape, &[Var]) -> dnsrec::Result<Var>>;
type Case = (&'static str, Vec<Tensor>, Op);

fn op(f: impl Fn(&mut Tape, &[Var]) -> dnsrec::Result<Var> + 'static) -> Op {
    Box::new(f)
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut r = |shape: &[usize]| random_tensor(rng, shape, 1.0);
    let a34 = r(&[3, 4]);
    let b34 = r(&[3, 4]);
    let b42 = r(&[4, 2]);
    let b54 = r(&[5, 4]);
    let row4 = r(&[1, 4]);
    let col3 = r(&[3, 1]);
    let s13 = r(&[1, 3]);
    let x64 = r(&[6, 4]);
    let gain = r(&[1, 4]);
    let bias = r(&[1, 4]);
    let table = r(&[5, 3]);
    let (q, k, v) = (r(&[6, 4]), r(&[6, 4]), r(&[6, 4]));
    let logits = r(&[3, 5]);
    let kinked = random_away_from_zero(rng, &[3, 4], 2.0, 0.05);
    let multipliers = Rc::new(vec![0.0, 1.25, 1.25, 0.0, 1.25, 1.25, 1.25, 0.0, 1.25, 1.25, 0.0, 1.25]);
    let active = Rc::new(vec![true, false, true, true]);
    vec![
        ("matmul", vec![a34.clone(), b42], op(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![a34.clone(), b54], op(|t, v| t.matmul_nt(v[0], v[1]))),
        ("add", vec![a34.clone(), b34.clone()], op(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a34.clone(), b34.clone()], op(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a34.clone(), b34], op(|t, v| t.mul(v[0], v[1]))),
        ("mul_broadcast_row", vec![a34.clone(), row4.clone()], op(|t, v| t.mul_broadcast(v[0], v[1], Broadcast::Row))),
        ("mul_broadcast_col", vec![a34.clone(), col3], op(|t, v| t.mul_broadcast(v[0], v[1], Broadcast::Col))),
        ("add_bias", vec![a34.clone(), row4], op(|t, v| t.add_bias(v[0], v[1]))),
        ("scale", vec![a34.clone()], op(|t, v| Ok(t.scale(v[0], -2.5)))),
        (
            "index_scale_by",
            vec![a34.clone(), s13],
            op(|t, v| {
                let s = t.index(v[1], 1);
                t.scale_by(v[0], s)
            }),
        ),
        ("elu", vec![kinked.clone()], op(|t, v| Ok(t.elu(v[0])))),
        ("relu", vec![kinked.clone()], op(|t, v| Ok(t.relu(v[0])))),
        ("gelu", vec![a34.clone()], op(|t, v| Ok(t.gelu(v[0])))),
        ("sigmoid", vec![a34.clone()], op(|t, v| Ok(t.sigmoid(v[0])))),
        ("l2_normalize_row", vec![x64.clone()], op(|t, v| t.l2_normalize(v[0], NormAxis::Row, 2, 2.0))),
        ("l2_normalize_col", vec![x64.clone()], op(|t, v| t.l2_normalize(v[0], NormAxis::Col, 3, 3.0))),
        ("layer_norm", vec![a34.clone(), gain.clone(), bias.clone()], op(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6))),
        (
            "layer_norm_masked",
            vec![a34.clone(), gain, bias],
            op(move |t, v| t.layer_norm_masked(v[0], v[1], v[2], 1e-6, Some(active.clone()))),
        ),
        ("dropout_with", vec![a34.clone()], op(move |t, v| t.dropout_with(v[0], multipliers.clone()))),
        ("softmax_rows", vec![a34.clone()], op(|t, v| Ok(t.softmax_rows(v[0])))),
        ("gather", vec![table.clone()], op(|t, v| t.gather(v[0], Rc::new(vec![0, 2, 2, 4])))),
        ("slice_rows_from", vec![table.clone()], op(|t, v| t.slice_rows_from(v[0], 1))),
        ("select_rows", vec![table], op(|t, v| t.select_rows(v[0], Rc::new(vec![4, 1, 4])))),
        ("sum", vec![a34], op(|t, v| Ok(t.sum(v[0])))),
        ("block_linear_attention", vec![q, k, v], op(|t, v| t.block_linear_attention(v[0], v[1], v[2], 3, 2))),
        ("cross_entropy", vec![logits], op(|t, v| t.cross_entropy(v[0], Rc::new(vec![4, 0, 2])))),
    ]
}

/// `(primitive, worst relative error)` for every differentiable tape operation.
pub fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases(&mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| (name, grad_check(&inputs, seed + i as u64, f)))
        .collect()
}

pub const PRIMITIVES: usize = 26;

struct BlockFixture {
    store: ParamStore,
    embedding: EmbeddingParams,
    block: BlockParams,
    masks: BlockMasks,
    cfg: dnsrec::model::BlockConfig,
    batch: SequenceBatch,
}

fn block_fixture(seed: u64) -> BlockFixture {
    let net_cfg = SupernetConfig {
        num_items: 5,
        hidden: 4,
        inner: 6,
        seq_len: 3,
        layers: 1,
        heads: 2,
        gammas: vec![0.5],
        gamma_primes: vec![0.5],
        gate_layers: 2,
        dropout: 0.2,
        gate_scale: 2.0,
    };
    let spec = make_masks(&net_cfg).unwrap().remove(0);
    let mut rng = stream(seed, Stream::Init);
    let mut store = ParamStore::new();
    let embedding = EmbeddingParams::init(&mut store, "", 5, 3, 4, &mut rng);
    let block = BlockParams::init(&mut store, "b", 4, 6, 2, &mut rng);
    randomize(&mut store, &mut rng, 0.8);
    let mut batch = random_batch(&mut rng, 5, 3, 3);
    batch.items[..3].copy_from_slice(&[1, 2, 3]);
    BlockFixture {
        store,
        embedding,
        block,
        masks: BlockMasks::from_spec(&spec),
        cfg: net_cfg.block_config(),
        batch,
    }
}

fn block_loss(fx: &BlockFixture, store: &ParamStore, seed: u64) -> (f64, Vec<Tensor>) {
    let mut dropout = stream(seed, Stream::Dropout);
    let mut g = Graph::new(store, Mode::Train, Some(&mut dropout));
    let (e, rows) = embed(&mut g, &fx.embedding, &fx.batch).unwrap();
    let t = block_forward(&mut g, &fx.block, &fx.masks, &fx.cfg, e, e, rows).unwrap();
    let logits = score_items(&mut g, t, &fx.embedding, rows).unwrap();
    let loss = ce_loss(&mut g, logits, &fx.batch.targets).unwrap();
    let value = g.value(loss).data()[0];
    (value, g.param_grads(loss).unwrap())
}

/// Relative error of the full block + cross-entropy gradient (embeddings,
/// attention, gates, FFN, norms, dropout) against central differences, over
/// all parameters at once.
pub fn block_error(seed: u64) -> f64 {
    let fx = block_fixture(seed);
    let (_, analytic) = block_loss(&fx, &fx.store, seed);
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (slot, id) in fx.store.ids().enumerate() {
        let base = fx.store.get(id).clone();
        for j in 0..base.len() {
            let mut store = fx.store.clone();
            let mut t = base.clone();
            t.data_mut()[j] += FD_STEP;
            store.set(id, t.clone()).unwrap();
            let up = block_loss(&fx, &store, seed).0;
            t.data_mut()[j] -= 2.0 * FD_STEP;
            store.set(id, t).unwrap();
            let down = block_loss(&fx, &store, seed).0;
            n.push((up - down) / (2.0 * FD_STEP));
            a.push(analytic[slot].data()[j]);
        }
    }
    rel_err(&a, &n)
}
