//! Toy transformer trained on synthetic retrieval tasks with a pluggable
//! attention mechanism.
//!
//! The model is a stack of pre-norm blocks, `x + Attn(LN(x))` followed by
//! `x + MLP(LN(x))` with a `4D`-wide ReLU MLP, over learned token and position
//! embeddings. A final norm and a linear head classify the tokens at the probe
//! positions (the last `query_slots` positions of every sequence). Gradients
//! are computed by hand; the attention backward pass comes from
//! [`Mechanism::vjp`].
//!
//! Initialization: projections and MLP weights are drawn from a normal
//! truncated at two standard deviations with standard deviation
//! `1/sqrt(fan_in)`; embeddings use standard deviation 1; norm gains start at
//! 1, biases and the classifier head at 0.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MitaError, Result};
use crate::math::{matmul, matmul_nt, matmul_tn, Mat, Rng};
use crate::mechanism::Mechanism;
use crate::mita::{mita_forward, MitaConfig, MitaForward};

const LN_EPS: f64 = 1e-5;
/// Sequences in every evaluation set.
pub const EVAL_SEQUENCES: usize = 512;
const EVAL_CHUNK: usize = 64;

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Key-value symbol pairs, then probe keys; the label is the paired value.
    Recall,
    /// Random symbols, then pointer tokens; the label is the symbol pointed at.
    Copy,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(Self::Recall),
            "copy" => Ok(Self::Copy),
            other => Err(MitaError::InvalidArgument(format!(
                "unknown task `{other}` (expected recall or copy)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Recall => "recall",
            Self::Copy => "copy",
        }
    }
}

/// Synthetic task definition.
///
/// Recall sequences hold one token per key-value pair, id `key * V + value`,
/// at random context positions; probe keys are `V² + key` and filler is
/// `V² + V`. Copy uses symbols `0..V` and the pointer to position `p` is
/// `V + p`. Labels are in `0..V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub query_slots: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, seq_len: usize, vocab: usize, query_slots: usize, seed: u64) -> Result<Self> {
        if seq_len < 4 {
            return Err(MitaError::InvalidArgument(format!("sequence length {seq_len} < 4")));
        }
        if vocab < 2 {
            return Err(MitaError::InvalidArgument(format!("vocabulary {vocab} < 2")));
        }
        if query_slots == 0 || query_slots + 2 > seq_len {
            return Err(MitaError::InvalidArgument(format!(
                "{query_slots} query slots do not fit a sequence of {seq_len}"
            )));
        }
        Ok(Self {
            kind,
            seq_len,
            vocab,
            query_slots,
            seed,
        })
    }

    /// Positions before the probe slots.
    pub fn context_len(&self) -> usize {
        self.seq_len - self.query_slots
    }

    /// Key-value pairs in a recall sequence.
    pub fn pairs(&self) -> usize {
        self.vocab.min(self.context_len())
    }

    pub fn pair_token(&self, key: usize, value: usize) -> usize {
        key * self.vocab + value
    }

    pub fn probe_token(&self, key: usize) -> usize {
        self.vocab * self.vocab + key
    }

    pub fn input_vocab(&self) -> usize {
        match self.kind {
            TaskKind::Recall => self.vocab * self.vocab + self.vocab + 1,
            TaskKind::Copy => self.vocab + self.context_len(),
        }
    }

    pub fn classes(&self) -> usize {
        self.vocab
    }

    pub fn filler_token(&self) -> usize {
        self.vocab * self.vocab + self.vocab
    }
}

/// `tokens[b]` is one sequence; `labels[b]` holds one label per probe slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskBatch {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
}

/// Label of a copy sequence whose pointer targets `mark`.
pub fn copy_label(tokens: &[usize], mark: usize) -> usize {
    tokens[mark]
}

/// Deterministic batch for `(spec.seed, step_seed)`.
pub fn gen_task_batch(spec: &TaskSpec, batch: usize, step_seed: u64) -> TaskBatch {
    let mut rng = Rng::new(mix_seed(spec.seed, step_seed));
    let v = spec.vocab;
    let ctx = spec.context_len();
    let mut tokens = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut seq = Vec::with_capacity(spec.seq_len);
        let mut lab = Vec::with_capacity(spec.query_slots);
        match spec.kind {
            TaskKind::Recall => {
                let mut keys: Vec<usize> = (0..v).collect();
                rng.shuffle(&mut keys);
                keys.truncate(spec.pairs());
                let values: Vec<usize> = keys.iter().map(|_| rng.below(v)).collect();
                let mut slots: Vec<usize> = (0..ctx).collect();
                rng.shuffle(&mut slots);
                seq.resize(ctx, spec.filler_token());
                for ((&key, &val), &at) in keys.iter().zip(&values).zip(&slots) {
                    seq[at] = spec.pair_token(key, val);
                }
                for _ in 0..spec.query_slots {
                    let p = rng.below(keys.len());
                    seq.push(spec.probe_token(keys[p]));
                    lab.push(values[p]);
                }
            }
            TaskKind::Copy => {
                seq.extend((0..ctx).map(|_| rng.below(v)));
                for _ in 0..spec.query_slots {
                    let mark = rng.below(ctx);
                    lab.push(copy_label(&seq, mark));
                    seq.push(v + mark);
                }
            }
        }
        tokens.push(seq);
        labels.push(lab);
    }
    TaskBatch { tokens, labels }
}

/// Shape of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub input_vocab: usize,
    pub classes: usize,
    pub query_slots: usize,
}

impl ModelDims {
    pub fn for_task(task: &TaskSpec, layers: usize, heads: usize, dim: usize) -> Result<Self> {
        if layers == 0 || heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(MitaError::InvalidArgument(format!(
                "need layers, heads, dim > 0 and dim divisible by heads (got {layers}, {heads}, {dim})"
            )));
        }
        Ok(Self {
            layers,
            heads,
            dim,
            seq_len: task.seq_len,
            input_vocab: task.input_vocab(),
            classes: task.classes(),
            query_slots: task.query_slots,
        })
    }

    pub fn hidden(&self) -> usize {
        4 * self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2: Mat,
    /// `4D x D`
    pub w1: Mat,
    pub b1: Mat,
    /// `D x 4D`
    pub w2: Mat,
    pub b2: Mat,
}

/// Everything needed to rebuild the task a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub task: TaskSpec,
    pub mechanism: Mechanism,
}

/// Model weights. Token and position embeddings store one column per id.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub dims: ModelDims,
    pub meta: ModelMeta,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub ln_f: Mat,
    pub head_w: Mat,
    pub head_b: Mat,
}

fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| loop {
        let z = rng.normal();
        if z.abs() <= 2.0 {
            break std * z;
        }
    })
}

impl BlockParams {
    pub fn init(dims: ModelDims, meta: ModelMeta, seed: u64) -> Self {
        let mut rng = Rng::new(mix_seed(seed, 0x1417));
        let d = dims.dim;
        let h = dims.hidden();
        let proj = |rng: &mut Rng, rows: usize, fan_in: usize| trunc_normal(rows, fan_in, 1.0 / (fan_in as f64).sqrt(), rng);
        let tok_emb = trunc_normal(d, dims.input_vocab, 1.0, &mut rng);
        let pos_emb = trunc_normal(d, dims.seq_len, 0.1, &mut rng);
        let layers = (0..dims.layers)
            .map(|_| LayerParams {
                ln1: Mat::filled(d, 1, 1.0),
                wq: proj(&mut rng, d, d),
                wk: proj(&mut rng, d, d),
                wv: proj(&mut rng, d, d),
                wo: proj(&mut rng, d, d),
                ln2: Mat::filled(d, 1, 1.0),
                w1: proj(&mut rng, h, d),
                b1: Mat::zeros(h, 1),
                w2: proj(&mut rng, d, h),
                b2: Mat::zeros(d, 1),
            })
            .collect();
        Self {
            dims,
            meta,
            tok_emb,
            pos_emb,
            layers,
            ln_f: Mat::filled(d, 1, 1.0),
            head_w: Mat::zeros(dims.classes, d),
            head_b: Mat::zeros(dims.classes, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        z
    }

    /// Tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut v = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            v.extend([&l.ln1, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2, &l.w1, &l.b1, &l.w2, &l.b2]);
        }
        v.extend([&self.ln_f, &self.head_w, &self.head_b]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            v.extend([
                &mut l.ln1, &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.ln2, &mut l.w1, &mut l.b1,
                &mut l.w2, &mut l.b2,
            ]);
        }
        v.extend([&mut self.ln_f, &mut self.head_w, &mut self.head_b]);
        v
    }

    /// Whether each tensor (in [`BlockParams::tensors`] order) gets weight decay:
    /// projection, MLP and head matrices do; embeddings, gains and biases do not.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut v = vec![false, false];
        for _ in &self.layers {
            v.extend([false, true, true, true, true, false, true, false, true, false]);
        }
        v.extend([false, true, false]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// The task this model was trained on.
    pub fn task(&self) -> TaskSpec {
        self.meta.task
    }
}

const MAGIC: &[u8; 4] = b"MITA";
pub const FORMAT_VERSION: u32 = 1;

fn mech_code(m: &Mechanism) -> (u64, u64, u64) {
    match m {
        Mechanism::Full => (0, 0, 0),
        Mechanism::Mita(c) => {
            let code = match m.name() {
                "mita" => 1,
                "compress" => 2,
                _ => 3,
            };
            (code, c.m as u64, c.k as u64)
        }
    }
}

/// Write parameters in the versioned binary format:
///
/// ```text
/// "MITA"            4 bytes
/// version           u32 LE
/// 15 header fields  u64 LE: layers, heads, dim, seq_len, input_vocab,
///                   classes, query_slots, task kind (0 recall, 1 copy),
///                   task vocab, task seed, mechanism (0 full, 1 mita,
///                   2 compress, 3 route), m, k, tensor count, total values
/// tensors           f64 LE, row-major, in `BlockParams::tensors` order
/// ```
pub fn write_params(params: &BlockParams, mut w: impl Write) -> Result<()> {
    let d = &params.dims;
    let t = &params.meta.task;
    let (code, m, k) = mech_code(&params.meta.mechanism);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let tensors = params.tensors();
    let header = [
        d.layers as u64,
        d.heads as u64,
        d.dim as u64,
        d.seq_len as u64,
        d.input_vocab as u64,
        d.classes as u64,
        d.query_slots as u64,
        match t.kind {
            TaskKind::Recall => 0,
            TaskKind::Copy => 1,
        },
        t.vocab as u64,
        t.seed,
        code,
        m,
        k,
        tensors.len() as u64,
        params.num_params() as u64,
    ];
    for h in header {
        w.write_all(&h.to_le_bytes())?;
    }
    for tensor in tensors {
        for x in tensor.to_row_major() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_params(mut r: impl Read) -> Result<BlockParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MitaError::Format("bad magic bytes".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(MitaError::Format(format!("unsupported version {version}")));
    }
    let mut h = [0u64; 15];
    for slot in h.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *slot = u64::from_le_bytes(b);
    }
    let u = |x: u64| x as usize;
    let kind = match h[7] {
        0 => TaskKind::Recall,
        1 => TaskKind::Copy,
        other => return Err(MitaError::Format(format!("unknown task kind {other}"))),
    };
    let task = TaskSpec::new(kind, u(h[3]), u(h[8]), u(h[6]), h[9])
        .map_err(|e| MitaError::Format(e.to_string()))?;
    let mechanism = match h[10] {
        0 => Mechanism::Full,
        1 => Mechanism::Mita(MitaConfig::full(u(h[11]), u(h[12]))?),
        2 => Mechanism::Mita(MitaConfig::compression_only(u(h[11]))?),
        3 => Mechanism::Mita(MitaConfig::route_only(u(h[11]), u(h[12]))?),
        other => return Err(MitaError::Format(format!("unknown mechanism code {other}"))),
    };
    let dims = ModelDims::for_task(&task, u(h[0]), u(h[1]), u(h[2])).map_err(|e| MitaError::Format(e.to_string()))?;
    if dims.input_vocab != u(h[4]) || dims.classes != u(h[5]) {
        return Err(MitaError::Format("vocabulary fields disagree with the task".into()));
    }
    let mut params = BlockParams::init(dims, ModelMeta { task, mechanism }, 0);
    if params.tensors().len() as u64 != h[13] || params.num_params() as u64 != h[14] {
        return Err(MitaError::Format("tensor count does not match the dims".into()));
    }
    for t in params.tensors_mut() {
        let (rows, cols) = t.shape();
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            vals.push(f64::from_le_bytes(b));
        }
        *t = Mat::from_row_major(rows, cols, vals).map_err(|e| MitaError::Format(e.to_string()))?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(MitaError::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(params)
}

struct NormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Mat, gain: &Mat) -> (Mat, NormCache) {
    let (d, n) = x.shape();
    let mut xhat = Mat::zeros(d, n);
    let mut y = Mat::zeros(d, n);
    let mut inv_std = Vec::with_capacity(n);
    let g = gain.col(0);
    for j in 0..n {
        let col = x.col(j);
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.col_mut(j);
        for (o, &v) in xh.iter_mut().zip(col) {
            *o = (v - mean) * is;
        }
        for ((o, &a), &gi) in y.col_mut(j).iter_mut().zip(xhat.col(j)).zip(g) {
            *o = a * gi;
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns the input cotangent and accumulates the gain cotangent.
fn layer_norm_backward(dy: &Mat, cache: &NormCache, gain: &Mat, dgain: &mut Mat) -> Mat {
    let (d, n) = dy.shape();
    let g = gain.col(0);
    let mut dx = Mat::zeros(d, n);
    let mut dxhat = vec![0.0; d];
    for j in 0..n {
        let xh = cache.xhat.col(j);
        let dyj = dy.col(j);
        for i in 0..d {
            dxhat[i] = dyj[i] * g[i];
        }
        for (dg, (&a, &b)) in dgain.col_mut(0).iter_mut().zip(dyj.iter().zip(xh)) {
            *dg += a * b;
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[j];
        for (o, (&dh, &h)) in dx.col_mut(j).iter_mut().zip(dxhat.iter().zip(xh)) {
            *o = is * (dh - mean_dxhat - h * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_bias(x: &mut Mat, b: &Mat) {
    for j in 0..x.cols() {
        for (o, &bi) in x.col_mut(j).iter_mut().zip(b.col(0)) {
            *o += bi;
        }
    }
}

fn row_sums_into(x: &Mat, acc: &mut Mat) {
    for j in 0..x.cols() {
        for (o, &v) in acc.col_mut(0).iter_mut().zip(x.col(j)) {
            *o += v;
        }
    }
}

struct LayerCache {
    x_in: Mat,
    norm1: NormCache,
    h1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Mat,
    norm2: NormCache,
    h2: Mat,
    pre_act: Mat,
    act: Mat,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    probe_cols: Vec<usize>,
    norm_f: NormCache,
    hf: Mat,
    logits: Mat,
}

/// Per layer, per sequence, per head MiTA state captured during a forward pass.
pub type MitaTraces = Vec<Vec<Vec<MitaForward>>>;

fn check_tokens(tokens: &[Vec<usize>], params: &BlockParams) -> Result<()> {
    let dims = &params.dims;
    if tokens.is_empty() {
        return Err(MitaError::InvalidArgument("empty batch".into()));
    }
    for seq in tokens {
        if seq.len() != dims.seq_len {
            return Err(MitaError::DimensionMismatch {
                op: "model_forward",
                detail: format!("sequence of {} tokens, model expects {}", seq.len(), dims.seq_len),
            });
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= dims.input_vocab) {
            return Err(MitaError::IndexOutOfRange {
                index: bad,
                len: dims.input_vocab,
            });
        }
    }
    Ok(())
}

fn attention_layer(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    seqs: usize,
    n: usize,
    heads: usize,
    mech: &Mechanism,
    capture: bool,
) -> Result<(Mat, Vec<Vec<MitaForward>>)> {
    let per_seq: Vec<(Mat, Vec<MitaForward>)> = (0..seqs)
        .into_par_iter()
        .map(|s| {
            let (qs, ks, vs) = (q.col_block(s * n, n), k.col_block(s * n, n), v.col_block(s * n, n));
            match (capture, mech) {
                (true, Mechanism::Mita(cfg)) => {
                    let d = q.rows() / heads;
                    let mut out = Mat::zeros(q.rows(), n);
                    let mut traces = Vec::with_capacity(heads);
                    for h in 0..heads {
                        let f = mita_forward(&qs.row_block(h * d, d), &ks.row_block(h * d, d), &vs.row_block(h * d, d), cfg)?;
                        out.set_row_block(h * d, &f.output);
                        traces.push(f);
                    }
                    Ok((out, traces))
                }
                _ => Ok((mech.forward_heads(&qs, &ks, &vs, heads)?, Vec::new())),
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Mat::zeros(q.rows(), seqs * n);
    let mut traces = Vec::with_capacity(seqs);
    for (s, (o, t)) in per_seq.into_iter().enumerate() {
        let dst = &mut out.as_mut_slice()[s * n * q.rows()..(s + 1) * n * q.rows()];
        dst.copy_from_slice(o.as_slice());
        traces.push(t);
    }
    Ok((out, traces))
}

fn forward_impl(
    tokens: &[Vec<usize>],
    params: &BlockParams,
    mech: &Mechanism,
    capture: bool,
) -> Result<(ForwardCache, MitaTraces)> {
    check_tokens(tokens, params)?;
    let dims = params.dims;
    let (n, d) = (dims.seq_len, dims.dim);
    if !mech.supports_len(n) {
        return Err(MitaError::InvalidArgument(format!("{mech} cannot run on {n} tokens")));
    }
    let seqs = tokens.len();
    let mut x = Mat::zeros(d, seqs * n);
    for (s, seq) in tokens.iter().enumerate() {
        for (p, &t) in seq.iter().enumerate() {
            let dst = x.col_mut(s * n + p);
            for ((o, &a), &b) in dst.iter_mut().zip(params.tok_emb.col(t)).zip(params.pos_emb.col(p)) {
                *o = a + b;
            }
        }
    }

    let mut caches = Vec::with_capacity(dims.layers);
    let mut traces = Vec::new();
    for lp in &params.layers {
        let (h1, norm1) = layer_norm(&x, &lp.ln1);
        let q = matmul(&lp.wq, &h1)?;
        let k = matmul(&lp.wk, &h1)?;
        let v = matmul(&lp.wv, &h1)?;
        let (attn, layer_traces) = attention_layer(&q, &k, &v, seqs, n, dims.heads, mech, capture)?;
        if capture {
            traces.push(layer_traces);
        }
        let x_in = x.clone();
        x.add_assign(&matmul(&lp.wo, &attn)?);
        let (h2, norm2) = layer_norm(&x, &lp.ln2);
        let mut pre_act = matmul(&lp.w1, &h2)?;
        add_bias(&mut pre_act, &lp.b1);
        let act = pre_act.map(|u| u.max(0.0));
        let mut mlp = matmul(&lp.w2, &act)?;
        add_bias(&mut mlp, &lp.b2);
        x.add_assign(&mlp);
        caches.push(LayerCache {
            x_in,
            norm1,
            h1,
            q,
            k,
            v,
            attn,
            norm2,
            h2,
            pre_act,
            act,
        });
    }

    let slots = dims.query_slots;
    let probe_cols: Vec<usize> = (0..seqs)
        .flat_map(|s| (n - slots..n).map(move |p| s * n + p))
        .collect();
    let z = crate::math::gather_cols(&x, &probe_cols)?;
    let (hf, norm_f) = layer_norm(&z, &params.ln_f);
    let mut logits = matmul(&params.head_w, &hf)?;
    add_bias(&mut logits, &params.head_b);
    Ok((
        ForwardCache {
            layers: caches,
            probe_cols,
            norm_f,
            hf,
            logits,
        },
        traces,
    ))
}

/// Class logits, `classes x (batch * query_slots)`, sequence-major.
pub fn model_forward(tokens: &[Vec<usize>], params: &BlockParams, mech: &Mechanism) -> Result<Mat> {
    Ok(forward_impl(tokens, params, mech, false)?.0.logits)
}

/// Forward pass that also returns the MiTA state of every layer, sequence
/// and head. The traces are empty for dense attention.
pub fn model_forward_traced(
    tokens: &[Vec<usize>],
    params: &BlockParams,
    mech: &Mechanism,
) -> Result<(Mat, MitaTraces)> {
    let (cache, traces) = forward_impl(tokens, params, mech, true)?;
    Ok((cache.logits, traces))
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Mat, labels: &[usize]) -> (f64, Mat) {
    let count = labels.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let col = grad.col_mut(j);
        let max = col.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - col[y];
        for v in col.iter_mut() {
            *v = (*v - lse).exp() / count;
        }
        col[y] -= 1.0 / count;
    }
    (loss / count, grad)
}

/// Loss and parameter gradients on one batch.
pub fn loss_and_grad(batch: &TaskBatch, params: &BlockParams, mech: &Mechanism) -> Result<(f64, BlockParams)> {
    let (cache, _) = forward_impl(&batch.tokens, params, mech, false)?;
    let labels: Vec<usize> = batch.labels.concat();
    let (loss, dlogits) = cross_entropy(&cache.logits, &labels);
    let dims = params.dims;
    let (n, d) = (dims.seq_len, dims.dim);
    let seqs = batch.tokens.len();
    let mut g = params.zeros_like();

    g.head_w = matmul_nt(&dlogits, &cache.hf)?;
    row_sums_into(&dlogits, &mut g.head_b);
    let dhf = matmul_tn(&params.head_w, &dlogits)?;
    let dz = layer_norm_backward(&dhf, &cache.norm_f, &params.ln_f, &mut g.ln_f);
    let mut dx = Mat::zeros(d, seqs * n);
    for (slot, &c) in cache.probe_cols.iter().enumerate() {
        dx.col_mut(c).copy_from_slice(dz.col(slot));
    }

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut g.layers[li];
        // MLP branch
        gl.w2 = matmul_nt(&dx, &lc.act)?;
        row_sums_into(&dx, &mut gl.b2);
        let mut dpre = matmul_tn(&lp.w2, &dx)?;
        for (o, &u) in dpre.as_mut_slice().iter_mut().zip(lc.pre_act.as_slice()) {
            if u <= 0.0 {
                *o = 0.0;
            }
        }
        gl.w1 = matmul_nt(&dpre, &lc.h2)?;
        row_sums_into(&dpre, &mut gl.b1);
        let dh2 = matmul_tn(&lp.w1, &dpre)?;
        dx.add_assign(&layer_norm_backward(&dh2, &lc.norm2, &lp.ln2, &mut gl.ln2));

        // attention branch
        gl.wo = matmul_nt(&dx, &lc.attn)?;
        let dattn = matmul_tn(&lp.wo, &dx)?;
        let heads = dims.heads;
        let hd = d / heads;
        let per_seq: Vec<[Mat; 3]> = (0..seqs)
            .into_par_iter()
            .map(|s| {
                let block = |m: &Mat| m.col_block(s * n, n);
                let (qs, ks, vs, gs) = (block(&lc.q), block(&lc.k), block(&lc.v), block(&dattn));
                let mut out = [Mat::zeros(d, n), Mat::zeros(d, n), Mat::zeros(d, n)];
                for h in 0..heads {
                    let r = |m: &Mat| m.row_block(h * hd, hd);
                    let gr = mech.vjp(&r(&qs), &r(&ks), &r(&vs), &r(&gs))?;
                    out[0].set_row_block(h * hd, &gr.dq);
                    out[1].set_row_block(h * hd, &gr.dk);
                    out[2].set_row_block(h * hd, &gr.dv);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let mut dqkv = [Mat::zeros(d, seqs * n), Mat::zeros(d, seqs * n), Mat::zeros(d, seqs * n)];
        for (s, parts) in per_seq.iter().enumerate() {
            for (dst, src) in dqkv.iter_mut().zip(parts) {
                dst.as_mut_slice()[s * n * d..(s + 1) * n * d].copy_from_slice(src.as_slice());
            }
        }
        gl.wq = matmul_nt(&dqkv[0], &lc.h1)?;
        gl.wk = matmul_nt(&dqkv[1], &lc.h1)?;
        gl.wv = matmul_nt(&dqkv[2], &lc.h1)?;
        let mut dh1 = matmul_tn(&lp.wq, &dqkv[0])?;
        dh1.add_assign(&matmul_tn(&lp.wk, &dqkv[1])?);
        dh1.add_assign(&matmul_tn(&lp.wv, &dqkv[2])?);
        dx.add_assign(&layer_norm_backward(&dh1, &lc.norm1, &lp.ln1, &mut gl.ln1));
        debug_assert_eq!(lc.x_in.shape(), dx.shape());
    }

    for (s, seq) in batch.tokens.iter().enumerate() {
        for (p, &t) in seq.iter().enumerate() {
            let src = dx.col(s * n + p);
            for (o, &v) in g.tok_emb.col_mut(t).iter_mut().zip(src) {
                *o += v;
            }
            for (o, &v) in g.pos_emb.col_mut(p).iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok((loss, g))
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mechanism: Mechanism,
    pub task: TaskSpec,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length; the rate then follows a cosine down to 10% of `lr`.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Evaluate every this many steps (and after the last step); 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_seed: u64,
    pub seed: u64,
}

impl TrainConfig {
    /// Associative recall over 64 tokens with 16 symbols, 2 layers, 4 heads,
    /// width 64, 2000 steps. The 16 pairs are followed by 48 probes.
    pub fn recall_default(mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            task: TaskSpec::new(TaskKind::Recall, 64, 16, 48, 0).expect("valid default task"),
            layers: 2,
            heads: 4,
            dim: 64,
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 100,
            grad_clip: 1.0,
            eval_every: 250,
            eval_seed: 1_000_003,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr < 0.0 || !self.lr.is_finite() {
            return Err(MitaError::InvalidArgument("batch size must be positive and lr finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(MitaError::InvalidArgument("betas must lie in [0, 1) and eps > 0".into()));
        }
        if !self.mechanism.supports_len(self.task.seq_len) {
            return Err(MitaError::InvalidArgument(format!(
                "{} cannot run on {} tokens",
                self.mechanism, self.task.seq_len
            )));
        }
        ModelDims::for_task(&self.task, self.layers, self.heads, self.dim).map(|_| ())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &BlockParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.as_slice().len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut BlockParams, grads: &BlockParams, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let mask = params.decay_mask();
        for (((p, g), (m, v)), decay) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .zip(mask)
        {
            for (((pi, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
                if decay {
                    *pi -= lr * cfg.weight_decay * *pi;
                }
                *pi -= lr * update;
            }
        }
    }
}

/// One row of training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub params: BlockParams,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.eval_acc)
    }
}

/// Fresh model for `cfg`.
pub fn init_params(cfg: &TrainConfig) -> Result<BlockParams> {
    cfg.validate()?;
    let dims = ModelDims::for_task(&cfg.task, cfg.layers, cfg.heads, cfg.dim)?;
    Ok(BlockParams::init(
        dims,
        ModelMeta {
            task: cfg.task,
            mechanism: cfg.mechanism,
        },
        cfg.seed,
    ))
}

/// Train, reporting every step to `observe` as it completes.
pub fn train_run_observed(cfg: &TrainConfig, mut observe: impl FnMut(&StepRecord)) -> Result<TrainHistory> {
    let mut params = init_params(cfg)?;
    let mut opt = AdamW::new(&params);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = gen_task_batch(&cfg.task, cfg.batch_size, step as u64);
        let (loss, mut grads) = loss_and_grad(&batch, &params, &cfg.mechanism)?;
        if !loss.is_finite() {
            return Err(MitaError::Diverged { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.as_slice().iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                for t in grads.tensors_mut() {
                    t.as_mut_slice().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        opt.step(&mut params, &grads, cfg, cfg.lr_at(step));
        if !params.is_finite() {
            return Err(MitaError::Diverged { step, loss: f64::NAN });
        }
        let last = step + 1 == cfg.steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        let eval_acc = if last || due {
            Some(evaluate(&params, &cfg.task, &cfg.mechanism, cfg.eval_seed)?)
        } else {
            None
        };
        let rec = StepRecord { step, loss, eval_acc };
        observe(&rec);
        records.push(rec);
    }
    Ok(TrainHistory { records, params })
}

pub fn train_run(cfg: &TrainConfig) -> Result<TrainHistory> {
    train_run_observed(cfg, |_| {})
}

/// Accuracy on [`EVAL_SEQUENCES`] fresh sequences with an arbitrary inference
/// mechanism.
pub fn evaluate(params: &BlockParams, spec: &TaskSpec, mech: &Mechanism, eval_seed: u64) -> Result<f64> {
    let dims = &params.dims;
    if spec.seq_len != dims.seq_len || spec.input_vocab() != dims.input_vocab || spec.classes() != dims.classes {
        return Err(MitaError::DimensionMismatch {
            op: "evaluate",
            detail: "task does not match the model dims".into(),
        });
    }
    if spec.query_slots != dims.query_slots {
        return Err(MitaError::DimensionMismatch {
            op: "evaluate",
            detail: "query slot count does not match the model".into(),
        });
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in 0..EVAL_SEQUENCES / EVAL_CHUNK {
        let batch = gen_task_batch(spec, EVAL_CHUNK, mix_seed(eval_seed, chunk as u64) | (1 << 63));
        let logits = model_forward(&batch.tokens, params, mech)?;
        for (j, &y) in batch.labels.concat().iter().enumerate() {
            let col = logits.col(j);
            let pred = (0..col.len()).fold(0, |b, i| if col[i] > col[b] { i } else { b });
            correct += usize::from(pred == y);
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mech: Mechanism, kind: TaskKind) -> TrainConfig {
        TrainConfig {
            task: TaskSpec::new(kind, 8, 4, 2, 3).unwrap(),
            layers: 2,
            heads: 2,
            dim: 8,
            steps: 5,
            batch_size: 3,
            eval_every: 2,
            ..TrainConfig::recall_default(mech)
        }
    }

    #[test]
    fn copy_label_example() {
        assert_eq!(copy_label(&[5, 1, 9, 3], 2), 9);
        let spec = TaskSpec::new(TaskKind::Copy, 10, 7, 2, 1).unwrap();
        let b = gen_task_batch(&spec, 4, 0);
        for (seq, lab) in b.tokens.iter().zip(&b.labels) {
            for (slot, &y) in lab.iter().enumerate() {
                let pointer = seq[spec.context_len() + slot];
                assert_eq!(y, seq[pointer - spec.vocab]);
            }
        }
    }

    #[test]
    fn recall_labels_are_the_paired_values() {
        let spec = TaskSpec::new(TaskKind::Recall, 64, 16, 4, 9).unwrap();
        let b = gen_task_batch(&spec, 8, 5);
        for (seq, lab) in b.tokens.iter().zip(&b.labels) {
            assert_eq!(seq.len(), 64);
            let ctx = &seq[..spec.context_len()];
            assert_eq!(ctx.iter().filter(|&&t| t != spec.filler_token()).count(), 16);
            for (slot, &y) in lab.iter().enumerate() {
                let key = seq[spec.context_len() + slot] - spec.probe_token(0);
                assert!(key < spec.vocab);
                let matches: Vec<usize> = ctx.iter().copied().filter(|&t| t < 256 && t / 16 == key).collect();
                assert_eq!(matches, vec![spec.pair_token(key, y)]);
            }
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let spec = TaskSpec::new(TaskKind::Recall, 16, 5, 1, 2).unwrap();
        assert_eq!(gen_task_batch(&spec, 3, 7), gen_task_batch(&spec, 3, 7));
        assert_ne!(gen_task_batch(&spec, 3, 7), gen_task_batch(&spec, 3, 8));
    }

    #[test]
    fn task_spec_validation() {
        assert!(TaskSpec::new(TaskKind::Recall, 3, 4, 1, 0).is_err());
        assert!(TaskSpec::new(TaskKind::Recall, 8, 1, 1, 0).is_err());
        assert!(TaskSpec::new(TaskKind::Copy, 8, 4, 0, 0).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let cfg = tiny(Mechanism::Full, TaskKind::Recall);
        let p = init_params(&cfg).unwrap();
        let b = gen_task_batch(&cfg.task, 2, 0);
        let logits = model_forward(&b.tokens, &p, &Mechanism::Full).unwrap();
        assert_eq!(logits.shape(), (4, 4));
        assert!(logits.max_abs() == 0.0);
        let mita = Mechanism::parse("mita", 2, 2).unwrap();
        assert_eq!(model_forward(&b.tokens, &p, &mita).unwrap().shape(), logits.shape());
    }

    #[test]
    fn bad_tokens_are_rejected() {
        let cfg = tiny(Mechanism::Full, TaskKind::Recall);
        let p = init_params(&cfg).unwrap();
        assert!(model_forward(&[vec![0; 7]], &p, &Mechanism::Full).is_err());
        assert!(model_forward(&[vec![99; 8]], &p, &Mechanism::Full).is_err());
    }

    #[test]
    fn single_token_trace_by_hand() {
        // N = 1 with identity projections: attention returns the value column.
        let task = TaskSpec {
            kind: TaskKind::Recall,
            seq_len: 1,
            vocab: 3,
            query_slots: 1,
            seed: 0,
        };
        let dims = ModelDims::for_task(&task, 1, 1, 4).unwrap();
        let meta = ModelMeta {
            task,
            mechanism: Mechanism::Full,
        };
        let mut p = BlockParams::init(dims, meta, 5);
        let mut rng = Rng::new(6);
        let l = &mut p.layers[0];
        for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
            *w = Mat::identity(4);
        }
        l.b1 = Mat::random_normal(16, 1, 0.5, &mut rng);
        l.b2 = Mat::random_normal(4, 1, 0.5, &mut rng);
        l.ln2 = Mat::random_normal(4, 1, 1.0, &mut rng);
        p.head_w = Mat::random_normal(3, 4, 1.0, &mut rng);
        p.head_b = Mat::random_normal(3, 1, 1.0, &mut rng);

        let norm = |x: &[f64], g: &[f64]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / 4.0;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            x.iter().zip(g).map(|(v, g)| g * (v - mean) / (var + 1e-5).sqrt()).collect()
        };
        let tok = 2;
        let l = &p.layers[0];
        let x0: Vec<f64> = (0..4).map(|i| p.tok_emb.get(i, tok) + p.pos_emb.get(i, 0)).collect();
        let h = norm(&x0, l.ln1.col(0));
        let x1: Vec<f64> = x0.iter().zip(&h).map(|(a, b)| a + b).collect();
        let h2 = norm(&x1, l.ln2.col(0));
        let hidden: Vec<f64> = (0..16)
            .map(|r| ((0..4).map(|c| l.w1.get(r, c) * h2[c]).sum::<f64>() + l.b1.get(r, 0)).max(0.0))
            .collect();
        let x2: Vec<f64> = (0..4)
            .map(|r| x1[r] + (0..16).map(|c| l.w2.get(r, c) * hidden[c]).sum::<f64>() + l.b2.get(r, 0))
            .collect();
        let hf = norm(&x2, p.ln_f.col(0));
        let expect: Vec<f64> = (0..3)
            .map(|r| (0..4).map(|c| p.head_w.get(r, c) * hf[c]).sum::<f64>() + p.head_b.get(r, 0))
            .collect();
        for mech in [Mechanism::Full, Mechanism::parse("mita", 1, 1).unwrap()] {
            let logits = model_forward(&[vec![tok]], &p, &mech).unwrap();
            for r in 0..3 {
                assert!((logits.get(r, 0) - expect[r]).abs() < 1e-12);
            }
        }
    }

    fn check_model_gradient(mech: Mechanism) {
        let cfg = tiny(mech, TaskKind::Recall);
        let mut p = init_params(&cfg).unwrap();
        let mut rng = Rng::new(21);
        p.head_w = Mat::random_normal(p.dims.classes, p.dims.dim, 0.5, &mut rng);
        let batch = gen_task_batch(&cfg.task, 2, 4);
        let (_, g) = loss_and_grad(&batch, &p, &mech).unwrap();
        let loss_of = |p: &BlockParams| {
            let logits = model_forward(&batch.tokens, p, &mech).unwrap();
            cross_entropy(&logits, &batch.labels.concat()).0
        };
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let n_tensors = p.tensors().len();
        for ti in 0..n_tensors {
            let len = p.tensors()[ti].as_slice().len();
            for idx in (0..len).step_by(len / 7 + 1) {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].as_mut_slice()[idx] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].as_mut_slice()[idx] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let an = g.tensors()[ti].as_slice()[idx];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{mech}: worst relative error {worst}");
    }

    #[test]
    fn model_gradient_matches_finite_differences_full() {
        check_model_gradient(Mechanism::Full);
    }

    #[test]
    fn model_gradient_matches_finite_differences_mita() {
        check_model_gradient(Mechanism::parse("mita", 2, 3).unwrap());
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let mut cfg = tiny(Mechanism::Full, TaskKind::Copy);
        cfg.lr = 0.0;
        let h = train_run(&cfg).unwrap();
        let l = h.losses();
        assert!(l.iter().all(|&x| x == l[0]));
        assert!((l[0] - (4f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny(Mechanism::parse("mita", 2, 2).unwrap(), TaskKind::Recall);
        let a = train_run(&cfg).unwrap();
        let b = train_run(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.params, b.params);
        assert_eq!(a.records.iter().filter(|r| r.eval_acc.is_some()).count(), 3);
    }

    #[test]
    fn params_round_trip_through_bytes() {
        let cfg = tiny(Mechanism::parse("route", 2, 3).unwrap(), TaskKind::Copy);
        let p = init_params(&cfg).unwrap();
        let mut bytes = Vec::new();
        write_params(&p, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"MITA");
        let back = read_params(bytes.as_slice()).unwrap();
        assert_eq!(back, p);
        bytes.push(0);
        assert!(read_params(bytes.as_slice()).is_err());
        assert!(read_params(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let cfg = TrainConfig::recall_default(Mechanism::Full);
        let mut p = init_params(&cfg).unwrap();
        let mut rng = Rng::new(2);
        p.head_w = Mat::random_normal(p.dims.classes, p.dims.dim, 1.0, &mut rng);
        let acc = evaluate(&p, &cfg.task, &Mechanism::Full, 1).unwrap();
        assert!((acc - 1.0 / 16.0).abs() < 0.05, "{acc}");
    }
}
