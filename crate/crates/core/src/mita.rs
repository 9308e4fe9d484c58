//! Mixture of Top-k Activations attention.
//!
//! The forward pass follows the expert-wise schedule:
//!
//! 1. landmark queries `Q~` are adaptive averages of `Q` over `m` windows;
//! 2. the landmarks score every key, `S = K^T Q~ / sqrt(d)` (`N x m`);
//! 3. landmark `i` gathers its top-`k` keys/values into expert `i`;
//! 4. a column softmax of `S` reads out the landmark values `V~ = V softmax(S)`;
//! 5. every query attends to the shared expert `(Q~, V~)`;
//! 6. every query is routed to the expert with the largest `q_i~^T q`,
//!    queries are grouped by expert, and each group attends to its expert;
//! 7. the two partial results are merged with their softmax statistics.
//!
//! The result equals one softmax over the concatenation `[Q~, K^(e)]`,
//! `[V~, V^(e)]` of the `m + k` key-value pairs each query sees.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_scale, check_qkv};
use crate::error::{mismatch, MitaError, Result};
use crate::math::{
    adaptive_avg_pool, gather_cols, matmul, matmul_tn, softmax_cols, softmax_slice, top_k_indices,
    Mat, Scalar,
};
use crate::mechanism::Mechanism;

/// Hyperparameters of one MiTA attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitaConfig {
    /// Landmark / expert count.
    pub m: usize,
    /// Expert width, clamped to the sequence length at use.
    pub k: usize,
    /// Routed experts per query. Only 1 is supported.
    pub s: usize,
    pub shared_expert: bool,
    pub routed_experts: bool,
}

impl MitaConfig {
    pub fn new(m: usize, k: usize, s: usize, shared_expert: bool, routed_experts: bool) -> Result<Self> {
        if m == 0 || k == 0 {
            return Err(MitaError::InvalidArgument(format!(
                "m and k must be positive (m = {m}, k = {k})"
            )));
        }
        if s != 1 {
            return Err(MitaError::InvalidArgument(format!(
                "only s = 1 routed expert per query is supported (got s = {s})"
            )));
        }
        if !shared_expert && !routed_experts {
            return Err(MitaError::InvalidArgument(
                "at least one of the shared and routed experts must be enabled".into(),
            ));
        }
        Ok(Self {
            m,
            k,
            s,
            shared_expert,
            routed_experts,
        })
    }

    /// Shared expert plus one routed expert per query.
    pub fn full(m: usize, k: usize) -> Result<Self> {
        Self::new(m, k, 1, true, true)
    }

    /// Shared expert only.
    pub fn compression_only(m: usize) -> Result<Self> {
        Self::new(m, 1, 1, true, false)
    }

    /// Routed experts only.
    pub fn route_only(m: usize, k: usize) -> Result<Self> {
        Self::new(m, k, 1, false, true)
    }

    /// Key-value pairs each query attends to at sequence length `n`.
    pub fn attended_count(&self, n: usize) -> usize {
        let mut c = 0;
        if self.shared_expert {
            c += self.m;
        }
        if self.routed_experts {
            c += self.k.min(n) * self.s;
        }
        c
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if self.m > n {
            return Err(MitaError::InvalidArgument(format!(
                "m = {} exceeds sequence length {n}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Landmark queries, landmark values and the landmark-key score matrix.
#[derive(Clone, Debug)]
pub struct LandmarkState<T: Scalar = f64> {
    /// `d x m`
    pub q_landmark: Mat<T>,
    /// `d x m`
    pub v_landmark: Mat<T>,
    /// `N x m`, already scaled by `1/sqrt(d)`.
    pub scores: Mat<T>,
}

pub fn build_landmarks<T: Scalar>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, m: usize) -> Result<LandmarkState<T>> {
    check_qkv("build_landmarks", q, k, v)?;
    let q_landmark = adaptive_avg_pool(q, m)?;
    let scores = matmul_tn(k, &q_landmark)?.scale(attention_scale(q.rows()));
    // softmax over the N keys, one column per landmark
    let weights = softmax_cols(&scores)?;
    let v_landmark = matmul(v, &weights)?;
    Ok(LandmarkState {
        q_landmark,
        v_landmark,
        scores,
    })
}

/// Top-k index lists per landmark plus the gathered keys and values,
/// expert-major.
#[derive(Clone, Debug)]
pub struct ExpertSet<T: Scalar = f64> {
    pub indices: Vec<Vec<usize>>,
    /// `d x (m * width)`
    pub k_gathered: Mat<T>,
    /// `d x (m * width)`
    pub v_gathered: Mat<T>,
}

impl<T: Scalar> ExpertSet<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Keys per expert after clamping to the sequence length.
    pub fn width(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }

    pub fn expert_keys(&self, i: usize) -> Mat<T> {
        self.k_gathered.col_block(i * self.width(), self.width())
    }

    pub fn expert_values(&self, i: usize) -> Mat<T> {
        self.v_gathered.col_block(i * self.width(), self.width())
    }
}

pub fn build_experts<T: Scalar>(
    state: &LandmarkState<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    width: usize,
) -> Result<ExpertSet<T>> {
    if state.scores.rows() != k.cols() || k.cols() != v.cols() {
        return Err(mismatch("build_experts", "score rows must match the key count"));
    }
    let indices: Vec<Vec<usize>> = (0..state.scores.cols())
        .map(|i| top_k_indices(state.scores.col(i), width))
        .collect::<Result<_>>()?;
    let flat: Vec<usize> = indices.concat();
    Ok(ExpertSet {
        k_gathered: gather_cols(k, &flat)?,
        v_gathered: gather_cols(v, &flat)?,
        indices,
    })
}

/// Query-to-expert assignment and the grouped layout used to run each
/// expert's queries as one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutingTable {
    pub assignment: Vec<usize>,
    /// Query indices stably sorted by expert.
    pub sorted_query_order: Vec<usize>,
    /// `group_boundaries[i]` is the number of queries routed to experts `0..=i`.
    pub group_boundaries: Vec<usize>,
}

impl RoutingTable {
    pub fn from_assignment(assignment: Vec<usize>, experts: usize) -> Self {
        let mut counts = vec![0usize; experts];
        for &a in &assignment {
            counts[a] += 1;
        }
        let mut group_boundaries = Vec::with_capacity(experts);
        let mut acc = 0;
        for c in &counts {
            acc += c;
            group_boundaries.push(acc);
        }
        let mut sorted_query_order: Vec<usize> = (0..assignment.len()).collect();
        sorted_query_order.sort_by_key(|&j| assignment[j]);
        Self {
            assignment,
            sorted_query_order,
            group_boundaries,
        }
    }

    pub fn experts(&self) -> usize {
        self.group_boundaries.len()
    }

    /// Queries routed to expert `i`, in ascending order.
    pub fn group(&self, i: usize) -> &[usize] {
        let lo = if i == 0 { 0 } else { self.group_boundaries[i - 1] };
        &self.sorted_query_order[lo..self.group_boundaries[i]]
    }
}

/// Route each query to the landmark with the largest dot product (ties go to
/// the lowest expert index).
pub fn route_queries<T: Scalar>(q: &Mat<T>, q_landmark: &Mat<T>) -> Result<RoutingTable> {
    if q.rows() != q_landmark.rows() {
        return Err(mismatch("route_queries", "query and landmark dims differ"));
    }
    let logits = matmul_tn(q_landmark, q)?; // m x N
    let assignment = (0..q.cols())
        .map(|j| {
            let col = logits.col(j);
            let mut best = 0;
            for (i, &x) in col.iter().enumerate().skip(1) {
                if x > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(RoutingTable::from_assignment(assignment, q_landmark.cols()))
}

/// Attention output for a block of queries together with the per-query
/// softmax statistics needed to merge it with other blocks of keys.
#[derive(Clone, Debug)]
pub struct PartialAttention<T: Scalar = f64> {
    /// Normalized output, `d x n`.
    pub out: Mat<T>,
    /// Largest scaled logit per query.
    pub row_max: Vec<T>,
    /// `sum(exp(logit - row_max))` per query.
    pub denom: Vec<T>,
}

/// Scaled dot-product attention of `q_block` over `(k_sub, v_sub)` that also
/// returns the softmax statistics. A `Mat` always has at least one column, so
/// the key set is never empty.
pub fn attend_subset<T: Scalar>(q_block: &Mat<T>, k_sub: &Mat<T>, v_sub: &Mat<T>) -> Result<PartialAttention<T>> {
    check_qkv("attend_subset", q_block, k_sub, v_sub)?;
    let mut probs = matmul_tn(k_sub, q_block)?.scale(attention_scale(q_block.rows()));
    let n = q_block.cols();
    let mut row_max = Vec::with_capacity(n);
    let mut denom = Vec::with_capacity(n);
    for j in 0..n {
        let (mx, den) = softmax_slice(probs.col_mut(j));
        row_max.push(mx);
        denom.push(den);
    }
    Ok(PartialAttention {
        out: matmul(v_sub, &probs)?,
        row_max,
        denom,
    })
}

/// Merge partial results over disjoint key sets into the softmax over their
/// union.
pub fn combine_partials<T: Scalar>(parts: &[PartialAttention<T>]) -> Result<Mat<T>> {
    let first = parts
        .first()
        .ok_or_else(|| MitaError::InvalidArgument("nothing to combine".into()))?;
    let shape = first.out.shape();
    for p in parts {
        if p.out.shape() != shape || p.row_max.len() != shape.1 || p.denom.len() != shape.1 {
            return Err(mismatch("combine_partials", "parts cover different query sets"));
        }
    }
    if parts.len() == 1 {
        return Ok(first.out.clone());
    }
    let mut out = Mat::zeros(shape.0, shape.1);
    for j in 0..shape.1 {
        let global = parts
            .iter()
            .fold(T::neg_infinity(), |m, p| m.max(p.row_max[j]));
        let weights: Vec<T> = parts
            .iter()
            .map(|p| (p.row_max[j] - global).exp() * p.denom[j])
            .collect();
        let total: T = weights.iter().copied().sum();
        let dst = out.col_mut(j);
        for (p, &w) in parts.iter().zip(&weights) {
            let c = w / total;
            for (o, &x) in dst.iter_mut().zip(p.out.col(j)) {
                *o = *o + c * x;
            }
        }
    }
    Ok(out)
}

/// Everything the forward pass computed, kept for diagnostics and the
/// backward pass.
#[derive(Clone, Debug)]
pub struct MitaForward<T: Scalar = f64> {
    pub config: MitaConfig,
    pub landmarks: LandmarkState<T>,
    /// Present when routed experts are enabled.
    pub experts: Option<ExpertSet<T>>,
    /// Present when routed experts are enabled.
    pub routing: Option<RoutingTable>,
    pub output: Mat<T>,
}

impl<T: Scalar> MitaForward<T> {
    /// Number of key-value pairs each query actually attended to.
    pub fn attended_counts(&self) -> Vec<usize> {
        let n = self.output.cols();
        let shared = if self.config.shared_expert {
            self.landmarks.q_landmark.cols()
        } else {
            0
        };
        match (&self.experts, &self.routing) {
            (Some(e), Some(r)) => r
                .assignment
                .iter()
                .map(|&a| shared + e.indices[a].len())
                .collect(),
            _ => vec![shared; n],
        }
    }
}

/// Run every routed expert on its query group and scatter the results back to
/// query order.
fn routed_partial<T: Scalar>(
    q: &Mat<T>,
    experts: &ExpertSet<T>,
    routing: &RoutingTable,
) -> Result<PartialAttention<T>> {
    let n = q.cols();
    let d = q.rows();
    let groups: Vec<Option<PartialAttention<T>>> = (0..experts.len())
        .into_par_iter()
        .map(|i| {
            let members = routing.group(i);
            if members.is_empty() {
                return Ok(None);
            }
            let q_block = gather_cols(q, members)?;
            attend_subset(&q_block, &experts.expert_keys(i), &experts.expert_values(i)).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut out = Mat::zeros(d, n);
    let mut row_max = vec![T::zero(); n];
    let mut denom = vec![T::zero(); n];
    for (i, part) in groups.into_iter().enumerate() {
        let Some(part) = part else { continue };
        for (slot, &j) in routing.group(i).iter().enumerate() {
            out.col_mut(j).copy_from_slice(part.out.col(slot));
            row_max[j] = part.row_max[slot];
            denom[j] = part.denom[slot];
        }
    }
    Ok(PartialAttention {
        out,
        row_max,
        denom,
    })
}

/// Full forward pass with its intermediate state.
pub fn mita_forward<T: Scalar>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, cfg: &MitaConfig) -> Result<MitaForward<T>> {
    check_qkv("mita_attention", q, k, v)?;
    if q.cols() != k.cols() {
        return Err(mismatch("mita_attention", "queries and keys must have the same length"));
    }
    let cfg = MitaConfig::new(cfg.m, cfg.k, cfg.s, cfg.shared_expert, cfg.routed_experts)?;
    cfg.check_len(k.cols())?;

    let landmarks = build_landmarks(q, k, v, cfg.m)?;
    let mut parts = Vec::with_capacity(2);
    if cfg.shared_expert {
        parts.push(attend_subset(q, &landmarks.q_landmark, &landmarks.v_landmark)?);
    }
    let (experts, routing) = if cfg.routed_experts {
        let experts = build_experts(&landmarks, k, v, cfg.k)?;
        let routing = route_queries(q, &landmarks.q_landmark)?;
        parts.push(routed_partial(q, &experts, &routing)?);
        (Some(experts), Some(routing))
    } else {
        (None, None)
    };
    let output = combine_partials(&parts)?;
    Ok(MitaForward {
        config: cfg,
        landmarks,
        experts,
        routing,
        output,
    })
}

pub fn mita_attention<T: Scalar>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, cfg: &MitaConfig) -> Result<Mat<T>> {
    Ok(mita_forward(q, k, v, cfg)?.output)
}

/// Every query attends only to the landmark queries and landmark values.
pub fn compression_only_attention<T: Scalar>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, m: usize) -> Result<Mat<T>> {
    mita_attention(q, k, v, &MitaConfig::compression_only(m)?)
}

/// Every query attends only to the `k` keys of its routed expert.
pub fn route_only_attention<T: Scalar>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    m: usize,
    width: usize,
) -> Result<Mat<T>> {
    mita_attention(q, k, v, &MitaConfig::route_only(m, width)?)
}

/// Floating point operations (two per multiply-add) of one single-head
/// forward pass over `n` tokens of dimension `d`.
///
/// * full: `2 N^2 d` multiply-adds for the scores plus the same for the
///   weighted sum, so `4 N^2 d`.
/// * MiTA: pooling costs `N d + m d`; landmark scores `2 N m d`; with the
///   shared expert the landmark values `2 N m d` and the shared attention
///   `4 N m d`; with routed experts the routing logits `2 N m d` and the
///   routed attention `4 N min(k, N) s d`.
///
/// Exponentials, top-k selection and the partial merge are not multiply-adds
/// and are not counted. Every term is linear in `d`, so `h` heads of width
/// `d / h` cost exactly as much as one head of width `d`.
pub fn flop_count(mech: &Mechanism, n: usize, d: usize) -> Result<u64> {
    if n == 0 || d == 0 {
        return Err(MitaError::InvalidArgument("flop count needs N >= 1 and d >= 1".into()));
    }
    let (n, d) = (n as u64, d as u64);
    match mech {
        Mechanism::Full => Ok(4 * n * n * d),
        Mechanism::Mita(cfg) => {
            cfg.check_len(n as usize)?;
            let m = cfg.m as u64;
            let mut flops = n * d + m * d + 2 * n * m * d;
            if cfg.shared_expert {
                flops += 2 * n * m * d + 4 * n * m * d;
            }
            if cfg.routed_experts {
                let width = (cfg.k as u64).min(n);
                flops += 2 * n * m * d + 4 * n * width * cfg.s as u64 * d;
            }
            Ok(flops)
        }
    }
}
