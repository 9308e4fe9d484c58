//! Inference throughput of a small transformer forward pass.
//!
//! The model is a stack of pre-norm blocks (attention plus a ReLU MLP) run in
//! `f32` on random inputs. Sequences of a batch run in parallel. The batch
//! size is doubled until throughput stops improving by at least 5% or a
//! single forward pass exceeds the time budget.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MitaError, Result};
use crate::math::{matmul, Mat, Rng, Scalar};
use crate::mechanism::Mechanism;
use crate::mita::flop_count;

pub struct BenchLayer<T: Scalar = f32> {
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub w1: Mat<T>,
    pub w2: Mat<T>,
}

pub struct BenchModel<T: Scalar = f32> {
    pub layers: Vec<BenchLayer<T>>,
}

impl BenchModel<f64> {
    pub fn random(dim: usize, layers: usize, seed: u64) -> Self {
        let mut rng = Rng::with_stream(seed, 1);
        let mut w = |rows: usize, cols: usize| Mat::random_normal(rows, cols, 1.0 / (cols as f64).sqrt(), &mut rng);
        let layers = (0..layers)
            .map(|_| BenchLayer {
                wq: w(dim, dim),
                wk: w(dim, dim),
                wv: w(dim, dim),
                wo: w(dim, dim),
                w1: w(4 * dim, dim),
                w2: w(dim, 4 * dim),
            })
            .collect();
        Self { layers }
    }
}

impl<T: Scalar> BenchModel<T> {
    pub fn cast<U: Scalar>(&self) -> BenchModel<U> {
        BenchModel {
            layers: self
                .layers
                .iter()
                .map(|l| BenchLayer {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].wq.rows()
    }
}

fn normalize<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let d = T::lit(x.rows() as f64);
    let mut y = x.clone();
    for j in 0..y.cols() {
        let col = y.col_mut(j);
        let mean = col.iter().copied().sum::<T>() / d;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv = T::one() / (var + T::lit(1e-5)).sqrt();
        col.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    y
}

/// Forward pass over one sequence `x` (`D x N`).
pub fn bench_forward<T: Scalar>(model: &BenchModel<T>, x: &Mat<T>, heads: usize, mech: &Mechanism) -> Result<Mat<T>> {
    let mut x = x.clone();
    for l in &model.layers {
        let h = normalize(&x);
        let attn = mech.forward_heads(&matmul(&l.wq, &h)?, &matmul(&l.wk, &h)?, &matmul(&l.wv, &h)?, heads)?;
        x.add_assign(&matmul(&l.wo, &attn)?);
        let hidden = matmul(&l.w1, &normalize(&x))?.map(|u| u.max(T::zero()));
        x.add_assign(&matmul(&l.w2, &hidden)?);
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mechanism: Mechanism,
    pub seq_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub reps: usize,
    /// Untimed passes before measuring; the first batch-tuning pass counts.
    pub warmup: usize,
    pub seed: u64,
    pub max_batch: usize,
    /// Stop growing the batch once one forward pass takes longer than this.
    pub time_budget: Duration,
}

impl BenchConfig {
    /// Three layers of width 128 with two heads.
    pub fn new(mechanism: Mechanism, seq_len: usize) -> Self {
        Self {
            mechanism,
            seq_len,
            dim: 128,
            heads: 2,
            layers: 3,
            reps: 3,
            warmup: 1,
            seed: 0,
            max_batch: 64,
            time_budget: Duration::from_millis(1500),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub mech: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub heads: usize,
    pub m: usize,
    pub k: usize,
    pub s: usize,
    pub batch: usize,
    pub tokens_per_s: f64,
    /// Attention flops of one sequence over all layers.
    pub flops: u64,
    pub bytes_moved_estimate: u64,
    pub median_secs: f64,
    /// Coefficient of variation of the timed passes.
    pub cv: f64,
    pub threads: usize,
    pub reps: usize,
}

/// Attention flops of one forward pass over all layers.
pub fn model_flops(mech: &Mechanism, n: usize, dim: usize, layers: usize) -> Result<u64> {
    Ok(layers as u64 * flop_count(mech, n, dim)?)
}

fn run_batch(model: &BenchModel<f32>, inputs: &[Mat<f32>], heads: usize, mech: &Mechanism) -> Result<Duration> {
    let start = Instant::now();
    let outs: Vec<Mat<f32>> = inputs
        .par_iter()
        .map(|x| bench_forward(model, x, heads, mech))
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed();
    if outs.iter().any(|o| !o.is_finite()) {
        return Err(MitaError::NonFinite("benchmark output"));
    }
    Ok(elapsed)
}

pub fn bench_attention(cfg: &BenchConfig) -> Result<BenchRecord> {
    if cfg.reps < 3 || cfg.warmup < 1 {
        return Err(MitaError::InvalidArgument("need reps >= 3 and warmup >= 1".into()));
    }
    if !cfg.dim.is_multiple_of(cfg.heads) || cfg.layers == 0 {
        return Err(MitaError::InvalidArgument(format!(
            "dim {} must be divisible by heads {} and layers positive",
            cfg.dim, cfg.heads
        )));
    }
    let mech = &cfg.mechanism;
    if !mech.supports_len(cfg.seq_len) {
        return Err(MitaError::InvalidArgument(format!("{mech} cannot run on {} tokens", cfg.seq_len)));
    }
    let model = BenchModel::random(cfg.dim, cfg.layers, cfg.seed).cast::<f32>();
    let make = |count: usize| -> Vec<Mat<f32>> {
        (0..count)
            .map(|i| {
                let mut rng = Rng::with_stream(cfg.seed, 1000 + i as u64);
                Mat::random_normal(cfg.dim, cfg.seq_len, 1.0, &mut rng).cast()
            })
            .collect()
    };
    let tokens = |batch: usize, t: Duration| (batch * cfg.seq_len) as f64 / t.as_secs_f64();

    let mut batch = 1;
    let mut inputs = make(batch);
    let mut last = run_batch(&model, &inputs, cfg.heads, mech)?;
    let mut best = tokens(batch, last);
    while batch * 2 <= cfg.max_batch && last <= cfg.time_budget {
        let bigger = make(batch * 2);
        let t = run_batch(&model, &bigger, cfg.heads, mech)?;
        if tokens(batch * 2, t) < best * 1.05 {
            break;
        }
        batch *= 2;
        inputs = bigger;
        best = tokens(batch, t);
        last = t;
    }
    for _ in 1..cfg.warmup {
        run_batch(&model, &inputs, cfg.heads, mech)?;
    }
    let mut times: Vec<f64> = (0..cfg.reps)
        .map(|_| run_batch(&model, &inputs, cfg.heads, mech).map(|t| t.as_secs_f64()))
        .collect::<Result<_>>()?;
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64;
    times.sort_by(f64::total_cmp);
    let median = times[times.len() / 2];
    let (m, k, s) = mech.config().map_or((0, 0, 0), |c| (c.m, c.k, c.s));
    let attended = mech.attended_count(cfg.seq_len) as u64;
    let (n, d) = (cfg.seq_len as u64, cfg.dim as u64);
    Ok(BenchRecord {
        mech: mech.name().to_string(),
        n: cfg.seq_len,
        dim: cfg.dim,
        heads: cfg.heads,
        m,
        k,
        s,
        batch,
        tokens_per_s: (batch * cfg.seq_len) as f64 / median,
        flops: model_flops(mech, cfg.seq_len, cfg.dim, cfg.layers)?,
        bytes_moved_estimate: 4 * cfg.layers as u64 * (4 * n * d + 2 * attended * n * d),
        median_secs: median,
        cv: var.sqrt() / mean,
        threads: rayon::current_num_threads(),
        reps: cfg.reps,
    })
}
