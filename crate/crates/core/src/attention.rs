//! Reference attention: scaled dot-product attention, its fast-weight MLP
//! form, and a multi-head splitter. Every other mechanism is tested against
//! these.

use rayon::prelude::*;

use crate::error::{mismatch, MitaError, Result};
use crate::math::{axpy, dot, softmax_slice, Mat, Scalar};

/// Queries `d x N_q`, keys and values `d x N`.
#[derive(Clone, Debug)]
pub struct AttentionInput<T: Scalar = f64> {
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
}

impl<T: Scalar> AttentionInput<T> {
    pub fn new(q: Mat<T>, k: Mat<T>, v: Mat<T>) -> Result<Self> {
        check_qkv("attention", &q, &k, &v)?;
        if !(q.is_finite() && k.is_finite() && v.is_finite()) {
            return Err(MitaError::NonFinite("attention input"));
        }
        Ok(Self { q, k, v })
    }

    pub fn head_dim(&self) -> usize {
        self.q.rows()
    }

    /// `1 / sqrt(d)`.
    pub fn scale(&self) -> T {
        attention_scale(self.head_dim())
    }
}

pub fn attention_scale<T: Scalar>(d: usize) -> T {
    T::one() / T::lit(d as f64).sqrt()
}

pub(crate) fn check_qkv<T: Scalar>(
    op: &'static str,
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
) -> Result<()> {
    if q.rows() != k.rows() || k.rows() != v.rows() {
        return Err(mismatch(
            op,
            format!(
                "feature dims differ: q {}, k {}, v {}",
                q.rows(),
                k.rows(),
                v.rows()
            ),
        ));
    }
    if k.cols() != v.cols() {
        return Err(mismatch(
            op,
            format!("{} keys but {} values", k.cols(), v.cols()),
        ));
    }
    Ok(())
}

/// `V softmax(K^T q / sqrt(d))` for every query column.
pub fn full_attention<T: Scalar>(input: &AttentionInput<T>) -> Result<Mat<T>> {
    let AttentionInput { q, k, v } = input;
    check_qkv("full_attention", q, k, v)?;
    let d = q.rows();
    let scale = input.scale();
    let mut out = Mat::zeros(d, q.cols());
    out.as_mut_slice()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(j, dst)| {
            let qj = q.col(j);
            let mut w: Vec<T> = (0..k.cols()).map(|n| dot(k.col(n), qj) * scale).collect();
            softmax_slice(&mut w);
            for (n, &wn) in w.iter().enumerate() {
                axpy(wn, v.col(n), dst);
            }
        });
    Ok(out)
}

/// Attention written as an `N`-wide two-layer MLP whose first-layer weights are
/// the scaled keys, whose second-layer weights are the values divided by the
/// normalizer, and whose activation is `exp`.
///
/// The same max shift is applied to the hidden activations and to the
/// normalizer, so the quotient is unchanged.
pub fn fast_weight_mlp<T: Scalar>(input: &AttentionInput<T>) -> Result<Mat<T>> {
    let AttentionInput { q, k, v } = input;
    check_qkv("fast_weight_mlp", q, k, v)?;
    let d = q.rows();
    let k_hat = k.scale(input.scale());
    let mut out = Mat::zeros(d, q.cols());
    for j in 0..q.cols() {
        let pre: Vec<T> = (0..k.cols()).map(|n| dot(k_hat.col(n), q.col(j))).collect();
        let shift = pre.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let hidden: Vec<T> = pre.iter().map(|&x| (x - shift).exp()).collect();
        let normalizer: T = hidden.iter().copied().sum();
        let dst = out.col_mut(j);
        for (n, &h) in hidden.iter().enumerate() {
            // second layer weight column is v_n / normalizer
            for (o, &vv) in dst.iter_mut().zip(v.col(n)) {
                *o = *o + (vv / normalizer) * h;
            }
        }
    }
    Ok(out)
}

/// Split the `D` feature rows into `heads` contiguous blocks, run `mech` on
/// each block independently, and stack the results back.
pub fn multi_head<T, F>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, heads: usize, mech: F) -> Result<Mat<T>>
where
    T: Scalar,
    F: Fn(&Mat<T>, &Mat<T>, &Mat<T>) -> Result<Mat<T>> + Sync,
{
    check_qkv("multi_head", q, k, v)?;
    let big_d = q.rows();
    if heads == 0 || !big_d.is_multiple_of(heads) {
        return Err(MitaError::InvalidArgument(format!(
            "model dim {big_d} is not divisible by {heads} heads"
        )));
    }
    let d = big_d / heads;
    let outs: Vec<Mat<T>> = (0..heads)
        .into_par_iter()
        .map(|h| {
            mech(
                &q.row_block(h * d, d),
                &k.row_block(h * d, d),
                &v.row_block(h * d, d),
            )
        })
        .collect::<Result<_>>()?;
    let mut out = Mat::zeros(big_d, q.cols());
    for (h, o) in outs.iter().enumerate() {
        if o.shape() != (d, q.cols()) {
            return Err(mismatch("multi_head", "mechanism returned the wrong shape"));
        }
        out.set_row_block(h * d, o);
    }
    Ok(out)
}
