//! Pluggable attention mechanisms.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{check_qkv, multi_head};
use crate::error::{MitaError, Result};
use crate::grad::{full_attention_vjp_parts, mita_vjp_frozen, AttentionGrads};
use crate::math::{Mat, Scalar};
use crate::mita::{attend_subset, mita_attention, MitaConfig};

/// Queries per block in the dense attention path.
const QUERY_BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    Full,
    Mita(MitaConfig),
}

impl Mechanism {
    /// Parse `full`, `mita`, `compress` (or `compression`) and `route`.
    pub fn parse(name: &str, m: usize, k: usize) -> Result<Self> {
        match name.trim() {
            "full" => Ok(Self::Full),
            "mita" => Ok(Self::Mita(MitaConfig::full(m, k)?)),
            "compress" | "compression" => Ok(Self::Mita(MitaConfig::compression_only(m)?)),
            "route" => Ok(Self::Mita(MitaConfig::route_only(m, k)?)),
            other => Err(MitaError::UnknownMechanism(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Mita(c) if c.shared_expert && c.routed_experts => "mita",
            Self::Mita(c) if c.shared_expert => "compress",
            Self::Mita(_) => "route",
        }
    }

    pub fn config(&self) -> Option<&MitaConfig> {
        match self {
            Self::Full => None,
            Self::Mita(c) => Some(c),
        }
    }

    /// Same mechanism family with different `m` and `k`.
    pub fn with_mk(&self, m: usize, k: usize) -> Result<Self> {
        Self::parse(self.name(), m, k)
    }

    pub fn attended_count(&self, n: usize) -> usize {
        match self {
            Self::Full => n,
            Self::Mita(c) => c.attended_count(n),
        }
    }

    /// Whether the mechanism can run on a sequence of `n` tokens.
    pub fn supports_len(&self, n: usize) -> bool {
        match self {
            Self::Full => n >= 1,
            Self::Mita(c) => c.m <= n,
        }
    }

    /// Single-head forward pass.
    pub fn forward<T: Scalar>(&self, q: &Mat<T>, k: &Mat<T>, v: &Mat<T>) -> Result<Mat<T>> {
        match self {
            Self::Full => blocked_full_attention(q, k, v),
            Self::Mita(cfg) => mita_attention(q, k, v, cfg),
        }
    }

    pub fn forward_heads<T: Scalar>(&self, q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, heads: usize) -> Result<Mat<T>> {
        multi_head(q, k, v, heads, |q, k, v| self.forward(q, k, v))
    }

    /// Vector-Jacobian product of [`Mechanism::forward`]. Selections are held
    /// fixed and ties are not checked; see [`crate::grad::mita_vjp`] for the
    /// checked version.
    pub fn vjp(&self, q: &Mat, k: &Mat, v: &Mat, upstream: &Mat) -> Result<AttentionGrads> {
        match self {
            Self::Full => full_attention_vjp_parts(q, k, v, upstream),
            Self::Mita(cfg) => mita_vjp_frozen(q, k, v, cfg, upstream),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => write!(f, "full"),
            Self::Mita(c) => write!(f, "{}(m={}, k={})", self.name(), c.m, c.k),
        }
    }
}

/// Dense attention computed over blocks of queries with matrix products.
pub fn blocked_full_attention<T: Scalar>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>) -> Result<Mat<T>> {
    check_qkv("full_attention", q, k, v)?;
    let n = q.cols();
    let blocks: Vec<Mat<T>> = (0..n.div_ceil(QUERY_BLOCK))
        .into_par_iter()
        .map(|b| {
            let start = b * QUERY_BLOCK;
            let len = QUERY_BLOCK.min(n - start);
            attend_subset(&q.col_block(start, len), k, v).map(|p| p.out)
        })
        .collect::<Result<_>>()?;
    let mut out = Mat::zeros(q.rows(), n);
    for (b, block) in blocks.iter().enumerate() {
        let start = b * QUERY_BLOCK * q.rows();
        out.as_mut_slice()[start..start + block.as_slice().len()].copy_from_slice(block.as_slice());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{full_attention, AttentionInput};
    use crate::math::Rng;

    #[test]
    fn parse_and_name_round_trip() {
        for name in ["full", "mita", "compress", "route"] {
            assert_eq!(Mechanism::parse(name, 4, 4).unwrap().name(), name);
        }
        assert!(matches!(
            Mechanism::parse("linear", 4, 4),
            Err(MitaError::UnknownMechanism(_))
        ));
    }

    #[test]
    fn blocked_matches_reference() {
        let mut rng = Rng::new(77);
        let q = Mat::random_normal(8, 600, 1.0, &mut rng);
        let k = Mat::random_normal(8, 300, 1.0, &mut rng);
        let v = Mat::random_normal(8, 300, 1.0, &mut rng);
        let a = blocked_full_attention(&q, &k, &v).unwrap();
        let b = full_attention(&AttentionInput::new(q, k, v).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
