//! Closed-form vector-Jacobian products for dense and MiTA attention, and the
//! finite-difference machinery that checks them.
//!
//! Top-k expert membership and the routing argmax are piecewise constant in
//! the inputs. The MiTA backward pass treats them as fixed: gradients flow
//! through pooling, the landmark scores, the landmark-value softmax, and both
//! attention calls, but not through the selections themselves.

use serde::Serialize;

use crate::attention::{attention_scale, check_qkv, full_attention, AttentionInput};
use crate::error::{mismatch, MitaError, Result};
use crate::math::{
    adaptive_avg_pool_adjoint, axpy, dot, matmul, matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn,
    softmax_cols, softmax_slice, Mat, Rng,
};
use crate::mechanism::Mechanism;
use crate::mita::{mita_attention, mita_forward, MitaConfig};

/// Selection gaps below this are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-9;
/// Default central-difference step.
pub const FD_EPS: f64 = 1e-3;

/// Cotangents of the attention inputs.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub dq: Mat,
    pub dk: Mat,
    pub dv: Mat,
}

impl AttentionGrads {
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.dq
            .max_abs_diff(&other.dq)
            .max(self.dk.max_abs_diff(&other.dk))
            .max(self.dv.max_abs_diff(&other.dv))
    }
}

fn check_upstream(op: &'static str, q: &Mat, upstream: &Mat) -> Result<()> {
    if upstream.shape() != q.shape() {
        return Err(mismatch(
            op,
            format!("upstream is {:?}, output is {:?}", upstream.shape(), q.shape()),
        ));
    }
    Ok(())
}

/// Exact VJP of [`full_attention`].
pub fn full_attention_vjp(input: &AttentionInput, upstream: &Mat) -> Result<AttentionGrads> {
    full_attention_vjp_parts(&input.q, &input.k, &input.v, upstream)
}

pub(crate) fn full_attention_vjp_parts(q: &Mat, k: &Mat, v: &Mat, upstream: &Mat) -> Result<AttentionGrads> {
    check_qkv("full_attention_vjp", q, k, v)?;
    check_upstream("full_attention_vjp", q, upstream)?;
    let c = attention_scale::<f64>(q.rows());
    let probs = softmax_cols(&matmul_tn(k, q)?.scale(c))?; // N x Nq
    let dv = matmul_nt(upstream, &probs)?;
    let mut ds = matmul_tn(v, upstream)?; // dA, then dS in place
    for j in 0..ds.cols() {
        let a = probs.col(j);
        let col = ds.col_mut(j);
        let inner = dot(a, col);
        for (x, &p) in col.iter_mut().zip(a) {
            *x = p * (*x - inner);
        }
    }
    Ok(AttentionGrads {
        dq: matmul(k, &ds)?.scale(c),
        dk: matmul_nt(q, &ds)?.scale(c),
        dv,
    })
}

/// Smallest gap at any selection boundary: between the k-th and (k+1)-th
/// landmark score of every expert and between the two best routing logits of
/// every query. Infinite when nothing is selected.
pub fn selection_margin(q: &Mat, k: &Mat, v: &Mat, cfg: &MitaConfig) -> Result<f64> {
    let fwd = mita_forward(q, k, v, cfg)?;
    let mut margin = f64::INFINITY;
    if !fwd.config.routed_experts {
        return Ok(margin);
    }
    let n = k.cols();
    let width = fwd.config.k.min(n);
    let scores = &fwd.landmarks.scores;
    if width < n {
        for i in 0..scores.cols() {
            let mut col = scores.col(i).to_vec();
            col.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
            margin = margin.min(col[width - 1] - col[width]);
        }
    }
    let m = fwd.landmarks.q_landmark.cols();
    if m > 1 {
        let logits = matmul_tn(&fwd.landmarks.q_landmark, q)?;
        for j in 0..logits.cols() {
            let mut col = logits.col(j).to_vec();
            col.sort_by(|a, b| b.partial_cmp(a).expect("finite logits"));
            margin = margin.min(col[0] - col[1]);
        }
    }
    Ok(margin)
}

/// Exact VJP of [`mita_attention`] with expert membership and routing held
/// fixed. Fails with [`MitaError::SelectionTie`] at a nondifferentiable point.
pub fn mita_vjp(q: &Mat, k: &Mat, v: &Mat, cfg: &MitaConfig, upstream: &Mat) -> Result<AttentionGrads> {
    let margin = selection_margin(q, k, v, cfg)?;
    if margin < TIE_TOLERANCE {
        return Err(MitaError::SelectionTie(format!(
            "selection gap {margin:e} is below {TIE_TOLERANCE:e}"
        )));
    }
    mita_vjp_frozen(q, k, v, cfg, upstream)
}

/// [`mita_vjp`] without the tie check, as used during training.
pub fn mita_vjp_frozen(q: &Mat, k: &Mat, v: &Mat, cfg: &MitaConfig, upstream: &Mat) -> Result<AttentionGrads> {
    check_upstream("mita_vjp", q, upstream)?;
    let fwd = mita_forward(q, k, v, cfg)?;
    let (d, n) = q.shape();
    let c = attention_scale::<f64>(d);
    let lm = &fwd.landmarks;
    let m = lm.q_landmark.cols();

    let mut dq = Mat::zeros(d, n);
    let mut dk = Mat::zeros(d, n);
    let mut dv = Mat::zeros(d, n);
    let mut dq_lm = Mat::zeros(d, m);
    let mut dv_lm = Mat::zeros(d, m);

    let shared = fwd.config.shared_expert;
    let mut logits = Vec::new();
    let mut dw = Vec::new();
    for j in 0..n {
        let qj = q.col(j);
        let g = upstream.col(j);
        let routed: &[usize] = match (&fwd.experts, &fwd.routing) {
            (Some(e), Some(r)) => &e.indices[r.assignment[j]],
            _ => &[],
        };
        let n_shared = if shared { m } else { 0 };

        logits.clear();
        if shared {
            logits.extend((0..m).map(|i| c * dot(lm.q_landmark.col(i), qj)));
        }
        logits.extend(routed.iter().map(|&t| c * dot(k.col(t), qj)));
        softmax_slice(&mut logits);
        let w = &logits;

        dw.clear();
        if shared {
            dw.extend((0..m).map(|i| dot(lm.v_landmark.col(i), g)));
        }
        dw.extend(routed.iter().map(|&t| dot(v.col(t), g)));
        let inner = dot(w, &dw);

        let dqj = dq.col_mut(j);
        for (slot, (&wi, &dwi)) in w.iter().zip(&dw).enumerate() {
            let dl = wi * (dwi - inner);
            if slot < n_shared {
                axpy(wi, g, dv_lm.col_mut(slot));
                axpy(c * dl, lm.q_landmark.col(slot), dqj);
                axpy(c * dl, qj, dq_lm.col_mut(slot));
            } else {
                let t = routed[slot - n_shared];
                axpy(wi, g, dv.col_mut(t));
                axpy(c * dl, k.col(t), dqj);
                axpy(c * dl, qj, dk.col_mut(t));
            }
        }
    }

    if shared {
        // landmark values: V~ = V softmax(S), S = c K^T Q~
        let probs = softmax_cols(&lm.scores)?;
        matmul_nt_acc(&mut dv, &dv_lm, &probs)?;
        let mut ds = matmul_tn(v, &dv_lm)?;
        for i in 0..m {
            let a = probs.col(i);
            let col = ds.col_mut(i);
            let inner = dot(a, col);
            for (x, &p) in col.iter_mut().zip(a) {
                *x = c * p * (*x - inner);
            }
        }
        matmul_nt_acc(&mut dk, &lm.q_landmark, &ds)?;
        matmul_acc(&mut dq_lm, k, &ds)?;
    }
    dq.add_assign(&adaptive_avg_pool_adjoint(&dq_lm, n));

    Ok(AttentionGrads { dq, dk, dv })
}

/// Fourth-order central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Mat) -> f64, x: &Mat, eps: f64) -> Mat {
    let mut probe = x.clone();
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut at = |i: usize, j: usize, h: f64| {
        probe.set(i, j, x.get(i, j) + h);
        let y = f(&probe);
        probe.set(i, j, x.get(i, j));
        y
    };
    for j in 0..x.cols() {
        for i in 0..x.rows() {
            let d1 = at(i, j, eps) - at(i, j, -eps);
            let d2 = at(i, j, 2.0 * eps) - at(i, j, -2.0 * eps);
            out.set(i, j, (8.0 * d1 - d2) / (12.0 * eps));
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub mechanism: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub tie_detected: bool,
    pub coordinates: usize,
}

/// Compare analytic and finite-difference gradients of `<upstream, attn(q, k, v)>`.
pub fn grad_check_at(
    mech: &Mechanism,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    upstream: &Mat,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let forward = |q: &Mat, k: &Mat, v: &Mat| -> Result<Mat> {
        match mech {
            Mechanism::Full => full_attention(&AttentionInput::new(q.clone(), k.clone(), v.clone())?),
            Mechanism::Mita(cfg) => mita_attention(q, k, v, cfg),
        }
    };
    let analytic = match mech {
        Mechanism::Full => full_attention_vjp_parts(q, k, v, upstream),
        Mechanism::Mita(cfg) => mita_vjp(q, k, v, cfg, upstream),
    };
    let analytic = match analytic {
        Ok(g) => g,
        Err(MitaError::SelectionTie(_)) => {
            return Ok(GradCheckReport {
                mechanism: mech.to_string(),
                max_rel_err: 0.0,
                pass: true,
                tie_detected: true,
                coordinates: 0,
            })
        }
        Err(e) => return Err(e),
    };
    let objective = |out: Result<Mat>| out.map_or(f64::NAN, |o| dot(o.as_slice(), upstream.as_slice()));
    let numeric = [
        finite_diff_grad(|x| objective(forward(x, k, v)), q, eps),
        finite_diff_grad(|x| objective(forward(q, x, v)), k, eps),
        finite_diff_grad(|x| objective(forward(q, k, x)), v, eps),
    ];
    let mut max_rel_err: f64 = 0.0;
    let mut coordinates = 0;
    for (a, b) in [&analytic.dq, &analytic.dk, &analytic.dv].into_iter().zip(&numeric) {
        for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
            let err = relative_error(x, y);
            max_rel_err = if err.is_nan() { f64::INFINITY } else { max_rel_err.max(err) };
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        mechanism: mech.to_string(),
        max_rel_err,
        pass: max_rel_err < tol || tol.is_infinite(),
        tie_detected: false,
        coordinates,
    })
}

/// Standard-normal `q`, `k`, `v` and upstream of shape `d x n` drawn from `seed`.
pub fn sample_instance(d: usize, n: usize, seed: u64) -> [Mat; 4] {
    let mut rng = Rng::new(seed);
    std::array::from_fn(|_| Mat::random_normal(d, n, 1.0, &mut rng))
}

/// [`grad_check_at`] on an instance sampled from `seed`.
pub fn grad_check(mech: &Mechanism, d: usize, n: usize, seed: u64, tol: f64) -> Result<GradCheckReport> {
    let [q, k, v, up] = sample_instance(d, n, seed);
    grad_check_at(mech, &q, &k, &v, &up, FD_EPS, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::adaptive_avg_pool;

    #[test]
    fn single_key_gradients() {
        let [q, k, v, up] = sample_instance(3, 1, 1);
        let g = full_attention_vjp_parts(&q, &k, &v, &up).unwrap();
        assert!(g.dv.max_abs_diff(&up) < 1e-15);
        assert!(g.dq.max_abs() < 1e-15 && g.dk.max_abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let [q, k, v, _] = sample_instance(4, 8, 2);
        let zero = Mat::zeros(4, 8);
        let g = full_attention_vjp_parts(&q, &k, &v, &zero).unwrap();
        assert_eq!(g.dq.max_abs() + g.dk.max_abs() + g.dv.max_abs(), 0.0);
        let g = mita_vjp(&q, &k, &v, &MitaConfig::full(2, 3).unwrap(), &zero).unwrap();
        assert_eq!(g.dq.max_abs() + g.dk.max_abs() + g.dv.max_abs(), 0.0);
    }

    #[test]
    fn full_vjp_matches_finite_differences() {
        let r = grad_check(&Mechanism::Full, 4, 6, 3, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.coordinates, 72);
    }

    #[test]
    fn mita_vjp_matches_finite_differences() {
        let mech = Mechanism::Mita(MitaConfig::full(4, 3).unwrap());
        let r = grad_check(&mech, 4, 16, 5, 1e-5).unwrap();
        assert!(r.pass && !r.tie_detected, "{r:?}");
        for mech in [
            Mechanism::parse("compress", 3, 1).unwrap(),
            Mechanism::parse("route", 3, 4).unwrap(),
        ] {
            let r = grad_check(&mech, 4, 10, 6, 1e-5).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn route_only_full_width_vjp_is_dense_vjp() {
        let [q, k, v, up] = sample_instance(4, 12, 7);
        let dense = full_attention_vjp_parts(&q, &k, &v, &up).unwrap();
        let routed = mita_vjp(&q, &k, &v, &MitaConfig::route_only(3, 12).unwrap(), &up).unwrap();
        assert!(dense.max_abs_diff(&routed) < 1e-10);
    }

    #[test]
    fn finite_difference_examples() {
        let mut rng = Rng::new(8);
        let c = Mat::random_normal(3, 4, 1.0, &mut rng);
        let x = Mat::random_normal(3, 4, 1.0, &mut rng);
        let lin = finite_diff_grad(|x| dot(c.as_slice(), x.as_slice()), &x, FD_EPS);
        assert!(lin.max_abs_diff(&c) < 1e-9);
        let quad = finite_diff_grad(|x| dot(x.as_slice(), x.as_slice()), &x, FD_EPS);
        assert!(quad.max_abs_diff(&x.scale(2.0)) < 1e-8);

        let [q, k, v, _] = sample_instance(3, 5, 9);
        let ones = Mat::filled(3, 5, 1.0);
        let sum_out = |x: &Mat| {
            full_attention(&AttentionInput::new(x.clone(), k.clone(), v.clone()).unwrap())
                .unwrap()
                .as_slice()
                .iter()
                .sum::<f64>()
        };
        let fd = finite_diff_grad(sum_out, &q, FD_EPS);
        let an = full_attention_vjp_parts(&q, &k, &v, &ones).unwrap().dq;
        for (a, b) in an.as_slice().iter().zip(fd.as_slice()) {
            assert!(relative_error(*a, *b) < 1e-5);
        }
    }

    #[test]
    fn exact_tie_is_flagged() {
        // identical keys put every top-1 boundary on a tie
        let [q, k, v, up] = sample_instance(4, 8, 10);
        let k = Mat::from_fn(4, 8, |i, _| k.get(i, 0));
        let cfg = MitaConfig::full(1, 1).unwrap();
        assert!(matches!(
            mita_vjp(&q, &k, &v, &cfg, &up),
            Err(MitaError::SelectionTie(_))
        ));
        let r = grad_check_at(&Mechanism::Mita(cfg), &q, &k, &v, &up, FD_EPS, 1e-5).unwrap();
        assert!(r.tie_detected && r.pass);
    }

    #[test]
    fn infinite_tolerance_always_passes() {
        let mech = Mechanism::Mita(MitaConfig::full(2, 2).unwrap());
        let r = grad_check(&mech, 2, 6, 11, f64::INFINITY).unwrap();
        assert!(r.pass);
    }

    #[test]
    fn pooling_path_is_the_pool_adjoint() {
        // with upstream only on the landmark queries, dQ is P^T dQ~
        let mut rng = Rng::new(12);
        let g = Mat::random_normal(3, 4, 1.0, &mut rng);
        let n = 10;
        let fd = finite_diff_grad(
            |x| dot(adaptive_avg_pool(x, 4).unwrap().as_slice(), g.as_slice()),
            &Mat::random_normal(3, n, 1.0, &mut rng),
            FD_EPS,
        );
        assert!(fd.max_abs_diff(&adaptive_avg_pool_adjoint(&g, n)) < 1e-9);
    }

    #[test]
    fn directional_derivative_matches_vjp() {
        let [q, k, v, up] = sample_instance(4, 16, 13);
        let cfg = MitaConfig::full(4, 3).unwrap();
        let g = mita_vjp(&q, &k, &v, &cfg, &up).unwrap();
        let mut rng = Rng::new(14);
        let dirs = [
            Mat::random_normal(4, 16, 1.0, &mut rng),
            Mat::random_normal(4, 16, 1.0, &mut rng),
            Mat::random_normal(4, 16, 1.0, &mut rng),
        ];
        let predicted = dot(g.dq.as_slice(), dirs[0].as_slice())
            + dot(g.dk.as_slice(), dirs[1].as_slice())
            + dot(g.dv.as_slice(), dirs[2].as_slice());
        let at = |t: f64| {
            let shift = |x: &Mat, dx: &Mat| {
                let mut y = x.clone();
                y.add_assign(&dx.scale(t));
                y
            };
            let out = mita_attention(&shift(&q, &dirs[0]), &shift(&k, &dirs[1]), &shift(&v, &dirs[2]), &cfg).unwrap();
            dot(out.as_slice(), up.as_slice())
        };
        for delta in [1e-4, 1e-5, 1e-6] {
            let slope = (at(delta) - at(-delta)) / (2.0 * delta);
            assert!(relative_error(slope, predicted) < 1e-5, "delta {delta}: {slope} vs {predicted}");
        }
    }
}
