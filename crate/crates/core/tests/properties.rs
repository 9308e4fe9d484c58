use mita_core::diag::{coverage_mask, overlap_miou};
use mita_core::math::{adaptive_avg_pool, gather_cols, softmax_slice, top_k_indices};
use mita_core::mita::{build_experts, build_landmarks, flop_count, mita_forward, route_queries};
use mita_core::{full_attention, mita_attention, AttentionInput, Mat, Mechanism, MitaConfig, Rng};
use proptest::prelude::*;

/// Plain per-query softmax attention with explicit loops.
fn naive_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q.rows();
    let scale = 1.0 / (d as f64).sqrt();
    Mat::from_fn(v.rows(), q.cols(), |r, i| {
        let logits: Vec<f64> = (0..k.cols())
            .map(|j| (0..d).map(|t| q.get(t, i) * k.get(t, j)).sum::<f64>() * scale)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        (0..k.cols()).map(|j| w[j] / z * v.get(r, j)).sum()
    })
}

/// MiTA written out directly: pooled landmarks, per-landmark top-k key sets,
/// argmax routing and one softmax over the concatenated key set per query.
fn naive_mita(q: &Mat, k: &Mat, v: &Mat, m: usize, width: usize) -> Mat {
    let (d, n) = q.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let lm = Mat::from_fn(d, m, |r, i| {
        let (a, b) = ((i * n) / m, ((i + 1) * n).div_ceil(m));
        (a..b).map(|j| q.get(r, j)).sum::<f64>() / (b - a) as f64
    });
    let dotc = |a: &Mat, i: usize, b: &Mat, j: usize| (0..d).map(|t| a.get(t, i) * b.get(t, j)).sum::<f64>();
    let mut sets = Vec::new();
    let mut vl = Mat::zeros(d, m);
    for i in 0..m {
        let s: Vec<f64> = (0..n).map(|j| dotc(k, j, &lm, i) * scale).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        order.truncate(width.min(n));
        sets.push(order);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for r in 0..d {
            vl.set(r, i, (0..n).map(|j| v.get(r, j) * w[j] / z).sum());
        }
    }
    let mut out = Mat::zeros(d, n);
    for i in 0..n {
        let e = (0..m).fold(0, |b, c| if dotc(&lm, c, q, i) > dotc(&lm, b, q, i) { c } else { b });
        let keys = Mat::hcat(&[&lm, &gather_cols(k, &sets[e]).unwrap()]).unwrap();
        let vals = Mat::hcat(&[&vl, &gather_cols(v, &sets[e]).unwrap()]).unwrap();
        let col = naive_attention(&q.col_block(i, 1), &keys, &vals);
        out.col_mut(i).copy_from_slice(col.col(0));
    }
    out
}

fn qkv(d: usize, n: usize, seed: u64) -> (Mat, Mat, Mat) {
    let mut rng = Rng::new(seed);
    (
        Mat::random_normal(d, n, 1.0, &mut rng),
        Mat::random_normal(d, n, 1.0, &mut rng),
        Mat::random_normal(d, n, 1.0, &mut rng),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(xs in prop::collection::vec(-300.0f64..300.0, 1..50)) {
        let mut p = xs.clone();
        softmax_slice(&mut p);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn top_k_matches_sorting(xs in prop::collection::vec(0u8..4, 1..20), k in 1usize..24) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| xs[b].partial_cmp(&xs[a]).unwrap().then(a.cmp(&b)));
        order.truncate(k);
        prop_assert_eq!(top_k_indices(&xs, k).unwrap(), order);
    }

    #[test]
    fn full_attention_matches_loops(d in 1usize..9, n in 1usize..40, seed in any::<u64>()) {
        let (q, k, v) = qkv(d, n, seed);
        let fast = full_attention(&AttentionInput::new(q.clone(), k.clone(), v.clone()).unwrap()).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_attention(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn mita_matches_direct_formulation(d in 1usize..9, n in 2usize..48, mf in 0.0f64..1.0, kf in 0.0f64..1.2, seed in any::<u64>()) {
        let m = 1 + (mf * (n.min(10) - 1) as f64) as usize;
        let width = 1 + (kf * n as f64) as usize;
        let (q, k, v) = qkv(d, n, seed);
        let cfg = MitaConfig::full(m, width).unwrap();
        let got = mita_attention(&q, &k, &v, &cfg).unwrap();
        prop_assert!(got.max_abs_diff(&naive_mita(&q, &k, &v, m, width)) < 1e-12);
    }

    #[test]
    fn attention_ignores_kv_order(d in 1usize..9, n in 2usize..40, seed in any::<u64>()) {
        let (q, k, v) = qkv(d, n, seed);
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::new(seed ^ 1).shuffle(&mut perm);
        let (kp, vp) = (gather_cols(&k, &perm).unwrap(), gather_cols(&v, &perm).unwrap());
        let a = full_attention(&AttentionInput::new(q.clone(), k.clone(), v.clone()).unwrap()).unwrap();
        let b = full_attention(&AttentionInput::new(q.clone(), kp.clone(), vp.clone()).unwrap()).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
        let m = 1 + (seed as usize) % n.min(6);
        let la = build_landmarks(&q, &k, &v, m).unwrap();
        let lb = build_landmarks(&q, &kp, &vp, m).unwrap();
        prop_assert!(la.v_landmark.max_abs_diff(&lb.v_landmark) < 1e-10);
    }

    #[test]
    fn coverage_bounded_by_expert_capacity(n in 4usize..64, m in 1usize..5, width in 1usize..8, seed in any::<u64>()) {
        let (q, k, v) = qkv(3, n, seed);
        let lm = build_landmarks(&q, &k, &v, m).unwrap();
        let ex = build_experts(&lm, &k, &v, width).unwrap();
        let cov = coverage_mask(&ex, n).unwrap();
        prop_assert!(cov.ratio <= ((m * width) as f64 / n as f64).min(1.0) + 1e-15);
        prop_assert_eq!(cov.mask.iter().filter(|&&b| b).count() as f64 / n as f64, cov.ratio);
        let rt = route_queries(&q, &lm.q_landmark).unwrap();
        let miou = overlap_miou(&ex, &rt, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&miou));
    }

    #[test]
    fn pooling_preserves_the_mean(d in 1usize..5, n in 1usize..50, seed in any::<u64>()) {
        // Every window average equals the direct mean over its range.
        let (q, _, _) = qkv(d, n, seed);
        let m = 1 + (seed as usize) % n;
        let p = adaptive_avg_pool(&q, m).unwrap();
        for i in 0..m {
            let (a, b) = ((i * n) / m, ((i + 1) * n).div_ceil(m));
            for r in 0..d {
                let mean = (a..b).map(|j| q.get(r, j)).sum::<f64>() / (b - a) as f64;
                prop_assert!((p.get(r, i) - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attended_counts_match_configuration() {
    let (q, k, v) = qkv(8, 300, 3);
    let f = mita_forward(&q, &k, &v, &MitaConfig::full(25, 25).unwrap()).unwrap();
    assert!(f.attended_counts().iter().all(|&c| c == 50));
}

#[test]
fn flop_counts_scale_as_expected() {
    let mita = Mechanism::parse("mita", 256, 256).unwrap();
    for n in [4096usize, 8192, 16384] {
        let r = flop_count(&mita, 2 * n, 128).unwrap() as f64 / flop_count(&mita, n, 128).unwrap() as f64;
        assert!((1.9..=2.1).contains(&r), "{r}");
        assert_eq!(
            flop_count(&Mechanism::Full, 2 * n, 128).unwrap(),
            4 * flop_count(&Mechanism::Full, n, 128).unwrap()
        );
    }
}
