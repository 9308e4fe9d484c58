//! Diagnostics over trained models: which keys the experts keep, how expert
//! key sets line up with the queries routed to them, accuracy across `(m, k)`
//! grids, and accuracy when the inference mechanism differs from training.

use serde::Serialize;

use crate::error::{MitaError, Result};
use crate::math::Scalar;
use crate::mechanism::Mechanism;
use crate::mita::{ExpertSet, RoutingTable};
use crate::train::{evaluate, gen_task_batch, model_forward_traced, BlockParams, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageMask {
    /// `mask[j]` is set when position `j` belongs to at least one expert.
    pub mask: Vec<bool>,
    pub ratio: f64,
}

/// Union of expert index sets over `n` positions.
pub fn coverage_from_indices(indices: &[Vec<usize>], n: usize) -> Result<CoverageMask> {
    let mut mask = vec![false; n];
    for set in indices {
        for &j in set {
            if j >= n {
                return Err(MitaError::IndexOutOfRange { index: j, len: n });
            }
            mask[j] = true;
        }
    }
    let ratio = mask.iter().filter(|&&b| b).count() as f64 / n as f64;
    Ok(CoverageMask { mask, ratio })
}

pub fn coverage_mask<T: Scalar>(experts: &ExpertSet<T>, n: usize) -> Result<CoverageMask> {
    coverage_from_indices(&experts.indices, n)
}

/// Intersection over union of two position sets. Two empty sets give 0.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let mut a: Vec<usize> = a.to_vec();
    let mut b: Vec<usize> = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-expert IoU between an expert's key positions and the positions of
/// the queries routed to it.
pub fn expert_ious(indices: &[Vec<usize>], routing: &RoutingTable) -> Vec<f64> {
    indices.iter().enumerate().map(|(i, set)| iou(set, routing.group(i))).collect()
}

/// Mean IoU over routed experts. The shared expert has no positional key set
/// and is not included; experts nobody is routed to score 0.
pub fn overlap_miou<T: Scalar>(experts: &ExpertSet<T>, routing: &RoutingTable, n: usize) -> Result<f64> {
    if routing.assignment.len() != n {
        return Err(MitaError::DimensionMismatch {
            op: "overlap_miou",
            detail: format!("routing covers {} queries, expected {n}", routing.assignment.len()),
        });
    }
    if experts.len() != routing.experts() {
        return Err(MitaError::DimensionMismatch {
            op: "overlap_miou",
            detail: format!("{} experts but routing over {}", experts.len(), routing.experts()),
        });
    }
    if let Some(&bad) = experts.indices.iter().flatten().find(|&&j| j >= n) {
        return Err(MitaError::IndexOutOfRange { index: bad, len: n });
    }
    let ious = expert_ious(&experts.indices, routing);
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCoverage {
    pub layer: usize,
    /// Mean over heads and sequences.
    pub ratio: f64,
    pub head_ratios: Vec<f64>,
    /// Per head, the mask of the first sequence.
    pub masks: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerOverlap {
    pub layer: usize,
    /// Mean over experts, heads and sequences.
    pub miou: f64,
    pub head_miou: Vec<f64>,
}

/// Coverage and overlap for every layer of a model run with a MiTA mechanism
/// that has routed experts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelDiagnostics {
    pub mechanism: String,
    pub sequences: usize,
    pub coverage: Vec<LayerCoverage>,
    pub overlap: Vec<LayerOverlap>,
}

pub fn model_diagnostics(
    params: &BlockParams,
    spec: &TaskSpec,
    mech: &Mechanism,
    sequences: usize,
    seed: u64,
) -> Result<ModelDiagnostics> {
    match mech.config() {
        Some(c) if c.routed_experts => {}
        _ => {
            return Err(MitaError::InvalidArgument(format!(
                "{mech} has no routed experts to diagnose"
            )))
        }
    }
    let batch = gen_task_batch(spec, sequences.max(1), seed);
    let (_, traces) = model_forward_traced(&batch.tokens, params, mech)?;
    let n = spec.seq_len;
    let heads = params.dims.heads;
    let mut coverage = Vec::with_capacity(traces.len());
    let mut overlap = Vec::with_capacity(traces.len());
    for (layer, per_seq) in traces.iter().enumerate() {
        let mut head_cov = vec![0.0; heads];
        let mut head_iou = vec![0.0; heads];
        let mut masks = Vec::with_capacity(heads);
        for (s, per_head) in per_seq.iter().enumerate() {
            for (h, f) in per_head.iter().enumerate() {
                let (experts, routing) = match (&f.experts, &f.routing) {
                    (Some(e), Some(r)) => (e, r),
                    _ => unreachable!("routed experts are enabled"),
                };
                let cov = coverage_mask(experts, n)?;
                head_cov[h] += cov.ratio;
                head_iou[h] += overlap_miou(experts, routing, n)?;
                if s == 0 {
                    masks.push(cov.mask);
                }
            }
        }
        let seqs = per_seq.len() as f64;
        head_cov.iter_mut().for_each(|x| *x /= seqs);
        head_iou.iter_mut().for_each(|x| *x /= seqs);
        coverage.push(LayerCoverage {
            layer,
            ratio: head_cov.iter().sum::<f64>() / heads as f64,
            head_ratios: head_cov,
            masks,
        });
        overlap.push(LayerOverlap {
            layer,
            miou: head_iou.iter().sum::<f64>() / heads as f64,
            head_miou: head_iou,
        });
    }
    Ok(ModelDiagnostics {
        mechanism: mech.to_string(),
        sequences: batch.tokens.len(),
        coverage,
        overlap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub m: usize,
    pub k: usize,
    /// `None` when the cell was skipped.
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub mechanism: String,
    pub grid: Vec<SweepCell>,
    pub baseline: SweepCell,
    pub argmax: Option<SweepCell>,
    /// Cells reaching at least 99% of the baseline accuracy.
    pub cells_ge_99pct: Vec<SweepCell>,
}

/// Parse `"m1xk1,m2xk2,..."`.
pub fn parse_grid(s: &str) -> Result<Vec<(usize, usize)>> {
    let s = s.trim();
    if s.is_empty() {
        return Err(MitaError::InvalidArgument(
            "empty grid; expected a list like \"16x16,32x32\"".into(),
        ));
    }
    s.split(',')
        .map(|cell| {
            let bad = || MitaError::InvalidArgument(format!("bad grid cell `{cell}`; expected MxK, e.g. 16x16"));
            let (m, k) = cell.trim().split_once(['x', 'X']).ok_or_else(bad)?;
            Ok((m.trim().parse().map_err(|_| bad())?, k.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

fn sweep_family(params: &BlockParams) -> &'static str {
    match params.meta.mechanism {
        Mechanism::Full => "mita",
        m => m.name(),
    }
}

fn eval_cell(params: &BlockParams, spec: &TaskSpec, family: &str, m: usize, k: usize, eval_seed: u64) -> SweepCell {
    let result = Mechanism::parse(family, m, k).and_then(|mech| {
        if !mech.supports_len(spec.seq_len) {
            return Err(MitaError::InvalidArgument(format!("m={m} exceeds N={}", spec.seq_len)));
        }
        evaluate(params, spec, &mech, eval_seed)
    });
    match result {
        Ok(acc) => SweepCell {
            m,
            k,
            acc: Some(acc),
            skipped: None,
        },
        Err(e) => SweepCell {
            m,
            k,
            acc: None,
            skipped: Some(e.to_string()),
        },
    }
}

/// Evaluate the model at every `(m, k)` of `grid` with the mechanism family it
/// was trained with (plain MiTA for dense-trained models). Invalid cells are
/// skipped. A skipped baseline is an error.
pub fn mk_sweep(
    params: &BlockParams,
    spec: &TaskSpec,
    grid: &[(usize, usize)],
    baseline: (usize, usize),
    eval_seed: u64,
) -> Result<SweepResult> {
    let family = sweep_family(params);
    let base = eval_cell(params, spec, family, baseline.0, baseline.1, eval_seed);
    let base_acc = base.acc.ok_or_else(|| {
        MitaError::InvalidArgument(format!(
            "baseline cell skipped: {}",
            base.skipped.clone().unwrap_or_default()
        ))
    })?;
    let cells: Vec<SweepCell> = grid
        .iter()
        .map(|&(m, k)| eval_cell(params, spec, family, m, k, eval_seed))
        .collect();
    let argmax = cells
        .iter()
        .filter(|c| c.acc.is_some())
        .fold(None::<&SweepCell>, |best, c| match best {
            Some(b) if b.acc >= c.acc => Some(b),
            _ => Some(c),
        })
        .cloned();
    let ge = cells
        .iter()
        .filter(|c| c.acc.is_some_and(|a| a >= 0.99 * base_acc))
        .cloned()
        .collect();
    Ok(SweepResult {
        mechanism: family.to_string(),
        grid: cells,
        baseline: base,
        argmax,
        cells_ge_99pct: ge,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossMatrix {
    /// Training mechanism (or label) of each model.
    pub rows: Vec<String>,
    /// Inference mechanisms.
    pub cols: Vec<String>,
    /// `cells[i][j]`: model `i` evaluated with mechanism `j`; `None` if invalid.
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn cross_mech_matrix(
    models: &[(String, &BlockParams)],
    mechs: &[Mechanism],
    spec: &TaskSpec,
    eval_seed: u64,
) -> CrossMatrix {
    let cells = models
        .iter()
        .map(|(_, p)| mechs.iter().map(|mech| evaluate(p, spec, mech, eval_seed).ok()).collect())
        .collect();
    CrossMatrix {
        rows: models.iter().map(|(label, _)| label.clone()).collect(),
        cols: mechs.iter().map(|m| m.to_string()).collect(),
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{Mat, Rng};
    use crate::mita::{build_experts, build_landmarks, route_queries, MitaConfig};
    use crate::train::{init_params, TaskKind, TrainConfig};

    #[test]
    fn coverage_examples() {
        let c = coverage_from_indices(&[vec![0, 1], vec![1, 2]], 4).unwrap();
        assert_eq!(c.mask, vec![true, true, true, false]);
        assert_eq!(c.ratio, 0.75);
        assert!(coverage_from_indices(&[vec![4]], 4).is_err());
    }

    fn experts_for(n: usize, m: usize, k: usize, seed: u64) -> (ExpertSet, RoutingTable) {
        let mut rng = Rng::new(seed);
        let q = Mat::random_normal(4, n, 1.0, &mut rng);
        let kk = Mat::random_normal(4, n, 1.0, &mut rng);
        let v = Mat::random_normal(4, n, 1.0, &mut rng);
        let lm = build_landmarks(&q, &kk, &v, m).unwrap();
        let ex = build_experts(&lm, &kk, &v, k).unwrap();
        let rt = route_queries(&q, &lm.q_landmark).unwrap();
        (ex, rt)
    }

    #[test]
    fn coverage_extremes() {
        let (ex, _) = experts_for(12, 3, 12, 1);
        assert_eq!(coverage_mask(&ex, 12).unwrap().ratio, 1.0);
        let (ex, _) = experts_for(12, 1, 1, 2);
        assert_eq!(coverage_mask(&ex, 12).unwrap().ratio, 1.0 / 12.0);
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[0, 1, 2], &[2, 3]), 0.25);
        assert_eq!(iou(&[0, 1], &[2, 3]), 0.0);
        assert_eq!(iou(&[3, 1], &[1, 3]), 1.0);
        assert_eq!(iou(&[], &[]), 0.0);
    }

    #[test]
    fn miou_is_one_when_sets_match() {
        let rt = RoutingTable::from_assignment(vec![0, 0, 1, 1], 2);
        assert_eq!(expert_ious(&[vec![0, 1], vec![2, 3]], &rt), vec![1.0, 1.0]);
        let rt = RoutingTable::from_assignment(vec![0, 0, 0, 0], 2);
        assert_eq!(expert_ious(&[vec![0, 1, 2, 3], vec![2, 3]], &rt), vec![1.0, 0.0]);
    }

    #[test]
    fn miou_in_unit_interval() {
        for seed in 0..10 {
            let (ex, rt) = experts_for(16, 4, 3, seed);
            let v = overlap_miou(&ex, &rt, 16).unwrap();
            assert!((0.0..=1.0).contains(&v));
            assert!(overlap_miou(&ex, &rt, 15).is_err());
        }
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("16x16, 32X8").unwrap(), vec![(16, 16), (32, 8)]);
        for bad in ["", "  ", "16", "ax2", "4x4,"] {
            assert!(parse_grid(bad).is_err(), "{bad:?}");
        }
    }

    fn small_model(mech: Mechanism) -> (BlockParams, TaskSpec) {
        let cfg = TrainConfig {
            task: TaskSpec::new(TaskKind::Recall, 16, 4, 8, 1).unwrap(),
            layers: 2,
            heads: 2,
            dim: 8,
            ..TrainConfig::recall_default(mech)
        };
        let mut p = init_params(&cfg).unwrap();
        let mut rng = Rng::new(4);
        p.head_w = Mat::random_normal(4, 8, 1.0, &mut rng);
        (p, cfg.task)
    }

    #[test]
    fn sweep_baseline_cell_is_bit_exact() {
        let mech = Mechanism::Mita(MitaConfig::full(4, 4).unwrap());
        let (p, spec) = small_model(mech);
        let r = mk_sweep(&p, &spec, &[(4, 4), (32, 4), (8, 8)], (4, 4), 7).unwrap();
        assert_eq!(r.grid[0].acc, r.baseline.acc);
        assert_eq!(r.grid[0].acc.unwrap(), evaluate(&p, &spec, &mech, 7).unwrap());
        assert!(r.grid[1].acc.is_none() && r.grid[1].skipped.is_some());
        assert!(r.cells_ge_99pct.iter().any(|c| (c.m, c.k) == (4, 4)));
        assert!(mk_sweep(&p, &spec, &[(4, 4)], (99, 4), 7).is_err());
    }

    #[test]
    fn untrained_cross_matrix_near_chance() {
        let (full, spec) = small_model(Mechanism::Full);
        let (mita, _) = small_model(Mechanism::parse("mita", 4, 4).unwrap());
        let mechs = [Mechanism::Full, Mechanism::parse("mita", 4, 4).unwrap(), Mechanism::parse("mita", 99, 4).unwrap()];
        let m = cross_mech_matrix(&[("full".into(), &full), ("mita".into(), &mita)], &mechs, &spec, 3);
        assert_eq!(m.cells.len(), 2);
        for row in &m.cells {
            assert!(row[2].is_none());
            for acc in row[..2].iter().map(|c| c.unwrap()) {
                assert!((acc - 0.25).abs() < 0.1, "{acc}");
            }
        }
        let one = cross_mech_matrix(&[("full".into(), &full)], &mechs[..1], &spec, 3);
        assert_eq!(one.cells[0][0].unwrap(), evaluate(&full, &spec, &Mechanism::Full, 3).unwrap());
    }

    #[test]
    fn model_diagnostics_shapes() {
        let mech = Mechanism::parse("mita", 4, 16).unwrap();
        let (p, spec) = small_model(mech);
        let d = model_diagnostics(&p, &spec, &mech, 3, 0).unwrap();
        assert_eq!(d.coverage.len(), 2);
        for c in &d.coverage {
            assert_eq!(c.ratio, 1.0);
            assert_eq!(c.masks.len(), 2);
        }
        for o in &d.overlap {
            assert!((0.0..=1.0).contains(&o.miou));
        }
        assert!(model_diagnostics(&p, &spec, &Mechanism::Full, 3, 0).is_err());
        assert!(model_diagnostics(&p, &spec, &Mechanism::parse("compress", 4, 1).unwrap(), 3, 0).is_err());
    }
}
