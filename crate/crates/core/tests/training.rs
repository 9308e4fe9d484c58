use mita_core::train::{train_run, TrainConfig};
use mita_core::Mechanism;

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn default_recall_config_starts_at_chance_and_descends() {
    for mech in [Mechanism::Full, Mechanism::parse("mita", 16, 16).unwrap()] {
        let cfg = TrainConfig {
            steps: 200,
            eval_every: 0,
            ..TrainConfig::recall_default(mech)
        };
        let losses = train_run(&cfg).unwrap().losses();
        let chance = (cfg.task.classes() as f64).ln();
        assert!((losses[0] - chance).abs() < 0.1 * chance, "{mech}: {} vs {chance}", losses[0]);
        assert!(median(&losses[100..200]) < median(&losses[..100]), "{mech}");
    }
}
