use mita_core::grad::sample_instance;
use mita_core::train::{train_run, TaskKind, TaskSpec, TrainConfig};
use mita_core::{Mat, Mechanism};

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn training_does_not_depend_on_thread_count() {
    let cfg = TrainConfig {
        task: TaskSpec::new(TaskKind::Recall, 16, 4, 8, 5).unwrap(),
        layers: 2,
        heads: 2,
        dim: 8,
        steps: 6,
        batch_size: 4,
        eval_every: 3,
        ..TrainConfig::recall_default(Mechanism::parse("mita", 4, 4).unwrap())
    };
    let one = in_pool(1, || train_run(&cfg).unwrap());
    let four = in_pool(4, || train_run(&cfg).unwrap());
    assert_eq!(one.records, four.records);
    assert_eq!(one.params, four.params);
}

#[test]
fn attention_does_not_depend_on_thread_count() {
    let [q, k, v, _] = sample_instance(16, 700, 9);
    for mech in [Mechanism::Full, Mechanism::parse("mita", 12, 40).unwrap()] {
        let run = |t| in_pool(t, || mech.forward_heads(&q, &k, &v, 2).unwrap());
        let (a, b): (Mat, Mat) = (run(1), run(3));
        assert_eq!(a, b, "{mech}");
    }
}
