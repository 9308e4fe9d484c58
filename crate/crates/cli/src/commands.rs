use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use mita_core::bench::{bench_attention, BenchConfig};
use mita_core::checks::run_checks;
use mita_core::diag::{cross_mech_matrix, mk_sweep, model_diagnostics, parse_grid, CrossMatrix};
use mita_core::train::{self, read_params, write_params, BlockParams, StepRecord, TaskKind, TaskSpec, TrainConfig};
use mita_core::{Mechanism, MitaError};
use serde::Serialize;

use crate::output::{self, manifest_path, write_json, RunManifest, SchemaCsv};
use crate::{BenchArgs, CheckArgs, DiagArgs, Failure, SweepArgs, TrainArgs};

pub const EVAL_SEED: u64 = 1_000_003;

type CmdResult = Result<(), Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_params(path: &Path) -> Result<BlockParams, Failure> {
    let f = File::open(path).with_context(|| format!("cannot open params file {}", path.display()))?;
    Ok(read_params(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?)
}

#[derive(Serialize)]
struct CheckReport<'a> {
    schema: &'static str,
    seed: u64,
    all_pass: bool,
    outcomes: &'a [mita_core::checks::CheckOutcome],
}

pub fn check(a: &CheckArgs) -> CmdResult {
    let filter = match (a.grad, a.filter.as_deref()) {
        (true, Some(_)) => return Err(usage("--grad and --filter cannot be combined")),
        (true, None) => Some("grad"),
        (false, f) => f,
    };
    let outcomes = run_checks(filter, a.seed);
    if outcomes.is_empty() {
        return Err(usage(format!(
            "no suite matches `{}`; suites: {}",
            filter.unwrap_or_default(),
            mita_core::checks::suite_names().join(", ")
        )));
    }
    for o in &outcomes {
        println!(
            "{}  {:<28} {:>11.3e} < {:<8.0e} {:>9.1} ms  {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.name,
            o.metric,
            o.threshold,
            o.elapsed_ms,
            o.detail
        );
    }
    if a.grad {
        for o in &outcomes {
            println!("{}: max_rel_err = {:e} over {} instances", o.name, o.metric, o.instances);
        }
    }
    let all_pass = outcomes.iter().all(|o| o.pass);
    if let Some(path) = &a.json {
        write_json(
            path,
            &CheckReport {
                schema: output::CHECK_SCHEMA,
                seed: a.seed,
                all_pass,
                outcomes: &outcomes,
            },
        )?;
        let mut m = RunManifest::new("check", a, a.seed)?;
        m.output(path);
        m.write(&manifest_path(path))?;
    }
    if all_pass {
        Ok(())
    } else {
        let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name.as_str()).collect();
        Err(Failure::Check(failed.join(", ")))
    }
}

#[derive(Serialize)]
struct BenchRow<'a> {
    mech: &'a str,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "D")]
    d: usize,
    heads: usize,
    m: usize,
    k: usize,
    s: usize,
    batch: usize,
    tokens_per_s: f64,
    flops: u64,
    threads: usize,
    reps: usize,
}

pub fn bench(a: &BenchArgs) -> CmdResult {
    let mechs: Vec<Mechanism> = a
        .mech
        .split(',')
        .map(|name| Mechanism::parse(name, a.m, a.k))
        .collect::<Result<_, _>>()
        .map_err(usage)?;
    if a.seq_len.is_empty() || a.seq_len.contains(&0) {
        return Err(usage("--seq-len needs positive lengths"));
    }
    let mut csv = SchemaCsv::create(
        &a.csv,
        output::BENCH_SCHEMA,
        &["mech", "N", "D", "heads", "m", "k", "s", "batch", "tokens_per_s", "flops", "threads", "reps"],
    )?;
    let mut records = Vec::new();
    for &n in &a.seq_len {
        for mech in &mechs {
            let cfg = BenchConfig {
                mechanism: *mech,
                seq_len: n,
                dim: a.dim,
                heads: a.heads,
                layers: a.layers,
                reps: a.reps,
                warmup: a.warmup,
                seed: a.seed,
                max_batch: a.max_batch.max(1),
                time_budget: Duration::from_millis(a.budget_ms),
            };
            let r = bench_attention(&cfg).map_err(|e| match e {
                MitaError::InvalidArgument(_) | MitaError::DimensionMismatch { .. } => usage(e),
                other => other.into(),
            })?;
            println!(
                "{:<8} N={:<6} batch={:<3} {:>12.1} tokens/s  median {:.4} s  cv {:.3}",
                r.mech, r.n, r.batch, r.tokens_per_s, r.median_secs, r.cv
            );
            csv.row(BenchRow {
                mech: &r.mech,
                n: r.n,
                d: r.dim,
                heads: r.heads,
                m: r.m,
                k: r.k,
                s: r.s,
                batch: r.batch,
                tokens_per_s: r.tokens_per_s,
                flops: r.flops,
                threads: r.threads,
                reps: r.reps,
            })?;
            csv.flush()?;
            records.push(r);
        }
    }
    for n in &a.seq_len {
        let at = |name: &str| records.iter().find(|r| r.n == *n && r.mech == name);
        if let Some(full) = at("full") {
            for r in records.iter().filter(|r| r.n == *n && r.mech != "full") {
                println!("speedup {} vs full at N={n}: {:.2}x", r.mech, r.tokens_per_s / full.tokens_per_s);
            }
        }
    }
    let mut m = RunManifest::new("bench", a, a.seed)?;
    m.output(&a.csv);
    m.results = Some(serde_json::to_value(&records)?);
    m.write(&manifest_path(&a.csv))?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let kind = TaskKind::parse(&a.task).map_err(usage)?;
    let slots = a.slots.unwrap_or(match kind {
        TaskKind::Recall if a.n > a.vocab + 1 => a.n - a.vocab,
        _ => (a.n / 4).max(1),
    });
    let task = TaskSpec::new(kind, a.n, a.vocab, slots, a.seed).map_err(usage)?;
    let cfg = TrainConfig {
        mechanism: Mechanism::parse(&a.mech, a.m, a.k).map_err(usage)?,
        task,
        layers: a.layers,
        heads: a.heads,
        dim: a.dim,
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        weight_decay: a.weight_decay,
        warmup_steps: a.warmup,
        grad_clip: a.clip,
        eval_every: a.eval_every,
        eval_seed: a.eval_seed,
        seed: a.seed,
        ..TrainConfig::recall_default(Mechanism::Full)
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let cfg = train_config(a)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let params_path = a.out.join("params.bin");
    let history_path = a.out.join("history.csv");
    let mut manifest = RunManifest::new("train", &cfg, cfg.seed)?;
    manifest.output(&params_path);
    manifest.output(&history_path);

    let mut csv = SchemaCsv::create(&history_path, output::HISTORY_SCHEMA, &["step", "loss", "eval_acc"])?;
    let mut write_err = None;
    let run = train::train_run_observed(&cfg, |r: &StepRecord| {
        if write_err.is_none() {
            write_err = csv.row(r).err();
        }
        if let Some(acc) = r.eval_acc {
            println!("step {:>5}  loss {:.5}  eval_acc {:.4}", r.step, r.loss, acc);
        }
    });
    csv.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let params = match run {
        Ok(h) => h.params,
        Err(e) => {
            manifest.results = Some(serde_json::json!({ "error": e.to_string() }));
            manifest.outputs.retain(|p| !p.ends_with("params.bin"));
            manifest.write(&a.out.join("manifest.json"))?;
            return Err(e.into());
        }
    };
    let f = File::create(&params_path).with_context(|| format!("cannot write {}", params_path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    write_params(&params, &mut w)?;
    std::io::Write::flush(&mut w)?;
    manifest.write(&a.out.join("manifest.json"))?;
    Ok(())
}

fn parse_mk(s: &str) -> Result<(usize, usize), Failure> {
    match parse_grid(s).map_err(usage)?.as_slice() {
        [one] => Ok(*one),
        _ => Err(usage(format!("expected a single MxK cell, got `{s}`"))),
    }
}

#[derive(Serialize)]
struct SweepOut<'a> {
    schema: &'static str,
    params: String,
    eval_seed: u64,
    #[serde(flatten)]
    result: &'a mita_core::diag::SweepResult,
}

pub fn sweep(a: &SweepArgs) -> CmdResult {
    let grid = parse_grid(&a.grid).map_err(usage)?;
    let params = load_params(&a.params)?;
    let baseline = match (&a.baseline, params.meta.mechanism.config()) {
        (Some(s), _) => parse_mk(s)?,
        (None, Some(c)) => (c.m, c.k),
        (None, None) => return Err(usage("the model was trained with full attention; pass --baseline MxK")),
    };
    let result = mk_sweep(&params, &params.task(), &grid, baseline, a.eval_seed).map_err(usage)?;
    for c in &result.grid {
        match c.acc {
            Some(acc) => println!("m={:<5} k={:<5} acc {acc:.4}", c.m, c.k),
            None => println!("m={:<5} k={:<5} skipped ({})", c.m, c.k, c.skipped.as_deref().unwrap_or("")),
        }
    }
    println!("baseline m={} k={} acc {:.4}", result.baseline.m, result.baseline.k, result.baseline.acc.unwrap_or(f64::NAN));
    write_json(
        &a.json,
        &SweepOut {
            schema: output::SWEEP_SCHEMA,
            params: a.params.display().to_string(),
            eval_seed: a.eval_seed,
            result: &result,
        },
    )?;
    let mut m = RunManifest::new("sweep", a, a.eval_seed)?;
    m.output(&a.json);
    if let Some(path) = &a.csv {
        let mut csv = SchemaCsv::create(path, output::SWEEP_CSV_SCHEMA, &["m", "k", "acc"])?;
        for c in &result.grid {
            csv.row((c.m, c.k, c.acc))?;
        }
        csv.flush()?;
        m.output(path);
    }
    m.write(&manifest_path(&a.json))?;
    Ok(())
}

#[derive(Serialize)]
struct ModelDiag {
    params: String,
    trained_with: String,
    mechanism: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    coverage: Option<Vec<mita_core::diag::LayerCoverage>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    overlap: Option<Vec<mita_core::diag::LayerOverlap>>,
}

#[derive(Serialize)]
struct CrossOut {
    /// Params file of each row.
    row_params: Vec<String>,
    #[serde(flatten)]
    matrix: CrossMatrix,
}

#[derive(Serialize)]
struct DiagOut {
    schema: &'static str,
    eval_seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    models: Vec<ModelDiag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross: Option<CrossOut>,
}

fn resolve_mk(params: &BlockParams, m: Option<usize>, k: Option<usize>) -> (usize, usize) {
    let (m0, k0) = params.meta.mechanism.config().map_or((16, 16), |c| (c.m, c.k));
    (m.unwrap_or(m0), k.unwrap_or(k0))
}

pub fn diag(a: &DiagArgs) -> CmdResult {
    if !a.coverage && !a.overlap && a.cross.is_none() {
        return Err(usage("nothing to do; pass --coverage, --overlap and/or --cross"));
    }
    let models: Vec<(PathBuf, BlockParams)> = a
        .params
        .iter()
        .map(|p| load_params(p).map(|params| (p.clone(), params)))
        .collect::<Result<_, _>>()?;
    let mut out = DiagOut {
        schema: output::DIAG_SCHEMA,
        eval_seed: a.eval_seed,
        models: Vec::new(),
        cross: None,
    };
    if a.coverage || a.overlap {
        for (path, params) in &models {
            let (m, k) = resolve_mk(params, a.m, a.k);
            let family = match params.meta.mechanism.name() {
                "route" => "route",
                _ => "mita",
            };
            let mech = Mechanism::parse(family, m, k).map_err(usage)?;
            let d = model_diagnostics(params, &params.task(), &mech, a.sequences, a.eval_seed).map_err(usage)?;
            for (c, o) in d.coverage.iter().zip(&d.overlap) {
                println!(
                    "{} layer {}: coverage {:.4}  mIoU {:.4}",
                    path.display(),
                    c.layer,
                    c.ratio,
                    o.miou
                );
            }
            out.models.push(ModelDiag {
                params: path.display().to_string(),
                trained_with: params.meta.mechanism.to_string(),
                mechanism: mech.to_string(),
                coverage: a.coverage.then(|| d.coverage.clone()),
                overlap: a.overlap.then(|| d.overlap.clone()),
            });
        }
    }
    if let Some(list) = &a.cross {
        let (m, k) = resolve_mk(&models[0].1, a.m, a.k);
        let mechs: Vec<Mechanism> = list
            .split(',')
            .map(|name| Mechanism::parse(name, m, k))
            .collect::<Result<_, _>>()
            .map_err(usage)?;
        let labelled: Vec<(String, &BlockParams)> = models
            .iter()
            .map(|(_, p)| (p.meta.mechanism.to_string(), p))
            .collect();
        let matrix = cross_mech_matrix(&labelled, &mechs, &models[0].1.task(), a.eval_seed);
        println!("{:<24} {}", "train \\ infer", matrix.cols.join("  "));
        for (row, cells) in matrix.rows.iter().zip(&matrix.cells) {
            let cells: Vec<String> = cells
                .iter()
                .map(|c| c.map_or("invalid".into(), |v| format!("{v:.4}")))
                .collect();
            println!("{row:<24} {}", cells.join("  "));
        }
        out.cross = Some(CrossOut {
            row_params: models.iter().map(|(p, _)| p.display().to_string()).collect(),
            matrix,
        });
    }
    write_json(&a.json, &out)?;
    let mut m = RunManifest::new("diag", a, a.eval_seed)?;
    m.output(&a.json);
    m.write(&manifest_path(&a.json))?;
    Ok(())
}
