use std::process::Command;

fn mita(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mita")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn exit_codes() {
    assert_eq!(mita(&["check", "--filter", "softmax"]).0, 0);
    assert_eq!(mita(&["check", "--filter", "no-such-suite"]).0, 2);
    assert_eq!(mita(&["--threads", "0", "check"]).0, 2);
    assert_eq!(mita(&["bench", "--seq-len", "64"]).0, 2);
    assert_eq!(mita(&["bench", "--seq-len", "64", "--mech", "bogus", "--csv", "x.csv"]).0, 2);
    assert_eq!(mita(&["sweep", "--params", "/nonexistent/params.bin", "--grid", "2x2", "--json", "x.json"]).0, 3);
}

#[test]
fn train_then_sweep_writes_tagged_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let (code, err) = mita(&[
        "train", "--n", "16", "--vocab", "4", "--layers", "1", "--heads", "2", "--dim", "8", "--steps", "3",
        "--batch", "2", "--eval-every", "3", "--out", out_s,
    ]);
    assert_eq!(code, 0, "{err}");
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("# schema: mita-history/v1"));
    assert_eq!(lines.next(), Some("step,loss,eval_acc"));
    assert_eq!(lines.count(), 3);

    let json = dir.path().join("sweep.json");
    let params = out.join("params.bin");
    let (code, err) = mita(&[
        "sweep", "--params", params.to_str().unwrap(), "--grid", "",
        "--json", json.to_str().unwrap(), "--baseline", "2x2",
    ]);
    assert_eq!(code, 2, "{err}");
    let (code, err) = mita(&[
        "sweep", "--params", params.to_str().unwrap(), "--grid", "2x2,4x4,32x4",
        "--json", json.to_str().unwrap(), "--baseline", "2x2",
    ]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["schema"], "mita-sweep/v1");
    assert_eq!(v["grid"].as_array().unwrap().len(), 3);
    assert!(v["grid"][2]["skipped"].is_string());
}
