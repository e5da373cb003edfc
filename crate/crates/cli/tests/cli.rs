use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use skipforge_core::imageio::decode_png;
use skipforge_core::pipeline::SweepTable;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_skipforge"));
    cmd.env_remove("SKIPFORGE_CHECKPOINT").env_remove("SKIPFORGE_OUT").env_remove("SKIPFORGE_WORKERS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A smoke checkpoint trained once through the CLI and shared by every test.
fn smoke() -> &'static Path {
    static CK: OnceLock<PathBuf> = OnceLock::new();
    CK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let ck = dir.join("smoke.ckpt");
        ok(&["train", "--preset", "smoke", "--out", ck.to_str().unwrap()]);
        assert!(dir.join("smoke_train_log.csv").exists());
        assert!(dir.join("smoke.request.json").exists());
        ck
    })
}

fn ck() -> &'static str {
    smoke().to_str().unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

#[test]
fn gamma_zero_edit_writes_the_baseline() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    let args = ["edit", "--checkpoint", ck(), "--cond-a", "0", "--cond-b", "circle/white/gradient", "--gamma", "0"];
    ok(&[&args[..], &["--steps", "5", "--out", o]].concat());
    assert_eq!(read(out.path().join("edited.png")), read(out.path().join("baseline.png")));
    let request: serde_json::Value = serde_json::from_slice(&read(out.path().join("request.json"))).unwrap();
    assert_eq!(request["plan"]["gamma"], 0.0);
    assert_eq!(request["target_cond"], 10);
}

#[test]
fn replaying_request_json_is_byte_identical() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    ok(&[
        "edit",
        "--checkpoint",
        ck(),
        "--seed",
        "7",
        "--cond-a",
        "3",
        "--cond-b",
        "40",
        "--taps",
        "4,5",
        "--altern",
        "3",
        "--steps",
        "4",
        "--out",
        first.path().to_str().unwrap(),
    ]);
    let request = first.path().join("request.json");
    ok(&[
        "edit",
        "--checkpoint",
        ck(),
        "--from-request",
        request.to_str().unwrap(),
        "--out",
        second.path().to_str().unwrap(),
    ]);
    for name in ["image_a.png", "baseline.png", "edited.png", "request.json", "metrics.json"] {
        assert_eq!(read(first.path().join(name)), read(second.path().join(name)), "{name}");
    }
}

#[test]
fn small_sweep_writes_one_row_per_point() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "sweep",
        "--checkpoint",
        ck(),
        "--sweep-taps",
        "4;4,5",
        "--sweep-gammas",
        "0,1",
        "--steps",
        "3",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let table = SweepTable::from_csv(&String::from_utf8(read(out.path().join("results.csv"))).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 4);
    for row in table.rows.iter().filter(|r| r.switch_g == 0.0) {
        assert_eq!(row.structure_dist, 0.0);
        assert_eq!(row.perceptual_dist, 0.0);
    }
    // The sweep's request.json replays through `edit --from-request`.
    let again = tempfile::tempdir().unwrap();
    let request = out.path().join("request.json");
    ok(&[
        "edit",
        "--checkpoint",
        ck(),
        "--from-request",
        request.to_str().unwrap(),
        "--out",
        again.path().to_str().unwrap(),
    ]);
    assert_eq!(read(out.path().join("results.csv")), read(again.path().join("results.csv")));
}

#[test]
fn group_sweep_figure_has_seven_tiles() {
    let out = tempfile::tempdir().unwrap();
    ok(&[
        "export-figures",
        "--kind",
        "group-sweep",
        "--checkpoint",
        ck(),
        "--steps",
        "3",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let img = decode_png(&read(out.path().join("group_sweep.png"))).unwrap();
    let tile = 32 * 3;
    assert_eq!(img.shape()[3], (tile + 4) * 7 + 4);
}

#[test]
fn one_step_generate_and_invert() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    ok(&["generate", "--checkpoint", ck(), "--cond", "null", "--steps", "1", "--out", o]);
    let image = out.path().join("image.png");
    let inv = tempfile::tempdir().unwrap();
    ok(&[
        "invert",
        "--checkpoint",
        ck(),
        "--image",
        image.to_str().unwrap(),
        "--cond",
        "null",
        "--steps",
        "1",
        "--out",
        inv.path().to_str().unwrap(),
    ]);
    let metrics: serde_json::Value = serde_json::from_slice(&read(inv.path().join("metrics.json"))).unwrap();
    assert!(metrics["psnr_db"].as_f64().unwrap().is_finite());
    assert!(inv.path().join("latent.skf").exists());
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failures() {
    let out = tempfile::tempdir().unwrap();
    let o = out.path().to_str().unwrap();
    // Inverted window.
    let bad = run(&["edit", "--checkpoint", ck(), "--cond-a", "0", "--cond-b", "1", "--window", "900,400", "--out", o]);
    assert_eq!(bad.status.code(), Some(2), "{}", String::from_utf8_lossy(&bad.stderr));
    // Unknown class name.
    let bad = run(&["generate", "--checkpoint", ck(), "--cond", "hexagon/red/gradient", "--out", o]);
    assert_eq!(bad.status.code(), Some(2));
    // Conflicting flags are a usage error.
    let bad = run(&["edit", "--cond-a", "0", "--cond-b", "1", "--altern", "2", "--ratio", "0.5"]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = out.path().join("missing.ckpt");
    let gone = run(&["generate", "--checkpoint", missing.to_str().unwrap(), "--cond", "0", "--out", o]);
    assert_eq!(gone.status.code(), Some(3), "{}", String::from_utf8_lossy(&gone.stderr));
    assert!(String::from_utf8_lossy(&gone.stderr).contains("missing.ckpt"));
}
