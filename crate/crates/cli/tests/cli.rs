use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use nerfcast::field::Checkpoint;

const SMALL: &[&str] = &[
    "--set",
    "model.head_layers=1",
    "--set",
    "model.head_width=8",
    "--set",
    "model.torso_layers=1",
    "--set",
    "model.torso_width=8",
    "--set",
    "train.batch_rays=32",
    "--set",
    "train.coarse_samples=4",
    "--set",
    "train.fine_samples=4",
];

const RENDER: &[&str] = &["--set", "render.coarse_samples=4", "--set", "render.fine_samples=4"];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerfcast"))
        .args(args)
        .env("NVC_THREADS", "1")
        .output()
        .expect("spawn nerfcast")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    raw: PathBuf,
    ft: PathBuf,
}

/// Dataset plus a raw and an ft checkpoint, built once per test binary.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data_dir = root.join("data");
        ok(&["scene-gen", "--frames", "20", "--res", "16", "--out", s(&data_dir)]);
        let data = data_dir.join("dataset.nvds");
        let raw_dir = root.join("raw");
        let mut args = vec!["train", "--data", s(&data), "--iters", "2", "--out", s(&raw_dir)];
        args.extend_from_slice(SMALL);
        ok(&args);
        let ft_dir = root.join("ft");
        let mut args = vec!["train", "--data", s(&data), "--iters", "2", "--mode", "ft", "--embed-width", "6"];
        args.extend_from_slice(&["--no-constraint-code", "--out", s(&ft_dir)]);
        args.extend_from_slice(SMALL);
        ok(&args);
        Fixture {
            _dir: dir,
            data,
            raw: raw_dir.join("model.nvck"),
            ft: ft_dir.join("model.nvck"),
            root,
        }
    })
}

fn out_dir(name: &str) -> PathBuf {
    let d = fixture().root.join(name);
    fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn scene_gen_is_deterministic_and_writes_a_manifest() {
    let f = fixture();
    let again = out_dir("scene_again");
    ok(&["scene-gen", "--frames", "20", "--res", "16", "--out", s(&again)]);
    assert_eq!(fs::read(&f.data).unwrap(), fs::read(again.join("dataset.nvds")).unwrap());
    let manifest = fs::read_to_string(again.join("scene-gen.manifest")).unwrap();
    assert!(manifest.contains("run.threads"));
    assert!(manifest.contains("output.dataset.sha256"));
    assert!(manifest.contains("scene."));
}

#[test]
fn train_writes_checkpoint_loss_log_and_flags() {
    let f = fixture();
    let csv = fs::read_to_string(f.raw.with_file_name("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,loss_total,loss_coarse,loss_fine,psnr_probe"));
    assert_eq!(lines.last().unwrap().split(',').next(), Some("2"));
    let raw = Checkpoint::read(&f.raw).unwrap();
    assert!(raw.model.spec.code_enabled);
    assert_eq!(raw.training.unwrap().iteration, 2);
    let ft = Checkpoint::read(&f.ft).unwrap();
    assert!(!ft.model.spec.code_enabled);
    assert_eq!(ft.model.spec.embed_width, 6);
    assert!(ft.model.encoder.is_some());
}

#[test]
fn resume_continues_the_iteration_count() {
    let f = fixture();
    let dir = out_dir("resumed");
    let mut args = vec!["train", "--data", s(&f.data), "--iters", "3", "--resume", s(&f.raw), "--out", s(&dir)];
    args.extend_from_slice(SMALL);
    ok(&args);
    let ck = Checkpoint::read(&dir.join("model.nvck")).unwrap();
    assert_eq!(ck.training.unwrap().iteration, 3);
}

#[test]
fn encode_then_decode_at_another_resolution() {
    let f = fixture();
    let dir = out_dir("codec");
    ok(&["encode", "--checkpoint", s(&f.ft), "--data", s(&f.data), "--frames", "all", "--out", s(&dir)]);
    let stream = dir.join("stream.nvrt");
    assert_eq!(&fs::read(&stream).unwrap()[..4], b"NVRT");
    let mut args = vec!["decode", "--checkpoint", s(&f.ft), "--stream", s(&stream), "--res", "24", "--out", s(&dir)];
    args.extend_from_slice(RENDER);
    ok(&args);
    let frames = fs::read_dir(dir.join("frames")).unwrap().count();
    assert_eq!(frames, 20);
    let ppm = fs::read(dir.join("frames/frame_00000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n24 24\n255\n"));
    let decoded = fs::read_to_string(dir.join("decode.csv")).unwrap();
    assert_eq!(decoded.lines().nth(1).unwrap().split(',').next(), Some("20"));
    // the raw model refuses an ft session
    let refused = run(&["decode", "--checkpoint", s(&f.raw), "--stream", s(&stream), "--no-render", "--out", s(&dir)]);
    assert_eq!(refused.status.code(), Some(1));
}

#[test]
fn simulate_writes_streams_frames_and_tables() {
    let f = fixture();
    let dir = out_dir("sim");
    let mut args = vec!["simulate", "--checkpoint", s(&f.raw), "--data", s(&f.data), "--out", s(&dir)];
    args.extend_from_slice(RENDER);
    ok(&args);
    let frames = fs::read_to_string(dir.join("frames.csv")).unwrap();
    assert!(frames.starts_with("frame,payload_bytes,psnr_db,ssim,l1\n"));
    assert_eq!(frames.lines().count(), 3);
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(dir.join("stream.nvrt").is_file() && dir.join("simulate.manifest").is_file());
}

#[test]
fn rd_curve_has_one_series_per_variant() {
    let f = fixture();
    let dir = out_dir("rd");
    let raw = format!("raw={}", s(&f.raw));
    let ft = format!("ft={}", s(&f.ft));
    let mut args = vec!["rd-curve", "--variant", &raw, "--variant", &ft, "--data", s(&f.data), "--res", "16,32"];
    args.extend_from_slice(&["--out", s(&dir)]);
    args.extend_from_slice(RENDER);
    ok(&args);
    let csv = fs::read_to_string(dir.join("rd.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let svg = fs::read_to_string(dir.join("rd.svg")).unwrap();
    assert_eq!(svg.matches(r#"<polyline class="series" data-variant="raw""#).count(), 2);
    assert_eq!(svg.matches(r#"<polyline class="series" data-variant="ft""#).count(), 2);
}

#[test]
fn eval_thresholds_give_exit_code_two() {
    let f = fixture();
    let dir = out_dir("eval");
    let mut args = vec!["eval", "--checkpoint", s(&f.raw), "--data", s(&f.data), "--out", s(&dir)];
    args.extend_from_slice(RENDER);
    ok(&args);
    assert!(fs::read_to_string(dir.join("eval.csv")).unwrap().lines().count() >= 2);
    args.extend_from_slice(&["--min-psnr", "98"]);
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = out_dir("gc");
    ok(&["gradcheck", "--seeds", "1", "--block", "mlp", "--block", "embedding", "--out", s(&dir)]);
    let report = fs::read_to_string(dir.join("gradcheck.txt")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("mlp") && l.contains(" PASS ")), "{report}");
    let bad = run(&["gradcheck", "--seeds", "1", "--block", "mlp", "--inject-fault", "mlp", "--out", s(&dir)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn usage_and_input_errors_exit_one() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["scene-gen", "--set", "nonsense"]).status.code(), Some(1));
    let dir = out_dir("errors");
    let missing = dir.join("missing.nvds");
    let out = run(&["train", "--data", s(&missing), "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = out_dir("threads");
    ok(&["scene-gen", "--frames", "2", "--res", "8", "--out", s(&dir)]);
    let manifest = fs::read_to_string(dir.join("scene-gen.manifest")).unwrap();
    assert!(manifest.lines().any(|l| l.replace(' ', "") == "run.threads=1"), "{manifest}");
}
