use std::path::Path;
use std::process::{Command, Output};

const SCENE: &str = "\
width=32
height=24
frames=3
seed=7
noise_sigma=0.05
background_motion=1,0
object.0.shape=rect:8,6,12,10
object.0.motion=-1,1
object.0.trajectory=1,0
";

const FAST: &[&str] = &[
    "--k",
    "4",
    "--tmax",
    "3",
    "--frame-iters",
    "1",
    "--pretrain-epochs",
    "1",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motiongroup"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_scene(dir: &Path) {
    let spec = dir.join("scene.txt");
    std::fs::write(&spec, SCENE).unwrap();
    let out = run(&["synth", "--spec", s(&spec), "--out", s(&dir.join("seq"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn sorted_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_flows_and_masks() {
    let tmp = tempfile::tempdir().unwrap();
    synth_scene(tmp.path());
    let seq = tmp.path().join("seq");
    assert_eq!(
        sorted_names(&seq.join("flows")),
        ["00000.flo", "00001.flo", "00002.flo"]
    );
    assert_eq!(
        sorted_names(&seq.join("masks")),
        ["00000.pgm", "00001.pgm", "00002.pgm"]
    );
}

#[test]
fn segment_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    synth_scene(tmp.path());
    let seq = tmp.path().join("seq");
    let pred = tmp.path().join("pred");
    let log = tmp.path().join("loss.csv");
    let ckpt = tmp.path().join("net.ckpt");
    let flows = seq.join("flows");
    let mut args = vec![
        "segment",
        "--flows",
        s(&flows),
        "--out",
        s(&pred),
        "--log",
        s(&log),
        "--save-checkpoint",
        s(&ckpt),
    ];
    args.extend_from_slice(FAST);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        sorted_names(&pred),
        ["00000.pgm", "00001.pgm", "00002.pgm", "timing.csv"]
    );
    let timing = std::fs::read_to_string(pred.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 4);
    assert!(timing.starts_with("frame,seconds\n00000,"));
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.starts_with("iteration,L_c,L_pc,L_cc,L_sc,total\n"));
    // 3 iterations on the first frame, 1 on each later one
    assert_eq!(log_text.lines().count(), 1 + 5);

    let csv = tmp.path().join("scores.csv");
    let out = run(&[
        "eval",
        "--pred",
        s(&pred),
        "--gt",
        s(&seq.join("masks")),
        "--csv",
        s(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mean J "), "{stdout}");
    assert!(stdout.contains("seconds/frame"), "{stdout}");
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);

    // ground truth scored against itself
    let out = run(&["eval", "--pred", s(&seq.join("masks")), "--gt", s(&seq.join("masks"))]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean J 1.0000"));

    let warm = tmp.path().join("warm");
    let mut args = vec![
        "segment",
        "--flows",
        s(&flows),
        "--out",
        s(&warm),
        "--init-from",
        s(&ckpt),
    ];
    args.extend_from_slice(FAST);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn segment_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    synth_scene(tmp.path());
    let flows = tmp.path().join("seq/flows");
    let mut masks = Vec::new();
    for name in ["a", "b"] {
        let out_dir = tmp.path().join(name);
        let mut args = vec!["segment", "--flows", s(&flows), "--out", s(&out_dir), "--seed", "3"];
        args.extend_from_slice(FAST);
        assert!(run(&args).status.success());
        masks.push(std::fs::read(out_dir.join("00002.pgm")).unwrap());
    }
    assert_eq!(masks[0], masks[1]);
}

#[test]
fn dump_embeddings_layout() {
    let tmp = tempfile::tempdir().unwrap();
    synth_scene(tmp.path());
    let dump = tmp.path().join("emb.bin");
    let flows = tmp.path().join("seq/flows");
    let mut args = vec![
        "dump-embeddings",
        "--flows",
        s(&flows),
        "--frame",
        "1",
        "--out",
        s(&dump),
    ];
    args.extend_from_slice(FAST);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&dump).unwrap();
    let header = "MGEMB 1\n8\n6\n10\nend\n";
    assert!(bytes.starts_with(header.as_bytes()));
    assert_eq!(bytes.len(), header.len() + 8 * 6 * 10 * 4);

    let mut args = vec![
        "dump-embeddings",
        "--flows",
        s(&flows),
        "--frame",
        "3",
        "--out",
        s(&dump),
    ];
    args.extend_from_slice(FAST);
    assert_eq!(run(&args).status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 10);
}

#[test]
fn exit_codes() {
    // usage errors
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["segment", "--flows", "x"]).status.code(), Some(2));
    assert_eq!(
        run(&["segment", "--flows", "x", "--out", "y", "--init", "bogus"])
            .status
            .code(),
        Some(2)
    );
    // data errors
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = run(&["segment", "--flows", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = run(&["eval", "--pred", s(tmp.path()), "--gt", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let bad = tmp.path().join("bad.txt");
    std::fs::write(&bad, "width=abc\n").unwrap();
    assert_eq!(
        run(&["synth", "--spec", s(&bad), "--out", s(tmp.path())]).status.code(),
        Some(1)
    );
}
