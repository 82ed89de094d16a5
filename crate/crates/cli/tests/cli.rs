use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghostforge"))
        .args(args)
        .env("GHOSTFORGE_THREADS", "1")
        .output()
        .expect("spawn ghostforge")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 8] = [
    "--arch",
    "c_ghostnet",
    "--width",
    "0.25",
    "--input",
    "3x16x16",
    "--classes",
    "3",
];

#[test]
fn cost_totals_for_c_ghostnet() {
    let out = ok(&["cost", "--arch", "c_ghostnet"]);
    assert!(out.starts_with("# FLOPs counted as multiply-accumulates (MACs)"));
    let summary = out.lines().last().unwrap();
    assert!(summary.contains("params 5.168M"), "{summary}");
    assert!(summary.contains("flops 139.3M"), "{summary}");

    let csv = ok(&["cost", "--arch", "c_ghostnet", "--csv"]);
    let mut lines = csv.lines().skip(1);
    assert_eq!(
        lines.next(),
        Some("name,kind,params,flops,activations,out_shape")
    );
    assert!(csv.lines().last().unwrap().starts_with("total,,"));
}

#[test]
fn ratios_print_closed_forms() {
    let out = ok(&["ratios", "--c", "256", "--k", "3", "--d", "3", "--s", "2"]);
    assert_eq!(out.lines().next(), Some("r_s=1.9922"));
    assert!(out.lines().nth(1).unwrap().starts_with("r_c="));
}

#[test]
fn errors_have_distinct_exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let bad = run(&["ratios", "--c", "0", "--k", "3", "--d", "3", "--s", "2"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error: "));
    let missing = run(&["cost", "--spec-file", "/nonexistent/arch.json"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn build_convert_cost_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("vgg.json");
    let ghost = dir.path().join("vgg_ghost.json");
    ok(&["build", "--arch", "vgg16_cifar", "--out", p(&spec)]);
    assert_eq!(
        ok(&["cost", "--spec-file", p(&spec)]),
        ok(&["cost", "--arch", "vgg16_cifar"])
    );
    ok(&[
        "convert",
        "--spec-file",
        p(&spec),
        "--mode",
        "c_ghost",
        "--s",
        "2",
        "--out",
        p(&ghost),
    ]);
    let summary = ok(&["cost", "--spec-file", p(&ghost)]);
    assert!(
        summary.lines().last().unwrap().contains("params 7.651M"),
        "{summary}"
    );

    let gg = ok(&[
        "convert", "--arch", "resnet56", "--mode", "g_ghost", "--lambda", "0.5", "--mix",
    ]);
    assert!(gg.contains("gghost_stage"));
}

#[test]
fn analyze_pairs_of_identical_maps() {
    let dir = tempfile::tempdir().unwrap();
    let map = dir.path().join("a.pgm");
    let mut bytes = b"P5\n8 8\n255\n".to_vec();
    bytes.extend((0..64u32).map(|i| ((i * 37) % 251) as u8));
    fs::write(&map, bytes).unwrap();
    let out = ok(&["analyze-pairs", "--src", p(&map), "--dst", p(&map)]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "d,mse,regularized");
    assert_eq!(rows.len(), 5);
    for row in &rows[1..] {
        let mse: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!(mse < 1e-20, "{row}");
    }
}

#[test]
fn train_eval_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let losses = dir.path().join("loss.csv");
    let data = ["--num-classes", "3", "--per-class", "4"];
    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(data);
    args.extend([
        "--steps",
        "3",
        "--batch",
        "6",
        "--out-ckpt",
        p(&ckpt),
        "--loss-csv",
        p(&losses),
    ]);
    let first = ok(&args);
    assert!(first.contains("final_loss=") && first.contains("train_accuracy="));
    let bytes = fs::read(&ckpt).unwrap();
    assert_eq!(fs::read_to_string(&losses).unwrap().lines().count(), 4);

    assert_eq!(ok(&args), first);
    assert_eq!(fs::read(&ckpt).unwrap(), bytes);

    let mut eval = vec!["eval", "--ckpt", p(&ckpt)];
    eval.extend(data);
    let acc = ok(&eval);
    assert!(
        first.contains(acc.trim().trim_start_matches("accuracy=")),
        "{first} vs {acc}"
    );
}

#[test]
fn dump_features_writes_one_map_per_channel() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["dump-features"];
    args.extend(&TINY[..6]);
    args.extend(["--node", "stem", "--out", p(dir.path())]);
    let listed = ok(&args);
    let files = fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(listed.lines().count(), files);
    assert_eq!(files, 4);
    assert!(listed.lines().all(|l| l.ends_with(".pgm")));
}
