use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stgdance::cli::manifest_config;
use stgdance::data::MotionFile;
use stgdance::metrics::{diversity_pooled, MetricReport};

const TINY: &[&str] = &[
    "--set",
    "d_model=8",
    "--set",
    "heads=2",
    "--set",
    "window=4",
    "--set",
    "cond_dim=4",
    "--set",
    "time_dim=4",
    "--set",
    "max_dancers=4",
];

fn stgdance(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stgdance")).args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let out = stgdance(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = stgdance(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two tiny training files: 2 dancers, 16 frames.
fn tiny_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    for (i, style) in ["circle", "line"].iter().enumerate() {
        let out = root.join(format!("g{i}"));
        ok(&["gen-data", "--dancers", "2", "--frames", "16", "--style", style, "--seed", &i.to_string(), "--out", s(&out)]);
        std::fs::create_dir_all(&data).unwrap();
        std::fs::copy(out.join("motion.stgd"), data.join(format!("m{i}.stgd"))).unwrap();
    }
    data
}

fn train_tiny(data: &Path, out: &Path, epochs: usize, extra: &[&str]) -> String {
    let epochs = epochs.to_string();
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--epochs", &epochs];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn gen_data_short_preset_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let stdout = ok(&["gen-data", "--preset", "short", "--style", "circle", "--seed", "7", "--out", s(dir)]);
        assert!(stdout.contains("seed=7"), "effective config printed");
        assert!(stdout.contains("min pairwise distance"));
    }
    let file = MotionFile::load(&a.join("motion.stgd")).unwrap();
    assert_eq!(file.sample.dims(), (3, 120, 8));
    assert_eq!(std::fs::read(a.join("motion.stgd")).unwrap(), std::fs::read(b.join("motion.stgd")).unwrap());
    let long = tmp.path().join("long");
    ok(&["gen-data", "--preset", "long", "--out", s(&long)]);
    assert_eq!(MotionFile::load(&long.join("motion.stgd")).unwrap().sample.dims(), (3, 400, 8));
}

#[test]
fn usage_and_io_errors_have_stable_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let (c, err) = code(&["gen-data", "--style", "waltz", "--out", s(&out)]);
    assert_eq!(c, 2);
    assert!(err.contains("circle, line, figure8, crossover"), "{err}");
    assert_eq!(code(&["gen-data", "--set", "colour=red", "--out", s(&out)]).0, 2);
    assert_eq!(code(&["gen-data", "--no-such-flag"]).0, 2);
    assert_eq!(code(&["frobnicate"]).0, 2);
    assert_eq!(code(&["metrics", "--input", s(&tmp.path().join("missing.stgd"))]).0, 3);
    let junk = tmp.path().join("junk.stgd");
    std::fs::write(&junk, b"not a motion file").unwrap();
    assert_eq!(code(&["metrics", "--input", s(&junk), "--out", s(&out)]).0, 3);
    assert_eq!(code(&["generate", "--checkpoint", s(&junk), "--out", s(&out)]).0, 3);
    assert_eq!(code(&["gen-data", "--out", s(&out), "--config", s(&tmp.path().join("none.cfg"))]).0, 3);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let (split, whole) = (tmp.path().join("split"), tmp.path().join("whole"));
    train_tiny(&data, &split, 2, &[]);
    let ckpt = split.join("model.ckpt");
    let stdout = train_tiny(&data, &split, 4, &["--resume", s(&ckpt)]);
    assert!(stdout.contains("resuming at epoch 2"), "{stdout}");
    train_tiny(&data, &whole, 4, &[]);
    for f in ["model.ckpt", "loss.csv"] {
        assert_eq!(std::fs::read(split.join(f)).unwrap(), std::fs::read(whole.join(f)).unwrap(), "{f}");
    }
    let rows = std::fs::read_to_string(whole.join("loss.csv")).unwrap();
    let epochs: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);

    // A different architecture cannot resume this checkpoint.
    let mut args = vec!["train", "--data", s(&data), "--out", s(&split), "--epochs", "6", "--resume", s(&ckpt)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "decoder_layers=2"]);
    assert_eq!(code(&args).0, 5);
}

#[test]
fn manifest_reproduces_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let first = tmp.path().join("first");
    train_tiny(&data, &first, 1, &["--set", "lr=0.001", "--seed", "3"]);
    let manifest = std::fs::read_to_string(first.join("manifest.txt")).unwrap();
    assert!(manifest.contains("\nseed=3\n"));
    assert!(manifest.lines().filter(|l| l.starts_with("# input ")).count() == 2);
    let again = tmp.path().join("again");
    let manifest_path = first.join("manifest.txt");
    ok(&["train", "--data", s(&data), "--out", s(&again), "--config", s(&manifest_path)]);
    let second = std::fs::read_to_string(again.join("manifest.txt")).unwrap();
    assert_eq!(manifest_config(&manifest), manifest_config(&second));
    assert_eq!(std::fs::read(first.join("model.ckpt")).unwrap(), std::fs::read(again.join("model.ckpt")).unwrap());
}

#[test]
fn generate_shapes_seeds_and_step_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let trained = tmp.path().join("trained");
    train_tiny(&data, &trained, 1, &[]);
    let ckpt = trained.join("model.ckpt");
    let mut motions = Vec::new();
    for (seed, steps, frames) in [("1", "5", "400"), ("2", "5", "400"), ("1", "60", "24"), ("1", "50", "24")] {
        let out = tmp.path().join(format!("gen_{seed}_{steps}_{frames}"));
        let stdout = ok(&[
            "generate", "--checkpoint", s(&ckpt), "--frames", frames, "--dancers", "3", "--steps", steps, "--seed", seed,
            "--metrics", "--out", s(&out),
        ]);
        assert!(stdout.contains(&format!("seed={seed}")));
        let file = MotionFile::load(&out.join("motion.stgd")).unwrap();
        assert_eq!(file.sample.dims(), (3, frames.parse().unwrap(), 8));
        assert!(file.sample.motion.is_finite());
        let report = MetricReport::from_json(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(report.n_dancers, 3);
        motions.push(file.sample.motion);
    }
    assert!(diversity_pooled(&motions[..2]).unwrap() > 0.0);

    let bad = tmp.path().join("bad");
    assert_eq!(code(&["generate", "--checkpoint", s(&ckpt), "--steps", "0", "--out", s(&bad)]).0, 2);
}

#[test]
fn metrics_command_scores_and_pools() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path());
    let out = tmp.path().join("m");
    ok(&["metrics", "--input", s(&data.join("m0.stgd")), s(&data.join("m1.stgd")), "--delta", "0.2", "--out", s(&out)]);
    let report = MetricReport::from_json(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.tif_delta, 0.2);
    assert!(report.diversity.unwrap() > 0.0);
    assert_eq!(code(&["metrics", "--input", s(&data.join("m0.stgd")), "--delta", "-1", "--out", s(&out)]).0, 2);
}

#[test]
fn validate_and_grad_check_report_failures_by_name() {
    let out = ok(&["validate"]);
    for suite in ["diff_attention_oracle", "graph_spectral_radius", "gcn_equivariance", "gradcheck:coverage", "gradcheck:end_to_end"] {
        assert!(out.contains(&format!("PASS {suite}")), "{suite} missing:\n{out}");
    }
    let summary: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(summary["passed"], true);

    let (c, err) = code(&["validate", "--perturb", "film"]);
    assert_eq!(c, 1);
    assert!(err.contains("gradcheck:film"), "{err}");
    assert_eq!(code(&["grad-check", "--perturb", "ldt_attention"]).0, 1);
    assert_eq!(code(&["grad-check"]).0, 0);
    assert_eq!(code(&["grad-check", "--perturb", "nonsense"]).0, 2);
}

#[test]
fn bench_refuses_bad_setups_and_handles_one_dancer() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    assert_eq!(code(&["bench", "--threads", "2", "--out", s(&out)]).0, 1);
    assert_eq!(code(&["bench", "--reps", "3", "--out", s(&out)]).0, 1);
    assert_eq!(code(&["bench", "--grid", "64,32,128,256", "--kernel", "full", "--out", s(&out)]).0, 1);
    assert_eq!(code(&["bench", "--kernel", "sparse", "--out", s(&out)]).0, 2);
    let stdout = ok(&["bench", "--kernel", "gcn", "--dancers", "1,2,4,8", "--out", s(&out)]);
    assert!(stdout.contains("gcn   slope"));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(csv.starts_with("kernel,size,median_seconds,flops_estimate,checksum\n"));
    assert!(csv.contains("\ngcn,1,"));
    assert!(csv.contains("# summary"));
}
