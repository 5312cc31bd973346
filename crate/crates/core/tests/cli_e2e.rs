//! Every subcommand exercised through the real binary on a temp directory.

use std::path::Path;
use std::process::Command;

fn forge(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_adapter-forge"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn full_workflow_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // synth-data for both presets
    let (code, stdout, stderr) = forge(
        dir,
        &[
            "synth-data",
            "--out-dir",
            "data-seamless",
            "--preset",
            "seamless-like",
            "--n-items",
            "60",
            "--seed",
            "1",
        ],
    );
    assert_eq!(code, 0, "synth-data failed: {stderr}");
    assert!(stdout.contains("wrote 60 items"), "{stdout}");
    assert!(dir.join("data-seamless/manifest.tsv").exists());

    // re-running without --overwrite collides
    let (code, _, stderr) = forge(
        dir,
        &[
            "synth-data",
            "--out-dir",
            "data-seamless",
            "--preset",
            "seamless-like",
            "--n-items",
            "60",
            "--seed",
            "1",
        ],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("already exists"), "{stderr}");

    // pretrain-lm (short but enough to improve perplexity)
    let (code, stdout, stderr) = forge(
        dir,
        &[
            "pretrain-lm",
            "--out",
            "lm.afck",
            "--steps",
            "120",
            "--corpus-size",
            "600",
            "--seed",
            "3",
        ],
    );
    assert_eq!(code, 0, "pretrain-lm failed: {stderr}");
    assert!(stdout.contains("held-out perplexity"), "{stdout}");

    // train a tiny run from a config file with a flag override
    std::fs::write(
        dir.join("run.cfg"),
        "adapter = base\npreset = seamless-like\nmanifest = data-seamless/manifest.tsv\nlm_checkpoint = lm.afck\nsteps = 10\nout_dir = run-base\nseed = 5\n",
    )
    .unwrap();
    let (code, stdout, stderr) = forge(
        dir,
        &["train", "--config", "run.cfg", "--steps", "8"],
    );
    assert_eq!(code, 0, "train failed: {stderr}");
    assert!(stdout.contains("trained 8 steps"), "flag overrides file: {stdout}");
    assert!(dir.join("run-base/checkpoint.afck").exists());
    assert!(dir.join("run-base/loss.csv").exists());

    // evaluate the checkpoint
    let (code, stdout, stderr) = forge(
        dir,
        &[
            "evaluate",
            "--checkpoint",
            "run-base/checkpoint.afck",
            "--manifest",
            "data-seamless/manifest.tsv",
            "--task",
            "asr",
        ],
    );
    assert_eq!(code, 0, "evaluate failed: {stderr}");
    assert!(stdout.contains("WER"), "{stdout}");
    for f in ["metrics.tsv", "metrics.txt", "compression.tsv"] {
        assert!(dir.join("run-base").join(f).exists(), "missing {f}");
    }

    // grid over one preset and two adapters (reuses the dataset layout)
    std::fs::create_dir_all(dir.join("grid/data/seamless-like")).unwrap();
    for entry in std::fs::read_dir(dir.join("data-seamless")).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(
            entry.path(),
            dir.join("grid/data/seamless-like").join(entry.file_name()),
        )
        .unwrap();
    }
    let (code, stdout, stderr) = forge(
        dir,
        &[
            "grid",
            "--lm-checkpoint",
            "lm.afck",
            "--out-dir",
            "grid",
            "--adapters",
            "base,conv",
            "--presets",
            "seamless-like",
            "--steps",
            "6",
            "--seed",
            "7",
            "--bootstrap-resamples",
            "200",
        ],
    );
    assert_eq!(code, 0, "grid failed: {stderr}");
    assert!(stdout.contains("grid finished: 2 cells"), "{stdout}");
    let metrics = std::fs::read_to_string(dir.join("grid/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(dir.join("grid/compression.tsv").exists());
    assert!(dir.join("grid/seamless-like__base/loss.csv").exists());
    assert!(dir.join("grid/seamless-like__conv-based/checkpoint.afck").exists());

    // params prints the full-scale accounting
    let (code, stdout, _) = forge(dir, &["params", "--adapter", "base"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("28351488"), "{stdout}");

    // gradcheck exits 0 below tolerance and prints the error
    let (code, stdout, stderr) = forge(
        dir,
        &["gradcheck", "--adapter", "cif", "--seed", "7", "--instances", "1"],
    );
    assert_eq!(code, 0, "gradcheck failed: {stderr}");
    assert!(stdout.contains("max relative gradient error"), "{stdout}");

    // significance on hand-made files
    std::fs::write(dir.join("refs.txt"), "w1 w2\nw3 w4\nw5 w6\n".repeat(20)).unwrap();
    std::fs::write(dir.join("a.txt"), "w1 w2\nw3 w4\nw5 w6\n".repeat(20)).unwrap();
    std::fs::write(dir.join("b.txt"), "x x\nx x\nx x\n".repeat(20)).unwrap();
    let (code, stdout, stderr) = forge(
        dir,
        &[
            "significance",
            "--refs",
            "refs.txt",
            "--hyps-a",
            "a.txt",
            "--hyps-b",
            "b.txt",
            "--metric",
            "wer",
            "--seed",
            "11",
        ],
    );
    assert_eq!(code, 0, "significance failed: {stderr}");
    assert!(stdout.contains("significant at p<0.05"), "{stdout}");
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, _, _) = forge(tmp.path(), &["no-such-command"]);
    assert_eq!(code, 2);
    let (code, _, _) = forge(tmp.path(), &[]);
    assert_eq!(code, 2);
    let (code, _, _) = forge(tmp.path(), &["--help"]);
    assert_eq!(code, 0);
    for sub in [
        "synth-data",
        "pretrain-lm",
        "train",
        "evaluate",
        "grid",
        "gradcheck",
        "params",
        "significance",
    ] {
        let (code, stdout, _) = forge(tmp.path(), &[sub, "--help"]);
        assert_eq!(code, 0, "{sub} --help");
        assert!(stdout.contains("--"), "{sub} help lists flags");
    }
    // domain error (missing file) exits 1
    let (code, _, stderr) = forge(
        tmp.path(),
        &[
            "evaluate",
            "--checkpoint",
            "missing.afck",
            "--manifest",
            "missing.tsv",
        ],
    );
    assert_eq!(code, 1);
    assert!(stderr.contains("error"), "{stderr}");
}
