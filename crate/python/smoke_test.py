#!/usr/bin/env python3
"""Smoke test for the adapter_forge_py extension module.

Builds nothing itself: it locates the compiled cdylib under target/ (build it
first with

    cargo build -p adapter-forge-py --features extension-module

or `--release`), copies it next to a temp dir as an importable module, and
checks the exposed numerics against known values. Pass --full to also drive a
miniature end-to-end pipeline (data synthesis, LM pretraining, adapter
training, evaluation) through the bundled CLI entry point.
"""

import argparse
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def locate_extension() -> Path:
    candidates = []
    for profile in ("release", "debug"):
        candidates.append(ROOT / "target" / profile / "libadapter_forge_py.so")
        candidates.append(ROOT / "target" / profile / "adapter_forge_py.dll")
        candidates.append(ROOT / "target" / profile / "libadapter_forge_py.dylib")
    for c in candidates:
        if c.exists():
            return c
    sys.exit(
        "extension not found; run `cargo build -p adapter-forge-py "
        "--features extension-module` first"
    )


def import_module(tmp: Path):
    src = locate_extension()
    dst = tmp / "adapter_forge_py.so"
    shutil.copyfile(src, dst)
    sys.path.insert(0, str(tmp))
    import adapter_forge_py  # noqa: E402

    return adapter_forge_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} !~ {b}"


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--full", action="store_true", help="also run a tiny end-to-end pipeline")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmpdir:
        tmp = Path(tmpdir)
        m = import_module(tmp)
        print(f"adapter_forge_py {m.version()}")

        # parameter accounting: the 4x768x3072x12 stack counts 28.35M
        assert m.encoder_param_count(4, 768, 3072, 12) == 28_351_488
        counts = m.adapter_param_counts("base")
        assert counts["modality_core"] == 28_351_488, counts
        for kind in ("conv-based", "cif-based", "ctc-based"):
            assert m.adapter_param_counts(kind)["modality_core"] == 28_351_488
        assert m.adapter_param_counts("wlq-former")["modality_core"] == 0

        # schedule: peak at warmup end, half-peak mid-warmup, floor at the end
        approx(m.lr_at_step(1e-4, 840, 28000, 0.0, 840), 1e-4)
        approx(m.lr_at_step(1e-4, 840, 28000, 0.0, 420), 5e-5)
        approx(m.lr_at_step(1e-4, 840, 28000, 0.0, 28000), 0.0)

        # compression arithmetic from the published table
        ratio, rate = m.compression_stats(4, 1, 50.0)
        approx(ratio, 4.0)
        approx(rate, 12.5)
        ratio, rate = m.compression_stats(16, 1, 50.0)
        approx(rate, 3.125)

        # metrics
        approx(m.wer(["the cat sat"], ["the sat"]), 1.0 / 3.0)
        approx(m.bleu(["a b c d"], ["a b c d"]), 100.0)
        p = m.bootstrap_significance(
            ["w1 w2"] * 50, ["w1 w2"] * 50, ["x x"] * 50, "wer", 1000, 0
        )
        assert p < 0.05, p

        # CTC worked example: T=2, uniform over {a, blank}, target "a"
        lp = math.log(0.5)
        approx(m.ctc_loss([[lp, lp], [lp, lp]], [0]), -math.log(0.75), 1e-12)
        assert m.ctc_run_count([0, 0, 2, 1, 1, 1]) == 3

        # CIF: exact threshold hits and target scaling
        count, sums = m.cif_fire([0.5, 0.5, 0.5, 0.5], 1.0, None)
        assert count == 2 and all(abs(s - 1.0) < 1e-9 for s in sums)
        count, sums = m.cif_fire([0.9, 0.3, 0.7, 0.2, 0.3], 1.0, 3)
        assert count == 3 and all(abs(s - 1.0) < 1e-6 for s in sums)
        approx(m.quantity_loss([0.8, 0.8, 0.8], 3), 0.6)

        print("numeric checks passed")

        if args.full:
            lab = tmp / "lab"
            lab.mkdir()
            check = lambda code, what: (_ for _ in ()).throw(SystemExit(f"{what} failed")) if code != 0 else None
            check(m.run([
                "synth-data", "--out-dir", str(lab / "data"), "--preset", "seamless-like",
                "--n-items", "60", "--seed", "1",
            ]), "synth-data")
            check(m.run([
                "pretrain-lm", "--out", str(lab / "lm.afck"), "--steps", "150",
                "--corpus-size", "800", "--seed", "2",
            ]), "pretrain-lm")
            check(m.run([
                "train", "--adapter", "base", "--preset", "seamless-like",
                "--lm-checkpoint", str(lab / "lm.afck"),
                "--manifest", str(lab / "data" / "manifest.tsv"),
                "--steps", "40", "--seed", "3", "--out-dir", str(lab / "run"),
            ]), "train")
            check(m.run([
                "evaluate", "--checkpoint", str(lab / "run" / "checkpoint.afck"),
                "--manifest", str(lab / "data" / "manifest.tsv"), "--task", "asr",
            ]), "evaluate")
            assert (lab / "run" / "metrics.tsv").exists()
            print("end-to-end pipeline passed")

    print("smoke test OK")


if __name__ == "__main__":
    main()
