"""The same pipeline through the command line: gen-data, mine-views, train,
eval, ablate.

Everything demos 01 to 03 did with library calls is also scriptable through
the `mvda` console entry point. This demo drives the argv interface in
process and keeps the dataset tiny, so it finishes in a few seconds; swap in
larger knobs for real experiments. Exit codes are part of the contract:
0 success, 1 usage error, 2 data problem, 3 numeric failure.

Run from the repository root:

    python3 demos/04_cli_workflow.py
"""

import json
from pathlib import Path

from mvda.cli import main as mvda

OUT = Path("demo_out/cli")


def run(*argv):
    print(f"\n$ mvda {' '.join(argv)}")
    rc = mvda(list(argv))
    print(f"(exit {rc})")
    return rc


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    ds = OUT / "ds"

    # 1. A small dataset: 2 classes, 2 containers each, 2 views per
    #    container. gen-data echoes per-class counts and the manifest digest.
    run("gen-data", "--out", str(ds), "--classes", "2", "--containers", "2",
        "--dates", "1", "--views", "2", "--size", "16", "--seed", "5", "--force")

    # 2. Mine 1 partner view per record and verify the result against a
    #    brute-force reference selection.
    run("mine-views", "--manifest", str(ds / "manifest.jsonl"),
        "--out", str(OUT / "views.jsonl"), "--n", "1",
        "--bins", "8", "--side", "8", "--verify")

    # 3. Train with the weak-augmentation view-consistency preset, reusing
    #    the mined view sets. --set overrides individual config keys.
    run("train", "--manifest", str(ds / "manifest.jsonl"),
        "--out", str(OUT / "run"), "--loss-preset", "wa2-only",
        "--views", str(OUT / "views.jsonl"),
        "--set", "epochs=2", "--set", "input_side=16", "--force")

    # 4. Evaluate the checkpoint on the held-out target containers and write
    #    a report bundle: eval.json, confusion.csv, confusion.svg.
    run("eval", "--checkpoint", str(OUT / "run" / "checkpoint.bin"),
        "--manifest", str(ds / "manifest.jsonl"),
        "--out", str(OUT / "report"), "--force")
    doc = json.loads((OUT / "report" / "eval.json").read_text())
    print(f"eval.json: {doc}")

    # 5. A two-cell ablation over loss presets, single seed. results.csv
    #    accumulates one row per cell; --parallel would fan the cells out.
    run("ablate", "--manifest", str(ds / "manifest.jsonl"),
        "--out", str(OUT / "ablation"),
        "--axis", "preset=source-only,wa2-only", "--seeds", "0",
        "--set", "epochs=2", "--set", "input_side=16",
        "--set", "nmi_bins=8", "--set", "nmi_side=8", "--set", "n_views=1",
        "--force")
    print("\nresults.csv:")
    print((OUT / "ablation" / "results.csv").read_text())

    # 6. Failure modes map to distinct exit codes for scripting.
    print("a usage error (unknown preset value):")
    run("train", "--manifest", str(ds / "manifest.jsonl"),
        "--out", str(OUT / "bad"), "--loss-preset", "does-not-exist")


if __name__ == "__main__":
    main()
