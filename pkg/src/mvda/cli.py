"""Command-line orchestration: gen-data, mine-views, train, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation, model, synthetic, trainer, viewmining
from .errors import DataError, NumericError
from .manifest import (
    SplitSpec,
    auto_holdout,
    load_manifest,
    manifest_sha256,
    split_by_container,
    strip_labels,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(message)


def _triple(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated floats, got {text!r}")
    return tuple(float(p) for p in parts)


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if not out.parent.exists():
        raise DataError(f"parent directory {out.parent} does not exist")
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (pass --force to reuse)")
    out.mkdir(exist_ok=True)
    return out


def _write_run_json(path: Path, doc: dict) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- gen-data ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        cfg = synthetic.SynthConfig(
            class_count=args.classes,
            containers_per_class_per_domain=args.containers,
            dates=args.dates,
            views_per_container_per_date=args.views,
            image_size=args.size,
            shift_gain=args.shift_gain,
            shift_bias=args.shift_bias,
            noise_sigma=args.noise_sigma,
            crop_jitter=args.crop_jitter,
            brightness_jitter=args.brightness_jitter,
            near_duplicate_fraction=args.near_duplicate_fraction,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_out_dir(args.out, args.force)
    m = synthetic.generate_synthetic(cfg, out)
    for domain in ("source", "target"):
        for ci, name in enumerate(m.class_names):
            count = sum(1 for r in m if r.domain == domain and r.label == ci)
            print(f"{domain} {name}: {count}")
    digest = manifest_sha256(m)
    print(f"total records: {len(m)}")
    print(f"manifest sha256: {digest}")
    _write_run_json(out / "run.json", {
        "command": "gen-data",
        "config": {f: getattr(cfg, f) for f in (
            "class_count", "containers_per_class_per_domain", "dates",
            "views_per_container_per_date", "image_size", "shift_gain",
            "shift_bias", "noise_sigma", "crop_jitter", "brightness_jitter",
            "near_duplicate_fraction", "seed")},
        "manifest_sha256": digest,
        "records": len(m),
    })
    return 0


# --- mine-views ---------------------------------------------------------------

def _brute_force_select(query, manifest, images, n, bins, side):
    """Independent reference: direct pairwise scoring, no cache, plain sort."""
    from .manifest import view_candidates

    cands = view_candidates(query, manifest)
    scored = sorted(
        (viewmining.nmi(images[query.id], images[c.id], bins, side), c.view_id, c.id)
        for c in cands
    )
    chosen = scored[: min(n, len(scored))]
    return [cid for _, _, cid in chosen], [s for s, _, _ in chosen]


def cmd_mine_views(args) -> int:
    m = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    images = trainer.load_images(m, root)
    view_sets = viewmining.mine_view_sets(
        m, images, args.n, args.method, args.bins, args.side, args.seed
    )
    out = Path(args.out)
    if not out.parent.exists():
        raise DataError(f"parent directory {out.parent} does not exist")
    viewmining.save_view_sets(view_sets, out)
    print(f"mined {len(view_sets)} view sets -> {out}")
    if args.verify:
        rng = np.random.default_rng(args.seed)
        ids = sorted(view_sets)
        sample = rng.choice(len(ids), size=min(args.verify_sample, len(ids)), replace=False)
        by_id = {r.id: r for r in m}
        mismatches = 0
        for i in sample:
            qid = ids[int(i)]
            vs = view_sets[qid]
            if args.method == "sgvm":
                want_ids, want_scores = _brute_force_select(
                    by_id[qid], m, images, args.n, args.bins, args.side
                )
                if vs.member_ids != want_ids or vs.scores != want_scores:
                    mismatches += 1
                    print(f"mismatch for {qid}: {vs.member_ids} != {want_ids}", file=sys.stderr)
            else:
                from .manifest import view_candidates
                cand_ids = {c.id for c in view_candidates(by_id[qid], m)}
                ok = (len(vs.member_ids) == min(args.n, len(cand_ids))
                      and set(vs.member_ids) <= cand_ids
                      and len(set(vs.member_ids)) == len(vs.member_ids))
                if not ok:
                    mismatches += 1
                    print(f"invalid random selection for {qid}", file=sys.stderr)
        if mismatches:
            raise NumericError(f"{mismatches} of {len(sample)} verified view sets disagree")
        print(f"verified {len(sample)} sampled queries against brute-force selection")
    _write_run_json(out.with_suffix(out.suffix + ".run.json"), {
        "command": "mine-views",
        "manifest": str(args.manifest),
        "manifest_sha256": manifest_sha256(m),
        "n": args.n, "method": args.method, "bins": args.bins,
        "side": args.side, "seed": args.seed,
    })
    return 0


# --- train ---------------------------------------------------------------------

def _build_config(args) -> trainer.TrainConfig:
    config = trainer.TrainConfig()
    if args.config:
        config = trainer.load_train_config(args.config, config)
    if args.loss_preset:
        config = trainer.apply_preset(config, args.loss_preset)
    if args.set:
        pairs = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects key=value, got {item!r}")
            pairs[key.strip()] = value.strip()
        config = trainer.config_from_pairs(pairs, config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _split_for_run(m, heldout: str | None):
    if heldout:
        spec = SplitSpec(frozenset(p.strip() for p in heldout.split(",") if p.strip()))
    else:
        spec = auto_holdout(m)
    return split_by_container(m, spec)


def _load_train_data(args, config) -> trainer.TrainData:
    m = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    train_m, test_m = _split_for_run(m, args.heldout)
    source_train = train_m.by_domain("source")
    target_train = strip_labels(train_m.by_domain("target"))
    target_test = test_m.by_domain("target")
    if len(target_test) == 0 or any(r.label is None for r in target_test):
        target_test = None
    images = {}
    images.update(trainer.load_images(source_train, root))
    images.update(trainer.load_images(target_train, root))
    if target_test is not None:
        images.update(trainer.load_images(target_test, root))
    view_sets = viewmining.load_view_sets(args.views) if args.views else None
    return trainer.TrainData(
        source_train=source_train,
        target_train=target_train,
        images=images,
        target_test=target_test,
        view_sets=view_sets,
    )


def cmd_train(args) -> int:
    config = _build_config(args)
    data = _load_train_data(args, config)
    out = _prepare_out_dir(args.out, args.force)
    _, report = trainer.train(config, data, out, log=print)
    if report.final_target_top1 is not None:
        print(f"final target top1: {report.final_target_top1:.4f}")
    print(f"artifacts written to {out}")
    return 0


# --- eval ------------------------------------------------------------------------

def cmd_eval(args) -> int:
    params, meta = model.load_checkpoint(args.checkpoint)
    m = load_manifest(args.manifest)
    if m.class_count != params.class_count:
        raise DataError(
            f"manifest has {m.class_count} classes but checkpoint was trained "
            f"with {params.class_count}"
        )
    root = Path(args.manifest).parent
    train_m, test_m = _split_for_run(m, args.heldout)
    chosen = (test_m if args.split == "test" else train_m).by_domain(args.domain)
    if len(chosen) == 0:
        raise DataError(f"no {args.domain} records in the {args.split} split")
    images = trainer.load_images(chosen, root)
    cfg_echo = meta.get("config", {})
    mean = trainer._parse_triple(cfg_echo["norm_mean"], "norm_mean") \
        if "norm_mean" in cfg_echo else (0.5, 0.5, 0.5)
    std = trainer._parse_triple(cfg_echo["norm_std"], "norm_std") \
        if "norm_std" in cfg_echo else (0.5, 0.5, 0.5)
    report = evaluation.evaluate(params, chosen, images, mean, std)
    print(f"top1 {report.top1:.6f}  macro {report.macro_avg:.6f}  n {report.n}")
    if args.out:
        out = _prepare_out_dir(args.out, args.force)
        evaluation.write_report(report, chosen.class_names, out)
        _write_run_json(out / "run.json", {
            "command": "eval",
            "checkpoint": str(args.checkpoint),
            "manifest": str(args.manifest),
            "manifest_sha256": manifest_sha256(m),
            "domain": args.domain, "split": args.split,
            "heldout": args.heldout,
            "top1": report.top1,
        })
    return 0


# --- ablate -------------------------------------------------------------------------

def _parse_axes(specs: list[str]) -> list[tuple[str, list[str]]]:
    axes = []
    for spec in specs:
        key, sep, values = spec.partition("=")
        if not sep or not values:
            raise UsageError(f"--axis expects key=v1,v2,..., got {spec!r}")
        axes.append((key.strip(), [v.strip() for v in values.split(",")]))
    return axes


def _cell_config(base, axes, cell, seed):
    config = base
    pairs = {}
    for (key, _), value in zip(axes, cell):
        if key == "preset":
            config = trainer.apply_preset(config, value)
        else:
            pairs[key] = value
    if pairs:
        config = trainer.config_from_pairs(pairs, config)
    return replace(config, seed=seed)


def _run_cell(base, axes, cell, seeds, data, mining_memo):
    accs = []
    for seed in seeds:
        config = _cell_config(base, axes, cell, seed)
        # cells that enable no view term mine nothing, so that must be keyed too
        needs_views = config.loss.source_view or config.loss.target_view
        memo_key = (needs_views, config.mining, config.n_views, config.nmi_bins,
                    config.nmi_side, config.seed if config.mining == "random" else None)
        if data.view_sets is None:
            if memo_key not in mining_memo:
                mining_memo[memo_key] = trainer._prepare_view_sets(config, data)
            cell_data = replace(data, view_sets=mining_memo[memo_key])
        else:
            cell_data = data
        _, report = trainer.train(config, cell_data)
        if report.final_target_top1 is None:
            raise DataError("ablation needs a labeled target test split for accuracy")
        accs.append(report.final_target_top1)
    return accs


def cmd_ablate(args) -> int:
    axes = _parse_axes(args.axis)
    if not axes:
        raise UsageError("at least one --axis is required")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    base = _build_config(args)
    data = _load_train_data(args, base)
    if data.target_test is None:
        raise DataError("ablation needs a labeled target test split for accuracy")
    out = _prepare_out_dir(args.out, args.force)
    cells = list(itertools.product(*(values for _, values in axes)))
    header = [key for key, _ in axes] + [f"seed{s}_top1" for s in seeds] + ["mean_top1"]
    results: dict[int, list] = {}
    mining_memo: dict = {}

    def flush():
        path = out / "results.csv"
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for i in sorted(results):
                fh.write(",".join(str(v) for v in results[i]) + "\n")

    def run_one(i):
        cell = cells[i]
        accs = _run_cell(base, axes, cell, seeds, data, mining_memo)
        return i, list(cell) + [repr(a) for a in accs] + [repr(float(np.mean(accs)))]

    if args.parallel > 1:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            for i, row in pool.map(run_one, range(len(cells))):
                results[i] = row
                flush()
                print(f"cell {i + 1}/{len(cells)}: {dict(zip(header, row))}")
    else:
        for i in range(len(cells)):
            i, row = run_one(i)
            results[i] = row
            flush()
            print(f"cell {i + 1}/{len(cells)}: {dict(zip(header, row))}")

    _write_run_json(out / "run.json", {
        "command": "ablate",
        "manifest": str(args.manifest),
        "axes": {key: values for key, values in axes},
        "seeds": seeds,
        "base_config": trainer.config_to_pairs(base),
        "heldout": args.heldout,
        "cells": len(cells),
    })
    print(f"ablation table written to {out / 'results.csv'}")
    return 0


# --- parser -----------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="mvda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic two-domain multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--containers", type=int, default=3)
    p.add_argument("--dates", type=int, default=2)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    p.add_argument("--shift-gain", type=_triple, default=(0.9, 0.45, 1.1))
    p.add_argument("--shift-bias", type=_triple, default=(0.15, 0.05, 0.1))
    p.add_argument("--crop-jitter", type=int, default=4)
    p.add_argument("--brightness-jitter", type=float, default=0.08)
    p.add_argument("--near-duplicate-fraction", type=float, default=0.0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("mine-views", help="mine dissimilar view sets per record")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--method", choices=viewmining_methods(), default="sgvm")
    p.add_argument("--bins", type=int, default=viewmining.DEFAULT_BINS)
    p.add_argument("--side", type=int, default=viewmining.DEFAULT_SIDE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify", action="store_true",
                   help="cross-check a sample of queries against brute-force selection")
    p.add_argument("--verify-sample", type=int, default=100)
    p.set_defaults(func=cmd_mine_views)

    p = sub.add_parser("train", help="train a model on a two-domain manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--loss-preset", choices=sorted(trainer.PRESETS), default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--views", default=None, help="pre-mined view-set file")
    p.add_argument("--heldout", default=None,
                   help="comma-separated container ids for the test split")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--domain", choices=("source", "target"), default="target")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--heldout", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="cartesian sweep over config axes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2",
                   help="sweep axis; key 'preset' maps to loss presets (repeatable)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--config", default=None)
    p.add_argument("--loss-preset", choices=sorted(trainer.PRESETS), default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--views", default=None)
    p.add_argument("--heldout", default=None)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    return parser


def viewmining_methods() -> tuple[str, str]:
    return ("sgvm", "random")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
