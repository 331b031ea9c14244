"""Command-line surface: synth / train / label / eval.

Every command writes exactly one run manifest next to its outputs, all
file outputs are written atomically, and everything is reproducible from
the seed and config echoed in that manifest. Exit codes: 0 ok, 1
internal error, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import os
import sys
import time
import traceback

import numpy as np

from . import __version__
from . import autodiff as ad
from .candidates import PeakParams, extract_all
from .metrics import aggregate, match_and_score, write_report
from .model import Model, ModelConfig, build_model, load_checkpoint
from .skeleton import (
    LabelingResult,
    Skeleton,
    assignment_to_result,
    build_skeleton,
    search_best,
    top1_result,
)
from .synth import SynthConfig, generate_case
from .targets import LabeledCase, load_case, save_case
from .training import TrainConfig, AdamState, curve_to_csv_rows, train
from .viz import render_overlay, save_png_atomic


class UserError(Exception):
    """Anticipated problem (bad path, bad config): exit code 2."""


def _write_text_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json_atomic(path: str, obj) -> None:
    _write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise UserError(f"file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UserError(f"{path} is not valid JSON: {e}") from e


def _write_manifest(out_dir: str, command: str, config, inputs: dict, outputs: dict, seed, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "tool_version": __version__,
        "timings": {"wall_s": round(time.time() - started, 3)},
    }
    _write_json_atomic(os.path.join(out_dir, "run_manifest.json"), manifest)


def _dataclass_from_json(cls, path: str | None, defaults: dict | None = None, overrides: dict | None = None):
    fields = {f.name for f in dataclasses.fields(cls)}
    data = dict(defaults or {})
    if path:
        raw = _load_json(path)
        unknown = set(raw) - fields
        if unknown:
            raise UserError(f"{path}: unknown {cls.__name__} fields {sorted(unknown)}")
        data.update(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    for key in ("image_size", "input_size", "blob_sigma", "spacing_mm"):
        if key in data and isinstance(data[key], list):
            data[key] = tuple(data[key])
    try:
        return cls(**data)
    except TypeError as e:
        raise UserError(f"bad {cls.__name__}: {e}") from e


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    raw = _load_json(args.config) if args.config else {}
    count = int(raw.pop("count", args.count or 100))
    split_fracs = raw.pop("splits", {"train": 0.7, "val": 0.1, "test": 0.2})
    cfg = _dataclass_from_json(SynthConfig, None, defaults=raw, overrides={"seed": args.seed})
    try:
        cfg.validate()
    except ValueError as e:
        raise UserError(str(e)) from e

    os.makedirs(args.out, exist_ok=True)
    case_files = []
    for i in range(count):
        case = generate_case(cfg, i)
        fname = f"case_{i:04d}.ndat"
        save_case(case, os.path.join(args.out, fname))
        case_files.append(fname)

    n_train = int(round(count * split_fracs.get("train", 0.7)))
    n_val = int(round(count * split_fracs.get("val", 0.1)))
    splits = {
        "train": list(range(0, n_train)),
        "val": list(range(n_train, min(count, n_train + n_val))),
        "test": list(range(min(count, n_train + n_val), count)),
    }
    manifest = {
        "cases": case_files,
        "splits": splits,
        "count": count,
        "config": dataclasses.asdict(cfg),
    }
    _write_json_atomic(os.path.join(args.out, "manifest.json"), manifest)
    _write_manifest(
        args.out,
        "synth",
        {"synth": dataclasses.asdict(cfg), "count": count, "splits": split_fracs},
        {"config_file": args.config},
        {"dataset_manifest": "manifest.json", "num_cases": count},
        cfg.seed,
        started,
    )
    print(f"wrote {count} cases to {args.out}")
    return 0


def _load_dataset(manifest_path: str) -> tuple[dict, list[LabeledCase], str]:
    manifest = _load_json(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    cases = []
    for fname in manifest["cases"]:
        path = os.path.join(base, fname)
        if not os.path.exists(path):
            raise UserError(f"dataset case missing: {path}")
        cases.append(load_case(path))
    return manifest, cases, base


def _split_cases(manifest: dict, cases: list[LabeledCase], split: str) -> list[LabeledCase]:
    if split not in manifest["splits"]:
        raise UserError(f"split {split!r} not in dataset manifest (has {sorted(manifest['splits'])})")
    return [cases[i] for i in manifest["splits"][split]]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    manifest, cases, _ = _load_dataset(args.dataset)
    train_cases = _split_cases(manifest, cases, "train")
    val_cases = _split_cases(manifest, cases, "val") if manifest["splits"].get("val") else None
    if not train_cases:
        raise UserError("dataset has an empty train split")

    h, w = train_cases[0].image.shape
    v = train_cases[0].num_discs
    mcfg = _dataclass_from_json(
        ModelConfig, args.model_config, defaults={"num_discs": v, "input_size": (h, w)}
    )
    if mcfg.num_discs != v or tuple(mcfg.input_size) != (h, w):
        raise UserError(
            f"model config ({mcfg.num_discs} discs, {mcfg.input_size}) does not match dataset ({v} discs, {(h, w)})"
        )
    tcfg = _dataclass_from_json(TrainConfig, args.train_config, overrides={"seed": args.seed})
    try:
        tcfg.validate()
        mcfg.validate()
    except ValueError as e:
        raise UserError(str(e)) from e

    os.makedirs(args.out, exist_ok=True)
    adam_state = None
    start_epoch = 0
    if args.resume:
        model, extra, meta = load_checkpoint(args.resume)
        adam_state = AdamState.from_arrays(model.params, extra)
        start_epoch = int(meta.get("epoch", 0))
        print(f"resuming from {args.resume} at epoch {start_epoch}")
    else:
        model = build_model(mcfg, rng_seed=tcfg.seed)
    print(f"model parameters: {model.param_count}")

    skel = build_skeleton(train_cases)
    skel.save(os.path.join(args.out, "skeleton.json"))

    def log_fn(rec):
        msg = f"epoch {rec.epoch}/{tcfg.epochs} loss {rec.total:.6f}"
        if rec.val_total is not None:
            msg += f" val {rec.val_total:.6f}"
        print(msg, flush=True)

    model, curve = train(
        model,
        train_cases,
        tcfg,
        val_cases=val_cases,
        checkpoint_dir=args.out,
        checkpoint_every=args.checkpoint_every,
        adam_state=adam_state,
        start_epoch=start_epoch,
        log_fn=log_fn,
    )
    _write_text_atomic(os.path.join(args.out, "loss.csv"), "\n".join(curve_to_csv_rows(curve, mcfg.num_stacks)) + "\n")
    _write_manifest(
        args.out,
        "train",
        {"model": dataclasses.asdict(mcfg), "train": dataclasses.asdict(tcfg)},
        {"dataset": args.dataset, "resume": args.resume},
        {"checkpoint": "final", "loss_curve": "loss.csv", "skeleton": "skeleton.json",
         "param_count": model.param_count},
        tcfg.seed,
        started,
    )
    return 0


# ---------------------------------------------------------------------------
# label
# ---------------------------------------------------------------------------


def _label_one(model: Model, case: LabeledCase, skel: Skeleton | None, args) -> tuple[LabelingResult, np.ndarray, np.ndarray | None]:
    with ad.no_grad():
        out = model.forward(case.image[None])
    if args.no_attention or out.attention_map is None:
        final = out.intermediate_heatmaps[-1].data[0]
        attention = None if out.attention_map is None else out.attention_map.data[0, 0]
    else:
        final = out.final_heatmap.data[0]
        attention = out.attention_map.data[0, 0]
    params = PeakParams(
        threshold=args.threshold,
        min_separation_px=args.min_separation,
        max_candidates=args.max_candidates,
    )
    cands = extract_all(final, params)
    if args.no_skeleton or skel is None:
        result = top1_result(cands)
    else:
        result = assignment_to_result(search_best(cands, skel, num_discs_hint=args.num_discs))
    return result, final, attention


def cmd_label(args: argparse.Namespace) -> int:
    started = time.time()
    model, _, _ = load_checkpoint(args.checkpoint)
    skel = None
    if not args.no_skeleton:
        if not args.skeleton:
            raise UserError("labeling with skeleton post-processing needs --skeleton (or pass --no-skeleton)")
        skel = Skeleton.load(args.skeleton)
        if skel.num_discs != model.cfg.num_discs:
            raise UserError(
                f"skeleton has {skel.num_discs} discs, model predicts {model.cfg.num_discs}"
            )

    if args.case:
        if not os.path.exists(args.case):
            raise UserError(f"case not found: {args.case}")
        named_cases = [(os.path.splitext(os.path.basename(args.case))[0], load_case(args.case))]
    else:
        manifest, cases, _ = _load_dataset(args.dataset)
        idx = manifest["splits"][args.split] if args.split else range(len(cases))
        named_cases = [
            (os.path.splitext(manifest["cases"][i])[0], cases[i]) for i in idx
        ]

    results_dir = os.path.join(args.out, "results")
    overlays_dir = os.path.join(args.out, "overlays")
    os.makedirs(results_dir, exist_ok=True)
    os.makedirs(overlays_dir, exist_ok=True)
    if args.save_attention:
        os.makedirs(os.path.join(args.out, "attention"), exist_ok=True)

    def process(item):
        name, case = item
        return name, case, _label_one(model, case, skel, args)

    if args.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=args.threads) as pool:
            processed = list(pool.map(process, named_cases))
    else:
        processed = [process(item) for item in named_cases]

    infeasible = 0
    for name, case, (result, final, attention) in processed:
        if not result.feasible:
            infeasible += 1
            print(f"{name}: no feasible assignment for the requested disc count", file=sys.stderr)
        _write_json_atomic(os.path.join(results_dir, f"{name}.json"), result.to_json_obj())
        overlay = render_overlay(case.image, pred=result, truth=case, heatmap=final.max(axis=0))
        save_png_atomic(overlay, os.path.join(overlays_dir, f"{name}.png"))
        if args.save_attention and attention is not None:
            save_png_atomic(
                render_overlay(case.image, heatmap=attention),
                os.path.join(args.out, "attention", f"{name}.png"),
            )

    _write_manifest(
        args.out,
        "label",
        {
            "threshold": args.threshold,
            "min_separation": args.min_separation,
            "max_candidates": args.max_candidates,
            "num_discs": args.num_discs,
            "no_skeleton": args.no_skeleton,
            "no_attention": args.no_attention,
        },
        {"checkpoint": args.checkpoint, "skeleton": args.skeleton, "case": args.case, "dataset": args.dataset},
        {"results": "results", "overlays": "overlays", "num_cases": len(processed), "infeasible": infeasible},
        args.seed,
        started,
    )
    print(f"labeled {len(processed)} case(s) into {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_results_dir(results_dir: str) -> dict[str, LabelingResult]:
    path = results_dir
    if os.path.isdir(os.path.join(results_dir, "results")):
        path = os.path.join(results_dir, "results")
    if not os.path.isdir(path):
        raise UserError(f"results directory not found: {results_dir}")
    out = {}
    for fname in sorted(os.listdir(path)):
        if fname.endswith(".json"):
            out[fname[:-5]] = LabelingResult.from_json_obj(_load_json(os.path.join(path, fname)))
    if not out:
        raise UserError(f"no result JSONs in {path}")
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    manifest, cases, _ = _load_dataset(args.dataset)
    by_name = {
        os.path.splitext(fname)[0]: cases[i] for i, fname in enumerate(manifest["cases"])
    }
    named_reports = []
    for spec_item in args.results:
        name, _, path = spec_item.partition("=")
        if not path:
            name, path = "model", name
        results = _load_results_dir(path)
        scores = []
        for case_name, result in sorted(results.items()):
            if case_name not in by_name:
                raise UserError(f"result {case_name} has no matching dataset case")
            scores.append(match_and_score(result, by_name[case_name], tol_mm=args.tol_mm))
        named_reports.append((name, aggregate(scores)))

    os.makedirs(args.out, exist_ok=True)
    write_report(named_reports, args.out)
    _write_manifest(
        args.out,
        "eval",
        {"tol_mm": args.tol_mm},
        {"dataset": args.dataset, "results": list(args.results)},
        {"report": ["report.csv", "report.json", "report.md"]},
        args.seed,
        started,
    )
    for name, report in named_reports:
        print(
            f"{name}: distance {report.mean_distance_mm:.3f}(±{report.std_distance_mm:.3f}) mm, "
            f"FNR {report.fnr_pct:.2f}%, FPR {report.fpr_pct:.2f}%"
        )
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disclabel", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(p)
    p.add_argument("--count", type=int, default=None, help="number of cases (default 100)")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the model on a dataset manifest")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset manifest.json")
    p.add_argument("--model-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("label", help="label cases with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", default=None, help="single case NDAT path")
    p.add_argument("--dataset", default=None, help="dataset manifest.json")
    p.add_argument("--split", default="test")
    p.add_argument("--skeleton", default=None, help="skeleton.json from training")
    p.add_argument("--num-discs", type=int, default=None, help="desired present disc count")
    p.add_argument("--no-skeleton", action="store_true", help="report raw top-1 candidates")
    p.add_argument("--no-attention", action="store_true", help="use the pre-attention prediction")
    p.add_argument("--save-attention", action="store_true")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--min-separation", type=int, default=10)
    p.add_argument("--max-candidates", type=int, default=5)
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("eval", help="score labeling results against ground truth")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset manifest.json")
    p.add_argument(
        "--results",
        action="append",
        required=True,
        help="results dir, or NAME=DIR; repeat for side-by-side rows",
    )
    p.add_argument("--tol-mm", type=float, default=5.0)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "label" and not args.case and not args.dataset:
        print("error: label needs --case or --dataset", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
