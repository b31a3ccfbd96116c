"""Command-line entry point.

Every subcommand writes its files under the output directory together with
``manifest.json`` and prints a one-object JSON run summary on stdout.
Failures print a single JSON line on stderr::

    {"error": "usage", "message": "..."}      exit code 2
    {"error": "runtime", "message": "..."}    exit code 1

Precedence of settings: values from ``--config`` (a flat JSON object keyed
by option name, e.g. ``{"seed": 7, "mosaic_prob": 0.5}``) override
command-line flags, which override built-in defaults.

The output directory is ``--out`` if given, else ``$DENSEMATCH_OUT/<command>``,
else ``densematch_out/<command>``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .densify import AugPolicy, PRESETS
from .losses import LossParams, LossVariant
from .matching import CostWeights
from .schedule import ScheduleConfig
from .simharness import (
    Dataset,
    ExperimentSpec,
    LoadError,
    MatcherConfig,
    densify_dataset,
    load_coco,
    run_densify_stats,
    run_landscape,
    run_loss_curves,
    run_match_stats,
    save_coco,
    synth_dataset,
    write_csv,
    write_json,
    jsonable,
)
from .toytrain import TRACE_FIELDS, arm_config, grad_check, train

OUT_ENV = "DENSEMATCH_OUT"
GRAD_CHECK_TOL = 1e-4

# Subcommands that consume randomness and therefore need an explicit seed.
STOCHASTIC = {"match-stats", "densify", "densify-stats", "toy-train", "grad-check"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _grid(lo: float, hi: float, step: float) -> tuple:
    if step <= 0 or hi < lo:
        raise UsageError(f"bad grid {lo}:{hi}:{step}")
    n = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + i * step, 12) for i in range(n))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (required for stochastic commands)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
    common.add_argument("--config", help="JSON file whose keys override command-line flags")
    common.add_argument("--svg", action="store_true", help="also render SVG figures")

    parser = _Parser(prog="densematch", description="Matching, loss and densification experiments.")
    parser.add_argument("--version", action="version", version=f"densematch {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("landscape", parents=[common], help="loss surfaces over (q, p)")
    p.add_argument("--loss", action="append", choices=[v.value for v in LossVariant], help="repeatable; default vfl and mal")
    p.add_argument("--gamma", type=float, help="override gamma for the selected losses")
    p.add_argument("--alpha", type=float, help="override alpha for the selected losses")
    p.add_argument("--p-step", type=float, default=0.01)
    p.add_argument("--q-step", type=float, default=0.01)

    p = sub.add_parser("curves", parents=[common], help="VFL vs MAL curves at fixed IoU targets")
    p.add_argument("--q", action="append", type=float, help="repeatable; default 0.05 and 0.95")
    p.add_argument("--mal-gamma", type=float, default=1.5)
    p.add_argument("--vfl-gamma", type=float, default=2.0)
    p.add_argument("--vfl-alpha", type=float, default=0.75)
    p.add_argument("--p-step", type=float, default=0.01)

    p = sub.add_parser("match-stats", parents=[common], help="O2O vs O2M positive counts per image")
    p.add_argument("--coco", help="COCO annotation JSON (default: synthetic dataset)")
    p.add_argument("--n-images", type=int, default=500)
    p.add_argument("--n-preds", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--topk", type=int, default=10)

    for name, help_ in (("densify", "write a densified copy of a COCO file"), ("densify-stats", "target counts before/after densification")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--coco", required=name == "densify", help="COCO annotation JSON")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--mosaic-prob", type=float)
        p.add_argument("--mixup-prob", type=float)
        p.add_argument("--batch-size", type=int, default=4)
        if name == "densify-stats":
            p.add_argument("--n-images", type=int, default=100, help="synthetic dataset size when --coco is absent")
            p.add_argument("--total-epochs", type=int, default=60)
            p.add_argument("--epoch", action="append", type=int, help="repeatable; default every epoch")

    p = sub.add_parser("toy-train", parents=[common], help="train the toy detector arms")
    p.add_argument("--arm", action="append", choices=["baseline", "deim"], help="repeatable; default both")
    p.add_argument("--seeds", type=int, help="run seeds seed..seed+N-1 (seed defaults to 0)")
    p.add_argument("--epochs", type=int, help="total epochs (default 24)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of toy gradients")
    p.add_argument("--loss", action="append", choices=[v.value for v in LossVariant], help="repeatable; default all")
    p.add_argument("--points", type=int, default=5)
    return parser


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> List[str]:
    if not args.config:
        return []
    path = Path(args.config)
    try:
        cfg = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions} - {"help", "config", "command"}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"{path}: unknown option {key!r} for {args.command}")
        setattr(args, dest, value)
    return [str(path)]


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV) or "densematch_out"
    return Path(root) / args.command


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load(path: str) -> Dataset:
    try:
        return load_coco(path)
    except LoadError as exc:
        raise UsageError(str(exc)) from exc


def _policy(args) -> AugPolicy:
    mosaic, mix = PRESETS[args.preset] if args.preset else PRESETS["default"]
    if args.mosaic_prob is not None:
        mosaic = args.mosaic_prob
    if args.mixup_prob is not None:
        mix = args.mixup_prob
    return AugPolicy(mosaic, mix, args.seed)


# -- commands ---------------------------------------------------------------------------


def cmd_landscape(args, out: Path) -> Dict[str, Any]:
    which = args.loss or ["vfl", "mal"]
    overrides = {k: v for k, v in (("gamma", args.gamma), ("alpha", args.alpha)) if v is not None}
    params = {name: replace(LossParams.default(name), **overrides) for name in which}
    spec = ExperimentSpec(
        "landscape", args.seed, str(out), svg=args.svg,
        p_grid=_grid(args.p_step, 1 - args.p_step, args.p_step), q_grid=_grid(0.0, 1.0, args.q_step), **params,
    )
    report = run_landscape(spec, which=which)
    return {"files": report.files, "summary": report.summary}


def cmd_curves(args, out: Path) -> Dict[str, Any]:
    spec = ExperimentSpec(
        "loss_curves", args.seed, str(out), svg=args.svg,
        mal=LossParams(args.mal_gamma, 0.75, "mal"),
        vfl=LossParams(args.vfl_gamma, args.vfl_alpha, "vfl"),
        p_grid=_grid(args.p_step, 1 - args.p_step, args.p_step),
        curve_qs=tuple(args.q or (0.05, 0.95)),
    )
    report = run_loss_curves(spec)
    return {"files": report.files, "summary": report.summary}


def cmd_match_stats(args, out: Path) -> Dict[str, Any]:
    dataset = _load(args.coco) if args.coco else None
    spec = ExperimentSpec(
        "match_stats", args.seed, str(out), svg=args.svg,
        matcher=MatcherConfig(CostWeights(), args.k_max, args.topk),
        n_images=args.n_images, n_preds=args.n_preds, noise=args.noise,
    )
    report = run_match_stats(spec, dataset)
    return {"files": report.files, "summary": report.summary}


def cmd_densify(args, out: Path) -> Dict[str, Any]:
    dataset = _load(args.coco)
    policy = _policy(args)
    dense = densify_dataset(dataset, policy, args.batch_size)
    path = save_coco(dense, out / "densified.json")
    summary = {
        "n_images": len(dataset),
        "mean_targets_before": dataset.mean_targets(),
        "mean_targets_after": dense.mean_targets(),
        "dropped_on_load": dataset.dropped,
        "policy": asdict(policy),
    }
    return {"files": [str(path)], "summary": summary}


def cmd_densify_stats(args, out: Path) -> Dict[str, Any]:
    dataset = _load(args.coco) if args.coco else synth_dataset(args.n_images, args.seed)
    policy = _policy(args)
    schedule = ScheduleConfig(total_epochs=args.total_epochs)
    spec = ExperimentSpec(
        "densify_stats", args.seed, str(out), policy=policy, schedule=schedule,
        n_images=len(dataset), batch_size=args.batch_size, epochs=tuple(args.epoch or ()),
    )
    report = run_densify_stats(dataset, policy, schedule, args.epoch, args.batch_size, str(out), spec)
    return {"files": report.files, "summary": report.summary}


def _train_one(job):
    arm, seed, epochs = job
    overrides = {}
    if epochs is not None:
        overrides["schedule"] = replace(arm_config(arm).schedule, total_epochs=epochs)
    cfg = arm_config(arm, seed, **overrides)
    return arm, seed, cfg, train(cfg)


def cmd_toy_train(args, out: Path) -> Dict[str, Any]:
    arms = list(dict.fromkeys(args.arm or ["baseline", "deim"]))
    base = args.seed if args.seed is not None else 0
    seeds = list(range(base, base + (args.seeds or 1)))
    if args.seeds is not None and args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    jobs = [(arm, s, args.epochs) for s in seeds for arm in arms]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    files, traces = [], {}
    for arm, seed, cfg, trace in results:
        traces[(arm, seed)] = trace
        path = write_csv(
            out / f"trace_{arm}_seed{seed}.csv",
            TRACE_FIELDS,
            ([row[k] for k in TRACE_FIELDS] for row in trace.rows()),
            {"arm": arm, "seed": seed, "config": asdict(cfg)},
        )
        files.append(str(path))
    per_arm = {
        arm: {str(s): {"final_toy_ap": traces[(arm, s)].toy_ap[-1]} for s in seeds} for arm in arms
    }
    summary: Dict[str, Any] = {"arms": arms, "seeds": seeds, "final": per_arm}
    if {"baseline", "deim"} <= set(arms):
        pairs = []
        for s in seeds:
            b, d = traces[("baseline", s)], traces[("deim", s)]
            reach = d.epochs_to_reach(b.toy_ap[-1])
            pairs.append(
                {
                    "seed": s,
                    "baseline_final_ap": b.toy_ap[-1],
                    "deim_final_ap": d.toy_ap[-1],
                    "deim_epochs_to_baseline_final": reach,
                    "within_half_budget": reach is not None and reach <= len(b) / 2,
                }
            )
        summary["comparison"] = pairs
        summary["pairs_within_half_budget"] = sum(p["within_half_budget"] for p in pairs)
        files.append(str(write_json(out / "comparison.json", {"arms": arms, "seeds": seeds, "pairs": pairs})))
    return {"files": files, "summary": summary}


def cmd_grad_check(args, out: Path) -> Dict[str, Any]:
    results = {}
    for name in args.loss or [v.value for v in LossVariant]:
        cfg = replace(arm_config("deim", args.seed), loss=LossParams.default(name))
        rep = grad_check(cfg, n_points=args.points, seed=args.seed)
        results[name] = asdict(rep)
    worst = max(r["max_rel_error"] for r in results.values())
    summary = {"tolerance": GRAD_CHECK_TOL, "max_rel_error": worst, "passed": worst < GRAD_CHECK_TOL, "losses": results}
    path = write_json(out / "grad_check.json", summary)
    if worst >= GRAD_CHECK_TOL:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3g} >= {GRAD_CHECK_TOL}")
    return {"files": [str(path)], "summary": summary}


COMMANDS = {
    "landscape": cmd_landscape,
    "curves": cmd_curves,
    "match-stats": cmd_match_stats,
    "densify": cmd_densify,
    "densify-stats": cmd_densify_stats,
    "toy-train": cmd_toy_train,
    "grad-check": cmd_grad_check,
}


def _manifest(args, out: Path, files: Sequence[str], inputs: Sequence[str]) -> Path:
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("command",)}
    entries = []
    for f in files:
        p = Path(f)
        entries.append({"file": p.relative_to(out).as_posix() if p.is_relative_to(out) else str(p), "sha256": _sha256(p)})
    manifest = {
        "tool": "densematch",
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "options": opts,
        "inputs": [{"path": i, "sha256": _sha256(Path(i))} for i in inputs],
        "outputs": entries,
    }
    return write_json(out / "manifest.json", manifest)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        config_inputs = _apply_config(parser, args)
        if args.command in STOCHASTIC and args.seed is None and not (args.command == "toy-train" and args.seeds):
            raise UsageError(f"--seed is required for {args.command}")
        if args.seed is None:
            args.seed = 0
        inputs = config_inputs + [p for p in (getattr(args, "coco", None),) if p]
        for path in inputs:
            if not Path(path).is_file():
                raise UsageError(f"{path}: input file not found")
        out = _out_dir(args)
        result = COMMANDS[args.command](args, out)
        manifest = _manifest(args, out, result["files"], inputs)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except (ValueError, TypeError) as exc:
        # invalid option values surface from the library's own validation
        return _fail("usage", str(exc), 2)
    except Exception as exc:  # noqa: BLE001 - reported as a one-line error
        return _fail("runtime", f"{type(exc).__name__}: {exc}", 1)
    run = {"status": "ok", "command": args.command, "out": str(out), "manifest": str(manifest)}
    run.update(result)
    print(json.dumps(jsonable(run), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
