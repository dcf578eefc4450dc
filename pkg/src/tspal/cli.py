"""Command line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 file I/O failure.
Data goes to files or stdout; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .evaluation import INTERPOLATIONS, KINDS, map50
from .loop import (
    DEFAULT_BETA,
    DEFAULT_BUDGET,
    DEFAULT_PER_CYCLE,
    STRATEGIES,
    LoopComplete,
    LoopError,
    cold_start,
    init_pools,
    load_state,
    manifest,
    run_cycle,
    save_state,
    strategy_scores,
)
from .losses import evaluate_fixture
from .pseudo import GATE_RULES, GateThresholds, build_pseudo_set
from .records import (
    PredictionDump,
    annotations_from_json,
    dumps,
    read_json,
    write_atomic,
    write_json,
)
from .scoring import image_score, instance_score, select_most_uncertain

log = logging.getLogger("tspal")

LOG_ENV = "TSPAL_LOG_LEVEL"

DEFAULTS: dict[str, Any] = {
    "sigma_c": 0.9,
    "sigma_b": 0.9,
    "sigma_m": 0.8,
    "beta": DEFAULT_BETA,
    "lam": 1.0,
    "budget": DEFAULT_BUDGET,
    "per_cycle": DEFAULT_PER_CYCLE,
    "strategy": "tsp",
    "seed": 0,
    "gate_rule": "all",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class Settings:
    """Resolve a value from flags, then the settings file, then fallbacks."""

    def __init__(self, args: argparse.Namespace, *fallbacks: dict):
        self.args = args
        self.layers: list[dict] = []
        path = getattr(args, "settings", None)
        if path:
            data = read_json(path)
            if not isinstance(data, dict):
                raise ValueError(f"{path}: settings file must hold a JSON object")
            self.layers.append(data)
        self.layers.extend(fallbacks)
        self.layers.append(DEFAULTS)

    def __getitem__(self, key: str):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        for layer in self.layers:
            if key in layer and layer[key] is not None:
                return layer[key]
        raise KeyError(key)

    def thresholds(self) -> GateThresholds:
        return GateThresholds(float(self["sigma_c"]), float(self["sigma_b"]), float(self["sigma_m"]))


def _emit(text: str, output: Optional[str]) -> None:
    if output:
        write_atomic(output, text)
        log.info("wrote %s", output)
    else:
        sys.stdout.write(text)


def _load_dump(path) -> PredictionDump:
    return PredictionDump.from_json(read_json(path))


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# subcommands ---------------------------------------------------------------

def cmd_score(args) -> int:
    dump = _load_dump(args.predictions)
    rows = []
    for image_id in sorted(dump.images):
        inst = [instance_score(p.scores) for p in dump.images[image_id]]
        rows.append({"image_id": image_id, "S": image_score(inst), "instances": [{"s": s} for s in inst]})
    if args.format == "csv":
        text = _csv([{**r, "n_instances": len(r["instances"])} for r in rows],
                    ["image_id", "S", "n_instances"])
    else:
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    _emit(text, args.output)
    return 0


def cmd_select(args) -> int:
    st = Settings(args)
    dump = _load_dump(args.predictions)
    exclude: set[str] = set()
    for path in args.exclude or []:
        exclude |= set(read_json(path).get("selected", []))
    pool = {i: v for i, v in dump.images.items() if i not in exclude}
    strategy = st["strategy"]
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if args.b > len(pool):
        raise ValueError(f"cannot select {args.b} images from a pool of {len(pool)}")
    if strategy == "random":
        rng = np.random.default_rng(int(st["seed"]))
        ids = sorted(pool)
        selected = [ids[i] for i in rng.choice(len(ids), size=args.b, replace=False)]
        scores: dict[str, float] = {}
    else:
        scores = strategy_scores(pool, strategy, args.num_classes)
        selected = select_most_uncertain(scores, args.b, higher_is_uncertain=strategy == "entropy")
    _emit(dumps(manifest(args.cycle if args.cycle is not None else dump.cycle, strategy, selected, scores)),
          args.output)
    return 0


def cmd_pseudo(args) -> int:
    st = Settings(args)
    dump = _load_dump(args.predictions)
    selected: set[str] = set()
    if args.manifest:
        selected = set(read_json(args.manifest).get("selected", []))
    d_semi = set(dump.images) - selected
    pseudo = build_pseudo_set(
        {i: dump.images[i] for i in d_semi}, d_semi, st.thresholds(), st["gate_rule"],
        drop_empty=args.drop_empty,
    )
    log.info("pseudo-labeled %d instances on %d images", pseudo.instance_count, len(pseudo.images))
    _emit(dumps(pseudo.to_json()), args.output)
    return 0


def cmd_loss_eval(args) -> int:
    res = evaluate_fixture(read_json(args.fixture))
    if args.format == "csv":
        rows = []
        for group in ("supervised_components", "semi_components"):
            for name, v in res.get(group, {}).items():
                rows.append({"term": f"{group.split('_')[0]}.{name}", "value": repr(v)})
        for name in ("supervised", "semi", "total"):
            rows.append({"term": name, "value": repr(res[name])})
        text = _csv(rows, ["term", "value"])
    else:
        text = dumps(res)
    _emit(text, args.output)
    return 0


def cmd_eval(args) -> int:
    dump = _load_dump(args.predictions)
    gts = annotations_from_json(read_json(args.annotations))
    res = map50(dump.images, gts, kind=args.kind, interpolation=args.interpolation)
    _emit(res.to_csv() if args.format == "csv" else dumps(res.to_json()), args.output)
    return 0


def _read_ids(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    if Path(path).suffix == ".json":
        data = json.loads(text)
        if isinstance(data, dict) and "images" in data:
            return [str(e["image_id"]) for e in data["images"]]
        if isinstance(data, list):
            return [str(i) for i in data]
        raise ValueError(f"{path}: expected a JSON list of ids or an 'images' file")
    return [line.strip() for line in text.splitlines() if line.strip()]


def cmd_loop_init(args) -> int:
    st = Settings(args)
    per_cycle = int(st["per_cycle"])
    budget = int(st["budget"])
    if budget < per_cycle or budget % per_cycle:
        raise ValueError(f"budget {budget} must be a positive multiple of per-cycle {per_cycle}")
    config = {
        "strategy": st["strategy"],
        "sigma_c": float(st["sigma_c"]),
        "sigma_b": float(st["sigma_b"]),
        "sigma_m": float(st["sigma_m"]),
        "beta": float(st["beta"]),
        "gate_rule": st["gate_rule"],
        "budget": budget,
    }
    if config["strategy"] not in STRATEGIES:
        raise ValueError(f"unknown strategy {config['strategy']!r}")
    GateThresholds(config["sigma_c"], config["sigma_b"], config["sigma_m"])
    state = init_pools(_read_ids(args.ids), per_cycle, budget // per_cycle, int(st["seed"]), config)
    save_state(state, args.state)
    log.info("initialized %d images, %d cycles of %d", len(state.all_ids), state.max_cycles, per_cycle)
    return 0


def cmd_loop_step(args) -> int:
    state = load_state(args.state)
    st = Settings(args, state.config)
    out_dir = Path(args.out_dir)
    if state.done:
        log.warning("loop complete after %d cycles; nothing to do", state.k)
        return 0
    if state.k == 0:
        man, new = cold_start(state)
        write_json(out_dir / f"manifest_cycle_{man['cycle']:02d}.json", man)
    else:
        if not args.predictions:
            raise ValueError("cycles after the first need --predictions")
        dump = _load_dump(args.predictions)
        try:
            man, pseudo, new, _ = run_cycle(
                state, dump.images, st.thresholds(), st["strategy"], float(st["beta"]),
                st["gate_rule"],
            )
        except LoopComplete as exc:
            log.warning("%s", exc)
            return 0
        write_json(out_dir / f"manifest_cycle_{man['cycle']:02d}.json", man)
        write_json(out_dir / f"pseudo_cycle_{man['cycle']:02d}.json", pseudo.to_json())
    save_state(new, args.state)
    log.info("cycle %d: selected %d images", new.k, len(man["selected"]))
    return 0


def cmd_loop_status(args) -> int:
    state = load_state(args.state)
    status = {
        "cycle": state.k,
        "max_cycles": state.max_cycles,
        "per_cycle": state.per_cycle_b,
        "unlabeled": len(state.d_u),
        "labeled": len(state.d_al),
        "pseudo_pool": len(state.d_semi),
        "done": state.done,
        "config": state.config,
        "history": [
            {"cycle": r.cycle, "strategy": r.strategy, "selected": len(r.selected),
             "pseudo_count": r.pseudo_count}
            for r in state.history
        ],
    }
    _emit(dumps(status), args.output)
    return 0


def cmd_simulate(args) -> int:
    from .simulator import SIM_STRATEGIES, SimConfig, compare_strategies

    st = Settings(args)
    cfg = SimConfig.from_json(read_json(args.config)) if args.config else SimConfig()
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    bad = [s for s in strategies if s not in SIM_STRATEGIES]
    if bad:
        raise ValueError(f"unknown strategies {bad}; expected from {SIM_STRATEGIES}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out_dir = Path(args.out_dir)
    report = compare_strategies(
        cfg, strategies, seeds, cycles=args.cycles, per_cycle=args.per_cycle,
        thresholds=st.thresholds(), beta=float(st["beta"]), beta_schedule=args.beta_schedule,
        out_dir=None if args.curves_only else out_dir / "runs", workers=args.workers,
    )
    write_atomic(out_dir / "curves.csv", report.to_csv())
    write_json(out_dir / "curves.json", report.to_json())
    if not args.no_plot:
        from .plotting import plot_curves

        plot_curves(report, out_dir / "curves.svg", title="mAP@0.5 on the synthetic test split")
    sys.stdout.write(report.to_csv() if args.format == "csv" else dumps(report.to_json()))
    return 0


# parser ----------------------------------------------------------------------

def _add_thresholds(p) -> None:
    p.add_argument("--sigma-c", type=float, help="class score gate (default 0.9)")
    p.add_argument("--sigma-b", type=float, help="box score gate (default 0.9)")
    p.add_argument("--sigma-m", type=float, help="mask score gate (default 0.8)")
    p.add_argument("--gate-rule", choices=GATE_RULES,
                   help="'all': every score must clear its gate (default); "
                        "'any': drop only when every score falls below")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tspal", description="Semi-supervised active learning engine for instance segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default=None,
                   help=f"logging level (default from ${LOG_ENV}, else WARNING)")
    p.add_argument("--settings", help="JSON file of default option values")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("score", help="triplet uncertainty scores for a prediction dump")
    s.add_argument("--predictions", required=True)
    s.add_argument("--output")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("select", help="pick the most uncertain images from a prediction dump")
    s.add_argument("--predictions", required=True)
    s.add_argument("--b", type=int, required=True, help="images to select")
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--seed", type=int)
    s.add_argument("--cycle", type=int)
    s.add_argument("--num-classes", type=int)
    s.add_argument("--exclude", action="append", help="manifest whose selected ids are skipped")
    s.add_argument("--output")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("pseudo", help="gate predictions into a pseudo-label file")
    s.add_argument("--predictions", required=True)
    s.add_argument("--manifest", help="selection manifest; its images are excluded")
    _add_thresholds(s)
    s.add_argument("--drop-empty", action="store_true", help="omit images with no kept instance")
    s.add_argument("--output")
    s.set_defaults(func=cmd_pseudo)

    s = sub.add_parser("loss-eval", help="evaluate reference losses on a JSON fixture")
    s.add_argument("--fixture", required=True)
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--output")
    s.set_defaults(func=cmd_loss_eval)

    s = sub.add_parser("eval", help="mAP@0.5 of predictions against annotations")
    s.add_argument("--predictions", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--kind", choices=KINDS, default="mask")
    s.add_argument("--interpolation", choices=INTERPOLATIONS, default="all")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--output")
    s.set_defaults(func=cmd_eval)

    lp = sub.add_parser("loop", help="drive the active-learning loop through files")
    lsub = lp.add_subparsers(dest="loop_command", parser_class=_Parser, required=True)

    s = lsub.add_parser("init", help="create a loop state from an id list")
    s.add_argument("--ids", required=True, help="JSON list, images file, or one id per line")
    s.add_argument("--state", required=True)
    s.add_argument("--budget", type=int, help="total images to label (default 3000)")
    s.add_argument("--per-cycle", type=int, help="images labeled per cycle (default 500)")
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--seed", type=int)
    s.add_argument("--beta", type=float, help="pseudo-label loss weight (default 0.01)")
    _add_thresholds(s)
    s.set_defaults(func=cmd_loop_init)

    s = lsub.add_parser("step", help="advance one cycle")
    s.add_argument("--state", required=True)
    s.add_argument("--predictions", help="prediction dump for the unlabeled pool")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--beta", type=float)
    _add_thresholds(s)
    s.set_defaults(func=cmd_loop_step)

    s = lsub.add_parser("status", help="summarize a loop state")
    s.add_argument("--state", required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_loop_status)

    s = sub.add_parser("simulate", help="compare strategies in the synthetic world")
    s.add_argument("--config", help="SimConfig JSON file")
    s.add_argument("--strategies", default="random,entropy,tsp,tsp_ssl")
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--cycles", type=int, default=6)
    s.add_argument("--per-cycle", type=int, default=20)
    s.add_argument("--beta", type=float)
    s.add_argument("--beta-schedule", choices=("constant", "linear"), default="constant")
    _add_thresholds(s)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--curves-only", action="store_true", help="skip per-cycle dumps and manifests")
    s.add_argument("--no-plot", action="store_true")
    s.add_argument("--format", choices=("json", "csv"), default="csv")
    s.set_defaults(func=cmd_simulate)
    return p


def _setup_logging(level: Optional[str]) -> None:
    level = (level or os.environ.get(LOG_ENV) or "WARNING").upper()
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    logging.captureWarnings(True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args)
    except OSError as exc:
        where = getattr(exc, "filename", None)
        print(f"tspal: I/O error{f' on {where}' if where else ''}: {exc.strerror or exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, LoopError) as exc:
        print(f"tspal: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
