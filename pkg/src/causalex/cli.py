"""Command-line entry point.

Subcommands: gen-env, explore, discover, verify-theorem, metrics.
Exit codes: 0 ok, 1 other module error, 2 configuration error, 3 divergence,
4 I/O error.  ``CAUSALEX_OUTPUT_DIR`` sets the default output root.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, dump_config, parse_config
from .env import load_env, save_env
from .explorer import build_env, json_safe, offline_discovery, run_exploration
from .metrics import TraceError, aggregate, first_crossing, read_trace, smooth
from .theory import MODES, TheoryError, ensemble, summarize
from .world_model import DivergenceError

log = logging.getLogger("causalex")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3, 4
OUTPUT_ENV_VAR = "CAUSALEX_OUTPUT_DIR"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV_VAR, "runs"))


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, flag_map: dict[str, str]) -> ExperimentConfig:
    """File values, then generic --set overrides, then dedicated flags."""
    overrides = _parse_set(getattr(args, "set", None))
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return parse_config(getattr(args, "config", None), overrides)


def _add_config_args(p) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set explorer.eta=0.2 (repeatable)")


ENV_FLAGS = {"n": "env.n", "c": "env.c", "edge_keep_prob": "env.edge_keep_prob",
             "transition": "env.transition", "env_seed": "env.seed", "change_at": "env.change_at",
             "num_actions": "env.num_actions"}


def _add_env_flags(p) -> None:
    p.add_argument("--n", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--edge-keep-prob", type=float)
    p.add_argument("--transition", choices=("linear", "nonlinear"))
    p.add_argument("--env-seed", type=int)
    p.add_argument("--change-at", type=int)
    p.add_argument("--num-actions", type=int)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json_safe(doc), indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_env(args) -> int:
    cfg = _config(args, ENV_FLAGS)
    env = build_env(cfg)
    out = Path(args.out) if args.out else output_root() / f"env_{cfg.env.seed}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_env(env, out)
    print(out)
    return EXIT_OK


EXPLORE_FLAGS = {**ENV_FLAGS, "seed": "explorer.seed", "episodes": "explorer.episodes",
                 "horizon": "explorer.horizon", "graph_mode": "explorer.graph_mode",
                 "beta": "explorer.beta", "reward": "explorer.reward", "period": "discovery.period",
                 "kappa": "discovery.kappa", "underestimation": "env.underestimation",
                 "record_timing": "output.record_timing"}


def cmd_explore(args) -> int:
    cfg = _config(args, EXPLORE_FLAGS)
    out = Path(args.out_dir or cfg.output.directory or output_root() / f"run_{cfg.content_hash()[:12]}")
    env = load_env(args.env) if args.env else None
    result = run_exploration(cfg, out, env=env)
    print(json.dumps(json_safe({"run_dir": str(out), "final_holdout": result.summary["final_holdout"],
                                "final_graph_f1": result.summary["final_graph_metrics"]["f1"]})))
    return EXIT_OK


DISCOVER_FLAGS = {**ENV_FLAGS, "alpha": "discovery.alpha", "max_cond_size": "discovery.max_cond_size",
                  "kappa": "discovery.kappa", "lam": "discovery.lam", "null_method": "discovery.null_method"}


def cmd_discover(args) -> int:
    cfg = _config(args, DISCOVER_FLAGS)
    env = load_env(args.env) if args.env else build_env(cfg)
    report = offline_discovery(env, cfg, args.buffer_size, sampling=not args.no_sampling,
                               train_steps=args.train_steps, seed=args.seed)
    if args.out:
        _write_json(Path(args.out), report)
    keys = ("selected", "tests_run", "wall_time_s", "precision", "recall", "f1", "auc")
    print(json.dumps(json_safe({k: report[k] for k in keys})))
    return EXIT_OK


def cmd_verify_theorem(args) -> int:
    reports = ensemble(args.ensemble, seed=args.seed, steps=args.steps, mode=args.mode,
                       samples=args.samples, n=args.n, c=args.c, density=args.density)
    out = Path(args.out) if args.out else output_root() / f"theorem_{args.mode}_{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(reports)
    _write_json(out / "reports.json", {"summary": summary, "reports": [r.to_dict() for r in reports]})
    with open(out / "steps.csv", "w", newline="") as fh:
        fields = ["instance", "k", "dense_loss", "causal_loss", "loss_ratio", "distance_ratio",
                  "ratio_bound", "density_bound", "envelope"]
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for i, r in enumerate(reports):
            for row in r.rows():
                w.writerow({"instance": i, **row})
    print(json.dumps(json_safe(summary)))
    return EXIT_OK


def find_traces(root: Path) -> list[Path]:
    paths = sorted(root.rglob("trace.csv"))
    if not paths:
        paths = sorted(root.rglob("trace.json"))
    return paths


def cmd_metrics(args) -> int:
    root = Path(args.input_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"input directory {root} does not exist")
    paths = find_traces(root)
    if not paths:
        raise TraceError(f"no traces under {root}")
    traces = [read_trace(p) for p in paths]
    agg = aggregate(traces, args.metric)
    out = Path(args.out) if args.out else root / f"aggregate_{args.metric}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    sm = smooth(agg.mean, args.window)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean", "std", "smoothed_mean", "count"])
        for k in range(len(agg.steps)):
            w.writerow([int(agg.steps[k]), repr(float(agg.mean[k])), repr(float(agg.std[k])),
                        repr(float(sm[k])), agg.count])
    summary = {"traces": [str(p) for p in paths], "metric": args.metric, "aggregate": str(out)}
    if args.threshold is not None:
        summary["threshold"] = args.threshold
        summary["first_crossing"] = {str(p): first_crossing(t[args.metric], args.threshold, args.window, t["step"])
                                     for p, t in zip(paths, traces)}
    _write_json(out.with_suffix(".json"), summary)
    print(json.dumps(json_safe(summary)))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="causalex", description="Causal exploration experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-env", help="sample a synthetic environment and save it as JSON")
    _add_config_args(p)
    _add_env_flags(p)
    p.add_argument("--out", help="output JSON path")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("explore", help="run the exploration loop")
    _add_config_args(p)
    _add_env_flags(p)
    p.add_argument("--env", help="environment JSON to use instead of generating one")
    p.add_argument("--seed", type=int, help="run seed (policy, model, data)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--graph-mode", choices=("discover", "truth", "dense"))
    p.add_argument("--beta", type=float)
    p.add_argument("--reward", choices=("mse", "nll"))
    p.add_argument("--period", type=int, help="steps between discoveries")
    p.add_argument("--kappa", type=int)
    p.add_argument("--underestimation", action="store_const", const=True)
    p.add_argument("--record-timing", action="store_const", const=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("discover", help="coreset + time-lagged PC on a random-policy buffer")
    _add_config_args(p)
    _add_env_flags(p)
    p.add_argument("--env", help="environment JSON to use instead of generating one")
    p.add_argument("--buffer-size", type=int, default=3000)
    p.add_argument("--train-steps", type=int, help="world-model steps before selection (default: buffer size)")
    p.add_argument("--no-sampling", action="store_true", help="run PC on the whole buffer")
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-cond-size", type=int)
    p.add_argument("--kappa", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--null-method", choices=("gamma", "permutation"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("verify-theorem", help="check the masked-GD convergence bounds on random instances")
    p.add_argument("--n", type=int)
    p.add_argument("--c", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--mode", choices=MODES, default="masked_trajectory")
    p.add_argument("--ensemble", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_verify_theorem)

    p = sub.add_parser("metrics", help="aggregate traces across runs")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--metric", default="holdout_loss")
    p.add_argument("--threshold", type=float)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--out", help="aggregate CSV path")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"causalex: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"causalex: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, TheoryError) as exc:
        print(f"causalex: divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"causalex: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # any other module error still yields a nonzero status
        print(f"causalex: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
