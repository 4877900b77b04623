"""Command-line entry point: ``coastfl {run,assess,report,oracle,dump-data}``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error
(training divergence, numeric or structural failure), 4 I/O error
(missing/unwritable paths, corrupt round logs).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from coastfl import config as C
from coastfl import oracles
from coastfl.errors import CoastError, ConfigError, CorruptLogError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("coastfl")


def _flag_overrides(args) -> dict:
    flags = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        flags[key.strip()] = yaml.safe_load(value)
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "seeds", None) is not None:
        flags["n_seeds"] = args.seeds
    if getattr(args, "setting", None):
        flags["setting"] = args.setting
    if getattr(args, "method", None):
        flags["methods"] = list(args.method)
    if getattr(args, "out", None):
        flags["out_dir"] = args.out
    for name in ("k", "valuation_mode", "tail_policy"):
        if getattr(args, name, None) is not None:
            flags[name] = getattr(args, name)
    return flags


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _run_one(payload):
    cfg_dict, seed, out = payload
    from coastfl.experiment import run_seed

    report, _ = run_seed(C.from_mapping(cfg_dict), seed, out)
    return seed, report.rhos


def run_config(cfg: C.ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    """All seeds of one config; writes per-seed outputs plus summary.json."""
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out / "config.yaml")
    seeds = list(range(cfg.seed, cfg.seed + cfg.n_seeds))
    payloads = [(cfg.to_dict(), s, str(out)) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, payloads))
    else:
        results = [_run_one(p) for p in payloads]
    results.sort()
    methods = sorted(results[0][1])
    summary = {
        "setting": cfg.setting,
        "seeds": seeds,
        "methods": {
            m: {"rho": [r[m] for _, r in results], "mean_rho": float(np.mean([r[m] for _, r in results]))}
            for m in methods
        },
    }
    _write_json(out / "summary.json", summary)
    return summary


def _load_grid(path: str) -> tuple[dict, list[dict]]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read grid {path}: {exc.strerror or exc}") from exc
    if isinstance(data, list):
        return {}, data
    if not isinstance(data, dict) or "cells" not in data:
        raise ConfigError(f"{path}: grid must be a list of overrides or a mapping with 'cells'")
    return data.get("base", {}) or {}, data["cells"]


def _cell_name(cell: dict) -> str:
    return "_".join(f"{k}-{v}" for k, v in sorted(cell.items())).replace("/", "-") or "default"


def cmd_run(args) -> int:
    cfg = C.load(args.config, _flag_overrides(args))
    out = Path(cfg.out_dir)
    if not args.grid:
        summary = run_config(cfg, out, args.jobs)
        for m, info in summary["methods"].items():
            print(f"{cfg.setting:<12}{m:<10}mean rho {info['mean_rho']:+.3f}  per seed {info['rho']}")
        return EXIT_OK
    base, cells = _load_grid(args.grid)
    grid = []
    for cell in cells:
        cell_cfg = C.from_mapping({**base, **cell}, cfg)
        name = _cell_name(cell)
        summary = run_config(cell_cfg, out / name, args.jobs)
        grid.append({"cell": name, "overrides": cell,
                     "mean_rho": {m: v["mean_rho"] for m, v in summary["methods"].items()}})
        print(f"{name}: " + ", ".join(f"{m}={v:+.3f}" for m, v in grid[-1]["mean_rho"].items()))
    _write_json(out / "grid_summary.json", {"cells": grid})
    return EXIT_OK


def cmd_assess(args) -> int:
    from coastfl.evalreport import emit_report
    from coastfl.experiment import assess_log_dir
    from coastfl.flengine import read_manifest

    manifest = read_manifest(args.logs)
    stored = C.from_mapping(manifest.get("config", {}))
    cfg = C.load(args.config, _flag_overrides(args)) if args.config else C.from_mapping(
        {k: v for k, v in _flag_overrides(args).items() if k != "out_dir"}, stored
    )
    report, _ = assess_log_dir(args.logs, cfg)
    board = report.boards["coast"]
    print(f"k={cfg.k} mode={cfg.valuation_mode} tail={cfg.tail_policy} rounds scored={len(board.rounds)}")
    print(f"totals   {[int(v) for v in board.totals]}")
    print(f"rankings {board.rankings}")
    print(f"rho      {report.rho('coast'):+.3f}")
    if args.out:
        emit_report(report, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    from coastfl.evalreport import load_report

    for target in args.paths:
        p = Path(target)
        if (p / "grid_summary.json").is_file():
            cells = json.loads((p / "grid_summary.json").read_text())["cells"]
            for c in cells:
                print(f"{c['cell']:<32}" + "  ".join(f"{m}={v:+.3f}" for m, v in sorted(c["mean_rho"].items())))
            continue
        if (p / "summary.json").is_file():
            s = json.loads((p / "summary.json").read_text())
            print(f"{p}  setting={s['setting']} seeds={s['seeds']}")
            for m, info in sorted(s["methods"].items()):
                print(f"  {m:<10}mean rho {info['mean_rho']:+.3f}  {info['rho']}")
            continue
        report = load_report(p)
        print(f"{p}  seed={report.seed} setting={report.config.get('setting')}")
        for m, board in sorted(report.boards.items()):
            totals = ", ".join(f"{v:.4g}" for v in board.totals)
            print(f"  {m:<10}rho {report.rho(m):+.3f}  rankings {board.rankings}  totals [{totals}]")
    return EXIT_OK


def cmd_oracle(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind == "spearman":
        from coastfl.evalreport import spearman

        n = args.n or 4
        truth = list(range(1, n + 1))
        for perm in itertools.permutations(truth):
            print(f"{list(perm)} oracle={oracles.spearman_definition(truth, perm)!r} "
                  f"impl={spearman(truth, perm)!r}")
        return EXIT_OK
    if args.kind == "shapley":
        from coastfl.baselines import mask_of, shapley_from_values

        n = args.n or 3
        table = rng.random(1 << n)
        table[0] = 0.0
        oracle = oracles.shapley_permutations(lambda s: table[mask_of(s)], n)
        impl = shapley_from_values(lambda m: table[m], n)
        print(f"oracle {[float(v) for v in oracle]}")
        print(f"impl   {impl.tolist()}")
        print(f"max abs diff {float(np.max(np.abs(np.array(oracle) - impl))):.3e}")
        return EXIT_OK
    if args.kind == "prune":
        from coastfl.coast import select_indices

        n = args.n or 16
        layer = rng.standard_normal(n)
        r = float(rng.integers(1, 101))
        oracle = oracles.prune_layer_by_sorting(layer.tolist(), r)
        impl = np.zeros(n)
        idx = select_indices(layer, r)
        impl[idx] = np.sign(layer[idx])
        print(f"n={n} r={r} oracle={oracle}")
        print(f"impl={impl.tolist()} match={oracle == impl.tolist()}")
        return EXIT_OK
    if args.kind == "gradcheck":
        from coastfl.model import ModelArch, backward, init_params
        from coastfl.params import flatten

        arch = ModelArch()
        worst = 0.0
        for case in range(args.cases):
            params = init_params(arch, args.seed * 1000 + case)
            x = rng.random((4, arch.input_dim))
            y = rng.integers(0, arch.n_classes, 4)
            flat = flatten(params)
            numeric = oracles.central_difference(lambda f: oracles.mlp_loss(f, arch.dims, x, y), flat)
            err = oracles.relative_error(flatten(backward(params, arch, x, y)), numeric)
            worst = max(worst, err)
            print(f"case {case}: max relative error {err:.3e}")
        print(f"max relative error over {args.cases} cases: {worst:.3e}")
        return EXIT_OK
    raise ConfigError(f"unknown oracle kind {args.kind!r}")


def cmd_dump_data(args) -> int:
    from coastfl.experiment import prepare
    from coastfl.synthdata import save_dataset

    cfg = C.load(args.config, _flag_overrides(args))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clients, validation, _ = prepare(cfg, cfg.seed)
    for i, data in enumerate(clients, start=1):
        save_dataset(data, out / f"client_{i:02d}.bin")
        print(f"client {i}: {len(data)} samples {data.meta}")
    save_dataset(validation, out / "validation.bin")
    print(f"validation: {len(validation)} samples")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coastfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--setting", choices=("quantity", "noise", "resolution", "mask"))
        p.add_argument("--method", action="append", choices=C.ALL_METHODS, help="repeatable")
        p.add_argument("--out", help=out_help)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("run", help="train, assess and report")
    common(p)
    p.add_argument("--seeds", type=int, help="number of consecutive seeds starting at --seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    p.add_argument("--grid", help="YAML list of config overrides, one run per cell")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("assess", help="re-score persisted round logs without retraining")
    p.add_argument("--logs", required=True, help="round-log directory of a run")
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--valuation-mode", dest="valuation_mode", choices=("parameter_sign", "update_sign"))
    p.add_argument("--tail-policy", dest="tail_policy", choices=("truncate", "drop"))
    p.add_argument("--out", help="write a report here")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("report", help="print report, summary or grid directories")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("oracle", help="print brute-force reference computations")
    p.add_argument("kind", choices=("spearman", "shapley", "prune", "gradcheck"))
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=1)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("dump-data", help="write per-client datasets for inspection")
    common(p)
    p.set_defaults(func=cmd_dump_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorruptLogError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CoastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
