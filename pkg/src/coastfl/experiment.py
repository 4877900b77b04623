"""One seeded experiment end to end: data, federated training, every
assessment method, and the report.

Output layout for a seed under ``<out>/seed_<seed>/``::

    logs/          round logs (see coastfl.flengine)
    report/        report.json + scores_<method>.csv
    runtime.json   wall-clock timings, kept apart so report/ is reproducible
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Sequence

from coastfl import baselines, config as C, flengine
from coastfl.coast import PruneConfig, ScoreBoard, ValuationConfig, assess
from coastfl.evalreport import Report, emit_report
from coastfl.model import accuracy, init_params
from coastfl.rng import derive_seed
from coastfl.synthdata import build_clients, ground_truth

log = logging.getLogger(__name__)


def seed_dir(out: str | Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed:04d}"


def prepare(cfg: C.ExperimentConfig, seed: int):
    clients, validation = build_clients(
        cfg.setting, cfg.n_clients, derive_seed(seed, "data"), cfg.n_train, cfg.n_val,
        cfg.height, cfg.width, cfg.n_classes,
    )
    initial = init_params(cfg.arch, derive_seed(seed, "model"))
    return clients, validation, initial


def score_logs(
    logs: Sequence[flengine.RoundLog],
    cfg: C.ExperimentConfig,
    validation=None,
    methods: Sequence[str] | None = None,
) -> dict[str, ScoreBoard]:
    methods = list(methods or cfg.methods)
    boards = {}
    if "coast" in methods:
        boards["coast"] = assess(logs, cfg.prune, cfg.valuation)
    base = [m for m in methods if m != "coast"]
    if base:
        boards.update(baselines.run_baselines(logs, cfg.arch, validation, base))
    return boards


def run_seed(cfg: C.ExperimentConfig, seed: int, out: str | Path | None = None) -> tuple[Report, list[flengine.RoundLog]]:
    """Train one run and score it with every configured method.

    When ``out`` is given, logs (if ``save_logs``), the report and the
    timings are written under ``seed_dir(out, seed)``.
    """
    started = time.perf_counter()
    run_cfg = cfg.replace(seed=seed, n_seeds=1)
    clients, validation, initial = prepare(run_cfg, seed)
    target = seed_dir(out, seed) if out is not None else None
    log_dir = target / "logs" if target is not None and cfg.save_logs else None
    accs = []

    def track(lg):
        accs.append(accuracy(lg.global_after, run_cfg.arch, validation.x, validation.y))

    logs, _ = flengine.run_experiment(
        initial, clients, run_cfg.arch, run_cfg.train, run_cfg.mode, run_cfg.n_rounds,
        derive_seed(seed, "fl"), log_dir, {"config": run_cfg.to_dict(), "config_hash": run_cfg.training_hash()},
        on_round=track,
    )
    trained = time.perf_counter()
    boards = score_logs(logs, run_cfg, validation)
    echo = run_cfg.to_dict()
    echo["final_accuracy"] = accs[-1]
    echo["first_round_accuracy"] = accs[0]
    report = Report(echo, seed, ground_truth(cfg.n_clients), boards)
    finished = time.perf_counter()
    log.info("seed %d: trained in %.1fs, scored in %.1fs; rho=%s", seed, trained - started,
             finished - trained, {m: round(v, 3) for m, v in report.rhos.items()})
    if target is not None:
        emit_report(report, target / "report")
        timing = {"train_sec": trained - started, "score_sec": finished - trained, "total_sec": finished - started}
        (target / "runtime.json").write_text(json.dumps(timing, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    report.runtime_sec = finished - started
    return report, logs


def assess_log_dir(log_dir: str | Path, cfg: C.ExperimentConfig | None = None) -> tuple[Report, list[flengine.RoundLog]]:
    """Offline CoAst scoring of a persisted run; no retraining.

    Valuation settings (k, mode, tail policy) come from ``cfg``; anything
    not given falls back to the config stored in the log manifest.
    """
    manifest = flengine.read_manifest(log_dir)
    logs = flengine.replay(log_dir)
    stored = C.from_mapping(manifest["config"]) if "config" in manifest else C.ExperimentConfig(n_clients=logs[0].n_clients)
    cfg = cfg or stored
    prune_cfg = PruneConfig(**manifest["prune"]) if "prune" in manifest else cfg.prune
    board = assess(logs, prune_cfg, cfg.valuation)
    echo = stored.to_dict()
    echo.update({"k": cfg.k, "valuation_mode": cfg.valuation_mode, "tail_policy": cfg.tail_policy, "methods": ["coast"]})
    report = Report(echo, stored.seed, ground_truth(logs[0].n_clients), {"coast": board})
    return report, logs
