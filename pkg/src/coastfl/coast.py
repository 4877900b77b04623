"""Validation-free contribution assessment: ternary update pruning and
cross-round sign-agreement valuation.

Pruning keeps, per layer, the ``floor(n * r / 100)`` largest-magnitude
entries of a client update and replaces them by their sign; the server then
aggregates ``Theta + (alpha / N) * sum(pruned)``, so each global scalar moves
by a whole number of ``alpha / N`` votes.

Valuation scores client ``i`` in round ``t`` by counting, over all scalars,
how often the sign of its local model agrees with the sign of the global
movement over the next ``k`` rounds (agreements minus disagreements).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Sequence

import numpy as np

from coastfl import params as P
from coastfl.errors import ConfigError, StructuralError
from coastfl.evalreport import rank
from coastfl.params import LayeredParams

if TYPE_CHECKING:
    from coastfl.flengine import RoundLog

log = logging.getLogger(__name__)
_warned_empty: set[tuple[str, int, float]] = set()

SELECTIONS = ("by_abs", "by_value_paper_literal")
CLIPS = ("sign_clip", "none", "layer_mean")
VALUATION_MODES = ("parameter_sign", "update_sign")
TAIL_POLICIES = ("truncate", "drop")


@dataclass(frozen=True)
class PruneConfig:
    """``clip`` chooses what a selected entry becomes.

    sign_clip   sgn(delta), aggregated with step alpha (the default)
    none        the raw delta, aggregated with step 1 (no quantization)
    layer_mean  sgn(delta) * mean|selected delta| / alpha, i.e. an adaptive
                per-layer step instead of the fixed alpha
    """

    r: float = 10.0
    alpha: float = 0.02
    selection: str = "by_abs"
    clip: str = "sign_clip"

    def __post_init__(self):
        problems = []
        if not 0 < self.r <= 100:
            problems.append(f"r must be in (0, 100], got {self.r}")
        if not self.alpha > 0:
            problems.append(f"alpha must be > 0, got {self.alpha}")
        if self.selection not in SELECTIONS:
            problems.append(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if self.clip not in CLIPS:
            problems.append(f"clip must be one of {CLIPS}, got {self.clip!r}")
        if problems:
            raise ConfigError("invalid prune config", problems)

    @property
    def step(self) -> float:
        """Multiplier turning a pruned update into a parameter offset."""
        return 1.0 if self.clip == "none" else self.alpha


@dataclass(frozen=True)
class ValuationConfig:
    k: int = 2
    mode: str = "parameter_sign"
    tail_policy: str = "truncate"

    def __post_init__(self):
        problems = []
        if int(self.k) != self.k or self.k < 1:
            problems.append(f"k must be an integer >= 1, got {self.k}")
        if self.mode not in VALUATION_MODES:
            problems.append(f"mode must be one of {VALUATION_MODES}, got {self.mode!r}")
        if self.tail_policy not in TAIL_POLICIES:
            problems.append(f"tail_policy must be one of {TAIL_POLICIES}, got {self.tail_policy!r}")
        if problems:
            raise ConfigError("invalid valuation config", problems)


@dataclass(eq=False)
class ScoreBoard:
    """Per-client, per-round scores. ``scores[i, c]`` belongs to ``rounds[c]``."""

    method: str
    rounds: list[int]
    scores: np.ndarray  # (n_clients, len(rounds))

    def __post_init__(self):
        self.rounds = [int(t) for t in self.rounds]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[1] != len(self.rounds):
            raise StructuralError(f"scores of shape {self.scores.shape} do not match {len(self.rounds)} rounds")

    @property
    def n_clients(self) -> int:
        return int(self.scores.shape[0])

    @property
    def totals(self) -> np.ndarray:
        return self.scores.sum(axis=1)

    @property
    def rankings(self) -> list[int]:
        return rank(self.totals)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreBoard):
            return NotImplemented
        return (
            self.method == other.method
            and self.rounds == other.rounds
            and self.scores.shape == other.scores.shape
            and self.scores.tobytes() == other.scores.tobytes()
        )

    def to_csv(self) -> str:
        """Long-format table: method, client (1-based), round, score."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "client", "round", "score"])
        for i in range(self.n_clients):
            for c, t in enumerate(self.rounds):
                w.writerow([self.method, i + 1, t, repr(float(self.scores[i, c]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreBoard":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise StructuralError("empty score table")
        methods = {r["method"] for r in rows}
        if len(methods) != 1:
            raise StructuralError(f"score table mixes methods {sorted(methods)}")
        rounds = sorted({int(r["round"]) for r in rows})
        n = max(int(r["client"]) for r in rows)
        scores = np.full((n, len(rounds)), np.nan)
        col = {t: c for c, t in enumerate(rounds)}
        for r in rows:
            scores[int(r["client"]) - 1, col[int(r["round"])]] = float(r["score"])
        if np.isnan(scores).any():
            raise StructuralError("score table has missing (client, round) cells")
        return cls(methods.pop(), rounds, scores)


# -- pruning -------------------------------------------------------------------

def n_selected(n: int, r: float) -> int:
    """floor(n * r / 100) with r read as the decimal it was written as."""
    return math.floor(n * Fraction(repr(float(r))) / 100)


def select_indices(layer: np.ndarray, r: float, selection: str = "by_abs") -> np.ndarray:
    """Indices kept in one layer; stable sort so lower indices win ties."""
    m = n_selected(layer.size, r)
    key = -np.abs(layer) if selection == "by_abs" else -layer
    return np.argsort(key, kind="stable")[:m]


def prune(delta: LayeredParams, cfg: PruneConfig) -> LayeredParams:
    out = []
    for name, v in delta:
        idx = select_indices(v, cfg.r, cfg.selection)
        if v.size and idx.size == 0 and (name, v.size, cfg.r) not in _warned_empty:
            _warned_empty.add((name, v.size, cfg.r))
            log.warning("layer %s (%d entries) keeps no entries at r=%s", name, v.size, cfg.r)
        pruned = np.zeros(v.size)
        if cfg.clip == "none":
            pruned[idx] = v[idx]
        else:
            pruned[idx] = np.sign(v[idx])
            if cfg.clip == "layer_mean" and idx.size:
                pruned[idx] *= np.abs(v[idx]).mean() / cfg.alpha
        out.append((name, pruned + 0.0))
    return LayeredParams.from_layers(out)


# -- cross-round valuation -----------------------------------------------------

def _round_update(log_e: "RoundLog") -> LayeredParams:
    """Global movement of one round, on a scale where sign is exact.

    For sign-clipped rounds this is the integer vote count sum_i pruned_i
    (proportional to Theta^e - Theta^{e-1} by a positive constant), which
    keeps cancelled votes at an exact zero instead of a rounding residue.
    """
    if log_e.is_vote_round:
        return P.sum_all(log_e.pruned_updates)
    return P.sub(log_e.global_after, log_e.global_before)


def window_rounds(n_rounds: int, t: int, k: int, tail_policy: str) -> list[int] | None:
    """Future rounds whose updates score round ``t``; None when ``t`` is unscored."""
    last = t + k
    if last > n_rounds:
        if tail_policy == "drop" or t >= n_rounds:
            return None
        last = n_rounds
    return list(range(t + 1, last + 1))


def global_window(logs: Sequence["RoundLog"], t: int, k: int, tail_policy: str = "truncate") -> LayeredParams:
    """U^(t,k): summed global updates of rounds t+1 .. min(t+k, M).

    ``logs[e - 1]`` must be round ``e``. Vote rounds are summed as integer
    votes then scaled once by alpha/N, so the result equals Theta^{t+k} -
    Theta^t up to rounding while zero stays exactly zero.
    """
    n_rounds = len(logs)
    if not 1 <= t <= n_rounds:
        raise StructuralError(f"round {t} outside logged range 1..{n_rounds}")
    rounds = window_rounds(n_rounds, t, k, tail_policy)
    if rounds is None:
        raise StructuralError(f"round {t} has no scoring window (M={n_rounds}, k={k}, {tail_policy})")
    window = [logs[e - 1] for e in rounds]
    if all(lg.is_vote_round for lg in window) and len({lg.vote_scale for lg in window}) == 1:
        votes = P.sum_all([_round_update(lg) for lg in window])
        return P.scale(votes, window[0].vote_scale)
    return P.sum_all([P.sub(lg.global_after, lg.global_before) for lg in window])


def _sign_window(logs: Sequence["RoundLog"], t: int, k: int, tail_policy: str) -> np.ndarray:
    rounds = window_rounds(len(logs), t, k, tail_policy)
    window = [logs[e - 1] for e in rounds]
    if all(lg.is_vote_round for lg in window):
        total = P.sum_all([_round_update(lg) for lg in window])
    else:
        total = global_window(logs, t, k, tail_policy)
    return P.flatten(P.sgn(total)).astype(np.int64)


def sign_agreement(vectors: Sequence[LayeredParams], u_sign: np.ndarray) -> np.ndarray:
    """sum_h sgn(v[h]) * u_sign[h] for each vector, as exact integers."""
    out = np.empty(len(vectors), dtype=np.int64)
    for i, v in enumerate(vectors):
        flat = P.flatten(v)
        if flat.size != u_sign.size:
            raise StructuralError(f"vector of length {flat.size} vs window of length {u_sign.size}")
        if np.isnan(flat).any():
            raise StructuralError("NaN in valued parameters")
        out[i] = int(np.sign(flat).astype(np.int64) @ u_sign)
    return out


def value_round(local_models: Sequence[LayeredParams], window: LayeredParams) -> np.ndarray:
    """Per-client score: sum_h sgn(local[h]) * sgn(window[h])."""
    return sign_agreement(local_models, P.flatten(P.sgn(window)).astype(np.int64))


def valued_vectors(log_t: "RoundLog", val_cfg: ValuationConfig, prune_cfg: PruneConfig | None = None) -> list[LayeredParams]:
    """What gets compared against the window: local models or pruned updates."""
    if val_cfg.mode == "parameter_sign":
        return log_t.local_models()
    if log_t.pruned_updates:
        return list(log_t.pruned_updates)
    return [prune(d, prune_cfg or PruneConfig()) for d in log_t.raw_updates]


def assess(
    logs: Sequence["RoundLog"],
    prune_cfg: PruneConfig | None = None,
    val_cfg: ValuationConfig | None = None,
    method: str = "coast",
) -> ScoreBoard:
    val_cfg = val_cfg or ValuationConfig()
    if not logs:
        raise StructuralError("no round logs to assess")
    for e, lg in enumerate(logs, start=1):
        if lg.round_idx != e:
            raise StructuralError(f"log position {e} holds round {lg.round_idx}")
    n_rounds = len(logs)
    rounds, columns = [], []
    for t in range(1, n_rounds + 1):
        if window_rounds(n_rounds, t, val_cfg.k, val_cfg.tail_policy) is None:
            continue
        u_sign = _sign_window(logs, t, val_cfg.k, val_cfg.tail_policy)
        vectors = valued_vectors(logs[t - 1], val_cfg, prune_cfg)
        rounds.append(t)
        columns.append(sign_agreement(vectors, u_sign))
    n_clients = logs[0].n_clients
    scores = np.stack(columns, axis=1).astype(np.float64) if columns else np.zeros((n_clients, 0))
    return ScoreBoard(method, rounds, scores)
