"""Reference contribution measures computed from the same round logs.

* ``shapley``  exact per-round Shapley value over client coalitions, where a
  coalition's value is the validation accuracy of the previous global model
  moved by the coalition's mean update
* ``loo``      leave-one-out: v(all) - v(all without i)
* ``cgsv``     cosine between a client's raw update and the summed update

Per-round values are summed over rounds, as in round-wise federated Shapley.
Client indices are 0-based here; coalitions are bitmasks (bit i = client i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from coastfl import params as P
from coastfl.coast import ScoreBoard
from coastfl.errors import CapabilityError, StructuralError
from coastfl.flengine import RoundLog
from coastfl.model import ModelArch, accuracy
from coastfl.params import LayeredParams
from coastfl.synthdata import ClientDataset

MAX_EXACT_CLIENTS = 12
METHODS = ("shapley", "loo", "cgsv")


def mask_of(members: Iterable[int]) -> int:
    m = 0
    for i in members:
        m |= 1 << i
    return m


@dataclass
class CoalitionValueFn:
    """v(S) for one round, memoized per coalition bitmask."""

    round_idx: int
    global_before: LayeredParams
    updates: Sequence[LayeredParams]
    arch: ModelArch
    validation: ClientDataset
    cache: dict[int, float] = field(default_factory=dict)

    @property
    def n_clients(self) -> int:
        return len(self.updates)

    def __call__(self, mask: int) -> float:
        if mask not in self.cache:
            members = [i for i in range(self.n_clients) if mask >> i & 1]
            if members:
                mean = P.scale(P.sum_all([self.updates[i] for i in members]), 1.0 / len(members))
                model = P.add(self.global_before, mean)
            else:
                model = self.global_before
            self.cache[mask] = accuracy(model, self.arch, self.validation.x, self.validation.y)
        return self.cache[mask]


def coalition_value(members: Iterable[int], ctx: CoalitionValueFn) -> float:
    return ctx(mask_of(members))


def shapley_from_values(v: Callable[[int], float], n: int) -> np.ndarray:
    """Exact Shapley values by enumerating all 2^n coalitions."""
    if n > MAX_EXACT_CLIENTS:
        raise CapabilityError(
            f"exact Shapley over {n} clients exceeds the limit of {MAX_EXACT_CLIENTS}; "
            "use a sampling estimator instead"
        )
    values = np.array([v(m) for m in range(1 << n)], dtype=np.float64)
    sizes = np.array([bin(m).count("1") for m in range(1 << n)])
    weight = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        for m in range(1 << n):
            if not m & bit:
                phi[i] += weight[sizes[m]] * (values[m | bit] - values[m])
    return phi


def loo_from_values(v: Callable[[int], float], n: int) -> np.ndarray:
    full = (1 << n) - 1
    return np.array([v(full) - v(full & ~(1 << i)) for i in range(n)])


def shapley_round(ctx: CoalitionValueFn) -> np.ndarray:
    return shapley_from_values(ctx, ctx.n_clients)


def leave_one_out_round(ctx: CoalitionValueFn) -> np.ndarray:
    return loo_from_values(ctx, ctx.n_clients)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cgsv_round(log_t: RoundLog) -> np.ndarray:
    if not log_t.raw_updates:
        raise StructuralError(f"round {log_t.round_idx} has no raw updates")
    flats = [P.flatten(d) for d in log_t.raw_updates]
    total = np.sum(flats, axis=0)
    return np.array([cosine(f, total) for f in flats])


def accumulate(method: str, rounds: Sequence[int], per_round: Sequence[np.ndarray]) -> ScoreBoard:
    if len(rounds) != len(per_round):
        raise StructuralError("one score vector per round is required")
    scores = np.stack(per_round, axis=1) if per_round else np.zeros((0, 0))
    return ScoreBoard(method, list(rounds), scores)


def run_baselines(
    logs: Sequence[RoundLog],
    arch: ModelArch,
    validation: ClientDataset | None,
    methods: Sequence[str] = METHODS,
) -> dict[str, ScoreBoard]:
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise StructuralError(f"unknown baseline methods {sorted(unknown)}")
    needs_val = {"shapley", "loo"} & set(methods)
    if needs_val and validation is None:
        raise StructuralError(f"{sorted(needs_val)} need a validation set")
    per: dict[str, list[np.ndarray]] = {m: [] for m in methods}
    for lg in logs:
        if needs_val:
            ctx = CoalitionValueFn(lg.round_idx, lg.global_before, lg.raw_updates, arch, validation)
            if "shapley" in per:
                per["shapley"].append(shapley_round(ctx))
            if "loo" in per:
                per["loo"].append(leave_one_out_round(ctx))
        if "cgsv" in per:
            per["cgsv"].append(cgsv_round(lg))
    rounds = [lg.round_idx for lg in logs]
    return {m: accumulate(m, rounds, per[m]) for m in methods}
