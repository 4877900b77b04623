"""Round-based federated training with plain or pruned aggregation, and the
on-disk round log used to re-score a run offline.

Log directory layout::

    manifest.json      format/version, config hash, seed, architecture,
                       aggregation mode, round count, sha256 of every round file
    round_0001.bin     one file per round, ``round_{t:04d}.bin``
    ...

Round file layout (little-endian)::

    magic b"CRND" | uint16 version | uint32 round | uint32 n_clients
    | uint8 mode (0 plain, 1 pruned) | uint8 clip code | float64 step
    | snapshot global_before | snapshot global_after
    | n_clients snapshots of raw updates
    | n_clients snapshots of pruned updates (pruned mode only)
    | uint32 CRC-32 of all preceding bytes

Each snapshot uses the container format of :mod:`coastfl.params`.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from coastfl import params as P
from coastfl.coast import CLIPS, PruneConfig, prune
from coastfl.errors import ConfigError, CorruptLogError, StructuralError
from coastfl.model import ModelArch, TrainConfig, local_train
from coastfl.params import LayeredParams
from coastfl.rng import derive_seed
from coastfl.synthdata import ClientDataset

LOG_MAGIC = b"CRND"
LOG_VERSION = 1
MANIFEST_FORMAT = "coastfl-roundlog"


@dataclass(frozen=True)
class AggregationMode:
    kind: str = "coast_pruned"  # or "plain_fedavg"
    prune: PruneConfig = field(default_factory=PruneConfig)

    def __post_init__(self):
        if self.kind not in ("plain_fedavg", "coast_pruned"):
            raise ConfigError(f"aggregation must be plain_fedavg or coast_pruned, got {self.kind!r}")

    @property
    def pruned(self) -> bool:
        return self.kind == "coast_pruned"


@dataclass(eq=False)
class RoundLog:
    round_idx: int
    global_before: LayeredParams
    raw_updates: list[LayeredParams]
    pruned_updates: list[LayeredParams]
    global_after: LayeredParams
    step: float = 1.0  # alpha for pruned rounds
    clip: str = "sign_clip"

    @property
    def n_clients(self) -> int:
        return len(self.raw_updates)

    @property
    def is_vote_round(self) -> bool:
        """Pruned updates are ternary votes and global_after - global_before = vote_scale * votes."""
        return bool(self.pruned_updates) and self.clip == "sign_clip"

    @property
    def vote_scale(self) -> float:
        return self.step / self.n_clients

    def local_models(self) -> list[LayeredParams]:
        """theta_i = global_before + raw delta_i, as reconstructed from the log."""
        return [P.add(self.global_before, d) for d in self.raw_updates]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoundLog):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def _aggregate(global_before: LayeredParams, raw: list[LayeredParams], mode: AggregationMode):
    n = len(raw)
    if not mode.pruned:
        return [], P.add(global_before, P.scale(P.sum_all(raw), 1.0 / n))
    pruned = [prune(d, mode.prune) for d in raw]
    # votes are small integers, so the sum is exact before the single scaling
    return pruned, P.add(global_before, P.scale(P.sum_all(pruned), mode.prune.step / n))


def run_round(
    t: int,
    global_before: LayeredParams,
    clients: Sequence[ClientDataset],
    arch: ModelArch,
    train_cfg: TrainConfig,
    mode: AggregationMode,
    seed: int,
) -> RoundLog:
    if t < 1:
        raise ConfigError(f"round index must be >= 1, got {t}")
    if not clients:
        raise ConfigError("at least one client is required")
    lr = train_cfg.learning_rate(t)
    raw = []
    for i, data in enumerate(clients, start=1):
        local = local_train(
            global_before, arch, data.x, data.y, train_cfg, lr,
            derive_seed(seed, "train", t, i), round_idx=t, client=i,
        )
        raw.append(P.sub(local, global_before))
    return round_from_updates(t, global_before, raw, mode)


def round_from_updates(t: int, global_before: LayeredParams, raw: list[LayeredParams], mode: AggregationMode) -> RoundLog:
    """Aggregate already-computed client updates into a RoundLog."""
    for d in raw:
        P.check_same_arch(global_before, d)
    pruned, after = _aggregate(global_before, raw, mode)
    return RoundLog(
        round_idx=t,
        global_before=global_before,
        raw_updates=raw,
        pruned_updates=pruned,
        global_after=after,
        step=mode.prune.step if mode.pruned else 1.0,
        clip=mode.prune.clip,
    )


def run_experiment(
    initial: LayeredParams,
    clients: Sequence[ClientDataset],
    arch: ModelArch,
    train_cfg: TrainConfig,
    mode: AggregationMode,
    n_rounds: int,
    seed: int,
    log_dir: str | Path | None = None,
    manifest_extra: dict | None = None,
    on_round=None,
) -> tuple[list[RoundLog], LayeredParams]:
    """Rounds 1..M in sequence; every client takes part in every round."""
    if n_rounds < 1:
        raise ConfigError(f"need at least one round, got {n_rounds}")
    writer = LogWriter(log_dir, initial.arch, mode, seed, manifest_extra) if log_dir is not None else None
    logs = []
    current = initial
    for t in range(1, n_rounds + 1):
        lg = run_round(t, current, clients, arch, train_cfg, mode, seed)
        logs.append(lg)
        if writer:
            writer.write(lg)
        if on_round:
            on_round(lg)
        current = lg.global_after
    if writer:
        writer.close()
    return logs, current


# -- persistence ----------------------------------------------------------------

def to_bytes(lg: RoundLog) -> bytes:
    mode = 1 if lg.pruned_updates else 0
    head = LOG_MAGIC + struct.pack(
        "<HIIBBd", LOG_VERSION, lg.round_idx, lg.n_clients, mode, CLIPS.index(lg.clip), lg.step
    )
    snaps = [lg.global_before, lg.global_after, *lg.raw_updates, *lg.pruned_updates]
    body = head + b"".join(P.dump_snapshot(s) for s in snaps)
    return body + struct.pack("<I", zlib.crc32(body))


_HEAD = struct.Struct("<HIIBBd")


def from_bytes(buf: bytes, source: str = "<bytes>") -> RoundLog:
    if len(buf) < 4 + _HEAD.size + 4 or buf[:4] != LOG_MAGIC:
        raise CorruptLogError(f"{source}: not a round log")
    (crc,) = struct.unpack("<I", buf[-4:])
    if crc != zlib.crc32(buf[:-4]):
        raise CorruptLogError(f"{source}: checksum mismatch (truncated or modified)")
    version, t, n, mode, clip_code, step = _HEAD.unpack_from(buf, 4)
    if version != LOG_VERSION:
        raise CorruptLogError(f"{source}: log version {version}, expected {LOG_VERSION}")
    if clip_code >= len(CLIPS):
        raise CorruptLogError(f"{source}: unknown clip code {clip_code}")
    pos = 4 + _HEAD.size
    snaps = []
    count = 2 + n * (2 if mode else 1)
    try:
        for _ in range(count):
            s, pos = P.load_snapshot(buf, pos)
            snaps.append(s)
    except StructuralError as exc:
        raise CorruptLogError(f"{source}: {exc}") from exc
    if pos != len(buf) - 4:
        raise CorruptLogError(f"{source}: trailing bytes after round data")
    return RoundLog(
        round_idx=t,
        global_before=snaps[0],
        global_after=snaps[1],
        raw_updates=snaps[2:2 + n],
        pruned_updates=snaps[2 + n:] if mode else [],
        step=step,
        clip=CLIPS[clip_code],
    )


def round_file(t: int) -> str:
    return f"round_{t:04d}.bin"


class LogWriter:
    """Single writer for one run's log directory; the manifest is written last."""

    def __init__(self, log_dir, arch, mode: AggregationMode, seed: int, extra: dict | None = None):
        self.dir = Path(log_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.arch = arch
        self.mode = mode
        self.seed = seed
        self.extra = dict(extra or {})
        self.files: list[dict] = []

    def write(self, lg: RoundLog) -> None:
        data = to_bytes(lg)
        name = round_file(lg.round_idx)
        (self.dir / name).write_bytes(data)
        self.files.append({"name": name, "sha256": hashlib.sha256(data).hexdigest()})

    def close(self) -> None:
        manifest = {
            "format": MANIFEST_FORMAT,
            "version": LOG_VERSION,
            "seed": self.seed,
            "architecture": [[n, m] for n, m in self.arch],
            "aggregation": self.mode.kind,
            "prune": {"r": self.mode.prune.r, "alpha": self.mode.prune.alpha,
                      "selection": self.mode.prune.selection, "clip": self.mode.prune.clip},
            "n_rounds": len(self.files),
            "files": self.files,
            **self.extra,
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_logs(logs: Sequence[RoundLog], log_dir, mode: AggregationMode, seed: int, extra: dict | None = None) -> None:
    writer = LogWriter(log_dir, logs[0].global_before.arch, mode, seed, extra)
    for lg in logs:
        writer.write(lg)
    writer.close()


def read_manifest(log_dir) -> dict:
    path = Path(log_dir) / "manifest.json"
    if not path.is_file():
        raise CorruptLogError(f"{log_dir}: no manifest.json (not a round-log directory)")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CorruptLogError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != LOG_VERSION:
        raise CorruptLogError(f"{path}: unsupported log format {manifest.get('format')!r} v{manifest.get('version')}")
    return manifest


def replay(log_dir) -> list[RoundLog]:
    """Load and verify every round of a persisted run."""
    manifest = read_manifest(log_dir)
    arch = tuple((n, m) for n, m in manifest["architecture"])
    logs = []
    for t, entry in enumerate(manifest["files"], start=1):
        path = Path(log_dir) / entry["name"]
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise CorruptLogError(f"{path}: {exc}") from exc
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CorruptLogError(f"{path}: sha256 does not match manifest")
        lg = from_bytes(data, str(path))
        if lg.round_idx != t or lg.global_before.arch != arch:
            raise CorruptLogError(f"{path}: round/architecture does not match manifest")
        logs.append(lg)
    if len(logs) != manifest["n_rounds"] or not logs:
        raise CorruptLogError(f"{log_dir}: manifest lists {manifest['n_rounds']} rounds, found {len(logs)}")
    return logs
