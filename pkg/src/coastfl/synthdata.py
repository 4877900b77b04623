"""Synthetic image classification data and per-client quality degradations.

The base task: each class owns a smooth random template field on an H x W
grid; a sample is its class template plus smooth and white per-sample
jitter, clamped to [0, 1]. Four settings then degrade client ``i`` of ``N``
more strongly as ``i`` grows, so the ground-truth contribution ranking is
always ``[1, 2, ..., N]``:

* quantity   -- client i draws floor((1 - 0.5 i/N) |X|) samples
* noise      -- additive Gaussian noise, mean 0.01 i, std 0.625 i/N
* resolution -- Gaussian blur, kernel 2i+1, std 0.4 i + 1
* mask       -- a zeroed rectangle covering a U[0.5 i/N, 0.75 i/N] area fraction

Dataset files written by :func:`save_dataset` use this layout (little-endian)::

    magic b"CDSD" | uint32 H | uint32 W | uint32 C | uint32 n
    | n*H*W float64 pixels (row-major, sample-major) | n int32 labels
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from coastfl.errors import ConfigError, StructuralError
from coastfl.rng import make_rng

SETTINGS = ("quantity", "noise", "resolution", "mask")
DATASET_MAGIC = b"CDSD"

# generator shape; chosen so a 256-64-4 MLP lands well above chance but below 100%
TEMPLATE_SMOOTHING = 2.0
TEMPLATE_CONTRAST = 0.12
JITTER_SMOOTH = 0.15
JITTER_WHITE = 0.15


@dataclass(frozen=True, eq=False)
class ClientDataset:
    x: np.ndarray  # (n, H*W) float64 in [0, 1]
    y: np.ndarray  # (n,) int64 class ids
    height: int
    width: int
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def images(self) -> np.ndarray:
        return self.x.reshape(-1, self.height, self.width)

    def subset(self, idx: np.ndarray) -> "ClientDataset":
        return replace(self, x=self.x[idx], y=self.y[idx])

    def with_pixels(self, x: np.ndarray, **meta) -> "ClientDataset":
        return replace(self, x=np.clip(x, 0.0, 1.0).reshape(len(self), -1), meta={**self.meta, **meta})


def ground_truth(n_clients: int) -> list[int]:
    return list(range(1, n_clients + 1))


def generate_base(seed: int, n_samples: int, height: int = 16, width: int = 16, n_classes: int = 4) -> ClientDataset:
    """Deterministic base pool. Labels cycle 0..C-1 so any contiguous block is class balanced."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    if height * width < 16:
        raise ConfigError(f"image must have at least 16 pixels, got {height}x{width}")
    if n_samples < n_classes:
        raise ConfigError(f"n_samples={n_samples} is smaller than n_classes={n_classes}")
    rng = make_rng(seed, "base")
    templates = []
    for _ in range(n_classes):
        field_ = ndimage.gaussian_filter(rng.standard_normal((height, width)), TEMPLATE_SMOOTHING, mode="wrap")
        field_ = (field_ - field_.mean()) / field_.std()
        templates.append(0.5 + TEMPLATE_CONTRAST * field_)
    templates = np.stack(templates)

    y = np.arange(n_samples) % n_classes
    smooth = ndimage.gaussian_filter(
        rng.standard_normal((n_samples, height, width)), (0, TEMPLATE_SMOOTHING, TEMPLATE_SMOOTHING), mode="wrap"
    )
    smooth /= smooth.std(axis=(1, 2), keepdims=True)
    white = rng.standard_normal((n_samples, height, width))
    x = templates[y] + JITTER_SMOOTH * smooth + JITTER_WHITE * white
    x = np.clip(x, 0.0, 1.0).reshape(n_samples, -1)
    return ClientDataset(x, y.astype(np.int64), height, width, n_classes, {"kind": "base", "seed": seed})


def split_base(base: ClientDataset, n_train: int) -> tuple[ClientDataset, ClientDataset]:
    """Index partition: the first ``n_train`` samples are the training pool, the rest the reserve."""
    if not 0 < n_train <= len(base):
        raise ConfigError(f"n_train={n_train} outside (0, {len(base)}]")
    idx = np.arange(len(base))
    return base.subset(idx[:n_train]), base.subset(idx[n_train:])


def make_validation(base: ClientDataset, seed: int, n_val: int, n_train: int) -> ClientDataset:
    """Clean held-out samples taken from the reserve beyond the training pool.

    The reserve keeps the base's cyclic label order, so any ``n_val`` prefix
    is balanced to within one sample per class. ``seed`` is recorded only;
    selection is positional so validation never overlaps a client's source.
    """
    if n_val < base.n_classes:
        raise ConfigError(f"n_val={n_val} must be at least n_classes={base.n_classes}")
    _, reserve = split_base(base, n_train)
    if n_val > len(reserve):
        raise ConfigError(f"n_val={n_val} exceeds reserve of {len(reserve)} samples")
    val = reserve.subset(np.arange(n_val))
    return replace(val, meta={"kind": "validation", "seed": seed})


def quantity_size(n_pool: int, i: int, n_clients: int) -> int:
    # floor((1 - 0.5 i/N) * n) in exact integer arithmetic
    return ((2 * n_clients - i) * n_pool) // (2 * n_clients)


def partition_quantity(pool: ClientDataset, i: int, n_clients: int, seed: int) -> ClientDataset:
    if len(pool) == 0:
        raise ConfigError("training pool is empty")
    size = quantity_size(len(pool), i, n_clients)
    if size <= 0:
        raise ConfigError(f"client {i} would receive no samples")
    idx = make_rng(seed, "quantity", i).choice(len(pool), size=size, replace=False)
    out = pool.subset(idx)
    return replace(out, meta={"kind": "quantity", "client": i, "size": size})


def partition_even(pool: ClientDataset, i: int, n_clients: int, seed: int) -> ClientDataset:
    """Client ``i``'s share of one seeded random even split (floor(|X|/N) each)."""
    share = len(pool) // n_clients
    if share == 0:
        raise ConfigError(f"pool of {len(pool)} cannot be split among {n_clients} clients")
    order = make_rng(seed, "even-split").permutation(len(pool))
    idx = order[(i - 1) * share:i * share]
    return replace(pool.subset(idx), meta={"kind": "even", "client": i})


def noise_params(i: int, n_clients: int) -> tuple[float, float]:
    return 0.01 * i, 0.625 * i / n_clients


def apply_noise(data: ClientDataset, i: int, n_clients: int, seed: int) -> ClientDataset:
    mu, sigma = noise_params(i, n_clients)
    rng = make_rng(seed, "noise", i)
    noisy = data.x + rng.normal(mu, sigma, size=data.x.shape) if sigma > 0 else data.x + mu
    return data.with_pixels(noisy, kind="noise", client=i, mu=mu, sigma=sigma)


def blur_params(i: int) -> tuple[int, float]:
    return 2 * i + 1, 0.4 * i + 1


def gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r * r) / (2 * sigma * sigma))
    return k / k.sum()


def apply_blur(data: ClientDataset, i: int, n_clients: int) -> ClientDataset:
    size, sigma = blur_params(i)
    if size > min(data.height, data.width):
        raise ConfigError(f"blur kernel {size} larger than {data.height}x{data.width} image")
    k = gaussian_kernel_1d(size, sigma)
    # separable normalized 1-D passes == the normalized 2-D outer-product kernel
    img = ndimage.correlate1d(data.images, k, axis=1, mode="reflect")
    img = ndimage.correlate1d(img, k, axis=2, mode="reflect")
    return data.with_pixels(img, kind="resolution", client=i, kernel=size, sigma=sigma)


def mask_bounds(i: int, n_clients: int) -> tuple[float, float]:
    return 0.5 * i / n_clients, 0.75 * i / n_clients


def mask_region(area: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean H x W mask with exactly ``area`` cells set.

    The region is an h-row block of full columns plus one partial column, which
    is an exact rectangle whenever ``area`` factors into it.
    """
    out = np.zeros((height, width), dtype=bool)
    if area <= 0:
        return out
    h = max(math.ceil(area / width), min(height, max(1, round(math.sqrt(area)))))
    full, rem = divmod(area, h)
    w = full + (rem > 0)
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    out[top:top + h, left:left + full] = True
    if rem:
        out[top:top + rem, left + full] = True
    return out


def apply_mask(data: ClientDataset, i: int, n_clients: int, seed: int) -> ClientDataset:
    lo, hi = mask_bounds(i, n_clients)
    img = data.images.copy()
    hw = data.height * data.width
    fractions = np.empty(len(data))
    for s in range(len(data)):
        rng = make_rng(seed, "mask", i, s)
        f = rng.uniform(lo, hi) if hi > lo else lo
        fractions[s] = f
        img[s][mask_region(int(math.floor(f * hw)), data.height, data.width, rng)] = 0.0
    return data.with_pixels(img, kind="mask", client=i, fraction_lo=lo, fraction_hi=hi)


def build_clients(
    setting: str,
    n_clients: int,
    seed: int,
    n_train: int = 2000,
    n_val: int = 200,
    height: int = 16,
    width: int = 16,
    n_classes: int = 4,
) -> tuple[list[ClientDataset], ClientDataset]:
    """Per-client datasets (client 1 first) plus a clean validation set."""
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    base = generate_base(seed, n_train + n_val, height, width, n_classes)
    pool, _ = split_base(base, n_train)
    validation = make_validation(base, seed, n_val, n_train)
    clients = []
    for i in range(1, n_clients + 1):
        if setting == "quantity":
            clients.append(partition_quantity(pool, i, n_clients, seed))
            continue
        part = partition_even(pool, i, n_clients, seed)
        if setting == "noise":
            clients.append(apply_noise(part, i, n_clients, seed))
        elif setting == "resolution":
            clients.append(apply_blur(part, i, n_clients))
        else:
            clients.append(apply_mask(part, i, n_clients, seed))
    return clients, validation


def save_dataset(data: ClientDataset, path: str | Path) -> None:
    header = DATASET_MAGIC + struct.pack("<IIII", data.height, data.width, data.n_classes, len(data))
    body = np.ascontiguousarray(data.x, dtype="<f8").tobytes() + data.y.astype("<i4").tobytes()
    Path(path).write_bytes(header + body)


def load_dataset(path: str | Path) -> ClientDataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC or len(raw) < 20:
        raise StructuralError(f"{path}: not a dataset file")
    h, w, c, n = struct.unpack("<IIII", raw[4:20])
    expected = 20 + n * h * w * 8 + n * 4
    if len(raw) != expected:
        raise StructuralError(f"{path}: expected {expected} bytes, found {len(raw)}")
    x = np.frombuffer(raw, dtype="<f8", count=n * h * w, offset=20).reshape(n, h * w).copy()
    y = np.frombuffer(raw, dtype="<i4", count=n, offset=20 + n * h * w * 8).astype(np.int64)
    return ClientDataset(x, y, h, w, c)
