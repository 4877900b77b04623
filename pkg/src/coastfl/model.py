"""Dense feed-forward classifier with hand-derived gradients.

Layers are stored as ``W1, b1, W2, b2, ...``; each weight matrix is
flattened row-major with shape ``(fan_in, fan_out)`` so that a forward pass
is ``h = act(x @ W + b)``. The output layer has no activation and feeds a
softmax cross-entropy loss averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from coastfl.errors import ConfigError, NumericError, StructuralError, TrainingError
from coastfl.params import LayeredParams
from coastfl.rng import make_rng


@dataclass(frozen=True)
class ModelArch:
    input_dim: int = 256
    hidden_dims: tuple[int, ...] = (64,)
    n_classes: int = 4
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = [self.input_dim, *self.hidden_dims, self.n_classes]
        if any(d < 1 for d in dims):
            raise ConfigError(f"all layer dimensions must be >= 1, got {dims}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"activation must be relu or tanh, got {self.activation!r}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.n_classes]

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        dims = self.dims
        for j in range(len(dims) - 1):
            out.append((f"W{j + 1}", (dims[j], dims[j + 1])))
            out.append((f"b{j + 1}", (dims[j + 1],)))
        return out

    @property
    def layout(self) -> tuple[tuple[str, int], ...]:
        return tuple((name, int(np.prod(shape))) for name, shape in self.shapes)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    lr_decay: float = 0.99
    batch_size: int = 32
    local_epochs: int = 1

    def __post_init__(self):
        problems = []
        if not self.lr0 >= 0:
            problems.append(f"lr0 must be >= 0, got {self.lr0}")
        if not 0 < self.lr_decay <= 1:
            problems.append(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 0:
            problems.append(f"local_epochs must be >= 0, got {self.local_epochs}")
        if problems:
            raise ConfigError("invalid train config", problems)

    def learning_rate(self, round_idx: int) -> float:
        # round 1 trains at lr0
        return self.lr0 * self.lr_decay ** (round_idx - 1)


def init_params(arch: ModelArch, seed: int) -> LayeredParams:
    rng = make_rng(seed, "init")
    layers = []
    for name, shape in arch.shapes:
        if name.startswith("W"):
            layers.append((name, rng.standard_normal(shape).reshape(-1) / np.sqrt(shape[0])))
        else:
            layers.append((name, np.zeros(shape[0])))
    return LayeredParams.from_layers(layers)


def _unpack(params: LayeredParams, arch: ModelArch) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.arch != arch.layout:
        raise StructuralError(f"params {params.arch} do not match architecture {arch.layout}")
    shapes = dict(arch.shapes)
    out = []
    for j in range(len(arch.dims) - 1):
        w = params.values[2 * j].reshape(shapes[f"W{j + 1}"])
        b = params.values[2 * j + 1]
        out.append((w, b))
    return out


def _check_batch(x: np.ndarray, y: np.ndarray, arch: ModelArch) -> None:
    if x.ndim != 2 or x.shape[0] == 0:
        raise StructuralError("batch must be a non-empty 2-D array")
    if x.shape[1] != arch.input_dim:
        raise StructuralError(f"input width {x.shape[1]} != {arch.input_dim}")
    if y.shape != (x.shape[0],):
        raise StructuralError("labels must be a vector matching the batch")


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def logits(params: LayeredParams, arch: ModelArch, x: np.ndarray) -> np.ndarray:
    layers = _unpack(params, arch)
    h = x
    for w, b in layers[:-1]:
        h = _act(h @ w + b, arch.activation)
    w, b = layers[-1]
    return h @ w + b


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_loss(params: LayeredParams, arch: ModelArch, x: np.ndarray, y: np.ndarray) -> tuple[float, int]:
    """Mean softmax cross-entropy and the number of argmax-correct rows."""
    _check_batch(x, y, arch)
    z = logits(params, arch, x)
    logp = _log_softmax(z)
    loss = float(-logp[np.arange(len(y)), y].mean())
    if np.isnan(loss):
        raise NumericError("loss is NaN")
    return loss, int((z.argmax(axis=1) == y).sum())


def loss_and_grad(params: LayeredParams, arch: ModelArch, x: np.ndarray, y: np.ndarray) -> tuple[float, LayeredParams]:
    _check_batch(x, y, arch)
    layers = _unpack(params, arch)
    n = x.shape[0]
    pre, post = [], [x]
    h = x
    for w, b in layers[:-1]:
        z = h @ w + b
        h = _act(z, arch.activation)
        pre.append(z)
        post.append(h)
    w_out, b_out = layers[-1]
    z = h @ w_out + b_out
    logp = _log_softmax(z)
    loss = float(-logp[np.arange(n), y].mean())
    if np.isnan(loss):
        raise NumericError("loss is NaN")

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads: list[np.ndarray] = []
    for j in range(len(layers) - 1, -1, -1):
        w, _ = layers[j]
        grads.append(delta.sum(axis=0))
        grads.append((post[j].T @ delta).reshape(-1))
        if j > 0:
            delta = (delta @ w.T) * _act_grad(pre[j - 1], post[j], arch.activation)
    grads.reverse()
    return loss, LayeredParams(params.names, tuple(grads))


def backward(params: LayeredParams, arch: ModelArch, x: np.ndarray, y: np.ndarray) -> LayeredParams:
    """Exact gradient of the mean cross-entropy with respect to every parameter."""
    return loss_and_grad(params, arch, x, y)[1]


def local_train(
    params_in: LayeredParams,
    arch: ModelArch,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    lr: float,
    seed: int,
    *,
    round_idx: int | None = None,
    client: int | None = None,
) -> LayeredParams:
    """Mini-batch SGD for ``cfg.local_epochs`` epochs starting from ``params_in``.

    Batches come from a per-epoch shuffle drawn from ``seed``; the final
    partial batch is kept. ``params_in`` is never modified.
    """
    if x.shape[0] == 0:
        raise TrainingError("empty local dataset", round_idx, client)
    rng = make_rng(seed, "shuffle")
    current = [v.copy() for v in params_in.values]
    n = x.shape[0]
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            # rows in index order: a full-data batch sums exactly like backward() on the dataset
            idx = np.sort(order[start:start + cfg.batch_size])
            p = LayeredParams(params_in.names, tuple(current))
            try:
                loss, grad = loss_and_grad(p, arch, x[idx], y[idx])
            except NumericError as exc:
                raise TrainingError(f"training diverged: {exc}", round_idx, client) from exc
            if not np.isfinite(loss):
                raise TrainingError("training diverged: non-finite loss", round_idx, client)
            for dst, g in zip(current, grad.values):
                dst -= lr * g
    return LayeredParams(params_in.names, tuple(current))


def accuracy(params: LayeredParams, arch: ModelArch, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of argmax-correct predictions; argmax ties go to the lowest class."""
    if x.shape[0] == 0:
        raise StructuralError("accuracy needs a non-empty dataset")
    z = logits(params, arch, x)
    return float((z.argmax(axis=1) == y).mean())
