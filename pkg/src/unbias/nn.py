"""Classifier building blocks: feature extractors, the logit layer,
the cross-entropy loss, gradient clipping, and optimizers.

A model is split in two: a feature extractor mapping inputs to an
embedding ``z``, and a shallow logit layer mapping ``z`` to class scores.
Only the extractor's parameters receive the independence penalty during
training; the split is what makes that possible.

Parameter snapshots use a tiny self-describing format, documented at
:func:`save_params`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine layer y = x @ w + b, with uniform(+-1/sqrt(fan_in)) weights."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.w = Tensor(_uniform_init(rng, n_in, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self):
        return [("w", self.w), ("b", self.b)]


class Conv2d:
    """Valid 5x5-style convolution layer with per-channel bias."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int):
        fan_in = c_in * kernel * kernel
        self.w = Tensor(_uniform_init(rng, fan_in, (c_out, c_in, kernel, kernel)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.w)
        return T.add(out, T.reshape(self.b, (1, -1, 1, 1)))

    def params(self):
        return [("w", self.w), ("b", self.b)]


class FeatureExtractor:
    """Ordered stack of layers producing the embedding z = g(x).

    ``blocks`` mixes layer objects with the strings "relu", "pool2" and
    "flatten"; ``embed_dim`` is the advertised output width.
    """

    def __init__(self, blocks, embed_dim: int):
        self.blocks = blocks
        self.embed_dim = embed_dim

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for blk in self.blocks:
            if blk == "relu":
                h = T.relu(h)
            elif blk == "pool2":
                h = T.maxpool2d(h, 2)
            elif blk == "flatten":
                h = T.reshape(h, (h.shape[0], -1))
            else:
                h = blk(h)
        return h

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def named_params(self, prefix: str = "fe") -> list[tuple[str, Tensor]]:
        named = []
        idx = 0
        for blk in self.blocks:
            if isinstance(blk, str):
                continue
            for name, p in blk.params():
                named.append((f"{prefix}.{idx}.{name}", p))
            idx += 1
        return named


class LogitClassifier:
    """The shallow logit layer f(z) on top of the embedding."""

    def __init__(self, rng: np.random.Generator, embed_dim: int, n_classes: int):
        self.layer = Linear(rng, embed_dim, n_classes)
        self.embed_dim = embed_dim
        self.n_classes = n_classes

    def __call__(self, z: Tensor) -> Tensor:
        return self.layer(z)

    def params(self) -> list[Tensor]:
        return [self.layer.w, self.layer.b]

    def named_params(self, prefix: str = "clf") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.0.w", self.layer.w), (f"{prefix}.0.b", self.layer.b)]


def digit_feature_extractor(rng: np.random.Generator,
                            conv_channels: tuple[int, int] = (16, 32),
                            fc_widths: tuple[int, int] = (128, 64),
                            in_channels: int = 3,
                            image_size: int = 28,
                            kernel: int = 5) -> FeatureExtractor:
    """conv-pool-conv-pool-fc-fc stack for 28x28 color images.

    The second fully connected output (after ReLU) is the embedding.
    """
    c1, c2 = conv_channels
    f1, f2 = fc_widths
    side = image_size
    side = (side - kernel + 1) // 2
    side = (side - kernel + 1) // 2
    flat = side * side * c2
    blocks = [
        Conv2d(rng, in_channels, c1, kernel), "relu", "pool2",
        Conv2d(rng, c1, c2, kernel), "relu", "pool2",
        "flatten",
        Linear(rng, flat, f1), "relu",
        Linear(rng, f1, f2), "relu",
    ]
    return FeatureExtractor(blocks, embed_dim=f2)


def mlp_feature_extractor(rng: np.random.Generator, n_in: int,
                          hidden: int = 64) -> FeatureExtractor:
    """Single hidden layer MLP extractor; the hidden activation is z."""
    return FeatureExtractor([Linear(rng, n_in, hidden), "relu"], embed_dim=hidden)


def forward_classify(fe: FeatureExtractor, clf: LogitClassifier, x) -> tuple[Tensor, Tensor]:
    """Run extractor and logit layer; returns (embeddings, logits)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    z = fe(x)
    if z.shape[-1] != clf.embed_dim:
        raise T.ShapeError(
            f"embedding width {z.shape[-1]} does not match classifier {clf.embed_dim}")
    return z, clf(z)


def validate_one_hot(y: np.ndarray, n_classes: int | None = None) -> None:
    if y.ndim != 2:
        raise T.ShapeError(f"labels must be (N, C) one-hot, got {y.shape}")
    if n_classes is not None and y.shape[1] != n_classes:
        raise T.ShapeError(f"expected {n_classes} classes, got {y.shape[1]}")
    ok = np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)
    if not ok:
        raise ValueError("labels contain a row that is not one-hot")


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean negative log-likelihood -(1/N) sum_i y_i . log softmax(logits_i).

    ``y`` must be one-hot rows aligned with ``logits``.
    """
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if logits.shape != y_arr.shape:
        raise T.ShapeError(f"logits {logits.shape} vs labels {y_arr.shape}")
    validate_one_hot(y_arr)
    shifted = T.add(logits, T.mul(T.tmax(logits, axis=1, keepdims=True), -1.0))
    lse = T.tlog(T.tsum(T.texp(shifted), axis=1, keepdims=True))
    log_sm = T.add(shifted, T.mul(lse, -1.0))
    picked = T.tsum(T.mul(log_sm, Tensor(y_arr)), axis=1)
    return T.mul(T.tmean(picked), -1.0)


def global_grad_norm(grads: Sequence[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_gradients(grads, max_norm: float) -> float:
    """Scale ``grads`` (in place) so their global L2 norm is <= max_norm.

    Accepts a sequence of arrays or of parameter tensors (whose ``.grad``
    is clipped).  Returns the pre-clip global norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    arrays = [g.grad if isinstance(g, Tensor) else g for g in grads]
    arrays = [a for a in arrays if a is not None]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise T.NonFiniteError("clip_gradients: non-finite gradient")
    norm = global_grad_norm(arrays)
    if norm > max_norm:
        scale = max_norm / norm
        for a in arrays:
            a *= scale
    return norm


class SGD:
    """Plain gradient descent; p <- p - lr * grad."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer kind '{kind}'")


# ---------------------------------------------------------------------------
# parameter snapshots
# ---------------------------------------------------------------------------

_SNAPSHOT_MAGIC = "tensor-snapshot v1"


def save_params(path, named_params: Sequence[tuple[str, Tensor]]) -> None:
    """Write parameters to ``path``.

    Layout: a plain-text manifest followed by raw binary data.
      line 1:            "tensor-snapshot v1 <count>"
      lines 2..count+1:  "<name> <dim0> <dim1> ..."
      line count+2:      "end"
      payload:           all values as little-endian float64, row-major,
                         concatenated in manifest order.
    """
    with open(path, "wb") as f:
        lines = [f"{_SNAPSHOT_MAGIC} {len(named_params)}"]
        for name, p in named_params:
            dims = " ".join(str(d) for d in p.data.shape) or "1"
            lines.append(f"{name} {dims}")
        lines.append("end")
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for _, p in named_params:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    """Read a snapshot written by :func:`save_params`; returns name -> array."""
    with open(path, "rb") as f:
        blob = f.read()
    head_end = blob.index(b"end\n") + len(b"end\n")
    header = blob[:head_end].decode("utf-8").splitlines()
    magic = header[0].rsplit(" ", 1)
    if magic[0] != _SNAPSHOT_MAGIC:
        raise ValueError(f"not a parameter snapshot: {header[0]!r}")
    count = int(magic[1])
    entries = []
    for line in header[1:1 + count]:
        parts = line.split()
        entries.append((parts[0], tuple(int(d) for d in parts[1:])))
    out = {}
    offset = head_end
    for name, shape in entries:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
        out[name] = arr.reshape(shape).copy()
        offset += n * 8
    if offset != len(blob):
        raise ValueError(f"snapshot payload size mismatch at byte {offset}")
    return out


def restore_params(named_params: Sequence[tuple[str, Tensor]],
                   snapshot: dict[str, np.ndarray]) -> None:
    """Load values from a snapshot dict into existing parameter tensors."""
    for name, p in named_params:
        if name not in snapshot:
            raise KeyError(f"snapshot missing parameter '{name}'")
        if snapshot[name].shape != p.data.shape:
            raise T.ShapeError(f"parameter '{name}': snapshot shape "
                               f"{snapshot[name].shape} vs model {p.data.shape}")
        p.data = snapshot[name].astype(np.float64).copy()
