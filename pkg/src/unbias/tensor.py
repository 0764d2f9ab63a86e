"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is deliberately small: enough for small MLPs and
convnets, the softmax cross-entropy, and the Donsker-Varadhan loss
(which needs exp/log/mean/max reductions and feature concatenation).

Gradients are recorded on an explicit :class:`Tape`.  Operations executed
while a tape is active append one node per primitive, in execution order
(which is already a topological order).  ``tape.backward(loss)`` walks the
node list once, in reverse, and accumulates gradients into the ``.grad``
slot of every reachable leaf tensor with ``requires_grad=True``.
Operations executed with no active tape compute values only, which is the
inference path.

Everything is float64 and single-threaded by design: the networks are
tiny, and exact reproducibility matters more than speed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's shape rule."""


class NonFiniteError(FloatingPointError):
    """A tensor value became NaN or infinite."""


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """A dense n-dimensional float64 value with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor created with non-finite values")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are promoted to non-grad tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, _wrap(-1.0)))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded primitive application: output, inputs, backward rule.

    ``backward(out_grad)`` returns one gradient array per parent, or None
    for parents that do not need a gradient.
    """

    __slots__ = ("out", "parents", "backward", "name")

    def __init__(self, out: "Tensor", parents: tuple,
                 backward: Callable[[np.ndarray], tuple], name: str = ""):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Execution order is a topological order, so a single reverse sweep
    visits each node exactly once.  A tape and the tensors recorded on it
    belong to one thread of control.
    """

    _active: Optional["Tape"] = None

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = self._prev
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of reachable leaves.

        ``loss`` must be a scalar recorded on this tape.  Leaves that are
        unreachable from ``loss`` are left untouched (a missing grad reads
        as zero).  May be called more than once per tape; leaf gradients
        accumulate across calls.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                # accumulation is out-of-place: a backward rule may hand the
                # same buffer to several parents, so stored arrays must
                # never be mutated
                if parent.node is None:
                    if parent.requires_grad:
                        pg = pg.reshape(parent.data.shape)
                        parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _live(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def record(out_values: np.ndarray, parents: tuple, backward, name: str = "") -> Tensor:
    """Finish a primitive: validate the output and record it on the tape.

    This is the single extension point for primitives; the deliberately
    small public op set below all funnels through here.
    """
    if not np.all(np.isfinite(out_values)):
        raise NonFiniteError(f"non-finite values produced by '{name}'")
    out = Tensor.__new__(Tensor)
    out.data = out_values
    out.grad = None
    out.requires_grad = False
    out.node = None
    tape = Tape._active
    if tape is not None and any(_live(p) for p in parents):
        node = Node(out=out, parents=parents, backward=backward, name=name)
        out.node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise/broadcast addition; covers bias terms."""
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return (_unbroadcast(g, a.shape) if _live(a) else None,
                _unbroadcast(g, b.shape) if _live(b) else None)

    return record(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise/broadcast multiplication."""
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if _live(a) else None,
                _unbroadcast(g * a.data, b.shape) if _live(b) else None)

    return record(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return (g @ b.data.T if _live(a) else None,
                a.data.T @ g if _live(b) else None)

    return record(out, (a, b), backward, "matmul")


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken to be 0."""
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return ((g * (a.data > 0.0)) if _live(a) else None,)

    return record(out, (a,), backward, "relu")


def texp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def backward(g):
        return ((g * out) if _live(a) else None,)

    return record(out, (a,), backward, "exp")


def tlog(a: Tensor) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return ((g / a.data) if _live(a) else None,)

    return record(out, (a,), backward, "log")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if not _live(a):
            return (None,)
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record(out, (a,), backward, "softmax")


def _reduce_grad_shape(a: Tensor, axis, keepdims, g):
    if axis is None:
        return np.broadcast_to(g, a.data.shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, a.data.shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not _live(a):
            return (None,)
        return (_reduce_grad_shape(a, axis, keepdims, g).copy(),)

    return record(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if not _live(a):
            return (None,)
        return (_reduce_grad_shape(a, axis, keepdims, g) / count,)

    return record(np.asarray(out), (a,), backward, "mean")


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max-reduce.  The gradient routes to the first maximal entry."""
    a = _wrap(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if not _live(a):
            return (None,)
        ga = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), a.data.shape)
            ga[idx] = np.asarray(g).reshape(())
        else:
            am = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(ga, am, gg, axis=axis)
        return (ga,)

    return record(np.asarray(out), (a,), backward, "max")


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape) if _live(a) else None,)

    return record(out, (a,), backward, "reshape")


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenation along ``axis`` (axis 1 is the feature axis)."""
    parts = tuple(_wrap(p) for p in parts)
    if len(parts) < 2:
        raise ShapeError("concat needs at least two tensors")
    ndim = parts[0].data.ndim
    for p in parts[1:]:
        if p.data.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        gs = []
        for i, p in enumerate(parts):
            if _live(p):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offsets[i], offsets[i + 1])
                gs.append(g[tuple(sl)])
            else:
                gs.append(None)
        return tuple(gs)

    return record(out, parts, backward, "concat")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice along axis 0."""
    a = _wrap(a)
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")
    out = a.data[start:stop].copy()

    def backward(g):
        if not _live(a):
            return (None,)
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return record(out, (a,), backward, "slice_rows")


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Valid 2-D convolution (cross-correlation), stride 1.

    x: (N, C, H, W); w: (O, C, KH, KW) -> (N, O, H-KH+1, W-KW+1).
    Implemented as im2col + one matrix product; the patch matrix is kept
    for the weight gradient.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input/kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: channel mismatch {c} vs {cw}")
    if kh > h or kw > wd:
        raise ShapeError("conv2d: kernel larger than input")
    oh, ow = h - kh + 1, wd - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    # (N, C, OH, OW, KH, KW) -> (N*OH*OW, C*KH*KW)
    patches = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    patches = patches.reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, -1).T
    out = (patches @ wmat).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        gx = gw = None
        if _live(w):
            gw = (patches.T @ gmat).T.reshape(w.data.shape)
        if _live(x):
            gx = np.zeros_like(x.data)
            for ki in range(kh):
                for kj in range(kw):
                    # (N,O,OH,OW) x (O,C) summed over O
                    contrib = np.tensordot(g, w.data[:, :, ki, kj], axes=([1], [0]))
                    gx[:, :, ki:ki + oh, kj:kj + ow] += contrib.transpose(0, 3, 1, 2)
        return (gx, gw)

    return record(np.ascontiguousarray(out), (x, w), backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; H and W must be divisible by k.

    Ties inside a window route the gradient to the first maximal entry in
    row-major window order.
    """
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d needs 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: spatial dims {h}x{w} not divisible by {k}")
    hk, wk = h // k, w // k
    windows = x.data.reshape(n, c, hk, k, wk, k).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(windows).reshape(n, c, hk, wk, k * k)
    out = flat.max(axis=-1)

    def backward(g):
        if not _live(x):
            return (None,)
        am = np.argmax(flat, axis=-1)[..., None]
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, am, g[..., None], axis=-1)
        gx = gflat.reshape(n, c, hk, wk, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return record(out, (x,), backward, "maxpool2d")


def logmeanexp(a: Tensor) -> Tensor:
    """log(mean(exp(a))) over all entries, stabilized by max subtraction.

    Composed from the max/exp/mean/log primitives; the max-shift terms
    cancel exactly in the gradient, so this is both stable and exact.
    """
    m = tmax(a)
    return add(tlog(tmean(texp(add(a, mul(m, _wrap(-1.0)))))), m)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    failure: Optional[str] = None

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f, point: Tensor, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` against central differences.

    Returns the maximum relative error over all coordinates of ``point``
    and whether it is within ``tol``.  A non-finite evaluation at a
    perturbed point is reported as a failure with its location.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = point.data.copy()
    probe = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if out.data.size != 1:
            raise ShapeError("grad_check needs a scalar-valued function")
        tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x0)

    max_err = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        try:
            flat[i] = orig + step
            hi = f(Tensor(x0)).item()
            flat[i] = orig - step
            lo = f(Tensor(x0)).item()
        except NonFiniteError:
            flat[i] = orig
            return GradCheckReport(math.inf, False,
                                   failure=f"non-finite evaluation at coordinate {i}")
        finally:
            flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        a = float(analytic.reshape(-1)[i])
        denom = max(abs(a), abs(numeric), 1e-6)
        max_err = max(max_err, abs(a - numeric) / denom)
    return GradCheckReport(max_err, max_err <= tol)
