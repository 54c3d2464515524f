"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass (define-by-run): each result
tensor keeps references to its inputs and a closure that maps the output
adjoint to input adjoints. ``backward`` walks the graph in reverse
topological order, accumulates adjoints per tensor in fresh buffers, and
only then adds them into ``.grad`` t so that running backward twice on the
same graph doubles every gradient exactly.

Numerical reproducibility rules used throughout:

* every reduction (matmul inner loop, softmax row sums, layernorm
  moments, broadcast-gradient folding) sums in ascending index order;
* matrix products are bit-identical to a naive triple loop (see ``_mm``);
* no tensor that participates in a recorded graph is mutated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ._mm import _ln_fwd, _softmax_fwd, matmul_data
from .errors import ContractError, NumericError, ShapeError

NEG_LARGE = -1.0e9
"""Sentinel for masked attention logits.

Large enough that exp(NEG_LARGE - rowmax) underflows to exactly 0.0 after
row-max stabilization, small enough to stay finite.
"""

_LN_EPS = 1e-6

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _seqsum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along one axis in strictly ascending index order.

    cumsum emits every prefix sum, so it is sequential by construction;
    taking the last slice gives the same bits as a left-to-right loop.
    """
    if x.shape[axis] == 0:
        raise ShapeError("cannot reduce over an empty axis")
    c = np.cumsum(x, axis=axis)
    if axis == -1 or axis == x.ndim - 1:
        return c[..., -1:] if keepdims else c[..., -1]
    idx: list = [slice(None)] * x.ndim
    idx[axis] = slice(-1, None) if keepdims else -1
    return c[tuple(idx)]


def _unbroadcast(d: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Fold the adjoint of a broadcast result back onto ``shape``."""
    while d.ndim > len(shape):
        d = _seqsum(d, 0)
    for ax, s in enumerate(shape):
        if s == 1 and d.shape[ax] != 1:
            d = _seqsum(d, ax, keepdims=True)
    return d


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars fold into scale/shift nodes
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    t = Tensor._wrap(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(d, accum):
        accum(a, _unbroadcast(d, a.shape))
        accum(b, _unbroadcast(d, b.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(d, accum):
        accum(a, _unbroadcast(d * b.data, a.shape))
        accum(b, _unbroadcast(d * a.data, b.shape))

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda d, accum: accum(a, -d))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda d, accum: accum(a, d * s))


def shift(a: Tensor, s: float) -> Tensor:
    return _make(a.data + s, (a,), lambda d, accum: accum(a, d))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda d, accum: accum(a, d.reshape(a.shape)))


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return _make(out, (a,), lambda d, accum: accum(a, np.swapaxes(d, ax1, ax2)))


def transpose_last2(a: Tensor) -> Tensor:
    return swap_axes(a, -1, -2)


def split_heads(a: Tensor, heads: int) -> Tensor:
    """(..., N, D) -> (..., heads, N, D/heads), one graph node."""
    *lead, n, d = a.shape
    out = a.data.reshape(*lead, n, heads, d // heads).swapaxes(-3, -2)

    def bw(d_out, accum):
        accum(a, np.ascontiguousarray(d_out.swapaxes(-3, -2)).reshape(a.shape))

    return _make(np.ascontiguousarray(out), (a,), bw)


def merge_heads(a: Tensor) -> Tensor:
    """(..., heads, N, D/heads) -> (..., N, D), one graph node."""
    *lead, h, n, dh = a.shape
    out = np.ascontiguousarray(a.data.swapaxes(-3, -2)).reshape(*lead, n, h * dh)

    def bw(d_out, accum):
        accum(a, np.ascontiguousarray(
            d_out.reshape(*lead, n, h, dh).swapaxes(-3, -2)
        ))

    return _make(out, (a,), bw)


def scaled_product(q: Tensor, k: Tensor, c: float) -> Tensor:
    """c * (q @ k^T) over the last two axes, one graph node."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"scaled_product widths disagree: {q.shape} vs {k.shape}")
    out = matmul_data(q.data, np.swapaxes(k.data, -1, -2)) * c

    def bw(d, accum):
        dc = d * c
        accum(q, matmul_data(dc, k.data))
        accum(k, matmul_data(np.ascontiguousarray(np.swapaxes(dc, -1, -2)), q.data))

    return _make(out, (q, k), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(d, accum):
        off = 0
        for p, s in zip(parts, sizes):
            idx = [slice(None)] * d.ndim
            idx[axis] = slice(off, off + s)
            accum(p, np.ascontiguousarray(d[tuple(idx)]))
            off += s

    return _make(out, tuple(parts), bw)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def bw(d, accum):
        full = np.zeros(a.shape, dtype=np.float64)
        full[idx] = d
        accum(a, full)

    return _make(out, (a,), bw)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = _seqsum(a.data, axis, keepdims=keepdims)

    def bw(d, accum):
        dd = d if keepdims else np.expand_dims(d, axis)
        accum(a, np.ascontiguousarray(np.broadcast_to(dd, a.shape)))

    return _make(out, (a,), bw)


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return scale(sum_axis(a, axis, keepdims=keepdims), 1.0 / a.data.shape[axis])


def sum_all(a: Tensor) -> Tensor:
    return sum_axis(reshape(a, (a.size,)), 0)


def mean_all(a: Tensor) -> Tensor:
    """Mean over every element, ascending order, as one graph node."""
    s = 1.0 / a.size
    out = np.asarray(np.cumsum(a.data.reshape(-1))[-1] * s)

    def bw(d, accum):
        accum(a, np.broadcast_to(d * s, a.shape))

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product over the last two axes, inner index summed ascending.

    Accepts stacked left operands against a shared 2-D right operand, or
    operands with identical leading dims. Bit-identical to the naive
    triple-loop evaluation.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.data.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions disagree: {a.shape} @ {b.shape}")
    out = matmul_data(a.data, b.data)

    def bw(d, accum):
        # dL/da = dL/dc . b^T
        accum(a, matmul_data(d, np.swapaxes(b.data, -1, -2)))
        # dL/db = a^T . dL/dc, folding stacked dims into the contraction
        if b.data.ndim == 2:
            k = a.shape[-1]
            n = d.shape[-1]
            a2 = a.data.reshape(-1, k)
            d2 = d.reshape(-1, n)
            accum(b, matmul_data(a2.T, d2))
        else:
            accum(b, matmul_data(np.swapaxes(a.data, -1, -2), d))

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by row-max subtraction.

    Rows consisting entirely of the NEG_LARGE sentinel (detected by their
    maximum being the sentinel) have no surviving entry to normalize
    over; the mask construction upstream must prevent that, so it is
    rejected here as a contract violation.
    """
    x = a.data
    n = x.shape[-1]
    if not (x.flags.c_contiguous and x.dtype == np.float64):
        x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.empty_like(x)
    if _softmax_fwd(x.reshape(-1, n), y.reshape(-1, n), NEG_LARGE):
        raise ContractError("softmax row contains only masked sentinels")

    def bw(d, accum):
        inner = _seqsum(d * y, -1, keepdims=True)
        accum(a, y * (d - inner))

    return _make(y, (a,), bw)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-token normalization over the last axis, then affine.

    Epsilon sits inside the square root, so constant tokens normalize to
    zero instead of dividing by zero.
    """
    dim = a.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(
            f"layernorm affine shapes {gain.shape}/{bias.shape} do not match width {dim}"
        )
    x = a.data
    if not (x.flags.c_contiguous and x.dtype == np.float64):
        x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.empty_like(x)
    xc = np.empty_like(x)
    rows = x.size // dim
    inv_flat = np.empty(rows)
    _ln_fwd(
        x.reshape(rows, dim), gain.data, bias.data, _LN_EPS,
        y.reshape(rows, dim), xc.reshape(rows, dim), inv_flat,
    )
    inv = inv_flat.reshape(x.shape[:-1] + (1,))

    def bw(d, accum):
        xn = xc * inv
        accum(gain, _unbroadcast(d * xn, gain.shape))
        accum(bias, _unbroadcast(d, bias.shape))
        dxn = d * gain.data
        dvar = _seqsum(dxn * xc, -1, keepdims=True) * (-0.5) * inv**3
        dmu = _seqsum(-dxn * inv, -1, keepdims=True) + dvar * (
            _seqsum(-2.0 * xc, -1, keepdims=True) / dim
        )
        accum(a, dxn * inv + dvar * (2.0 * xc / dim) + dmu / dim)

    return _make(y, (a, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * (x * x * x)))
    y = 0.5 * x * (1.0 + t)

    def bw(d, accum):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        accum(a, d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(y, (a,), bw)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_data(a.data)
    return _make(y, (a,), lambda d, accum: accum(a, d * y * (1.0 - y)))


def bce_with_logit(logit: Tensor, target) -> Tensor:
    """Binary cross-entropy on a raw logit, elementwise.

    Uses the max(x,0) - x*y + log1p(exp(-|x|)) form, so saturated logits
    neither overflow nor lose the small-loss tail.
    """
    y = np.asarray(target, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError(f"bce target must be 0 or 1, got {target!r}")
    x = logit.data
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def bw(d, accum):
        accum(logit, d * (_sigmoid_data(x) - y))

    return _make(out, (logit,), bw)


def apply_mask(a: Tensor, mask: np.ndarray, fill: float = NEG_LARGE) -> Tensor:
    """Replace entries where ``mask`` is nonzero with ``fill``.

    The mask is data, not a graph node: filled positions are constants and
    receive zero gradient.
    """
    keep = mask == 0
    out = np.where(keep, a.data, fill)
    return _make(out, (a,), lambda d, accum: accum(a, d * keep))


# ---------------------------------------------------------------------------
# reverse pass


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root``, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Adjoints are accumulated in fresh per-tensor buffers and added into
    ``.grad`` at the end, so repeated calls on one graph accumulate (and
    exactly double, since the per-pass totals are bit-identical).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = graph_nodes(loss)
    delta: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def accum(t: Tensor, contrib: np.ndarray) -> None:
        if not t.requires_grad:
            return
        cur = delta.get(id(t))
        if cur is None:
            delta[id(t)] = np.array(contrib, dtype=np.float64)
        else:
            np.add(cur, contrib, out=cur)

    for t in reversed(order):
        d = delta.get(id(t))
        if d is None:
            continue
        if t._backward is not None:
            t._backward(d, accum)
        if t.requires_grad:
            t.grad = d.copy() if t.grad is None else t.grad + d


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tolerance for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err > self.tolerance]

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            state = "ok" if e.max_rel_err <= self.tolerance else "FAIL"
            out.append(f"{e.name} max_rel_err={e.max_rel_err:.3e} {state}")
        return out


# Gradients below this scale sit under the resolution of central
# differences at step 1e-5 with O(1) losses; they compare as matching.
_GRAD_CHECK_CUTOFF = 1e-6


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    analytic_bias: dict[str, float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be a deterministic closure over the given parameters that
    rebuilds its graph on every call and returns a scalar loss.
    ``analytic_bias`` offsets named analytic gradients before comparison;
    it exists purely as a negative control to prove the check can fail.
    """
    items = sorted(params, key=lambda kv: kv[0])
    for _, p in items:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is non-finite at the unperturbed point")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
        for name, p in items
    }
    for name, bias in (analytic_bias or {}).items():
        analytic[name] = analytic[name] + bias

    def eval_loss(name: str, idx: int) -> float:
        with no_grad():
            val = f().item()
        if not math.isfinite(val):
            raise NumericError(f"grad_check: non-finite loss perturbing {name}[{idx}]")
        return val

    report = GradCheckReport(tolerance=tolerance)
    for name, p in items:
        flat = p.data.reshape(-1)
        an = analytic[name].reshape(-1)
        worst = (0.0, 0, 0.0, 0.0)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss(name, i)
            flat[i] = orig - step
            down = eval_loss(name, i)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            ref = max(abs(fd), abs(an[i]))
            err = 0.0 if ref < _GRAD_CHECK_CUTOFF else abs(fd - an[i]) / ref
            if err > worst[0]:
                worst = (err, i, an[i], fd)
        report.entries.append(
            GradCheckEntry(
                name=name,
                max_rel_err=worst[0],
                worst_index=np.unravel_index(worst[1], p.shape),
                analytic=worst[2],
                numeric=worst[3],
            )
        )
    return report
