"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable quantity in the package (activations, weights, losses)
is a ``Tensor`` wrapping a contiguous numpy float64 array.  Operations that
see at least one gradient-tracking input record themselves on an implicit
tape (parent links plus a backward closure); ``backward`` replays the tape
in reverse topological order.  Operations on constant inputs record nothing,
so inference-time graphs stay flat.

Determinism: all kernels are numpy calls on float64 arrays with a fixed
reduction order, so identical inputs give bit-identical outputs on the same
platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

# Additive pre-softmax blocking constant standing in for log(0) in masked
# attention.  Large enough that exp() underflows to exactly 0.0 after
# max-subtraction, small enough that no intermediate overflows.
MASK_BLOCK = -1e9

# Rows whose max logit falls below this are treated as fully masked.
_DEAD_ROW_THRESHOLD = -5e8


class Tensor:
    """n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        # np.ascontiguousarray promotes 0-d to 1-d, so guard scalars
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- tape plumbing -----------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Create an op output; records the tape only if a parent needs grad."""
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:  # g may arrive broadcast
                self.grad = np.broadcast_to(g, self.data.shape).astype(np.float64)
        else:
            self.grad += g

    # -- basic properties --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data + other.data

        def bwd(g, a=self, b=other, sa=self.data.shape, sb=other.data.shape):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, sa))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, sb))

        return Tensor._from_op(out_data, (self, other), bwd)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(out_data, (self, other), bwd)

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    __radd__ = __add__
    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return self * (as_tensor(other) ** -1.0)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) * (self ** -1.0)

    def __pow__(self, p: float) -> "Tensor":
        p = float(p)
        out_data = self.data ** p

        def bwd(g, a=self, p=p):
            a._accumulate(g * p * a.data ** (p - 1.0))

        return Tensor._from_op(out_data, (self,), bwd)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, as_tensor(other))

    # -- reductions and reshapes --------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

        return Tensor._from_op(out_data, (self,), bwd)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g, a=self):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._from_op(out_data, (self,), bwd)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        out_data = np.ascontiguousarray(self.data.transpose(axes))
        inv = np.argsort(axes)

        def bwd(g, a=self, inv=tuple(inv)):
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

        return Tensor._from_op(out_data, (self,), bwd)

    def __getitem__(self, idx) -> "Tensor":
        out_data = np.asarray(self.data[idx])
        if not out_data.flags.c_contiguous:
            out_data = np.ascontiguousarray(out_data)

        def bwd(g, a=self, idx=idx):
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

        return Tensor._from_op(out_data, (self,), bwd)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitive library -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product with gradient accumulation into both inputs."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over a leading batch axis: (B,m,k)@(B,k,n)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(np.matmul(g, b.data.transpose(0, 2, 1)))
        if b.requires_grad:
            b._accumulate(np.matmul(a.data.transpose(0, 2, 1), g))

    return Tensor._from_op(out_data, (a, b), bwd)


def cat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; gradient splits back at the seams."""
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, ts=tensors, offsets=offsets, axis=axis):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._from_op(out_data, tuple(tensors), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by max subtraction.

    Rows that are fully blocked by the attention mask (max logit below
    ``_DEAD_ROW_THRESHOLD``, i.e. every entry carries the MASK_BLOCK
    constant) return a uniform row and propagate zero gradient.  Well-formed
    masks never produce such rows, but the case must be defined.
    """
    m = x.data.max(axis=-1, keepdims=True)
    dead = m <= _DEAD_ROW_THRESHOLD
    z = np.exp(x.data - m)
    s = z / z.sum(axis=-1, keepdims=True)
    if dead.any():
        s = np.where(dead, 1.0 / x.data.shape[-1], s)

    def bwd(g, a=x, s=s, dead=dead):
        gx = (g - (g * s).sum(axis=-1, keepdims=True)) * s
        if dead.any():
            gx = np.where(dead, 0.0, gx)
        a._accumulate(gx)

    return Tensor._from_op(s, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); smooth activation used in the MLPs and time map."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def bwd(g, a=x, sig=sig):
        a._accumulate(g * (sig * (1.0 + a.data * (1.0 - sig))))

    return Tensor._from_op(out_data, (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by an affine map."""
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * ((var + eps) ** -0.5)
    return normed * gain + bias


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (even, odd) interleaved pairs of the last axis by fixed angles.

    cos/sin have shape broadcastable to x[..., ::2].  The map is orthogonal,
    so the backward pass is the rotation by the negated angles.
    """
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even last axis, got {x.shape}")
    xe, xo = x.data[..., ::2], x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., ::2] = xe * cos - xo * sin
    out_data[..., 1::2] = xe * sin + xo * cos

    def bwd(g, a=x, cos=cos, sin=sin):
        ge, go = g[..., ::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., ::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        a._accumulate(gx)

    return Tensor._from_op(out_data, (x,), bwd)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather (embedding lookup); backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def bwd(g, a=table, ids=ids):
        full = np.zeros_like(a.data)
        np.add.at(full, ids, g)
        a._accumulate(full)

    return Tensor._from_op(out_data, (table,), bwd)


# -- backward pass ------------------------------------------------------------


def trace(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of the recorded graph under ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every gradient-tracking node under ``loss``.

    Repeated calls without zeroing accumulate into leaf gradients.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = trace(loss)
    # Seed with fresh output adjoints so repeated backward calls replay the
    # same tape instead of compounding stale intermediate grads.
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        # The popped adjoint is exclusively ours, so hand it over without copy.
        if node.grad is None and g.shape == node.data.shape:
            node.grad = g
        else:
            node._accumulate(g)
        if node._backward is None:
            continue
        # Route this node's adjoint to parents via the recorded closure.
        # Dedupe parents: ops like x * x list the same tensor twice, and the
        # closure already folds both contributions into its temp grad.
        parents = list({id(p): p for p in node._parents}.values())
        saved = {id(p): p.grad for p in parents}
        for p in parents:
            p.grad = None
        node._backward(g)
        for p in parents:
            contrib = p.grad
            p.grad = saved[id(p)]
            if contrib is not None:
                if id(p) in adjoint:
                    adjoint[id(p)] += contrib
                else:
                    adjoint[id(p)] = contrib


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing autodiff gradients against central differences."""

    max_rel_err: float
    passed: bool
    tol: float
    n_coords: int
    worst: tuple[int, int] = (-1, -1)  # (input index, flat coordinate)
    non_finite: bool = False

    def __str__(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        extra = " (non-finite outputs)" if self.non_finite else ""
        return (f"gradcheck {state}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}, {self.n_coords} coords){extra}")


def gradcheck(f, inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-6,
              max_coords_per_input: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar map against central differences.

    ``f(*inputs)`` must return a scalar Tensor.  The reported error per
    coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|):
    relative for large gradients, absolute near zero, which keeps
    finite-difference roundoff from poisoning near-zero coordinates.
    Non-finite analytic or numeric values are reported, never masked.
    """
    if h <= 0:
        raise ValueError("gradcheck step h must be positive")
    rng = np.random.default_rng(seed)

    for x in inputs:
        x.zero_grad()
    out = f(*inputs)
    if out.data.shape != ():
        raise ShapeError(f"gradcheck target must be scalar, got {out.data.shape}")
    backward(out)

    max_err = 0.0
    worst = (-1, -1)
    non_finite = not np.isfinite(out.data)
    n_checked = 0
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_input is not None and flat.size > max_coords_per_input:
            coords = np.sort(rng.choice(flat.size, size=max_coords_per_input, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f(*inputs).data)
            flat[c] = orig - h
            fm = float(f(*inputs).data)
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic.reshape(-1)[c])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                non_finite = True
                err = np.inf
            else:
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            n_checked += 1
            if err > max_err:
                max_err = err
                worst = (i, int(c))
    return GradCheckReport(max_rel_err=max_err, passed=(max_err <= tol and not non_finite),
                           tol=tol, n_coords=n_checked, worst=worst, non_finite=non_finite)
