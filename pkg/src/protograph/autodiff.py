"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation in the package is expressed through the
primitives in this module.  Each operation records its inputs and a backward
rule on the output tensor; ``Tensor.backward`` replays the recorded rules in
reverse topological order, summing contributions whenever a tensor feeds
several consumers.

Design constraints (deliberate, not accidental):

* float64 everywhere — the test suite relies on tight finite-difference
  tolerances, and at the sizes this package targets, throughput is a
  non-issue.
* no implicit broadcasting beyond scalar-tensor.  Row/column alignment is
  spelled out via dedicated ops (``dense``, ``scale_rows``, ...), which
  removes a whole class of silent shape bugs.
* non-finite values are errors: every op output and every gradient is
  checked, and a ``NumericsError`` names the op that produced the bad value.
* single-threaded, deterministic execution.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatch(ValueError):
    """Operand shapes do not line up; the message names the offending dims."""


class NumericsError(ArithmeticError):
    """A forward or backward pass produced NaN/Inf."""


class GraphError(RuntimeError):
    """Backward invoked on an unsuitable tensor (non-scalar, detached, reused)."""


def _require_finite(arr: np.ndarray, what: str) -> None:
    # A single reduction: any NaN/Inf poisons the sum.  Overflow of a genuinely
    # finite sum is impossible at the magnitudes this package works with.
    if not math.isfinite(float(np.sum(arr))):
        raise NumericsError(f"non-finite values produced by {what}")


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_rule",
                 "_op", "_backward_done")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        _require_finite(self.values, "tensor constructor")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._backward_done = False

    # -- construction of op results -------------------------------------

    @staticmethod
    def _result(values: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = values
        _require_finite(values, op)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward_rule = None
        out._op = op
        out._backward_done = False
        return out

    # -- basic protocol ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values with no graph history and no gradient."""
        return Tensor(self.values.copy())

    # -- gradient bookkeeping ----------------------------------------------

    def _accumulate(self, contribution: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += contribution

    def zero_grad(self) -> None:
        """Clear this tensor's gradient and re-arm backward for the graph above it."""
        self.grad = None
        self._backward_done = False

    def backward(self) -> None:
        """Populate ``grad`` for every requires_grad tensor feeding this scalar.

        Raises ``GraphError`` for a non-scalar loss, for a loss that no
        differentiable tensor feeds into, and for a second invocation without
        an intervening reset (gradients would silently double otherwise).
        """
        if self.values.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached: no requires_grad tensor feeds it")
        if self._backward_done:
            raise GraphError("backward already ran on this tensor; reset gradients first")
        self._backward_done = True

        order = _topo_order(self)
        self._accumulate(np.ones_like(self.values))
        for node in order:  # already reversed: consumers before producers
            if node._backward_rule is not None and node.grad is not None:
                _require_finite(node.grad, f"backward of {node._op}")
                node._backward_rule(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return tensor_sum(self, axes)

    def mean(self, axes=None):
        return mean(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order over the recorded graph (iterative DFS)."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def zero_gradients(root: Tensor) -> None:
    """Clear grads and backward flags for every tensor reachable from root."""
    for node in _topo_order(root):
        node.grad = None
        node._backward_done = False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor._result(a.values + b.values, (a, b), "add")

    def rule(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out._backward_rule = rule
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    _check_same_shape(a, b, "mul")
    out = Tensor._result(a.values * b.values, (a, b), "mul")

    def rule(g):
        if a.requires_grad:
            a._accumulate(g * b.values)
        if b.requires_grad:
            b._accumulate(g * a.values)

    out._backward_rule = rule
    return out


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor._result(x.values * s, (x,), "scale")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g * s)

    out._backward_rule = rule
    return out


def shift(x: Tensor, s: float) -> Tensor:
    """Add a python scalar to every element."""
    s = float(s)
    out = Tensor._result(x.values + s, (x,), "shift")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g)

    out._backward_rule = rule
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor._result(np.maximum(x.values, 0.0), (x,), "relu")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g * (x.values > 0.0))  # subgradient 0 at the kink

    out._backward_rule = rule
    return out


def exp(x: Tensor) -> Tensor:
    out = Tensor._result(np.exp(x.values), (x,), "exp")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g * out.values)

    out._backward_rule = rule
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0.0):
        raise NumericsError("log: input has non-positive entries")
    out = Tensor._result(np.log(x.values), (x,), "log")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g / x.values)

    out._backward_rule = rule
    return out


def rsqrt(x: Tensor) -> Tensor:
    """Elementwise x**-1/2 (positive input required)."""
    if np.any(x.values <= 0.0):
        raise NumericsError("rsqrt: input has non-positive entries")
    y = 1.0 / np.sqrt(x.values)
    out = Tensor._result(y, (x,), "rsqrt")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g * (-0.5) * y / x.values)

    out._backward_rule = rule
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor._result(x.values.reshape(shape), (x,), "reshape")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    out._backward_rule = rule
    return out


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got shape {x.shape}")
    out = Tensor._result(x.values.T.copy(), (x,), "transpose")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g.T)

    out._backward_rule = rule
    return out


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    if a.values.ndim != b.values.ndim:
        raise ShapeMismatch(f"concat: ranks {a.values.ndim} and {b.values.ndim} differ")
    ndim = a.values.ndim
    if not -ndim <= axis < ndim:
        raise ShapeMismatch(f"concat: axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    for d in range(ndim):
        if d != axis and a.shape[d] != b.shape[d]:
            raise ShapeMismatch(
                f"concat: dimension {d} differs ({a.shape[d]} vs {b.shape[d]})")
    out = Tensor._result(np.concatenate([a.values, b.values], axis=axis), (a, b), "concat")
    split = a.shape[axis]

    def rule(g):
        sl_a = [slice(None)] * ndim
        sl_a[axis] = slice(0, split)
        sl_b = [slice(None)] * ndim
        sl_b[axis] = slice(split, None)
        if a.requires_grad:
            a._accumulate(g[tuple(sl_a)])
        if b.requires_grad:
            b._accumulate(g[tuple(sl_b)])

    out._backward_rule = rule
    return out


def _normalize_axes(axes, ndim: int, op: str) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeMismatch(f"{op}: axis {a} out of range for rank {ndim}")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeMismatch(f"{op}: repeated axis in {axes}")
    return tuple(sorted(norm))


def tensor_sum(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.values.ndim, "sum")
    out = Tensor._result(np.sum(x.values, axis=axes), (x,), "sum")

    def rule(g):
        if x.requires_grad:
            expanded = np.expand_dims(g, axes) if axes else g
            x._accumulate(np.broadcast_to(expanded, x.shape).copy())

    out._backward_rule = rule
    return out


def mean(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, x.values.ndim, "mean")
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = Tensor._result(np.mean(x.values, axis=axes), (x,), "mean")

    def rule(g):
        if x.requires_grad:
            expanded = np.expand_dims(g, axes) if axes else g
            x._accumulate(np.broadcast_to(expanded, x.shape) / count)

    out._backward_rule = rule
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeMismatch(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(
            f"matmul: inner dimensions differ ({a.shape[1]} vs {b.shape[0]})")
    out = Tensor._result(a.values @ b.values, (a, b), "matmul")

    def rule(g):
        if a.requires_grad:
            a._accumulate(g @ b.values.T)
        if b.requires_grad:
            b._accumulate(a.values.T @ g)

    out._backward_rule = rule
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map.  1-D input: W x + b.  2-D input: applied row by row."""
    if weight.values.ndim != 2:
        raise ShapeMismatch(f"dense: weight must be a matrix, got {weight.shape}")
    n_out, n_in = weight.shape
    if bias.shape != (n_out,):
        raise ShapeMismatch(
            f"dense: bias shape {bias.shape} does not match weight rows ({n_out})")
    if x.values.ndim == 1:
        if x.shape[0] != n_in:
            raise ShapeMismatch(
                f"dense: input length {x.shape[0]} does not match weight cols ({n_in})")
        out = Tensor._result(weight.values @ x.values + bias.values,
                             (x, weight, bias), "dense")

        def rule(g):
            if x.requires_grad:
                x._accumulate(weight.values.T @ g)
            if weight.requires_grad:
                weight._accumulate(np.outer(g, x.values))
            if bias.requires_grad:
                bias._accumulate(g)

    elif x.values.ndim == 2:
        if x.shape[1] != n_in:
            raise ShapeMismatch(
                f"dense: input row length {x.shape[1]} does not match weight cols ({n_in})")
        out = Tensor._result(x.values @ weight.values.T + bias.values,
                             (x, weight, bias), "dense")

        def rule(g):
            if x.requires_grad:
                x._accumulate(g @ weight.values)
            if weight.requires_grad:
                weight._accumulate(g.T @ x.values)
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0))

    else:
        raise ShapeMismatch(f"dense: input must be rank 1 or 2, got {x.shape}")
    out._backward_rule = rule
    return out


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a matrix by s[i]."""
    if x.values.ndim != 2 or s.values.ndim != 1 or s.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"scale_rows: shapes {x.shape} and {s.shape} do not align")
    out = Tensor._result(x.values * s.values[:, None], (x, s), "scale_rows")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g * s.values[:, None])
        if s.requires_grad:
            s._accumulate(np.sum(g * x.values, axis=1))

    out._backward_rule = rule
    return out


def scale_cols(x: Tensor, s: Tensor) -> Tensor:
    """Multiply column j of a matrix by s[j]."""
    if x.values.ndim != 2 or s.values.ndim != 1 or s.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"scale_cols: shapes {x.shape} and {s.shape} do not align")
    out = Tensor._result(x.values * s.values[None, :], (x, s), "scale_cols")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g * s.values[None, :])
        if s.requires_grad:
            s._accumulate(np.sum(g * x.values, axis=0))

    out._backward_rule = rule
    return out


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along one axis; slices along it sum to 1."""
    ndim = x.values.ndim
    if ndim == 0 or not -ndim <= axis < ndim:
        raise ShapeMismatch(f"softmax: axis {axis} out of range for shape {x.shape}")
    axis = axis % ndim
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor._result(y, (x,), "softmax")

    def rule(g):
        if x.requires_grad:
            inner = np.sum(g * y, axis=axis, keepdims=True)
            x._accumulate(y * (g - inner))

    out._backward_rule = rule
    return out


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log softmax probability of the true class (scalar output)."""
    if logits.values.ndim != 1:
        raise ShapeMismatch(f"cross_entropy: logits must be a vector, got {logits.shape}")
    n = logits.shape[0]
    if n < 2:
        raise ShapeMismatch("cross_entropy: need at least two classes")
    label = int(label)
    if not 0 <= label < n:
        raise ShapeMismatch(f"cross_entropy: label {label} out of range for {n} classes")
    shifted = logits.values - np.max(logits.values)
    lse = math.log(float(np.sum(np.exp(shifted))))
    out = Tensor._result(np.asarray(lse - shifted[label]), (logits,), "cross_entropy")
    probs = np.exp(shifted - lse)

    def rule(g):
        if logits.requires_grad:
            contrib = probs.copy()
            contrib[label] -= 1.0
            logits._accumulate(contrib * g)

    out._backward_rule = rule
    return out


def logsumexp_exclude(scores: Tensor, excluded_cols: np.ndarray) -> Tensor:
    """Per row r: log sum over columns j != excluded_cols[r] of exp(scores[r, j]).

    Stable under large magnitudes (max-shifted).  Used by the contrastive
    losses whose normalizers exclude the positive column.
    """
    if scores.values.ndim != 2:
        raise ShapeMismatch(f"logsumexp_exclude expects a matrix, got {scores.shape}")
    rows, cols = scores.shape
    if cols < 2:
        raise ShapeMismatch("logsumexp_exclude: need at least two columns")
    excluded = np.asarray(excluded_cols, dtype=np.int64)
    if excluded.shape != (rows,):
        raise ShapeMismatch(
            f"logsumexp_exclude: expected {rows} excluded indices, got {excluded.shape}")
    if np.any(excluded < 0) or np.any(excluded >= cols):
        raise ShapeMismatch("logsumexp_exclude: excluded column out of range")

    masked = scores.values.copy()
    masked[np.arange(rows), excluded] = -np.inf
    m = np.max(masked, axis=1)
    with np.errstate(invalid="ignore"):
        e = np.exp(masked - m[:, None])
    e[np.arange(rows), excluded] = 0.0
    sums = np.sum(e, axis=1)
    out = Tensor._result(m + np.log(sums), (scores,), "logsumexp_exclude")
    weights = e / sums[:, None]  # softmax over the included columns

    def rule(g):
        if scores.requires_grad:
            scores._accumulate(weights * g[:, None])

    out._backward_rule = rule
    return out


def take_per_row(x: Tensor, cols: np.ndarray) -> Tensor:
    """Vector out[r] = x[r, cols[r]]."""
    if x.values.ndim != 2:
        raise ShapeMismatch(f"take_per_row expects a matrix, got {x.shape}")
    rows, ncols = x.shape
    cols = np.asarray(cols, dtype=np.int64)
    if cols.shape != (rows,):
        raise ShapeMismatch(f"take_per_row: expected {rows} indices, got {cols.shape}")
    if np.any(cols < 0) or np.any(cols >= ncols):
        raise ShapeMismatch("take_per_row: column index out of range")
    out = Tensor._result(x.values[np.arange(rows), cols].copy(), (x,), "take_per_row")

    def rule(g):
        if x.requires_grad:
            contrib = np.zeros_like(x.values)
            contrib[np.arange(rows), cols] = g
            x._accumulate(contrib)

    out._backward_rule = rule
    return out


def normalize_rows(x: Tensor, floor: float = 1e-8) -> Tensor:
    """Scale each row to unit L2 norm.

    Rows with norm <= floor are returned as zeros and receive no gradient for
    this step (a degenerate embedding must not inject a 1/floor-sized
    gradient into the network).
    """
    if x.values.ndim != 2:
        raise ShapeMismatch(f"normalize_rows expects a matrix, got {x.shape}")
    norms = np.sqrt(np.sum(x.values * x.values, axis=1))
    live = norms > floor
    safe = np.where(live, norms, 1.0)
    y = np.where(live[:, None], x.values / safe[:, None], 0.0)
    out = Tensor._result(y, (x,), "normalize_rows")

    def rule(g):
        if x.requires_grad:
            inner = np.sum(g * y, axis=1, keepdims=True)
            contrib = np.where(live[:, None], (g - y * inner) / safe[:, None], 0.0)
            x._accumulate(contrib)

    out._backward_rule = rule
    return out


def group_mean(x: Tensor, assignments: np.ndarray, n_groups: int) -> Tensor:
    """out[k] = mean over items i with assignments[i] == k of x[i].

    Groups along axis 0; every group must be non-empty.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.ndim != 1 or assignments.shape[0] != x.shape[0]:
        raise ShapeMismatch(
            f"group_mean: {x.shape[0]} items but {assignments.shape} assignments")
    n_groups = int(n_groups)
    if np.any(assignments < 0) or np.any(assignments >= n_groups):
        raise ShapeMismatch("group_mean: assignment index out of range")
    counts = np.bincount(assignments, minlength=n_groups)
    if np.any(counts == 0):
        empty = int(np.argmin(counts))
        raise ShapeMismatch(f"group_mean: group {empty} is empty")
    sums = np.zeros((n_groups,) + x.shape[1:], dtype=np.float64)
    np.add.at(sums, assignments, x.values)
    denom = counts.reshape((n_groups,) + (1,) * (x.values.ndim - 1))
    out = Tensor._result(sums / denom, (x,), "group_mean")

    def rule(g):
        if x.requires_grad:
            x._accumulate(g[assignments] / denom[assignments])

    out._backward_rule = rule
    return out


# ---------------------------------------------------------------------------
# 3-D convolution
# ---------------------------------------------------------------------------

def _conv_out_len(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 3-D cross-correlation over a [C, D, H, W] volume.

    weight is [C_out, C_in/groups, k, k, k]; groups == 1 gives a standard
    (pointwise/patch-embedding) convolution and groups == C_in a depthwise
    one.  Output spatial dims follow floor((n + 2*padding - k)/stride) + 1.
    """
    stride = int(stride)
    padding = int(padding)
    groups = int(groups)
    if stride < 1 or padding < 0 or groups < 1:
        raise ShapeMismatch(
            f"conv3d: stride={stride}, padding={padding}, groups={groups} invalid")
    if x.values.ndim != 4:
        raise ShapeMismatch(f"conv3d: input must be [C,D,H,W], got {x.shape}")
    if weight.values.ndim != 5:
        raise ShapeMismatch(f"conv3d: weight must be rank 5, got {weight.shape}")
    c_in, d, h, w = x.shape
    c_out, c_in_pg, kd, kh, kw = weight.shape
    if c_in % groups != 0:
        raise ShapeMismatch(f"conv3d: input channels {c_in} not divisible by groups {groups}")
    if c_out % groups != 0:
        raise ShapeMismatch(f"conv3d: output channels {c_out} not divisible by groups {groups}")
    if c_in_pg != c_in // groups:
        raise ShapeMismatch(
            f"conv3d: weight expects {c_in_pg} channels per group, input provides {c_in // groups}")
    if bias.shape != (c_out,):
        raise ShapeMismatch(f"conv3d: bias shape {bias.shape} != ({c_out},)")
    for name, n, k in (("depth", d, kd), ("height", h, kh), ("width", w, kw)):
        if n + 2 * padding < k:
            raise ShapeMismatch(
                f"conv3d: kernel {k} exceeds padded input {name} {n + 2 * padding}")

    pad = ((0, 0), (padding, padding), (padding, padding), (padding, padding))
    xp = np.pad(x.values, pad) if padding else x.values
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    od, oh, ow = win.shape[1:4]
    cpg = c_in // groups
    opg = c_out // groups
    win_g = win.reshape(groups, cpg, od, oh, ow, kd, kh, kw)
    w_g = weight.values.reshape(groups, opg, cpg, kd, kh, kw)
    y = np.einsum("gcdhwxyz,gocxyz->godhw", win_g, w_g, optimize=True)
    y = y.reshape(c_out, od, oh, ow) + bias.values[:, None, None, None]
    out = Tensor._result(y, (x, weight, bias), "conv3d")

    def rule(g):
        g4 = g.reshape(groups, opg, od, oh, ow)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2, 3)))
        if weight.requires_grad:
            gw = np.einsum("godhw,gcdhwxyz->gocxyz", g4, win_g, optimize=True)
            weight._accumulate(gw.reshape(weight.shape))
        if x.requires_grad:
            # transpose convolution: zero-stuff the output grad to a stride-1
            # grid, pad by k-1, correlate with the flipped kernel.
            zd, zh, zw = (od - 1) * stride + 1, (oh - 1) * stride + 1, (ow - 1) * stride + 1
            gz = np.zeros((c_out, zd, zh, zw))
            gz[:, ::stride, ::stride, ::stride] = g
            gzp = np.pad(gz, ((0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            winz = sliding_window_view(gzp, (kd, kh, kw), axis=(1, 2, 3))
            winz_g = winz.reshape(groups, opg, *winz.shape[1:])
            wf = weight.values[:, :, ::-1, ::-1, ::-1].reshape(groups, opg, cpg, kd, kh, kw)
            gx = np.einsum("godhwxyz,gocxyz->gcdhw", winz_g, wf, optimize=True)
            gx = gx.reshape(c_in, *winz.shape[1:4])
            # windows that the strided forward never visited contribute zeros
            full = np.zeros_like(xp)
            full[:, :gx.shape[1], :gx.shape[2], :gx.shape[3]] = gx
            if padding:
                full = full[:, padding:padding + d, padding:padding + h, padding:padding + w]
            x._accumulate(full)

    out._backward_rule = rule
    return out


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Iterable[np.ndarray],
               h: float = 1e-5) -> float:
    """Max relative error between analytic gradients of f and central differences.

    ``f`` must be a pure function mapping Tensors to a scalar Tensor; it is
    re-evaluated from scratch for every probe.  The relative error denominator
    is max(|analytic|, |numeric|, 1e-8).

    Components where the three samples f(x-h), f(x), f(x+h) reveal a
    derivative jump (a ReLU kink inside the probe interval) are skipped:
    central differences are meaningless there.  The skip test uses only the
    sampled values, never the analytic gradient, so a wrong backward rule
    cannot hide behind it.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = f(*tensors)
    if not isinstance(loss, Tensor) or loss.values.size != 1:
        raise GraphError("grad_check: f must return a scalar Tensor")
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in tensors]
    f0 = loss.item()

    def eval_at(idx: int, flat: int, value: float) -> float:
        probe = [a.copy() for a in arrays]
        probe[idx].flat[flat] = value
        return f(*[Tensor(a) for a in probe]).item()

    worst = 0.0
    for idx, a in enumerate(arrays):
        for flat in range(a.size):
            x0 = a.flat[flat]
            f_plus = eval_at(idx, flat, x0 + h)
            f_minus = eval_at(idx, flat, x0 - h)
            d1 = (f_plus - f_minus) / (2.0 * h)
            d2 = f_plus - 2.0 * f0 + f_minus
            if abs(d2) > 1e-2 * max(abs(f_plus - f_minus), 1e-9):
                continue  # kink inside [x0-h, x0+h]
            g = analytic[idx].flat[flat]
            err = abs(g - d1) / max(abs(g), abs(d1), 1e-8)
            worst = max(worst, err)
    return worst
