"""Dense tensor engine with reverse-mode automatic differentiation.

Every value is a :class:`Tensor` wrapping a numpy array in the globally
selected precision (float64 by default, float32 selectable for speed).
Operations build a computation graph; calling ``backward()`` on a scalar
result accumulates gradients into every reachable node that requires them.

Values are treated as immutable once constructed: no operation writes to an
input array, so tensors are safe to share across threads. The only sanctioned
mutations are optimizer updates and finite-difference probes, both of which
swap or restore a :class:`Parameter`'s value in a single-writer step.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, OracleError, RoutingError, ShapeError

_PRECISIONS = {"single": np.float32, "double": np.float64}
_default_dtype = np.float64


def set_precision(mode: str) -> None:
    """Select the global run precision, one of 'single' or 'double'."""
    global _default_dtype
    if mode not in _PRECISIONS:
        raise ConfigError(f"unknown precision mode {mode!r}; expected 'single' or 'double'")
    _default_dtype = _PRECISIONS[mode]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


class Tensor:
    """A node in the computation graph holding an n-d float array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------

    def _topo_order(self) -> list["Tensor"]:
        # Iterative DFS; batch graphs can be deeper than the recursion limit.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Accumulate gradients of this scalar into all requiring ancestors."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = self._topo_order()
        for node in order:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), self.requires_grad, (self,))
        src_shape = self.shape

        def _bw(g):
            if self.requires_grad:
                self.grad += g.reshape(src_shape)

        out._backward = _bw
        return out

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        out = Tensor(self.data.transpose(axes), self.requires_grad, (self,))
        inverse = tuple(np.argsort(axes))

        def _bw(g):
            if self.requires_grad:
                self.grad += g.transpose(inverse)

        out._backward = _bw
        return out

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, mean=True)


class Parameter(Tensor):
    """A named trainable leaf with a persistent gradient buffer."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def assign(self, new_value: np.ndarray) -> None:
        """Replace the held value (optimizer step); shape must be unchanged."""
        new_value = np.asarray(new_value, dtype=self.data.dtype)
        if new_value.shape != self.data.shape:
            raise ShapeError(
                f"assign to {self.name}: shape {new_value.shape} != {self.data.shape}")
        self.data = new_value

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and linear algebra ------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            a.grad -= g

    out._backward = _bw
    return out


def matmul(a, b) -> Tensor:
    """Matrix product of stacks of matrices with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] \
            or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bw(g):
        if a.requires_grad:
            a.grad += g @ b.data.swapaxes(-1, -2)
        if b.requires_grad:
            b.grad += a.data.swapaxes(-1, -2) @ g

    out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is defined as 0."""
    a = as_tensor(a)
    out = Tensor(np.maximum(0.0, a.data), a.requires_grad, (a,))
    active = a.data > 0

    def _bw(g):
        if a.requires_grad:
            a.grad += g * active

    out._backward = _bw
    return out


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data), a.requires_grad, (a,))
    sign = np.sign(a.data)

    def _bw(g):
        if a.requires_grad:
            a.grad += g * sign

    out._backward = _bw
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data ** exponent, a.requires_grad, (a,))

    def _bw(g):
        if a.requires_grad:
            a.grad += g * exponent * a.data ** (exponent - 1.0)

    out._backward = _bw
    return out


def _reduce(a: Tensor, axis, keepdims: bool, mean: bool) -> Tensor:
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims) if mean \
        else a.data.sum(axis=axes, keepdims=keepdims)
    out = Tensor(data, a.requires_grad, (a,))
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def _bw(g):
        if a.requires_grad:
            expanded = g.reshape(kept_shape) if not keepdims else g
            contribution = np.broadcast_to(expanded, a.shape)
            a.grad += contribution / count if mean else contribution

    out._backward = _bw
    return out


# -- softmax family -----------------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis.

    Entries equal to -inf are mapped to exactly 0, which is how masked gate
    logits are suppressed. A row with no finite entry has an empty support set
    and raises :class:`RoutingError`.
    """
    x = as_tensor(x)
    row_max = np.max(x.data, axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise RoutingError("softmax row contains no finite entry (empty top-k set)")
    shifted = np.exp(x.data - row_max)
    out_data = shifted / shifted.sum(axis=-1, keepdims=True)
    out = Tensor(out_data, x.requires_grad, (x,))

    def _bw(g):
        if x.requires_grad:
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            x.grad += out_data * (g - inner)

    out._backward = _bw
    return out


def logsumexp_lastdim(x: Tensor) -> Tensor:
    """Stabilized log-sum-exp over the last axis; input must be finite."""
    x = as_tensor(x)
    row_max = np.max(x.data, axis=-1, keepdims=True)
    lse = row_max + np.log(np.exp(x.data - row_max).sum(axis=-1, keepdims=True))
    out = Tensor(lse[..., 0], x.requires_grad, (x,))
    soft = np.exp(x.data - lse)

    def _bw(g):
        if x.requires_grad:
            x.grad += g[..., None] * soft

    out._backward = _bw
    return out


def mask_fill(x: Tensor, keep: np.ndarray, fill_value: float) -> Tensor:
    """Replace entries where ``keep`` is False; gradient flows only to kept ones."""
    x = as_tensor(x)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise ShapeError(f"mask_fill: mask shape {keep.shape} != data shape {x.shape}")
    out = Tensor(np.where(keep, x.data, fill_value), x.requires_grad, (x,))

    def _bw(g):
        if x.requires_grad:
            x.grad += g * keep

    out._backward = _bw
    return out


# -- pooling and indexing ------------------------------------------------------


def global_average_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean of an h x w x c feature map."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"global_average_pool expects h x w x c, got {x.shape}")
    return x.mean(axis=(0, 1))


def partition_mean_pool(x: Tensor, grid: int) -> Tensor:
    """Average an h x w x c map over a grid x grid partition -> grid^2 x c.

    Cell boundaries sit at floor(i*h/grid), so every position belongs to
    exactly one cell even when grid does not divide h or w. Output row r
    covers cell (r // grid, r % grid).
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"partition_mean_pool expects h x w x c, got {x.shape}")
    h, w, c = x.shape
    if grid < 1 or grid > h or grid > w:
        raise ConfigError(f"grid {grid} exceeds spatial extent {h}x{w}")
    row_edges = [h * i // grid for i in range(grid + 1)]
    col_edges = [w * j // grid for j in range(grid + 1)]
    cells = []
    out_data = np.empty((grid * grid, c), dtype=x.data.dtype)
    for i in range(grid):
        for j in range(grid):
            r0, r1 = row_edges[i], row_edges[i + 1]
            c0, c1 = col_edges[j], col_edges[j + 1]
            cells.append((r0, r1, c0, c1))
            out_data[i * grid + j] = x.data[r0:r1, c0:c1].mean(axis=(0, 1))
    out = Tensor(out_data, x.requires_grad, (x,))

    def _bw(g):
        if x.requires_grad:
            for r, (r0, r1, c0, c1) in enumerate(cells):
                x.grad[r0:r1, c0:c1] += g[r] / ((r1 - r0) * (c1 - c0))

    out._backward = _bw
    return out


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.data[indices], x.requires_grad, (x,))

    def _bw(g):
        if x.requires_grad:
            np.add.at(x.grad, indices, g)

    out._backward = _bw
    return out


def scatter_rows(x: Tensor, indices: np.ndarray, num_rows: int) -> Tensor:
    """Place rows of ``x`` at ``indices`` in a zero tensor of ``num_rows`` rows."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    data = np.zeros((num_rows,) + x.shape[1:], dtype=x.data.dtype)
    data[indices] = x.data
    out = Tensor(data, x.requires_grad, (x,))

    def _bw(g):
        if x.requires_grad:
            x.grad += g[indices]

    out._backward = _bw
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Select a column range of a 2-d tensor."""
    x = as_tensor(x)
    out = Tensor(x.data[:, start:stop].copy(), x.requires_grad, (x,))

    def _bw(g):
        if x.requires_grad:
            x.grad[:, start:stop] += g

    out._backward = _bw
    return out


# -- deterministic selection ----------------------------------------------------


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken by lowest index.

    Returns the selected indices in ascending order; the function is pure and
    fully deterministic.
    """
    values = np.asarray(values)
    if values.ndim != 1:
        raise ShapeError(f"topk_indices expects a vector, got shape {values.shape}")
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k size {k} outside valid range [1, {n}]")
    ordering = np.lexsort((np.arange(n), -values))
    return np.sort(ordering[:k])


# -- finite-difference oracle ----------------------------------------------------


def gradient_check_report(f: Callable[[], Tensor],
                          params: Iterable[Parameter],
                          step: float = 1e-5) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild its graph on every call and return a scalar Tensor.
    The relative error for each parameter is
    max |analytic - numeric| / max(1, |analytic|, |numeric|) over coordinates.
    """
    params = list(params)
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    for p in params:
        p.zero_grad()
    out = f()
    if not math.isfinite(out.item()):
        raise OracleError("objective is non-finite at the evaluation point")
    out.backward()
    analytic = {p.name: p.grad.copy() for p in params}

    report: dict[str, float] = {}
    for p in params:
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = f().item()
            flat[i] = original - step
            f_minus = f().item()
            flat[i] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise OracleError(
                    f"objective non-finite while perturbing {p.name}[{i}]")
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        exact = analytic[p.name].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(exact), np.abs(numeric)))
        report[p.name] = float(np.max(np.abs(exact - numeric) / denom))
    return report


def gradient_check(f: Callable[[], Tensor],
                   params: Iterable[Parameter],
                   step: float = 1e-5) -> float:
    """Worst-case relative gradient error over all given parameters."""
    report = gradient_check_report(f, params, step)
    return max(report.values()) if report else 0.0
