"""Dense-array kernel with reverse-mode gradients.

Exactly the operations the encoders and losses need, nothing more: no
broadcasting beyond bias-add, no dynamic shapes inside a graph, CPU numpy
storage only. Every kernel checks its output for NaN/Inf and raises
NumericError on the spot, so a poisoned value can never travel.

Graph convention (micrograd style): each op returns a fresh Tensor holding
references to its parents and a closure that pushes adjoints into an
accumulator dict. ``backward`` replays the closures in exact reverse
creation order, which is a valid topological order because an op's inputs
always exist before its output.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_EPS_DENOM = 1e-8  # floor used in relative-error comparisons


def set_default_dtype(dtype) -> None:
    """Switch the build-wide float width (64-bit default, 32-bit for speed)."""
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dtype {dtype!r}; use np.float32 or np.float64")
    DEFAULT_DTYPE = dtype


_uid_counter = itertools.count()


class Tensor:
    """A node in the computation graph: numpy payload plus backward hook."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_bw", "_uid")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or '<anon>'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._bw: Callable[[np.ndarray, dict[int, np.ndarray]], None] | None = None
        self._uid = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def parameter(name: str, data) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Sequence[Tensor], bw, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite result from {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.name = None
    out._uid = next(_uid_counter)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._bw = bw
    else:
        out._parents = ()
        out._bw = None
    return out


def _acc(adjoints: dict[int, np.ndarray], node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    key = node._uid
    if key in adjoints:
        adjoints[key] += g
    else:
        adjoints[key] = np.array(g, dtype=node.data.dtype, copy=True)


def _need_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} needs a 2-d tensor, got shape {x.shape}")


# -- kernels ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g, adj):
        _acc(adj, a, g @ b.data.T)
        _acc(adj, b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def transpose(x: Tensor) -> Tensor:
    _need_2d(x, "transpose")

    def bw(g, adj):
        _acc(adj, x, g.T)

    return _result(np.ascontiguousarray(x.data.T), (x,), bw, "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bw(g, adj):
        _acc(adj, a, g)
        _acc(adj, b, g)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def bw(g, adj):
        _acc(adj, a, g)
        _acc(adj, b, -g)

    return _result(a.data - b.data, (a, b), bw, "sub")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    _need_2d(x, "add_bias")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + bias {b.shape}")

    def bw(g, adj):
        _acc(adj, x, g)
        _acc(adj, b, g.sum(axis=0))

    return _result(x.data + b.data, (x, b), bw, "add_bias")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g, adj):
        _acc(adj, x, g * mask)

    return _result(np.maximum(x.data, 0.0), (x,), bw, "relu")


def mean_rows(x: Tensor) -> Tensor:
    """Average over the row index: m x n -> n."""
    _need_2d(x, "mean_rows")
    m = x.shape[0]

    def bw(g, adj):
        _acc(adj, x, np.repeat(g[None, :] / m, m, axis=0))

    return _result(x.data.mean(axis=0), (x,), bw, "mean_rows")


def block_mean_rows(x: Tensor, block: int) -> Tensor:
    """Average each consecutive block of `block` rows: (b*block) x n -> b x n."""
    _need_2d(x, "block_mean_rows")
    rows, cols = x.shape
    if block < 1 or rows % block != 0:
        raise ShapeError(f"block_mean_rows: {rows} rows not divisible by block {block}")
    b = rows // block

    def bw(g, adj):
        _acc(adj, x, np.repeat(g / block, block, axis=0))

    return _result(x.data.reshape(b, block, cols).mean(axis=1), (x,), bw, "block_mean_rows")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g, adj):
        _acc(adj, x, np.full(x.shape, g / n, dtype=x.data.dtype))

    return _result(np.asarray(x.data.mean()), (x,), bw, "mean_all")


def sum_all(x: Tensor) -> Tensor:
    def bw(g, adj):
        _acc(adj, x, np.full(x.shape, g, dtype=x.data.dtype))

    return _result(np.asarray(x.data.sum()), (x,), bw, "sum_all")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g, adj):
        _acc(adj, x, g * c)

    return _result(x.data * c, (x,), bw, "scale")


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a scalar graph node (e.g. a learnable temperature)."""
    if s.data.ndim != 0:
        raise ShapeError(f"mul_scalar needs a scalar node, got shape {s.shape}")

    def bw(g, adj):
        _acc(adj, x, g * s.data)
        _acc(adj, s, np.asarray((x.data * g).sum()))

    return _result(x.data * s.data, (x, s), bw, "mul_scalar")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError below
        out_data = np.exp(x.data)

    def bw(g, adj):
        _acc(adj, x, g * out_data)

    return _result(out_data, (x,), bw, "exp")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), large-|x| safe."""

    def bw(g, adj):
        sig = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
        _acc(adj, x, g * sig)

    return _result(np.logaddexp(0.0, x.data), (x,), bw, "softplus")


def row_l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit length; denom = sqrt(|row|^2 + eps^2) guards zeros."""
    _need_2d(x, "row_l2_normalize")
    if eps <= 0:
        raise ShapeError("row_l2_normalize needs eps > 0")
    sq = (x.data * x.data).sum(axis=1)
    denom = np.sqrt(sq + eps * eps)
    out_data = x.data / denom[:, None]

    def bw(g, adj):
        # d(x/d)/dx = I/d - x x^T / d^3, the projection term at unit norm
        dot = (x.data * g).sum(axis=1)
        _acc(adj, x, g / denom[:, None] - x.data * (dot / denom**3)[:, None])

    return _result(out_data, (x,), bw, "row_l2_normalize")


def log_sum_exp(x: Tensor) -> Tensor:
    """Row-wise log(sum(exp)): m x n -> m, max-shifted for stability."""
    _need_2d(x, "log_sum_exp")
    hi = x.data.max(axis=1, keepdims=True)
    shifted = np.exp(x.data - hi)
    total = shifted.sum(axis=1, keepdims=True)
    out_data = (hi + np.log(total)).ravel()

    def bw(g, adj):
        _acc(adj, x, (shifted / total) * g[:, None])

    return _result(out_data, (x,), bw, "log_sum_exp")


def gather_rows(e: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    _need_2d(e, "gather_rows")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows ids must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= e.shape[0]):
        raise ShapeError(f"gather_rows ids out of range for {e.shape[0]} rows")

    def bw(g, adj):
        if e.requires_grad:
            buf = np.zeros_like(e.data)
            np.add.at(buf, idx, g)
            _acc(adj, e, buf)

    return _result(e.data[idx], (e,), bw, "gather_rows")


def diag_part(x: Tensor) -> Tensor:
    _need_2d(x, "diag_part")
    if x.shape[0] != x.shape[1]:
        raise ShapeError(f"diag_part needs a square matrix, got {x.shape}")

    def bw(g, adj):
        buf = np.zeros_like(x.data)
        np.fill_diagonal(buf, g)
        _acc(adj, x, buf)

    return _result(np.diagonal(x.data).copy(), (x,), bw, "diag_part")


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "rowwise_dot")
    if a.shape != b.shape:
        raise ShapeError(f"rowwise_dot shape mismatch: {a.shape} vs {b.shape}")

    def bw(g, adj):
        _acc(adj, a, b.data * g[:, None])
        _acc(adj, b, a.data * g[:, None])

    return _result((a.data * b.data).sum(axis=1), (a, b), bw, "rowwise_dot")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    for p in parts:
        _need_2d(p, "concat_rows")
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise ShapeError(
            "concat_rows column mismatch: " + ", ".join(str(p.shape) for p in parts)
        )
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g, adj):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _acc(adj, p, g[lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw, "concat_rows")


# -- backward pass ------------------------------------------------------------

class GradTape:
    """Reverse-creation-ordered replay of the ops reachable from a loss node.

    `order` is a valid topological order (inputs are created before outputs);
    `adjoints` maps node uid -> accumulated adjoint, matching primal shapes.
    """

    def __init__(self, loss: Tensor):
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        reachable: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            node = stack.pop()
            if node._uid in reachable:
                continue
            reachable[node._uid] = node
            stack.extend(node._parents)
        self.order = sorted(reachable.values(), key=lambda n: n._uid, reverse=True)
        self.adjoints: dict[int, np.ndarray] = {}

    def run(self, loss: Tensor) -> None:
        self.adjoints[loss._uid] = np.asarray(1.0, dtype=loss.data.dtype)
        for node in self.order:
            g = self.adjoints.get(node._uid)
            if g is None or node._bw is None:
                continue
            node._bw(g, self.adjoints)


def backward(loss: Tensor, params: Iterable[Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every named parameter.

    Parameters not reached by the graph get exact-zero gradients.
    """
    tape = GradTape(loss)
    tape.run(loss)
    grads: dict[str, np.ndarray] = {}
    for p in params:
        if p.name is None:
            raise ShapeError("backward: parameters must be named")
        g = tape.adjoints.get(p._uid)
        grads[p.name] = np.zeros_like(p.data) if g is None else g
    return grads


# -- finite-difference oracle ---------------------------------------------------

def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to `n_coords` coordinates (seeded, without replacement) across
    the full parameter space; `f` must be a deterministic map from the current
    leaf values to a scalar loss node.
    """
    if not 1e-7 <= eps <= 1e-2:
        raise ShapeError(f"finite_diff_check eps {eps} outside [1e-7, 1e-2]")
    analytic = backward(f(params), params.values())

    names = sorted(params)
    sizes = [params[n].data.size for n in names]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    picks = rng.permutation(total)[: min(n_coords, total)]
    starts = np.cumsum([0] + sizes)

    worst = 0.0
    for flat_ix in picks:
        slot = int(np.searchsorted(starts, flat_ix, side="right") - 1)
        name = names[slot]
        offset = int(flat_ix - starts[slot])
        leaf = params[name].data.reshape(-1)
        saved = leaf[offset]
        leaf[offset] = saved + eps
        hi = f(params).item()
        leaf[offset] = saved - eps
        lo = f(params).item()
        leaf[offset] = saved
        numeric = (hi - lo) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[offset])
        err = abs(a - numeric) / max(abs(a), abs(numeric), _EPS_DENOM)
        worst = max(worst, err)
    return worst
