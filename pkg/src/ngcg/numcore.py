"""Dense float64 matrices with reverse-mode differentiation over a fixed operator set.

Every value is a 2-D ``float64`` array. Graph nodes are built by calling the
operator functions below (or :func:`forward_op` with an operator tag); a scalar
(1x1) node can then be differentiated with :func:`backward`.

Each operator's backward rule is written out by hand, and :func:`gradcheck`
verifies them against central finite differences.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmptySequenceError, NumericError

LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)

# Multiplicative corruption of selected backward rules, used only as a
# negative control for gradient checking (see ``faulty_backward``).
_BACKWARD_FAULTS: dict[str, float] = {}


class Node:
    """One vertex of a computation graph."""

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "name", "_backward")

    def __init__(self, value, op="const", parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} {self.value.shape[0]}x{self.value.shape[1]}>"


def as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got {arr.ndim}-d array")
    return arr


def _check_finite(value: np.ndarray, what: str):
    # a single reduction catches NaN/Inf cheaply; the full scan only runs on overflow
    if not math.isfinite(float(value.sum())) and not np.isfinite(value).all():
        raise NumericError(f"non-finite value in {what}")


def param(value, name=None) -> Node:
    """Leaf node that receives a gradient."""
    arr = as_matrix(value)
    _check_finite(arr, name or "parameter")
    return Node(arr, "param", requires_grad=True, name=name)


def const(value, name=None) -> Node:
    """Leaf node treated as a constant by :func:`backward`."""
    arr = as_matrix(value)
    _check_finite(arr, name or "constant")
    return Node(arr, "const", name=name)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _make(value, op, parents, backward_fn) -> Node:
    _check_finite(value, op)
    needs = any(p.requires_grad for p in parents)
    return Node(value, op, parents, backward_fn if needs else None, requires_grad=needs)


# ---------------------------------------------------------------------------
# operators


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, "matmul", (a, b), back)


def add(a, b) -> Node:
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``."""
    a, b = _lift(a), _lift(b)
    if a.shape == b.shape:
        return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))
    if b.shape == (1, a.shape[1]):
        return _make(a.value + b.value, "add", (a, b),
                     lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise DimensionError(f"add {a.shape} + {b.shape}")


def scale(a, c: float) -> Node:
    a = _lift(a)
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: (g * c,))


def mul(a, b) -> Node:
    """Elementwise product; ``b`` may also be 1x1 (scalar broadcast)."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if a.shape == b.shape:
        return _make(av * bv, "elementwise-mul", (a, b), lambda g: (g * bv, g * av))
    if b.shape == (1, 1):
        s = bv[0, 0]
        return _make(av * s, "elementwise-mul", (a, b),
                     lambda g: (g * s, np.array([[np.sum(g * av)]])))
    raise DimensionError(f"mul {a.shape} * {b.shape}")


def softmax_rows(a) -> Node:
    a = _lift(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return _make(y, "softmax-rows", (a,), back)


def log_softmax_rows(a) -> Node:
    a = _lift(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse

    def back(g):
        return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)

    return _make(y, "log-softmax-rows", (a,), back)


def layernorm(x, gain, bias) -> Node:
    """Row-wise normalization followed by a per-column affine map."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    n = x.shape[1]
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError(f"layernorm gain/bias must be 1x{n}")
    xc = x.value - x.value.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LAYERNORM_EPS)
    xhat = xc * inv
    gv = gain.value

    def back(g):
        gh = g * gv
        gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _make(xhat * gv + bias.value, "layernorm", (x, gain, bias), back)


def gelu(a) -> Node:
    """GELU, tanh approximation."""
    a = _lift(a)
    x = a.value
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(0.5 * x * (1.0 + t), "gelu", (a,), back)


def embedding_lookup(table, ids) -> Node:
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range [0, {table.shape[0]})")

    def back(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.value[ids], "embedding-lookup", (table,), back)


def masked_mean_rows(x, membership) -> Node:
    """Mean of the rows of ``x`` selected by each row of a 0/1 ``membership`` matrix.

    ``membership`` is a constant of shape (groups, rows of x); a single mask
    row gives the plain masked mean.
    """
    x = _lift(x)
    m = np.asarray(membership, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.shape[1] != x.shape[0]:
        raise DimensionError(f"membership {m.shape} does not cover {x.shape[0]} rows")
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts <= 0):
        raise EmptySequenceError("masked mean over zero valid rows")
    w = m / counts
    return _make(w @ x.value, "masked-mean-rows", (x,), lambda g: (w.T @ g,))


def concat_rows(parts: Sequence) -> Node:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero matrices")
    cols = parts[0].shape[1]
    if any(p.shape[1] != cols for p in parts):
        raise DimensionError("concat_rows column mismatch")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.value for p in parts], axis=0), "concat-rows",
                 parts, back)


def slice_rows(x, index) -> Node:
    """Gather rows by position; an int selects a single row (1 x cols)."""
    x = _lift(x)
    idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
    n = x.shape[0]
    if idx.size == 0 or idx.min() < -n or idx.max() >= n:
        raise DimensionError(f"row index out of range for {n} rows")
    idx = idx % n
    contiguous = bool(np.all(np.diff(idx) == 1))
    unique = contiguous or len(np.unique(idx)) == len(idx)

    def back(g):
        gx = np.zeros_like(x.value)
        if contiguous:
            gx[idx[0]:idx[-1] + 1] = g
        elif unique:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    value = x.value[idx[0]:idx[-1] + 1].copy() if contiguous else x.value[idx]
    return _make(value, "slice-row", (x,), back)


def dot(a, b) -> Node:
    """Frobenius inner product, returned as 1x1."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot {a.shape} . {b.shape}")
    av, bv = a.value, b.value
    return _make(np.array([[np.sum(av * bv)]]), "dot", (a, b),
                 lambda g: (g[0, 0] * bv, g[0, 0] * av))


def log(a) -> Node:
    a = _lift(a)
    if np.any(a.value <= 0):
        raise NumericError("log of non-positive value")
    av = a.value
    return _make(np.log(av), "log", (a,), lambda g: (g / av,))


def exp(a) -> Node:
    a = _lift(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.value)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def l2_normalize_rows(a) -> Node:
    a = _lift(a)
    norms = np.sqrt((a.value * a.value).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise NumericError("l2-normalize of a zero row")
    y = a.value / norms

    def back(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return _make(y, "l2-normalize-rows", (a,), back)


def transpose(a) -> Node:
    a = _lift(a)
    return _make(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def total(a) -> Node:
    """Sum of all entries, as 1x1."""
    a = _lift(a)
    shape = a.shape
    return _make(np.array([[a.value.sum()]]), "sum", (a,),
                 lambda g: (np.full(shape, g[0, 0]),))


OPS: dict[str, Callable[..., Node]] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "elementwise-mul": mul,
    "softmax-rows": softmax_rows,
    "log-softmax-rows": log_softmax_rows,
    "layernorm": layernorm,
    "gelu": gelu,
    "embedding-lookup": embedding_lookup,
    "masked-mean-rows": masked_mean_rows,
    "concat-rows": lambda *parts: concat_rows(parts),
    "slice-row": slice_rows,
    "dot": dot,
    "log": log,
    "exp": exp,
    "l2-normalize-rows": l2_normalize_rows,
    "transpose": transpose,
    "sum": total,
}


def forward_op(op: str, inputs: Sequence, *args) -> Node:
    """Apply the operator named ``op`` to ``inputs`` (extra non-node arguments follow)."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ContractError(f"unknown operator {op!r}") from None
    return fn(*inputs, *args)


# ---------------------------------------------------------------------------
# differentiation


def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, params: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Accumulate d(loss)/d(node) for every reachable parameter leaf.

    Returns a map from parameter node to gradient. Nodes listed in ``params``
    that the loss does not depend on map to zeros. Each leaf's ``grad``
    attribute is also set.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    leaves: dict[int, Node] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                leaves[id(node)] = node
                node.grad = g
            continue
        factor = _BACKWARD_FAULTS.get(node.op)
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if factor is not None:
                pg = pg * factor
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    out = {n: n.grad for n in leaves.values()}
    if params is not None:
        result = {}
        for p in params:
            if p in out:
                result[p] = out[p]
            else:
                p.grad = np.zeros_like(p.value)
                result[p] = p.grad
        return result
    return out


@contextlib.contextmanager
def faulty_backward(op: str, factor: float = 2.0):
    """Temporarily scale the backward rule of ``op`` by ``factor`` (negative control)."""
    if op not in OPS:
        raise ContractError(f"unknown operator {op!r}")
    previous = _BACKWARD_FAULTS.get(op)
    _BACKWARD_FAULTS[op] = factor
    try:
        yield
    finally:
        if previous is None:
            _BACKWARD_FAULTS.pop(op, None)
        else:
            _BACKWARD_FAULTS[op] = previous


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    entries_checked: int
    passed: bool
    max_abs_grad: float = 0.0


@dataclass
class GradcheckReport:
    checks: list[ParamCheck] = field(default_factory=list)
    step: float = 1e-5
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self, prefix: str = "") -> list[str]:
        return [
            f"{prefix}{c.name}: {'PASS' if c.passed else 'FAIL'} "
            f"max_rel_err={c.max_rel_error:.3e} entries={c.entries_checked} "
            f"max|grad|={c.max_abs_grad:.3e}"
            for c in self.checks
        ]


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(f: Callable[[list[Node]], Node], params: Sequence[np.ndarray],
              step: float = 1e-5, tol: float = 1e-4, names: Sequence[str] | None = None,
              max_entries: int | None = None, seed: int = 0,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    ``f`` receives one node per array in ``params`` and must return a 1x1 node.
    With ``max_entries`` set, at most that many coordinates per parameter are
    probed (chosen with ``seed``); analytic gradients are always computed in full.
    """
    if step <= 0 or tol <= 0:
        raise ContractError("step and tol must be positive")
    arrays = [as_matrix(p).copy() for p in params]
    names = list(names) if names is not None else [f"param{i}" for i in range(len(arrays))]
    nodes = [param(a, name=n) for a, n in zip(arrays, names)]
    out = f(nodes)
    if out.shape != (1, 1):
        raise ContractError(f"gradcheck needs a scalar-valued function, got {out.shape}")
    analytic = backward(out, nodes)

    def evaluate() -> float:
        return float(f([const(a) for a in arrays]).value[0, 0])

    rng = np.random.default_rng(seed)
    report = GradcheckReport(step=step, tol=tol)
    for arr, name, node in zip(arrays, names, nodes):
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        ga = analytic[node].reshape(-1)[coords]
        gn = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            fp = evaluate()
            flat[c] = orig - step
            fm = evaluate()
            flat[c] = orig
            gn[j] = (fp - fm) / (2 * step)
        err = relative_error(ga, gn, floor)
        worst = float(err.max()) if err.size else 0.0
        report.checks.append(ParamCheck(name, worst, len(coords), worst < tol,
                                        float(np.abs(ga).max()) if ga.size else 0.0))
    return report


class Bindings:
    """Wraps named arrays as graph leaves, reusing one node per name.

    Names in ``trainable`` become :func:`param` leaves, the rest constants.
    Sharing a ``Bindings`` between several forward passes makes their
    gradients accumulate on the same leaves.
    """

    def __init__(self, tensors: dict[str, np.ndarray], trainable: Iterable[str] = ()):
        self.tensors = tensors
        self.trainable = set(trainable)
        self._nodes: dict[str, Node] = {}

    def __getitem__(self, name: str) -> Node:
        node = self._nodes.get(name)
        if node is None:
            value = self.tensors[name]
            node = param(value, name) if name in self.trainable else const(value, name)
            self._nodes[name] = node
        return node

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def bind(self, name: str, node: Node):
        """Use an existing node for ``name`` (gradcheck feeds its own leaves this way)."""
        self._nodes[name] = node

    def params(self) -> dict[str, Node]:
        """Parameter leaves for every trainable name (created on demand)."""
        return {n: self[n] for n in sorted(self.trainable)}
