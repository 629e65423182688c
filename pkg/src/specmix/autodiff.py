"""Reverse-mode differentiation of a scalar objective on a recorded tape.

Nodes hold numpy arrays; the tape records primitive operations in creation
order, which is a valid topological order, so one reverse sweep visits every
node exactly once. The op functions in this module dispatch on their argument
type: plain numpy input falls through to numpy/scipy, ``Node`` input records
the operation. Model code is therefore written once and serves both plain
evaluation and gradient computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from . import linalg
from .errors import DimensionMismatch, NonFinite

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

CONSTRAINTS = ("none", "positive", "lower-triangular")


def softplus(x):
    if isinstance(x, Node):
        return _softplus_node(x)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus on positive values."""
    y = np.asarray(y, dtype=float)
    small = np.minimum(y, 20.0)
    large = np.maximum(y, 20.0)
    return np.where(y < 20.0, np.log(np.expm1(small)), y + np.log1p(-np.exp(-large)))


def sigmoid(x):
    if isinstance(x, Node):
        return _sigmoid_node(x)
    return expit(x)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def selu(x):
    if isinstance(x, Node):
        return _selu_node(x)
    return _selu_value(np.asarray(x, dtype=float))


def _selu_value(x):
    # expm1 only sees the non-positive branch to avoid overflow warnings
    return SELU_LAMBDA * (np.maximum(x, 0.0) + SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def _selu_slope(x):
    return SELU_LAMBDA * np.where(x > 0.0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


class Param:
    """Optimizable array with an optional range constraint.

    The raw array is the unconstrained quantity the optimizer updates;
    ``value`` applies the constraint transform (softplus for positives,
    masked lower triangle with a softplus diagonal for scale factors).
    """

    def __init__(self, value, constraint="none", name=""):
        if constraint not in CONSTRAINTS:
            raise ValueError(f"unknown constraint {constraint!r}")
        self.constraint = constraint
        self.name = name
        self.raw = self._inverse(np.array(value, dtype=float))

    @classmethod
    def from_raw(cls, raw, constraint="none", name=""):
        p = cls.__new__(cls)
        p.constraint = constraint
        p.name = name
        p.raw = np.array(raw, dtype=float)
        return p

    @property
    def value(self):
        return self._transform(self.raw)

    def _transform(self, raw):
        if self.constraint == "positive":
            return softplus(raw)
        if self.constraint == "lower-triangular":
            strict = np.tril(raw, -1)
            return strict + np.diag(softplus(np.diag(raw)))
        return raw.copy()

    def _inverse(self, value):
        if self.constraint == "positive":
            if np.any(value <= 0):
                raise ValueError(f"param {self.name!r} must be strictly positive")
            return np.asarray(softplus_inv(value), dtype=float)
        if self.constraint == "lower-triangular":
            diag = np.diag(value)
            if np.any(diag <= 0):
                raise ValueError(f"param {self.name!r} needs a positive diagonal")
            return np.tril(value, -1) + np.diag(softplus_inv(diag))
        return value

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.raw.shape}, {self.constraint})"


def plain(param):
    """Reader used outside of gradient computation."""
    return param.value


class Node:
    """One recorded value: array, creating op, and parent back-links."""

    __slots__ = ("value", "parents", "op", "tape", "idx")
    __array_ufunc__ = None  # keep numpy from absorbing Node operands

    def __init__(self, value, parents, op, tape):
        self.value = value
        self.parents = parents
        self.op = op
        self.tape = tape
        self.idx = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b, _one, _one)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b, _one, _neg_one)

    def __rsub__(self, other):
        return _binary("sub", other, self, lambda a, b: a - b, _one, _neg_one)

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary("div", other, self, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __neg__(self):
        return _unary("neg", self, lambda a: -a, lambda g, a, out: -g)

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"


class Tape:
    """Ordered record of operations; one tape per objective evaluation."""

    def __init__(self):
        self.nodes = []
        self._watched = {}  # id(Param) -> (param, raw leaf, transformed node)

    def watch(self, param):
        """Register a Param and return its transformed node (cached)."""
        entry = self._watched.get(id(param))
        if entry is not None:
            return entry[2]
        leaf = Node(param.raw, (), "leaf", self)
        node = _constraint_ops(leaf, param.constraint)
        self._watched[id(param)] = (param, leaf, node)
        return node

    def watched_params(self):
        return [entry[0] for entry in self._watched.values()]


def _constraint_ops(leaf, constraint):
    if constraint == "positive":
        return softplus(leaf)
    if constraint == "lower-triangular":
        n = leaf.value.shape[0]
        strict_mask = np.tril(np.ones((n, n)), -1)
        return leaf * strict_mask + make_diag(softplus(diag_part(leaf)))
    return leaf


def _one(g, a, b):
    return g


def _neg_one(g, a, b):
    return -g


def _unbroadcast(g, shape):
    """Sum a gradient down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _unary(op, x, fwd, vjp):
    xv = _value_of(x)
    out = fwd(xv)
    if not isinstance(x, Node):
        return out
    shape = xv.shape

    def back(g, xv=xv, out=out):
        return _unbroadcast(vjp(g, xv, out), shape)

    return Node(out, ((x, back),), op, x.tape)


def _binary(op, a, b, fwd, vjp_a, vjp_b):
    av, bv = _value_of(a), _value_of(b)
    out = fwd(av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, av=av, bv=bv: _unbroadcast(vjp_a(g, av, bv), av.shape)))
    if isinstance(b, Node):
        parents.append((b, lambda g, av=av, bv=bv: _unbroadcast(vjp_b(g, av, bv), bv.shape)))
    return Node(out, tuple(parents), op, tape)


def exp(x):
    return _unary("exp", x, np.exp, lambda g, a, out: g * out)


def log(x):
    return _unary("log", x, np.log, lambda g, a, out: g / a)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, a, out: 0.5 * g / out)


def cos(x):
    return _unary("cos", x, np.cos, lambda g, a, out: -g * np.sin(a))


def sin(x):
    return _unary("sin", x, np.sin, lambda g, a, out: g * np.cos(a))


def _softplus_node(x):
    return _unary("softplus", x, lambda a: np.logaddexp(0.0, a),
                  lambda g, a, out: g * expit(a))


def _sigmoid_node(x):
    return _unary("sigmoid", x, expit, lambda g, a, out: g * out * (1.0 - out))


def _selu_node(x):
    return _unary("selu", x, _selu_value, lambda g, a, out: g * _selu_slope(a))


def transpose(x):
    if not isinstance(x, Node):
        return np.asarray(x, dtype=float).T
    return _unary("transpose", x, lambda a: a.T, lambda g, a, out: g.T)


def reshape(x, shape):
    if not isinstance(x, Node):
        return np.asarray(x, dtype=float).reshape(shape)
    orig = x.value.shape

    def back(g, orig=orig):
        return g.reshape(orig)

    return Node(x.value.reshape(shape), ((x, back),), "reshape", x.tape)


def sum_all(x):
    if not isinstance(x, Node):
        return np.asarray(x, dtype=float).sum()
    shape = x.value.shape

    def back(g, shape=shape):
        return np.full(shape, float(g))

    return Node(np.asarray(x.value.sum()), ((x, back),), "sum", x.tape)


def sum_axis(x, axis, keepdims=True):
    if not isinstance(x, Node):
        return np.asarray(x, dtype=float).sum(axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def back(g, shape=shape, axis=axis, keepdims=keepdims):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    out = x.value.sum(axis=axis, keepdims=keepdims)
    return Node(out, ((x, back),), "sum_axis", x.tape)


def diag_part(x):
    if not isinstance(x, Node):
        return np.diag(np.asarray(x, dtype=float)).copy()

    def back(g):
        return np.diag(g)

    return Node(np.diag(x.value).copy(), ((x, back),), "diag_part", x.tape)


def make_diag(v):
    if not isinstance(v, Node):
        return np.diag(np.asarray(v, dtype=float))

    def back(g):
        return np.diag(g).copy()

    return Node(np.diag(v.value), ((v, back),), "make_diag", v.tape)


def cols(x, start, stop):
    """Column slice ``x[:, start:stop]``, kept two-dimensional."""
    if not isinstance(x, Node):
        return np.asarray(x, dtype=float)[:, start:stop]
    shape = x.value.shape

    def back(g, shape=shape, start=start, stop=stop):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return full

    return Node(x.value[:, start:stop], ((x, back),), "cols", x.tape)


def elem(v, i):
    """Entry ``v[i]`` of a vector, shaped (1, 1) for broadcasting."""
    if not isinstance(v, Node):
        return np.asarray(v, dtype=float)[i].reshape(1, 1)
    shape = v.value.shape

    def back(g, shape=shape, i=i):
        full = np.zeros(shape)
        full[i] = g.reshape(())
        return full

    return Node(v.value[i].reshape(1, 1), ((v, back),), "elem", v.tape)


def _matmul(a, b):
    av, bv = _value_of(a), _value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise DimensionMismatch("matmul expects 2-d operands")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []
    if isinstance(a, Node):
        parents.append((a, lambda g, bv=bv: g @ bv.T))
    if isinstance(b, Node):
        parents.append((b, lambda g, av=av: av.T @ g))
    return Node(out, tuple(parents), "matmul", tape)


def matmul(a, b):
    return _matmul(a, b)


def _phi(x):
    # lower triangle with the diagonal halved; adjoint helper for cholesky
    return np.tril(x) - 0.5 * np.diag(np.diag(x))


def cholesky(a, base_jitter=None):
    """Lower Cholesky factor of ``(a + a^T)/2`` plus escalating jitter.

    The input is symmetrized so that entrywise perturbations (finite
    differences included) see the same symmetric-part sensitivity the
    backward pass computes. The jitter is treated as constant in the
    backward pass; its dependence on the mean diagonal is negligible at
    the default 1e-6 fraction.
    """
    if not isinstance(a, Node):
        av = np.asarray(a, dtype=float)
        return linalg.cholesky(0.5 * (av + av.T), base_jitter).lower
    lower = linalg.cholesky(0.5 * (a.value + a.value.T), base_jitter).lower

    def back(g, lower=lower):
        p = _phi(lower.T @ g)
        half = solve_triangular(lower, p.T, lower=True, trans="T").T
        s = solve_triangular(lower, half, lower=True, trans="T")
        return 0.5 * (s + s.T)

    return Node(lower, ((a, back),), "cholesky", a.tape)


def _tri_solve(a, b, lower):
    av, bv = _value_of(a), _value_of(b)
    out = solve_triangular(av, bv, lower=lower)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = []

    def back_b(g, av=av, lower=lower):
        return solve_triangular(av, g, lower=lower, trans="T")

    if isinstance(b, Node):
        parents.append((b, back_b))
    if isinstance(a, Node):
        def back_a(g, av=av, out=out, lower=lower):
            gb = solve_triangular(av, g, lower=lower, trans="T")
            full = -gb @ out.T
            return np.tril(full) if lower else np.triu(full)

        parents.append((a, back_a))
    return Node(out, tuple(parents), "tri_solve", tape)


def solve_lower(a, b):
    """Solve ``L x = b`` with L lower triangular."""
    return _tri_solve(a, b, lower=True)


def solve_upper(a, b):
    """Solve ``U x = b`` with U upper triangular."""
    return _tri_solve(a, b, lower=False)


def value(x):
    """Plain numpy value of a Node or array."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def backward(tape, loss):
    """Gradient of a scalar loss node w.r.t. every watched Param's raw array.

    Params watched on the tape but not reaching the loss get zero gradients.
    Raises ``NonFinite`` naming the offending op if a gradient degenerates.
    """
    grads = _sweep(tape, loss, check=False)
    for param, g in grads.items():
        if not np.isfinite(g).all():
            _sweep(tape, loss, check=True)  # locate the op and raise
            raise NonFinite(f"non-finite gradient for param {param.name!r}")
    return grads


def _sweep(tape, loss, check):
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ValueError("loss node does not belong to this tape")
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise DimensionMismatch("loss must be scalar")
    node_grads = {loss: np.ones_like(loss.value)}
    leaf_grads = {}
    for node in reversed(tape.nodes[: loss.idx + 1]):
        g = node_grads.pop(node, None)
        if g is None:
            continue
        if check and not np.isfinite(g).all():
            raise NonFinite(f"non-finite gradient entering op {node.op!r}")
        if not node.parents:
            leaf_grads[node] = g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            prev = node_grads.get(parent)
            node_grads[parent] = contrib if prev is None else prev + contrib
    out = {}
    for param, leaf, _ in tape._watched.values():
        g = leaf_grads.get(leaf)
        out[param] = np.zeros_like(param.raw) if g is None else np.asarray(g)
    return out


def grad(objective, params):
    """Convenience wrapper: evaluate ``objective(read)`` and differentiate."""
    tape = Tape()
    for p in params:
        tape.watch(p)
    loss = objective(tape.watch)
    return value(loss), backward(tape, loss)


@dataclass
class GradCheckEntry:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    failures: list = field(default_factory=list)
    worst_by_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status}: max relative error {self.max_rel_err:.3e} (tol {self.tol:.1e})"]
        for e in self.failures[:10]:
            lines.append(
                f"  {e.param}{list(e.index)}: analytic {e.analytic:.6e} "
                f"vs numeric {e.numeric:.6e} (rel {e.rel_err:.3e})"
            )
        return "\n".join(lines)


def check_gradients(objective, params, h=1e-6, tol=1e-6):
    """Compare reverse-mode gradients against central finite differences.

    ``objective(read)`` must return a scalar; it is re-evaluated with plain
    parameter values for the differencing. Relative errors use an absolute
    floor of 1e-8 in the denominator.
    """
    _, grads = grad(objective, params)
    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for param in params:
        g = grads[param]
        worst = 0.0
        flat_raw = param.raw.reshape(-1)
        flat_g = np.asarray(g).reshape(-1)
        for i in range(flat_raw.size):
            orig = flat_raw[i]
            flat_raw[i] = orig + h
            hi = float(value(objective(plain)))
            flat_raw[i] = orig - h
            lo = float(value(objective(plain)))
            flat_raw[i] = orig
            numeric = (hi - lo) / (2.0 * h)
            analytic = float(flat_g[i])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            rel = abs(analytic - numeric) / denom
            worst = max(worst, rel)
            if rel >= tol:
                idx = np.unravel_index(i, param.raw.shape)
                report.failures.append(
                    GradCheckEntry(param.name, idx, analytic, numeric, rel)
                )
        report.worst_by_param[param.name] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
