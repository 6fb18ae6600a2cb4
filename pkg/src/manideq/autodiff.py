"""Static-graph automatic differentiation over dense numpy tensors.

A :class:`Graph` is recorded once by :func:`trace` and is immutable
afterwards.  :func:`evaluate`, :func:`gradient` and :func:`jvp` keep all
intermediate values in per-call tables, so a single graph may be evaluated
from several threads at once.

Every differentiable function in this module is polymorphic: called on plain
arrays it computes eagerly with numpy, called on :class:`Node` handles it
records a graph operation.  Model code written against these functions
therefore runs unchanged in both settings, and both settings share the same
forward kernels (so traced and eager values are bit-identical).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import linalg

__all__ = [
    "Graph",
    "Node",
    "JvpResult",
    "GraphError",
    "ShapeError",
    "NonFiniteError",
    "trace",
    "evaluate",
    "gradient",
    "value_and_gradient",
    "jvp",
]


class GraphError(ValueError):
    pass


class ShapeError(GraphError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id, op_name):
        super().__init__(f"non-finite value produced at node {node_id} ({op_name})")
        self.node_id = node_id
        self.op_name = op_name


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _sym(a):
    return 0.5 * (a + _swap(a))


def _lower_adjoint(G):
    # adjoint of P -> tril(P) + tril(P, -1).T, the part of P the kernels read
    n = G.shape[-1]
    lower = np.tril(np.ones((n, n), dtype=bool), -1)
    out = np.where(lower, G + _swap(G), 0.0)
    idx = np.arange(n)
    out[..., idx, idx] = G[..., idx, idx]
    return out


def _lower_symmetrize(dP):
    return np.tril(dP) + _swap(np.tril(dP, -1))


class Primitive:
    """One graph operation: forward kernel, reverse rule and forward rule."""

    name = "primitive"
    differentiable = True

    def forward(self, *args, **attrs):
        raise NotImplementedError

    def vjp(self, g, out, args, needs, **attrs):
        raise NotImplementedError

    def jvp(self, tangents, out, args, **attrs):
        raise NotImplementedError

    def __repr__(self):
        return f"<{self.name}>"


def _tan(t, shape):
    return np.zeros(shape) if t is None else t


class _Add(Primitive):
    name = "add"

    def forward(self, a, b):
        return a + b

    def vjp(self, g, out, args, needs):
        a, b = args
        return [_unbroadcast(g, np.shape(a)) if needs[0] else None,
                _unbroadcast(g, np.shape(b)) if needs[1] else None]

    def jvp(self, t, out, args):
        ta, tb = t
        if ta is None:
            return tb
        if tb is None:
            return ta
        return ta + tb


class _Sub(Primitive):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def vjp(self, g, out, args, needs):
        a, b = args
        return [_unbroadcast(g, np.shape(a)) if needs[0] else None,
                _unbroadcast(-g, np.shape(b)) if needs[1] else None]

    def jvp(self, t, out, args):
        ta, tb = t
        if tb is None:
            return ta
        if ta is None:
            return -tb
        return ta - tb


class _Mul(Primitive):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def vjp(self, g, out, args, needs):
        a, b = args
        return [_unbroadcast(g * b, np.shape(a)) if needs[0] else None,
                _unbroadcast(g * a, np.shape(b)) if needs[1] else None]

    def jvp(self, t, out, args):
        (ta, tb), (a, b) = t, args
        res = None
        if ta is not None:
            res = ta * b
        if tb is not None:
            res = a * tb if res is None else res + a * tb
        return res


class _Div(Primitive):
    name = "div"

    def forward(self, a, b):
        return a / b

    def vjp(self, g, out, args, needs):
        a, b = args
        return [_unbroadcast(g / b, np.shape(a)) if needs[0] else None,
                _unbroadcast(-g * out / b, np.shape(b)) if needs[1] else None]

    def jvp(self, t, out, args):
        (ta, tb), (a, b) = t, args
        res = None
        if ta is not None:
            res = ta / b
        if tb is not None:
            res = -out * tb / b if res is None else res - out * tb / b
        return res


class _Neg(Primitive):
    name = "neg"

    def forward(self, a):
        return -a

    def vjp(self, g, out, args, needs):
        return [-g]

    def jvp(self, t, out, args):
        return -t[0]


class _Pow(Primitive):
    name = "pow"

    def forward(self, a, power):
        return a**power

    def vjp(self, g, out, args, needs, power):
        return [g * power * args[0] ** (power - 1)]

    def jvp(self, t, out, args, power):
        return t[0] * power * args[0] ** (power - 1)


class _Unary(Primitive):
    def __init__(self, name, f, df):
        self.name = name
        self._f = f
        self._df = df

    def forward(self, a):
        return self._f(a)

    def vjp(self, g, out, args, needs):
        return [g * self._df(args[0], out)]

    def jvp(self, t, out, args):
        return t[0] * self._df(args[0], out)


_exp = _Unary("exp", np.exp, lambda a, out: out)
_log = _Unary("log", np.log, lambda a, out: 1.0 / a)
_tanh = _Unary("tanh", np.tanh, lambda a, out: 1.0 - out * out)
_softplus = _Unary("softplus", lambda a: np.logaddexp(0.0, a), lambda a, out: special.expit(a))
_sqrt = _Unary("sqrt", np.sqrt, lambda a, out: 0.5 / out)
_sin = _Unary("sin", np.sin, lambda a, out: np.cos(a))
_cos = _Unary("cos", np.cos, lambda a, out: -np.sin(a))
_gammaln = _Unary("gammaln", special.gammaln, lambda a, out: special.digamma(a))
_log_ndtr = _Unary(
    "log_ndtr", special.log_ndtr, lambda a, out: np.exp(-0.5 * a * a - 0.5 * np.log(2 * np.pi) - out)
)


class _Floor(Primitive):
    name = "floor"
    differentiable = False

    def forward(self, a):
        return np.floor(a)

    def vjp(self, g, out, args, needs):
        return [None]

    def jvp(self, t, out, args):
        return None


class _MatMul(Primitive):
    name = "matmul"

    def forward(self, a, b):
        return np.matmul(a, b)

    def vjp(self, g, out, args, needs):
        a, b = args
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        g2 = g
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g2 @ _swap(b2), a2.shape).reshape(a.shape)
        if needs[1]:
            gb = _unbroadcast(_swap(a2) @ g2, b2.shape).reshape(b.shape)
        return [ga, gb]

    def jvp(self, t, out, args):
        (ta, tb), (a, b) = t, args
        res = None
        if ta is not None:
            res = np.matmul(ta, b)
        if tb is not None:
            res = np.matmul(a, tb) if res is None else res + np.matmul(a, tb)
        return res


class _Sum(Primitive):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(self, g, out, args, needs, axis=None, keepdims=False):
        a = args[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, a.shape)]

    def jvp(self, t, out, args, axis=None, keepdims=False):
        return np.sum(t[0], axis=axis, keepdims=keepdims)


class _Mean(Primitive):
    name = "mean"

    def forward(self, a, axis=None):
        return np.mean(a, axis=axis)

    def vjp(self, g, out, args, needs, axis=None):
        a = args[0]
        count = a.size // max(np.size(out), 1) if a.size else 1
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / count, a.shape)]

    def jvp(self, t, out, args, axis=None):
        return np.mean(t[0], axis=axis)


class _Reshape(Primitive):
    name = "reshape"

    def forward(self, a, shape):
        return np.reshape(a, shape)

    def vjp(self, g, out, args, needs, shape):
        return [np.reshape(g, np.shape(args[0]))]

    def jvp(self, t, out, args, shape):
        return np.reshape(t[0], out.shape)


class _ReshapeLast(Primitive):
    name = "reshape_last"

    def forward(self, a, ndims, shape):
        return np.reshape(a, a.shape[: a.ndim - ndims] + shape)

    def vjp(self, g, out, args, needs, ndims, shape):
        return [np.reshape(g, np.shape(args[0]))]

    def jvp(self, t, out, args, ndims, shape):
        return np.reshape(t[0], out.shape)


class _SwapAxes(Primitive):
    name = "swapaxes"

    def forward(self, a, axis1, axis2):
        return np.swapaxes(a, axis1, axis2)

    def vjp(self, g, out, args, needs, axis1, axis2):
        return [np.swapaxes(g, axis1, axis2)]

    def jvp(self, t, out, args, axis1, axis2):
        return np.swapaxes(t[0], axis1, axis2)


class _BroadcastTo(Primitive):
    name = "broadcast_to"

    def forward(self, a, shape):
        return np.broadcast_to(a, shape)

    def vjp(self, g, out, args, needs, shape):
        return [_unbroadcast(g, np.shape(args[0]))]

    def jvp(self, t, out, args, shape):
        return np.broadcast_to(t[0], shape)


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


class _GetItem(Primitive):
    name = "getitem"

    def forward(self, a, index):
        return a[index]

    def vjp(self, g, out, args, needs, index):
        a = args[0]
        full = np.zeros(np.shape(a))
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return [full]

    def jvp(self, t, out, args, index):
        return t[0][index]


class _Concat(Primitive):
    name = "concat"

    def forward(self, *arrays, axis=-1):
        return np.concatenate(arrays, axis=axis)

    def vjp(self, g, out, args, needs, axis=-1):
        sizes = np.cumsum([np.shape(a)[axis] for a in args])[:-1]
        return list(np.split(g, sizes, axis=axis))

    def jvp(self, t, out, args, axis=-1):
        if all(x is None for x in t):
            return None
        return np.concatenate([_tan(x, np.shape(a)) for x, a in zip(t, args)], axis=axis)


class _Stack(Primitive):
    name = "stack"

    def forward(self, *arrays, axis=0):
        return np.stack(arrays, axis=axis)

    def vjp(self, g, out, args, needs, axis=0):
        return [np.take(g, i, axis=axis) for i in range(len(args))]

    def jvp(self, t, out, args, axis=0):
        if all(x is None for x in t):
            return None
        return np.stack([_tan(x, np.shape(a)) for x, a in zip(t, args)], axis=axis)


class _Clip(Primitive):
    name = "clip"

    def forward(self, a, lo, hi):
        return np.clip(a, lo, hi)

    def vjp(self, g, out, args, needs, lo, hi):
        a = args[0]
        return [g * ((a >= lo) & (a <= hi))]

    def jvp(self, t, out, args, lo, hi):
        a = args[0]
        return t[0] * ((a >= lo) & (a <= hi))


class _Where(Primitive):
    name = "where"

    def forward(self, a, b, mask):
        return np.where(mask, a, b)

    def vjp(self, g, out, args, needs, mask):
        a, b = args
        return [_unbroadcast(np.where(mask, g, 0.0), np.shape(a)) if needs[0] else None,
                _unbroadcast(np.where(mask, 0.0, g), np.shape(b)) if needs[1] else None]

    def jvp(self, t, out, args, mask):
        (ta, tb), (a, b) = t, args
        return np.where(mask, _tan(ta, np.shape(a)), _tan(tb, np.shape(b)))


class _LogSumExp(Primitive):
    name = "logsumexp"

    def forward(self, a, axis):
        m = np.max(a, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
        return np.squeeze(s, axis=axis)

    def vjp(self, g, out, args, needs, axis):
        a = args[0]
        w = np.exp(a - np.expand_dims(out, axis))
        return [np.expand_dims(g, axis) * w]

    def jvp(self, t, out, args, axis):
        w = np.exp(args[0] - np.expand_dims(out, axis))
        return np.sum(w * t[0], axis=axis)


class _Cholesky(Primitive):
    name = "cholesky"

    def forward(self, P):
        return linalg.cholesky(P)

    def _phi_inverse_terms(self, L, X):
        # L^{-1} X L^{-T}
        Y = linalg.solve_lower(L, X)
        return _swap(linalg.solve_lower(L, _swap(Y)))

    def vjp(self, g, out, args, needs):
        L = out
        S = _swap(L) @ g
        phi = np.tril(S)
        n = L.shape[-1]
        idx = np.arange(n)
        phi[..., idx, idx] *= 0.5
        Lt = _swap(L)
        Y = linalg.solve_upper(Lt, phi)
        G = _swap(linalg.solve_upper(Lt, _swap(Y)))  # L^{-T} phi L^{-1}
        return [_lower_adjoint(_sym(G))]

    def jvp(self, t, out, args):
        L = out
        dP = _lower_symmetrize(t[0])
        X = self._phi_inverse_terms(L, dP)
        phi = np.tril(X)
        n = L.shape[-1]
        idx = np.arange(n)
        phi[..., idx, idx] *= 0.5
        return L @ phi


class _SymSqrt(Primitive):
    name = "symmetric_sqrt"

    def forward(self, P):
        return linalg.symmetric_sqrt(P)

    @staticmethod
    def _lyap(P, X):
        w, U = linalg.jacobi_eigh(P)
        r = np.sqrt(np.clip(w, 0.0, None))
        denom = r[..., :, None] + r[..., None, :]
        inner = (_swap(U) @ X @ U) / denom
        return U @ inner @ _swap(U)

    def vjp(self, g, out, args, needs):
        return [self._lyap(args[0], _sym(g))]

    def jvp(self, t, out, args):
        return self._lyap(args[0], _sym(t[0]))


class _CholSolve(Primitive):
    name = "cholesky_solve"

    def forward(self, P, B):
        return linalg.cholesky_solve(P, B)

    def vjp(self, g, out, args, needs):
        P, B = args
        gB = linalg.cholesky_solve(P, g)
        gP = None
        if needs[0]:
            gP = _unbroadcast(_lower_adjoint(-(gB @ _swap(out))), np.shape(P))
        return [gP, _unbroadcast(gB, np.shape(B)) if needs[1] else None]

    def jvp(self, t, out, args):
        (tP, tB), (P, B) = t, args
        rhs = None
        if tB is not None:
            rhs = tB
        if tP is not None:
            term = -(_lower_symmetrize(tP) @ out)
            rhs = term if rhs is None else rhs + term
        return None if rhs is None else linalg.cholesky_solve(P, rhs)


class _EigvalsH(Primitive):
    name = "eigvalsh"

    def forward(self, P):
        return linalg.jacobi_eigh(P)[0]

    def vjp(self, g, out, args, needs):
        _, U = linalg.jacobi_eigh(args[0])
        return [(U * g[..., None, :]) @ _swap(U)]

    def jvp(self, t, out, args):
        _, U = linalg.jacobi_eigh(args[0])
        return np.einsum("...ji,...jk,...ki->...i", U, _sym(t[0]), U)


class Custom(Primitive):
    """User-supplied kernel with optional reverse and forward rules."""

    def __init__(self, name, fn, vjp=None, jvp=None):
        self.name = name
        self._fn = fn
        self._vjp = vjp
        self._jvp = jvp

    def forward(self, *args):
        return np.asarray(self._fn(*args), dtype=np.float64)

    def vjp(self, g, out, args, needs):
        if self._vjp is None:
            raise GraphError(f"custom op {self.name!r} has no reverse rule")
        grads = list(self._vjp(g, out, *args))
        return [None if gi is None else _unbroadcast(np.asarray(gi), np.shape(a))
                for gi, a in zip(grads, args)]

    def jvp(self, t, out, args):
        if self._jvp is None:
            raise GraphError(f"custom op {self.name!r} has no forward rule")
        return self._jvp(t, out, *args)


class _Input(Primitive):
    name = "input"


class _Const(Primitive):
    name = "const"


_INPUT = _Input()
_CONST = _Const()


@dataclass(frozen=True)
class Op:
    prim: Primitive
    args: tuple
    attrs: dict = field(default_factory=dict)


class Node:
    """Handle to a value inside a graph under construction."""

    __slots__ = ("graph", "id")
    __array_ufunc__ = None  # numpy defers to the reflected operators below

    def __init__(self, graph, node_id):
        self.graph = graph
        self.id = node_id

    def __repr__(self):
        return f"Node({self.id}, {self.graph.ops[self.id].prim.name})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _apply(_Neg(), self)

    def __pow__(self, power):
        return power_(self, power)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def mT(self):
        return swapaxes(self, -1, -2)


class Graph:
    """Ordered list of primitive operations with named inputs and outputs."""

    def __init__(self):
        self.ops = []
        self.inputs = {}
        self.outputs = None
        self.frozen = False

    def __len__(self):
        return len(self.ops)

    def __repr__(self):
        counts = {}
        for op in self.ops:
            counts[op.prim.name] = counts.get(op.prim.name, 0) + 1
        body = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
        return f"Graph(inputs={list(self.inputs)}, ops={len(self.ops)}: {body})"

    def _push(self, op):
        if self.frozen:
            raise GraphError("graph is frozen")
        for a in op.args:
            if not 0 <= a < len(self.ops):
                raise GraphError(f"operand {a} does not precede node {len(self.ops)}")
        self.ops.append(op)
        return Node(self, len(self.ops) - 1)

    def input(self, name):
        if name in self.inputs:
            raise GraphError(f"duplicate input {name!r}")
        node = self._push(Op(_INPUT, (), {"name": name}))
        self.inputs[name] = node.id
        return node

    def constant(self, value):
        return self._push(Op(_CONST, (), {"value": np.asarray(value, dtype=np.float64)}))

    def apply(self, prim, args, attrs):
        ids = []
        for a in args:
            if isinstance(a, Node):
                if a.graph is not self:
                    raise GraphError("operands belong to different graphs")
                ids.append(a.id)
            else:
                ids.append(self.constant(a).id)
        return self._push(Op(prim, tuple(ids), dict(attrs)))

    def freeze(self, outputs):
        if isinstance(outputs, dict):
            self.outputs = {k: self._as_node(v).id for k, v in outputs.items()}
        else:
            self.outputs = self._as_node(outputs).id
        self.frozen = True
        return self

    def _as_node(self, v):
        return v if isinstance(v, Node) else self.constant(v)


def _find_graph(args):
    graph = None
    for a in args:
        if isinstance(a, Node):
            if graph is not None and a.graph is not graph:
                raise GraphError("operands belong to different graphs")
            graph = a.graph
    return graph


def _apply(prim, *args, **attrs):
    graph = _find_graph(args)
    if graph is None:
        return prim.forward(*[np.asarray(a, dtype=np.float64) for a in args], **attrs)
    return graph.apply(prim, args, attrs)


# -- polymorphic operations -------------------------------------------------

_ADD, _SUB, _MUL, _DIV, _MATMUL = _Add(), _Sub(), _Mul(), _Div(), _MatMul()


def add(a, b):
    return _apply(_ADD, a, b)


def sub(a, b):
    return _apply(_SUB, a, b)


def mul(a, b):
    return _apply(_MUL, a, b)


def div(a, b):
    return _apply(_DIV, a, b)


def power_(a, power):
    return _apply(_Pow(), a, power=float(power))


def square(a):
    return a * a


def matmul(a, b):
    return _apply(_MATMUL, a, b)


def exp(a):
    return _apply(_exp, a)


def log(a):
    return _apply(_log, a)


def tanh(a):
    return _apply(_tanh, a)


def softplus(a):
    return _apply(_softplus, a)


def sqrt(a):
    return _apply(_sqrt, a)


def sin(a):
    return _apply(_sin, a)


def cos(a):
    return _apply(_cos, a)


def gammaln(a):
    return _apply(_gammaln, a)


def log_ndtr(a):
    return _apply(_log_ndtr, a)


def floor(a):
    return _apply(_Floor(), a)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply(_Sum(), a, axis=axis, keepdims=keepdims)


def mean(a, axis=None):
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply(_Mean(), a, axis=axis)


def reshape(a, shape):
    return _apply(_Reshape(), a, shape=tuple(shape))


def reshape_last(a, ndims, shape):
    """Reshape only the trailing ``ndims`` axes, keeping any batch axes."""
    return _apply(_ReshapeLast(), a, ndims=int(ndims), shape=tuple(shape))


def swapaxes(a, axis1, axis2):
    return _apply(_SwapAxes(), a, axis1=axis1, axis2=axis2)


def broadcast_to(a, shape):
    return _apply(_BroadcastTo(), a, shape=tuple(shape))


def getitem(a, index):
    return _apply(_GetItem(), a, index=index)


def concat(arrays, axis=-1):
    return _apply(_Concat(), *arrays, axis=axis)


def stack(arrays, axis=0):
    return _apply(_Stack(), *arrays, axis=axis)


def clip(a, lo, hi):
    return _apply(_Clip(), a, lo=lo, hi=hi)


def where(mask, a, b):
    return _apply(_Where(), a, b, mask=np.asarray(mask, dtype=bool))


def logsumexp(a, axis):
    return _apply(_LogSumExp(), a, axis=axis)


def cholesky(P):
    return _apply(_Cholesky(), P)


def symmetric_sqrt(P):
    return _apply(_SymSqrt(), P)


def cholesky_solve(P, B):
    return _apply(_CholSolve(), P, B)


def eigvalsh(P):
    return _apply(_EigvalsH(), P)


def custom(name, fn, vjp=None, jvp=None):
    """Wrap ``fn`` as a polymorphic primitive with the given rules."""
    prim = Custom(name, fn, vjp, jvp)

    def apply(*args):
        return _apply(prim, *args)

    return apply


def is_symbolic(*args):
    return any(isinstance(a, Node) for a in args)


# -- execution --------------------------------------------------------------


def trace(fn, input_names):
    """Record ``fn`` (called with one placeholder per name) into a frozen graph."""
    graph = Graph()
    placeholders = [graph.input(name) for name in input_names]
    return graph.freeze(fn(*placeholders))


def _forward(graph, bindings, check_finite=True):
    missing = set(graph.inputs) - set(bindings)
    if missing:
        raise GraphError(f"unbound inputs: {sorted(missing)}")
    values = [None] * len(graph.ops)
    for i, op in enumerate(graph.ops):
        if op.prim is _INPUT:
            v = np.asarray(bindings[op.attrs["name"]], dtype=np.float64)
        elif op.prim is _CONST:
            v = op.attrs["value"]
        else:
            try:
                v = op.prim.forward(*[values[j] for j in op.args], **op.attrs)
            except linalg.LinAlgError:
                raise
            except ValueError as exc:
                raise ShapeError(f"node {i} ({op.prim.name}): {exc}") from exc
        if check_finite and not np.all(np.isfinite(v)):
            raise NonFiniteError(i, op.prim.name)
        values[i] = v
    return values


def _collect(graph, values, outputs):
    if isinstance(graph.outputs, dict):
        if outputs is None:
            return {k: values[i] for k, i in graph.outputs.items()}
        if isinstance(outputs, str):
            return values[graph.outputs[outputs]]
        return {k: values[graph.outputs[k]] for k in outputs}
    return values[graph.outputs]


def evaluate(graph, bindings, outputs=None, check_finite=True):
    """Forward value(s) of the graph outputs for the given input bindings."""
    values = _forward(graph, bindings, check_finite)
    return _collect(graph, values, outputs)


def _output_id(graph, output):
    if isinstance(graph.outputs, dict):
        if output is None:
            if len(graph.outputs) != 1:
                raise GraphError("graph has several outputs; name the one to differentiate")
            output = next(iter(graph.outputs))
        return graph.outputs[output]
    return graph.outputs


def value_and_gradient(graph, bindings, wrt, output=None, check_finite=True):
    """Forward values of all outputs plus reverse-mode gradients of one scalar output."""
    for name in wrt:
        if name not in graph.inputs:
            raise GraphError(f"unknown leaf {name!r}")
    values = _forward(graph, bindings, check_finite)
    out_id = _output_id(graph, output)
    if np.ndim(values[out_id]) != 0:
        raise GraphError(f"output is not scalar (shape {np.shape(values[out_id])})")

    # only propagate along nodes that depend on a requested leaf
    targets = {graph.inputs[name] for name in wrt}
    needed = [False] * len(graph.ops)
    for i, op in enumerate(graph.ops):
        needed[i] = i in targets or (
            op.prim.differentiable and any(needed[j] for j in op.args)
        )

    cot = [None] * len(graph.ops)
    cot[out_id] = np.ones(())
    for i in range(out_id, -1, -1):
        g = cot[i]
        op = graph.ops[i]
        if g is None or not op.args or not needed[i]:
            continue
        needs = tuple(needed[j] for j in op.args)
        args = [values[j] for j in op.args]
        grads = op.prim.vjp(g, values[i], args, needs, **op.attrs)
        for j, gj, nj in zip(op.args, grads, needs):
            if gj is None or not nj:
                continue
            gj = np.asarray(gj, dtype=np.float64)
            cot[j] = gj if cot[j] is None else cot[j] + gj
    grads = {}
    for name in wrt:
        i = graph.inputs[name]
        shape = np.shape(values[i])
        grads[name] = np.zeros(shape) if cot[i] is None else np.broadcast_to(cot[i], shape).copy()
    return _collect(graph, values, None), grads


def gradient(graph, bindings, wrt, output=None):
    """Reverse-mode gradients of a scalar output with respect to named leaves."""
    return value_and_gradient(graph, bindings, wrt, output)[1]


@dataclass
class JvpResult:
    value: np.ndarray
    tangent: np.ndarray
    mode: str


def _forward_tangents(graph, values, seeds):
    tangents = [None] * len(graph.ops)
    for name, t in seeds.items():
        i = graph.inputs[name]
        tangents[i] = np.broadcast_to(np.asarray(t, dtype=np.float64), np.shape(values[i]))
    for i, op in enumerate(graph.ops):
        if not op.args:
            continue
        ts = [tangents[j] for j in op.args]
        if all(t is None for t in ts) or not op.prim.differentiable:
            continue
        t = op.prim.jvp(ts, values[i], [values[j] for j in op.args], **op.attrs)
        if t is not None:
            t = np.broadcast_to(t, np.shape(values[i]))
        tangents[i] = t
    return tangents


def jvp(fn, x, v, mode="auto", h=1e-6):
    """Directional derivative of ``fn`` at ``x`` along ``v``.

    ``fn`` may be a frozen single-input graph or a callable.  Forward mode is
    used when ``fn`` can be traced; otherwise (or with ``mode="fd"``) a
    central difference with per-coordinate step ``h * (1 + |x|)`` is taken.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise ShapeError(f"direction shape {v.shape} does not match point shape {x.shape}")
    if mode not in ("auto", "forward", "fd"):
        raise ValueError(f"unknown jvp mode {mode!r}")

    if mode != "fd":
        graph = fn if isinstance(fn, Graph) else None
        if graph is None:
            try:
                graph = trace(fn, ["x"])
            except (TypeError, AttributeError, ValueError):
                if mode == "forward":
                    raise
        if graph is not None:
            (name,) = graph.inputs
            values = _forward(graph, {name: x})
            tangents = _forward_tangents(graph, values, {name: v})
            out = graph.outputs
            t = tangents[out]
            t = np.zeros(np.shape(values[out])) if t is None else np.array(t)
            if not np.all(np.isfinite(t)):
                raise NonFiniteError(out, "jvp")
            return JvpResult(values[out], t, "forward")

    call = (lambda z: evaluate(fn, {next(iter(fn.inputs)): z})) if isinstance(fn, Graph) else fn
    step = h * (1.0 + np.abs(x))
    # scale the direction so every coordinate moves by at most its own step
    vmax = np.max(np.abs(v) / step) if np.any(v) else 1.0
    eps = 1.0 / vmax
    plus = np.asarray(call(x + eps * v), dtype=np.float64)
    minus = np.asarray(call(x - eps * v), dtype=np.float64)
    t = (plus - minus) / (2.0 * eps)
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(-1, "jvp")
    return JvpResult(np.asarray(call(x), dtype=np.float64), t, "fd")
