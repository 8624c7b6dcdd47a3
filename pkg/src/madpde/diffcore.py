"""Reverse-mode autodiff tape with second-order forward jets.

Every value on the tape is a float64 numpy array (scalars included), so one
tape op can cover a whole batch of collocation points at once.  Input
derivatives up to second order travel *forward* as truncated Taylor jets
(``Jet2``) whose coefficients are themselves tape nodes; a single reverse
sweep over the tape then yields exact parameter gradients of expressions that
contain du/dx and d2u/dx2.

Plain numpy arrays and Python floats mix freely with tape variables: an op
records a node only when at least one argument is a ``Var``, otherwise it
just computes the numpy result.  The float 0.0 is treated as a structural
zero by the jet helpers so that derivative channels known to vanish cost
nothing.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence, Union

import numpy as np

Arraylike = Union["Var", np.ndarray, float, int]


class DiffError(ValueError):
    """Misuse of the tape (wrong tape, non-scalar output, ...)."""


class DomainError(DiffError):
    """An op was evaluated outside its domain (e.g. division by zero)."""


class Var:
    """One tape node: op kind, numpy value, parent ids and local partials.

    The local partials are stored as vector-Jacobian closures, one per
    parent; the reverse sweep calls them with the adjoint of this node.
    """

    __slots__ = ("tape", "idx", "op", "value", "parents", "vjps")

    def __init__(self, tape, idx, op, value, parents, vjps):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.value = value
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.op}#{self.idx}, shape={self.value.shape})"

    # arithmetic sugar; the module-level functions do the recording
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)


class Tape:
    """Append-only list of Var nodes in topological order.

    Single-writer: nodes are only appended, never mutated, so a built tape
    can be swept by ``gradient`` any number of times.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def constant(self, value, op="const") -> Var:
        """Record a leaf node (no parents).  Used for trainable inputs."""
        return self._record(op, _as_array(value), (), ())

    def _record(self, op, value, parents, vjps) -> Var:
        node = Var(self, len(self.nodes), op, value, parents, vjps)
        self.nodes.append(node)
        return node

    def gradient(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Reverse-mode gradient of a scalar output w.r.t. the given nodes.

        The tape is left unchanged, so repeated calls (with different
        outputs or wrt sets) are allowed.
        """
        if not isinstance(output, Var) or output.tape is not self:
            raise DiffError("output is not a node of this tape")
        if output.value.size != 1:
            raise DiffError(f"output must be scalar, got shape {output.value.shape}")
        wrt = list(wrt)
        for w in wrt:
            if not isinstance(w, Var) or w.tape is not self:
                raise DiffError("wrt node is not on this tape")
        keep = {w.idx for w in wrt}

        adjoint: list = [None] * (output.idx + 1)
        adjoint[output.idx] = np.ones_like(output.value)
        for i in range(output.idx, -1, -1):
            g = adjoint[i]
            if g is None:
                continue
            node = self.nodes[i]
            for pid, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if adjoint[pid] is None:
                    adjoint[pid] = contrib
                else:
                    adjoint[pid] = adjoint[pid] + contrib
            if i not in keep:
                adjoint[i] = None  # free as we go

        out = []
        for w in wrt:
            g = adjoint[w.idx]
            out.append(np.zeros_like(w.value) if g is None else np.asarray(g))
        return out


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> np.ndarray:
    """Underlying numpy value of a Var or array-like."""
    return x.value if isinstance(x, Var) else _as_array(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise DiffError("no Var among arguments")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops: record a node when any argument is a Var
# ---------------------------------------------------------------------------

def add(a: Arraylike, b: Arraylike):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    tape = _tape_of(a, b)
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
        vjps.append(lambda g, sh=av.shape: _unbroadcast(g, sh))
    if isinstance(b, Var):
        parents.append(b.idx)
        vjps.append(lambda g, sh=bv.shape: _unbroadcast(g, sh))
    return tape._record("add", out, tuple(parents), tuple(vjps))


def sub(a: Arraylike, b: Arraylike):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    tape = _tape_of(a, b)
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
        vjps.append(lambda g, sh=av.shape: _unbroadcast(g, sh))
    if isinstance(b, Var):
        parents.append(b.idx)
        vjps.append(lambda g, sh=bv.shape: _unbroadcast(-g, sh))
    return tape._record("sub", out, tuple(parents), tuple(vjps))


def neg(a: Arraylike):
    if not isinstance(a, Var):
        return -value_of(a)
    return a.tape._record("neg", -a.value, (a.idx,), (lambda g: -g,))


def mul(a: Arraylike, b: Arraylike):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    tape = _tape_of(a, b)
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
        vjps.append(lambda g, o=bv, sh=av.shape: _unbroadcast(g * o, sh))
    if isinstance(b, Var):
        parents.append(b.idx)
        vjps.append(lambda g, o=av, sh=bv.shape: _unbroadcast(g * o, sh))
    return tape._record("mul", out, tuple(parents), tuple(vjps))


def div(a: Arraylike, b: Arraylike):
    av, bv = value_of(a), value_of(b)
    if np.any(bv == 0.0):
        where = "div" if not isinstance(b, Var) else f"div(denominator {b!r})"
        raise DomainError(f"division by zero in node {where}")
    out = av / bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    tape = _tape_of(a, b)
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
        vjps.append(lambda g, o=bv, sh=av.shape: _unbroadcast(g / o, sh))
    if isinstance(b, Var):
        parents.append(b.idx)
        vjps.append(lambda g, num=av, den=bv, sh=bv.shape:
                    _unbroadcast(-g * num / (den * den), sh))
    return tape._record("div", out, tuple(parents), tuple(vjps))


def power(a: Arraylike, p: float):
    if isinstance(p, Var):
        raise DiffError("power exponent must be a constant scalar")
    av = value_of(a)
    out = av ** p
    if not isinstance(a, Var):
        return out
    der = p * av ** (p - 1)
    return a.tape._record("pow", out, (a.idx,), (lambda g, d=der: g * d,))


def sin(a: Arraylike):
    if not isinstance(a, Var):
        return np.sin(value_of(a))
    c = np.cos(a.value)
    return a.tape._record("sin", np.sin(a.value), (a.idx,), (lambda g, c=c: g * c,))


def cos(a: Arraylike):
    if not isinstance(a, Var):
        return np.cos(value_of(a))
    s = np.sin(a.value)
    return a.tape._record("cos", np.cos(a.value), (a.idx,), (lambda g, s=s: -g * s,))


def exp(a: Arraylike):
    if not isinstance(a, Var):
        return np.exp(value_of(a))
    out = np.exp(a.value)
    return a.tape._record("exp", out, (a.idx,), (lambda g, e=out: g * e,))


def tanh(a: Arraylike):
    if not isinstance(a, Var):
        return np.tanh(value_of(a))
    out = np.tanh(a.value)
    return a.tape._record("tanh", out, (a.idx,), (lambda g, t=out: g * (1.0 - t * t),))


def matmul(a: Arraylike, b: Arraylike):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    tape = _tape_of(a, b)
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.idx)
        vjps.append(lambda g, o=bv: g @ o.T)
    if isinstance(b, Var):
        parents.append(b.idx)
        vjps.append(lambda g, o=av: o.T @ g)
    return tape._record("matmul", out, tuple(parents), tuple(vjps))


def vsum(a: Arraylike, axis=None):
    av = value_of(a)
    out = np.sum(av, axis=axis)
    if not isinstance(a, Var):
        return out

    def vjp(g, sh=av.shape, axis=axis):
        if axis is None:
            return np.broadcast_to(g, sh).copy()
        return np.broadcast_to(np.expand_dims(g, axis), sh).copy()

    return a.tape._record("sum", _as_array(out), (a.idx,), (vjp,))


def vmean(a: Arraylike, axis=None):
    av = value_of(a)
    out = np.mean(av, axis=axis)
    if not isinstance(a, Var):
        return out
    n = av.size if axis is None else av.shape[axis]

    def vjp(g, sh=av.shape, axis=axis, n=n):
        if axis is None:
            return np.broadcast_to(g / n, sh).copy()
        return np.broadcast_to(np.expand_dims(g / n, axis), sh).copy()

    return a.tape._record("mean", _as_array(out), (a.idx,), (vjp,))


def reshape(a: Arraylike, shape):
    av = value_of(a)
    out = av.reshape(shape)
    if not isinstance(a, Var):
        return out
    return a.tape._record("reshape", out, (a.idx,),
                          (lambda g, sh=av.shape: g.reshape(sh),))


def repeat_rows(a: Arraylike, m: int):
    """Repeat each row of a 2-D array m times (block layout, rows grouped)."""
    av = value_of(a)
    out = np.repeat(av, m, axis=0)
    if not isinstance(a, Var):
        return out
    n, w = av.shape

    def vjp(g, n=n, m=m, w=w):
        return g.reshape(n, m, w).sum(axis=1)

    return a.tape._record("repeat_rows", out, (a.idx,), (vjp,))


def concat_cols(parts: Iterable[Arraylike]):
    parts = list(parts)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=1)
    if not any(isinstance(p, Var) for p in parts):
        return out
    tape = _tape_of(*parts)
    parents, vjps = [], []
    start = 0
    for p, v in zip(parts, vals):
        stop = start + v.shape[1]
        if isinstance(p, Var):
            parents.append(p.idx)
            vjps.append(lambda g, a=start, b=stop: g[:, a:b])
        start = stop
    return tape._record("concat_cols", out, tuple(parents), tuple(vjps))


def take_rows(a: Arraylike, start: int, stop: int):
    av = value_of(a)
    out = av[start:stop]
    if not isinstance(a, Var):
        return out

    def vjp(g, sh=av.shape, start=start, stop=stop):
        full = np.zeros(sh)
        full[start:stop] = g
        return full

    return a.tape._record("take_rows", out, (a.idx,), (vjp,))


# ---------------------------------------------------------------------------
# order-2 Taylor jets
# ---------------------------------------------------------------------------

def _is_zero(x) -> bool:
    return isinstance(x, (int, float)) and x == 0


def _jadd(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return add(a, b)


def _jsub(a, b):
    if _is_zero(b):
        return a
    if _is_zero(a):
        return neg(b)
    return sub(a, b)


def _jmul(a, b):
    if _is_zero(a) or _is_zero(b):
        return 0.0
    return mul(a, b)


class Jet2:
    """Value plus first and second directional derivative at a point.

    Each coefficient is either a tape node or a plain array; ``d2`` may be
    ``None`` when the second order was not requested.  Constants lift to
    jets with d1 = d2 = 0.
    """

    __slots__ = ("val", "d1", "d2")

    def __init__(self, val, d1=0.0, d2=0.0):
        self.val = val
        self.d1 = d1
        self.d2 = d2

    def __repr__(self):
        return f"Jet2(val={self.val!r}, d1={self.d1!r}, d2={self.d2!r})"


def jet_const(value) -> Jet2:
    return Jet2(value, 0.0, 0.0)


def _pair(a, b):
    a = a if isinstance(a, Jet2) else jet_const(a)
    b = b if isinstance(b, Jet2) else jet_const(b)
    track2 = a.d2 is not None and b.d2 is not None
    return a, b, track2


def jet_add(a, b) -> Jet2:
    a, b, track2 = _pair(a, b)
    return Jet2(add(a.val, b.val), _jadd(a.d1, b.d1),
                _jadd(a.d2, b.d2) if track2 else None)


def jet_sub(a, b) -> Jet2:
    a, b, track2 = _pair(a, b)
    return Jet2(sub(a.val, b.val), _jsub(a.d1, b.d1),
                _jsub(a.d2, b.d2) if track2 else None)


def jet_neg(a: Jet2) -> Jet2:
    return Jet2(neg(a.val),
                0.0 if _is_zero(a.d1) else neg(a.d1),
                None if a.d2 is None else (0.0 if _is_zero(a.d2) else neg(a.d2)))


def jet_mul(a, b) -> Jet2:
    # Leibniz: (ab)'' = a''b + 2a'b' + ab''
    a, b, track2 = _pair(a, b)
    d1 = _jadd(_jmul(a.val, b.d1), _jmul(a.d1, b.val))
    d2 = None
    if track2:
        cross = _jmul(a.d1, b.d1)
        if not _is_zero(cross):
            cross = mul(2.0, cross)
        d2 = _jadd(_jadd(_jmul(a.d2, b.val), cross), _jmul(a.val, b.d2))
    return Jet2(mul(a.val, b.val), d1, d2)


def jet_div(a, b) -> Jet2:
    # From a = q*b: q' = (a' - q b')/b, q'' = (a'' - 2q'b' - q b'')/b
    a, b, track2 = _pair(a, b)
    q0 = div(a.val, b.val)
    q1 = div(_jsub(a.d1, _jmul(q0, b.d1)), b.val)
    q2 = None
    if track2:
        two_q1b1 = _jmul(q1, b.d1)
        if not _is_zero(two_q1b1):
            two_q1b1 = mul(2.0, two_q1b1)
        q2 = div(_jsub(_jsub(a.d2, two_q1b1), _jmul(q0, b.d2)), b.val)
    return Jet2(q0, q1, q2)


def _jet_chain(a: Jet2, f0, f1, f2) -> Jet2:
    """Faa di Bruno through a scalar map: f(a)'' = f''(a) a'^2 + f'(a) a''."""
    d1 = _jmul(f1, a.d1)
    d2 = None
    if a.d2 is not None:
        sq = _jmul(a.d1, a.d1)
        d2 = _jadd(_jmul(f2, sq), _jmul(f1, a.d2))
    return Jet2(f0, d1, d2)


def jet_sin(a) -> Jet2:
    a = a if isinstance(a, Jet2) else jet_const(a)
    s = sin(a.val)
    c = cos(a.val)
    return _jet_chain(a, s, c, neg(s) if is_var(s) else -s)


def jet_cos(a) -> Jet2:
    a = a if isinstance(a, Jet2) else jet_const(a)
    s = sin(a.val)
    c = cos(a.val)
    return _jet_chain(a, c, neg(s) if is_var(s) else -s, neg(c) if is_var(c) else -c)


def jet_exp(a) -> Jet2:
    a = a if isinstance(a, Jet2) else jet_const(a)
    e = exp(a.val)
    return _jet_chain(a, e, e, e)


def jet_tanh(a) -> Jet2:
    a = a if isinstance(a, Jet2) else jet_const(a)
    t = tanh(a.val)
    one_m_t2 = sub(1.0, mul(t, t)) if is_var(t) else 1.0 - t * t
    f2 = mul(-2.0, mul(t, one_m_t2)) if is_var(t) else -2.0 * t * one_m_t2
    return _jet_chain(a, t, one_m_t2, f2)


def jet_pow(a, p: float) -> Jet2:
    a = a if isinstance(a, Jet2) else jet_const(a)
    f0 = power(a.val, p)
    f1 = mul(p, power(a.val, p - 1)) if is_var(a.val) else p * value_of(a.val) ** (p - 1)
    f2 = (mul(p * (p - 1), power(a.val, p - 2)) if is_var(a.val)
          else p * (p - 1) * value_of(a.val) ** (p - 2))
    return _jet_chain(a, f0, f1, f2)


_JET_UNARY = {
    "neg": jet_neg,
    "sin": jet_sin,
    "cos": jet_cos,
    "exp": jet_exp,
    "tanh": jet_tanh,
}
_JET_BINARY = {
    "add": jet_add,
    "sub": jet_sub,
    "mul": jet_mul,
    "div": jet_div,
}


def jet2_apply(op: str, *args):
    """Apply a named primitive to jets (propagating both derivative orders)."""
    if op in _JET_UNARY:
        (a,) = args
        return _JET_UNARY[op](a)
    if op in _JET_BINARY:
        a, b = args
        return _JET_BINARY[op](a, b)
    if op == "pow":
        a, p = args
        return jet_pow(a, p)
    raise DiffError(f"unknown jet primitive {op!r}")
