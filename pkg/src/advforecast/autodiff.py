"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Var` together
with a closure computing the vector-Jacobian product.  ``backward`` sweeps
the tape in reverse, so nodes are topologically ordered by construction.

Every public op accepts plain arrays as well.  When none of the operands is a
``Var`` the op simply returns a numpy array, which lets the forecasting code
be written once and run either on a tape or at full numpy speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """An op was evaluated outside the domain of its primitive."""


class NonFiniteError(FloatingPointError):
    """A forward value or an accumulated gradient is not finite."""


class Tape:
    """Append-only record of primitive operations."""

    __slots__ = ("values", "parents", "vjps", "inputs")

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list = []
        self.inputs: list[int] = []

    def __len__(self):
        return len(self.values)

    def variable(self, value) -> "Var":
        """Declare an input whose gradient is wanted."""
        arr = np.array(value, dtype=np.float64)
        var = self._push(arr, (), None)
        self.inputs.append(var.index)
        return var

    def _push(self, value, parents, vjp) -> "Var":
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return Var(self, len(self.values) - 1, value)


class Var:
    __slots__ = ("tape", "index", "value")
    __array_priority__ = 100.0
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value_of(x):
    """Forward value of ``x`` as an array (strips the tape)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(tape, value, operands, grads_fn):
    """Push a node whose parents are the ``Var`` members of ``operands``.

    ``grads_fn(g)`` returns one gradient per operand (or None).
    """
    idx = tuple(i for i, a in enumerate(operands) if isinstance(a, Var))
    parents = tuple(operands[i].index for i in idx)

    def vjp(g):
        gs = grads_fn(g)
        return tuple(gs[i] for i in idx)

    return tape._push(value, parents, vjp)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    va, vb = value_of(a), value_of(b)
    out = va + vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(tape, out, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    out = va - vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(tape, out, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def neg(a):
    va = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return -va
    return _record(tape, -va, (a,), lambda g: (-g,))


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape, out, (a, b),
        lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
    )


def div(a, b):
    va, vb = value_of(a), value_of(b)
    if np.any(vb == 0):
        raise DomainError("division by zero")
    out = va / vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return _record(
        tape, out, (a, b),
        lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * out / vb, vb.shape)),
    )


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def grads(g):
        if va.ndim == 1 and vb.ndim == 1:
            return g * vb, g * va
        if vb.ndim == 1:
            return np.multiply.outer(g, vb), va.T @ g
        if va.ndim == 1:
            return vb @ g, np.multiply.outer(va, g)
        return g @ vb.T, va.T @ g

    return _record(tape, out, (a, b), grads)


# ----------------------------------------------------------- elementwise maps


def exp(a):
    va = value_of(a)
    out = np.exp(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g * out,))


def log(a):
    va = value_of(a)
    if np.any(va <= 0):
        raise DomainError("log of a non-positive value")
    out = np.log(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g / va,))


def sqrt(a):
    va = value_of(a)
    if np.any(va < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(va)
    tape = _tape_of(a)
    if tape is None:
        return out

    def grads(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _record(tape, out, (a,), grads)


def tanh(a):
    va = value_of(a)
    out = np.tanh(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v):
    # tanh form: no overflow in either tail and cheaper than exp + where
    out = np.tanh(0.5 * v)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a):
    va = value_of(a)
    out = _sigmoid(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a):
    va = value_of(a)
    out = va * va
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (2.0 * g * va,))


def maximum(a, b):
    """Elementwise max; the subgradient is 0 for both operands at ties."""
    va, vb = value_of(a), value_of(b)
    out = np.maximum(va, vb)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    ga = (va > vb).astype(np.float64)
    gb = (vb > va).astype(np.float64)
    return _record(
        tape, out, (a, b),
        lambda g: (_unbroadcast(g * ga, va.shape), _unbroadcast(g * gb, vb.shape)),
    )


def indicator(a, threshold=0.0, above=True):
    """1.0 where ``a >= threshold`` (``a <= threshold`` if not ``above``).

    Piecewise constant: the result is detached from the tape, which makes its
    gradient exactly zero everywhere including at the jump.
    """
    va = value_of(a)
    return (va >= threshold if above else va <= threshold).astype(np.float64)


def stop_gradient(a):
    return value_of(a)


# ------------------------------------------------------------------ reductions


def sum_(a, axis=None):
    va = value_of(a)
    out = np.sum(va, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return out

    def grads(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _record(tape, out, (a,), grads)


def mean(a, axis=None):
    va = value_of(a)
    n = va.size if axis is None else va.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def amax(a, axis=-1):
    """Max over ``axis``; the gradient goes to a unique argmax, 0 on ties."""
    return _extremum(a, axis, np.max)


def amin(a, axis=-1):
    return _extremum(a, axis, np.min)


def _extremum(a, axis, fn):
    va = value_of(a)
    out = fn(va, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return out
    hit = va == np.expand_dims(out, axis)
    unique = hit.sum(axis=axis, keepdims=True) == 1
    mask = (hit & unique).astype(np.float64)
    return _record(tape, out, (a,), lambda g: (np.expand_dims(g, axis) * mask,))


def cumsum(a, axis=-1):
    va = value_of(a)
    out = np.cumsum(va, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(
        tape, out, (a,),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),),
    )


def cumprod(a, axis=-1):
    """Cumulative product; the gradient assumes no zero factors."""
    va = value_of(a)
    out = np.cumprod(va, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return out
    if np.any(va == 0):
        raise DomainError("cumprod gradient needs non-zero factors")

    def grads(g):
        acc = np.flip(np.cumsum(np.flip(g * out, axis), axis=axis), axis)
        return (acc / va,)

    return _record(tape, out, (a,), grads)


def l2norm(a):
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    va = value_of(a)
    out = np.sqrt(np.sum(va * va))
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g * va / out if out > 0 else np.zeros_like(va),))


# ------------------------------------------------------------------- structure


def getitem(a, key):
    va = value_of(a)
    out = va[key]
    tape = _tape_of(a)
    if tape is None:
        return out

    def grads(g):
        full = np.zeros_like(va)
        np.add.at(full, key, g) if _is_fancy(key) else full.__setitem__(key, g)
        return (full,)

    return _record(tape, out, (a,), grads)


def _is_fancy(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def reshape(a, shape):
    va = value_of(a)
    out = va.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(tape, out, (a,), lambda g: (g.reshape(va.shape),))


def stack(items, axis=0):
    vals = [value_of(x) for x in items]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out
    return _record(
        tape, out, tuple(items),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(vals))),
    )


def concatenate(items, axis=0):
    vals = [value_of(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*items)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(tape, out, tuple(items), lambda g: tuple(np.split(g, bounds, axis=axis)))


def repeat_rows(a, repeats):
    """``np.repeat(a, repeats, axis=0)``: row ``p`` becomes rows ``p*r .. p*r+r-1``."""
    va = value_of(a)
    out = np.repeat(va, repeats, axis=0)
    tape = _tape_of(a)
    if tape is None:
        return out
    return _record(
        tape, out, (a,),
        lambda g: (g.reshape((va.shape[0], repeats) + va.shape[1:]).sum(axis=1),),
    )


# ------------------------------------------------------------- fused LSTM cell


def _gate_block(z, n):
    """In-place gate activations on a (rows, 4H) block: sigmoid, sigmoid, tanh, sigmoid."""
    sg = z[:, : 2 * n]
    sg *= 0.5
    np.tanh(sg, out=sg)
    sg *= 0.5
    sg += 0.5
    np.tanh(z[:, 2 * n : 3 * n], out=z[:, 2 * n : 3 * n])
    so = z[:, 3 * n :]
    so *= 0.5
    np.tanh(so, out=so)
    so *= 0.5
    so += 0.5


def _block_rows(n):
    # keep per-block temporaries cache-sized; the cell is memory bound otherwise
    return max(128, (1 << 16) // (4 * n))


def lstm_cell(x, h, c, w_in, w_hid, bias):
    """One LSTM step with gate order (input, forget, cell, output).

    Shapes: ``x`` (B, I), ``h`` and ``c`` (B, H), ``w_in`` (I, 4H),
    ``w_hid`` (H, 4H), ``bias`` (4H,).  Returns ``(h_new, c_new)``.
    """
    vx, vh, vc = value_of(x), value_of(h), value_of(c)
    wi, wh, vb = value_of(w_in), value_of(w_hid), value_of(bias)
    B, n = vh.shape
    if vx.shape[0] != B or vc.shape != vh.shape:
        raise ValueError("lstm_cell: mismatched batch shapes")
    tape = _tape_of(x, h, c, w_in, w_hid, bias)
    act = np.empty((B, 4 * n))
    both = np.empty((2, B, n))
    tc = np.empty((B, n)) if tape is not None else None
    step = _block_rows(n)
    for s in range(0, B, step):
        e = min(B, s + step)
        z = act[s:e]
        np.matmul(vx[s:e], wi, out=z)
        z += vh[s:e] @ wh
        z += vb
        _gate_block(z, n)
        cn = both[1, s:e]
        np.multiply(z[:, n : 2 * n], vc[s:e], out=cn)
        cn += z[:, :n] * z[:, 2 * n : 3 * n]
        hn = both[0, s:e]
        np.tanh(cn, out=hn)
        if tc is not None:
            tc[s:e] = hn
        hn *= z[:, 3 * n :]
    if tape is None:
        return both[0], both[1]

    def grads(g):
        gx, gh_prev, gc_prev = np.empty_like(vx), np.empty_like(vh), np.empty_like(vc)
        gwi, gwh, gb = np.zeros_like(wi), np.zeros_like(wh), np.zeros_like(vb)
        dz = np.empty((min(step, B), 4 * n))
        for s in range(0, B, step):
            e = min(B, s + step)
            a = act[s:e]
            i, f, gg, o = a[:, :n], a[:, n : 2 * n], a[:, 2 * n : 3 * n], a[:, 3 * n :]
            t = tc[s:e]
            gh, gcell = g[0, s:e], g[1, s:e]
            d = dz[: e - s]
            dc = gh * o
            dc *= 1.0 - t * t
            dc += gcell
            d[:, :n] = dc * gg * i * (1.0 - i)
            d[:, n : 2 * n] = dc * vc[s:e] * f * (1.0 - f)
            d[:, 2 * n : 3 * n] = dc * i * (1.0 - gg * gg)
            d[:, 3 * n :] = gh * t * o * (1.0 - o)
            np.matmul(d, wi.T, out=gx[s:e])
            np.matmul(d, wh.T, out=gh_prev[s:e])
            np.multiply(dc, f, out=gc_prev[s:e])
            gwi += vx[s:e].T @ d
            gwh += vh[s:e].T @ d
            gb += d.sum(axis=0)
        return gx, gh_prev, gc_prev, gwi, gwh, gb

    node = _record(tape, both, (x, h, c, w_in, w_hid, bias), grads)
    return node[0], node[1]


# ------------------------------------------------------------------- backward


class Gradients:
    """Accumulated partial derivatives of one output w.r.t. declared inputs."""

    def __init__(self, tape: Tape, adjoints: dict[int, np.ndarray]):
        self._tape = tape
        self._adj = adjoints

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._adj.get(var.index)
        if g is None:
            return np.zeros_like(var.value)
        return g

    def __contains__(self, var: Var) -> bool:
        return var.index in self._adj


def backward(output: Var, seed=1.0) -> Gradients:
    """Reverse accumulation of ``d output / d input * seed``."""
    tape = output.tape
    adj: list = [None] * len(tape.values)
    adj[output.index] = np.broadcast_to(np.asarray(seed, dtype=np.float64), output.value.shape).copy()
    for idx in range(output.index, -1, -1):
        g = adj[idx]
        vjp = tape.vjps[idx]
        if g is None or vjp is None:
            continue
        for parent, pg in zip(tape.parents[idx], vjp(g)):
            if pg is None:
                continue
            if adj[parent] is None:
                adj[parent] = pg
            else:
                adj[parent] = adj[parent] + pg
    leaves = {}
    for idx in tape.inputs:
        g = adj[idx]
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient reached input #{idx}")
        leaves[idx] = g
    return Gradients(tape, leaves)


def record(fn, *inputs):
    """Evaluate ``fn`` on fresh tape variables; returns ``(tape, output, vars)``."""
    tape = Tape()
    xs = [tape.variable(v) for v in inputs]
    out = fn(*xs)
    if not isinstance(out, Var):
        # output does not depend on any input
        out = tape._push(np.asarray(out, dtype=np.float64), (), None)
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("non-finite forward value")
    return tape, out, xs


def grad(fn, *inputs):
    """Value of scalar ``fn`` and its gradients w.r.t. each input."""
    tape, out, xs = record(fn, *inputs)
    grads = backward(out)
    return float(out.value), [grads[x] for x in xs]


@dataclass
class FDReport:
    max_rel_error: float
    analytic: list
    numeric: list

    def ok(self, tol):
        return self.max_rel_error <= tol


def finite_difference_check(fn, point, step=1e-5, floor=1e-8):
    """Compare reverse-mode gradients of scalar ``fn`` with central differences.

    ``point`` is a list of arrays (one per argument of ``fn``).  The relative
    error of a component is ``|a - n| / max(|a|, |n|, floor)``; components that
    are both exactly zero count as error 0.
    """
    point = [np.array(p, dtype=np.float64) for p in point]
    _, analytic = grad(fn, *point)
    numeric = []
    for k, p in enumerate(point):
        num = np.zeros_like(p)
        flat = num.reshape(-1)
        for j in range(p.size):
            up = [q.copy() for q in point]
            dn = [q.copy() for q in point]
            up[k].reshape(-1)[j] += step
            dn[k].reshape(-1)[j] -= step
            flat[j] = (float(fn(*up)) - float(fn(*dn))) / (2.0 * step)
        numeric.append(num)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        rel = np.where(diff == 0, 0.0, diff / scale)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return FDReport(worst, analytic, numeric)
