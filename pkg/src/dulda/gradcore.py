"""Minimal reverse-mode differentiation over numpy arrays.

Every primitive here accepts plain arrays/floats or :class:`Var` nodes.  With
no ``Var`` among the inputs a primitive simply returns the numpy result, so
the same numerical code runs untaped at full speed and taped when gradients
are wanted.  Taped primitives append a node (parents + vector-Jacobian
products) to the owning :class:`Tape`; :func:`backward` walks the tape once
in reverse recording order.

Derivatives of control flow (comparisons on values) are not propagated: any
branch decision is a constant of the recorded graph.
"""

import numpy as np

from dulda import kernels


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value):
        """Register a leaf (e.g. a parameter) and return its ``Var``."""
        return self._push(np.array(value, dtype=np.float64), ())

    def _push(self, value, parents):
        var = Var(value, self, len(self.nodes))
        self.nodes.append(parents)
        return var

    def record(self, value, parents):
        """Append a node; ``parents`` holds ``(input, vjp)`` pairs.

        Inputs that are not ``Var`` objects (constants) are dropped.
        """
        links = tuple((p.index, vjp) for p, vjp in parents if isinstance(p, Var))
        return self._push(np.asarray(value, dtype=np.float64), links)


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

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
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def value(x):
    """Numeric value of a ``Var`` or array-like."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def is_var(x):
    return isinstance(x, Var)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("inputs are recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(va, vb):
    try:
        return np.broadcast_shapes(va.shape, vb.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {va.shape} vs {vb.shape}") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    va, vb = value(a), value(b)
    _broadcast_check(va, vb)
    out = va + vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: _unbroadcast(g, va.shape)),
                             (b, lambda g: _unbroadcast(g, vb.shape))])


def sub(a, b):
    va, vb = value(a), value(b)
    _broadcast_check(va, vb)
    out = va - vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: _unbroadcast(g, va.shape)),
                             (b, lambda g: _unbroadcast(-g, vb.shape))])


def mul(a, b):
    va, vb = value(a), value(b)
    _broadcast_check(va, vb)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: _unbroadcast(g * vb, va.shape)),
                             (b, lambda g: _unbroadcast(g * va, vb.shape))])


def div(a, b):
    va, vb = value(a), value(b)
    _broadcast_check(va, vb)
    tape = _tape_of(a, b)
    if tape is not None and np.any(vb == 0):
        raise ZeroDivisionError("zero denominator inside a differentiated graph")
    out = va / vb
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: _unbroadcast(g / vb, va.shape)),
                             (b, lambda g: _unbroadcast(-g * out / vb, vb.shape))])


def scale(a, c):
    """Multiply by a constant scalar ``c``."""
    c = float(c)
    out = value(a) * c
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: g * c)])


def exp(a):
    out = np.exp(value(a))
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: g * out)])


def clip_min(a, lo=0.0):
    va = value(a)
    out = np.maximum(va, lo)
    tape = _tape_of(a)
    if tape is None:
        return out
    keep = va > lo
    return tape.record(out, [(a, lambda g: g * keep)])


# --- reductions and reshaping -----------------------------------------------

def sum(a):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    out = np.sum(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: np.broadcast_to(g, va.shape).copy())])


def dot(a, b):
    """Full inner product of two same-shaped arrays."""
    va, vb = value(a), value(b)
    if va.shape != vb.shape:
        raise ValueError(f"shape mismatch: {va.shape} vs {vb.shape}")
    out = np.vdot(va, vb)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: g * vb), (b, lambda g: g * va)])


def reshape(a, shape):
    va = value(a)
    out = va.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: g.reshape(va.shape))])


def take(a, index):
    va = value(a)
    out = np.array(va[index])
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, index, g)
        return full

    return tape.record(out, [(a, vjp)])


def rot90(a, k=1):
    out = np.rot90(value(a), k, axes=(-2, -1)).copy()
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: np.rot90(g, -k, axes=(-2, -1)).copy())])


# --- linear operators -------------------------------------------------------

def matvec_fixed(matrix, a, out_shape=None):
    """Apply a constant (sparse or dense) matrix to the flattened input."""
    va = value(a)
    out = matrix @ va.ravel()
    if out_shape is not None:
        out = out.reshape(out_shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: (matrix.T @ g.ravel()).reshape(va.shape))])


def conv2d(x, w):
    """'Same' cross-correlation of (Cin,H,W) input with (Cout,Cin,kh,kw) kernel."""
    vx, vw = value(x), value(w)
    if vx.ndim != 3 or vw.ndim != 4 or vx.shape[0] != vw.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {vx.shape}, kernel {vw.shape}")
    out = kernels.conv2d(vx, vw)
    tape = _tape_of(x, w)
    if tape is None:
        return out
    kh, kw = vw.shape[2:]
    return tape.record(out, [
        (x, lambda g: kernels.conv2d_transpose(g, vw)),
        (w, lambda g: kernels.conv2d_weight_grad(vx, g, kh, kw)),
    ])


def conv2d_transpose(y, w):
    """Adjoint of :func:`conv2d` in its input: (Cout,H,W) -> (Cin,H,W)."""
    vy, vw = value(y), value(w)
    if vy.ndim != 3 or vw.ndim != 4 or vy.shape[0] != vw.shape[0]:
        raise ValueError(f"conv2d_transpose shape mismatch: {vy.shape}, kernel {vw.shape}")
    out = kernels.conv2d_transpose(vy, vw)
    tape = _tape_of(y, w)
    if tape is None:
        return out
    kh, kw = vw.shape[2:]
    return tape.record(out, [
        (y, lambda g: kernels.conv2d(g, vw)),
        (w, lambda g: kernels.conv2d_weight_grad(g, vy, kh, kw)),
    ])


# --- activation and smoothing primitives ------------------------------------

def smoothed_relu_value(z, delta):
    z = np.asarray(z, dtype=np.float64)
    mid = z * z / (4.0 * delta) + 0.5 * z + 0.25 * delta
    return np.where(z <= -delta, 0.0, np.where(z >= delta, z, mid))


def smoothed_relu_slope(z, delta):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z <= -delta, 0.0, np.where(z >= delta, 1.0, z / (2.0 * delta) + 0.5))


def smoothed_relu_curvature(z, delta):
    z = np.asarray(z, dtype=np.float64)
    return np.where(np.abs(z) < delta, 1.0 / (2.0 * delta), 0.0)


def smoothed_relu(z, delta):
    """Quadratically smoothed ReLU with transition half-width ``delta``."""
    vz = value(z)
    out = smoothed_relu_value(vz, delta)
    tape = _tape_of(z)
    if tape is None:
        return out
    slope = smoothed_relu_slope(vz, delta)
    return tape.record(out, [(z, lambda g: g * slope)])


def smoothed_relu_grad(z, delta):
    """Derivative of :func:`smoothed_relu`, itself differentiable."""
    vz = value(z)
    out = smoothed_relu_slope(vz, delta)
    tape = _tape_of(z)
    if tape is None:
        return out
    curv = smoothed_relu_curvature(vz, delta)
    return tape.record(out, [(z, lambda g: g * curv)])


def channel_norm_value(g):
    return np.sqrt(np.sum(g * g, axis=0))


def huber_l21(g, eps):
    """Smoothed l2,1 norm of a (m,H,W) feature field, grouped over channels."""
    vg = value(g)
    n = channel_norm_value(vg)
    small = n <= eps
    out = np.sum(np.where(small, n * n / (2.0 * eps), n - 0.5 * eps))
    tape = _tape_of(g)
    if tape is None:
        return out
    denom = np.where(small, eps, n)
    return tape.record(out, [(g, lambda v: v * vg / denom)])


def huber_scale(g, eps):
    """Per-position feature rescaling ``g_i / max(|g_i|, eps)``.

    This is the gradient of :func:`huber_l21` with respect to the features.
    """
    vg = value(g)
    n = channel_norm_value(vg)
    small = n <= eps
    denom = np.where(small, eps, n)
    out = vg / denom
    tape = _tape_of(g)
    if tape is None:
        return out

    def vjp(v):
        radial = np.where(small, 0.0, np.sum(out * v, axis=0))
        return (v - out * radial) / denom

    return tape.record(out, [(g, vjp)])


# --- backward pass ----------------------------------------------------------

def backward(tape, output, wrt=None):
    """Reverse accumulation from a scalar ``output``.

    Returns a list of gradients aligned with ``wrt`` (zeros for inputs the
    output does not depend on), or the full per-node adjoint list when
    ``wrt`` is None.
    """
    if not isinstance(output, Var):
        # output does not depend on any recorded input
        if wrt is None:
            return []
        return [np.zeros_like(value(w)) for w in wrt]
    if output.tape is not tape:
        raise ValueError("output was not recorded on this tape")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.value.shape}")
    adj = [None] * (output.index + 1)
    adj[output.index] = np.ones_like(output.value)
    nodes = tape.nodes
    for idx in range(output.index, -1, -1):
        g = adj[idx]
        if g is None:
            continue
        for parent, vjp in nodes[idx]:
            contrib = vjp(g)
            if adj[parent] is None:
                adj[parent] = np.array(contrib, dtype=np.float64)
            else:
                adj[parent] = adj[parent] + contrib
    if wrt is None:
        return adj
    out = []
    for w in wrt:
        if isinstance(w, Var) and w.index < len(adj) and adj[w.index] is not None:
            out.append(adj[w.index].reshape(w.value.shape))
        else:
            out.append(np.zeros_like(value(w)))
    return out


def grad(fn, *args):
    """Convenience: value and gradients of scalar ``fn(*args)`` w.r.t. ``args``."""
    tape = Tape()
    vars_ = [tape.variable(a) for a in args]
    out = fn(*vars_)
    return value(out), backward(tape, out, vars_)
