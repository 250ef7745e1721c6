"""Dense float64 tensors with a reverse-mode gradient tape.

Arrays are plain numpy float64 in row-major order. Every differentiable
operation appends a node to the active tape; backward() walks the tape in
reverse to fill .grad buffers. No tape active (or no input needing a
gradient) means the op runs as plain array math.
"""

from __future__ import annotations

import warnings

import numpy as np

# When True, every op validates that its inputs are finite. Off by default:
# the fragile ops (softmax, layer_norm, cross_entropy) always check.
CHECK_FINITE_ALL = False

_SQRT_2_OVER_PI = 0.7978845608028654
_GELU_C = 0.044715


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(ValueError):
    def __init__(self, op, name=None):
        who = f" in tensor '{name}'" if name else ""
        super().__init__(f"{op}: non-finite values{who}")
        self.op = op
        self.tensor_name = name


class Tensor:
    """A named float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "produced")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.produced = False  # set when a tape node outputs this tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def needs_grad(self):
        return self.requires_grad or self.produced

    def accumulate_grad(self, g):
        if self.grad is None:
            # copy: g may alias another tensor's grad buffer
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn", "forward_fn")

    def __init__(self, op, inputs, output, backward_fn, forward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn  # backward_fn(grad_out) -> tuple of input grads (or None)
        self.forward_fn = forward_fn    # forward_fn(*input arrays) -> output array


class GradientTape:
    """Ordered record of primitive ops; insertion order is topological."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def replay(self, verify=True):
        """Re-run every recorded op on current input data.

        With verify=True, raises if any recomputed output differs bitwise
        from the recorded one (ops are deterministic, so it must not).
        """
        outputs = []
        for node in self.nodes:
            out = node.forward_fn(*(t.data for t in node.inputs))
            if verify and not np.array_equal(out, node.output.data):
                raise AssertionError(f"replay mismatch in op '{node.op}'")
            outputs.append(out)
        return outputs


_TAPES: list[GradientTape] = []


def active_tape():
    return _TAPES[-1] if _TAPES else None


def record():
    """Open a fresh tape: `with record() as tape: ... backward(tape, loss)`."""
    return GradientTape()


def _check_finite(op, *tensors):
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(op, t.name)


def _emit(op, inputs, out_data, backward_fn, forward_fn):
    """Wrap op output; record a node when a tape is active and grads flow."""
    if CHECK_FINITE_ALL:
        _check_finite(op, *inputs)
    tape = active_tape()
    if tape is not None and any(t.needs_grad() for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        out.produced = True
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn, forward_fn))
        return out
    return Tensor(out_data)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    out = ad @ bd

    def backward(g):
        ga = gb = None
        if a.needs_grad():
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.needs_grad():
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _apply("matmul", (a, b), out, backward, lambda x, y: x @ y)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.data.shape, b.data.shape) from None

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.needs_grad() else None
        gb = _unbroadcast(g, b.data.shape) if b.needs_grad() else None
        return ga, gb

    return _apply("add", (a, b), out, backward, lambda x, y: x + y)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.data.shape, b.data.shape) from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.needs_grad() else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.needs_grad() else None
        return ga, gb

    return _apply("mul", (a, b), out, backward, lambda x, y: x * y)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g):
        return (g * s if a.needs_grad() else None,)

    return _apply("scale", (a,), out, backward, lambda x: x * s)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - t * t) if a.needs_grad() else None,)

    return _apply("tanh", (a,), t, backward, np.tanh)


def _gelu_parts(x):
    x2 = x * x
    inner = x2 * _GELU_C
    inner += 1.0
    inner *= x
    inner *= _SQRT_2_OVER_PI
    t = np.tanh(inner)
    out = t + 1.0
    out *= x
    out *= 0.5
    return out, t, x2


def _gelu_forward(x):
    return _gelu_parts(x)[0]


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    x = a.data
    out, t, x2 = _gelu_parts(x)

    def backward(g):
        if not a.needs_grad():
            return (None,)
        # dx = 0.5 (1 + t) + x (1 - t^2) * 0.5 * s (1 + 3 c x^2)
        dinner = x2 * (1.5 * _GELU_C * _SQRT_2_OVER_PI)
        dinner += 0.5 * _SQRT_2_OVER_PI
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        dinner *= sech2
        dinner *= x
        dx = t * 0.5
        dx += 0.5
        dx += dinner
        dx *= g
        return (dx,)

    return _apply("gelu", (a,), out, backward, _gelu_forward)


def _softmax_forward(x):
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    _check_finite("softmax", a)
    s = _softmax_forward(a.data)

    def backward(g):
        if not a.needs_grad():
            return (None,)
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _apply("softmax", (a,), s, backward, _softmax_forward)


def _layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return gamma * (xc / np.sqrt(var + eps)) + beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis with population variance, then affine."""
    _check_finite("layer_norm", x)
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        gx = gg = gb = None
        if gamma.needs_grad():
            gg = _unbroadcast(g * xhat, gamma.data.shape)
        if beta.needs_grad():
            gb = _unbroadcast(g, beta.data.shape)
        if x.needs_grad():
            dxhat = g * gamma.data
            t1 = dxhat.sum(axis=-1, keepdims=True)
            t2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            t1 /= d
            t2 /= d
            dxhat -= t1
            dxhat -= xhat * t2
            dxhat *= inv_std
            gx = dxhat
        return gx, gg, gb

    return _apply(
        "layer_norm", (x, gamma, beta), out, backward,
        lambda xv, gv, bv: _layer_norm_forward(xv, gv, bv, eps),
    )


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by an integer index array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding: id out of range [0, {table.data.shape[0]}), got "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = table.data[ids]

    def backward(g):
        if not table.needs_grad():
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _apply("embedding", (table,), out, backward, lambda t: t[ids])


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape) if a.needs_grad() else None,)

    return _apply("reshape", (a,), out, backward, lambda x: x.reshape(shape))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def backward(g):
        return (np.transpose(g, inv) if a.needs_grad() else None,)

    return _apply("transpose", (a,), out, backward, lambda x: np.transpose(x, axes))


def select_pos(a: Tensor, index: int) -> Tensor:
    """Pick one position along axis 1 of a (B, L, ...) tensor."""
    out = a.data[:, index].copy()

    def backward(g):
        if not a.needs_grad():
            return (None,)
        ga = np.zeros_like(a.data)
        ga[:, index] = g
        return (ga,)

    return _apply("select_pos", (a,), out, backward, lambda x: x[:, index].copy())


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def backward(g):
        return (np.broadcast_to(g, a.data.shape).copy() if a.needs_grad() else None,)

    return _apply("sum", (a,), np.asarray(out), backward, lambda x: np.asarray(x.sum()))


def _cross_entropy_forward(logits, targets):
    m = logits.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    return lse - logits[np.arange(logits.shape[0]), targets]


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of the target class (2-class here)."""
    _check_finite("cross_entropy", logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError("cross_entropy", logits.data.shape, targets.shape)
    out = _cross_entropy_forward(logits.data, targets)
    rows = np.arange(logits.data.shape[0])

    def backward(g):
        if not logits.needs_grad():
            return (None,)
        p = _softmax_forward(logits.data)
        p[rows, targets] -= 1.0
        return (p * g[:, None],)

    return _apply(
        "cross_entropy", (logits,), out, backward,
        lambda lg: _cross_entropy_forward(lg, targets),
    )


def log(a: Tensor) -> Tensor:
    """Natural log; rejects non-positive inputs outright."""
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log", a.name)
    out = np.log(a.data)

    def backward(g):
        return (g / a.data if a.needs_grad() else None,)

    return _apply("log", (a,), out, backward, np.log)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through only inside the interval."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside if a.needs_grad() else None,)

    return _apply("clamp", (a,), out, backward, lambda x: np.clip(x, lo, hi))


def _apply(op, inputs, out_data, backward, forward_fn):
    def backward_fn(grad_out):
        grads = backward(grad_out)
        for t, g in zip(inputs, grads):
            if g is not None:
                t.accumulate_grad(g)

    return _emit(op, inputs, out_data, backward_fn, forward_fn)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b, flattening leading dims so BLAS sees one big matmul."""
    lead = x.data.shape[:-1]
    x2 = reshape(x, (-1, x.data.shape[-1])) if x.data.ndim != 2 else x
    y = add(matmul(x2, w), b)
    if x.data.ndim != 2:
        y = reshape(y, lead + (w.data.shape[-1],))
    return y


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout driven by a caller-owned generator."""
    if rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep) / keep
    return mul(x, constant(mask, name="dropout_mask"))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: GradientTape, loss: Tensor) -> None:
    """Fill .grad for every tensor on the path from tape leaves to `loss`."""
    if loss.data.size != 1:
        raise ShapeError("backward: loss must be scalar", loss.data.shape)
    loss.grad = np.ones_like(loss.data)
    touched = 0
    for node in reversed(tape.nodes):
        if node.output.grad is None:
            continue
        touched += 1
        node.backward_fn(node.output.grad)
    if touched == 0 and tape.nodes:
        warnings.warn("backward: loss is detached from the recorded graph; "
                      "gradients set to zero", RuntimeWarning)
        for node in tape.nodes:
            for t in node.inputs:
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.data)
