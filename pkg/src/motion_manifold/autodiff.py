"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Only the operations the motion model needs are provided. Every op appends a
node to the tape in execution order; :meth:`Tape.backward` walks the nodes in
reverse insertion order exactly once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """Raised when an op produces NaN or inf."""

    def __init__(self, op: str):
        super().__init__(f"op '{op}' produced non-finite values")
        self.op = op


class ContractError(RuntimeError):
    pass


@dataclass
class _Node:
    op: str
    inputs: tuple
    backward: Callable | None


class Var:
    __slots__ = ("tape", "id", "value", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, tape, id, value, requires_grad, name=None):
        self.tape = tape
        self.id = id
        self.value = value
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, id={self.id})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Ordered record of ops; one forward/backward episode per tape."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite

    def _push(self, op, inputs, value, backward, requires_grad, name=None) -> Var:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(op)
        var = Var(self, len(self.nodes), value, requires_grad, name)
        self.nodes.append(_Node(op, tuple(v.id for v in inputs), backward if requires_grad else None))
        return var

    def var(self, value, name=None, requires_grad=True) -> Var:
        """Register a leaf (a parameter or an input)."""
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(float)
        return self._push("leaf", (), value, None, requires_grad, name)

    def constant(self, value, name=None) -> Var:
        return self.var(value, name=name, requires_grad=False)

    def record(self, op: str, inputs, value, backward) -> Var:
        """Append a custom op. ``backward(g)`` returns one gradient (or None) per input."""
        rg = any(v.requires_grad for v in inputs)
        return self._push(op, inputs, value, backward, rg)

    def backward(self, loss: Var) -> "Gradients":
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.id] = np.ones_like(loss.value)
        for i in range(loss.id, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return Gradients(grads)


class Gradients:
    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._grads[var.id]
        return np.zeros_like(var.value) if g is None else g

    def collect(self, leaves: dict) -> dict:
        return {k: self[v] for k, v in leaves.items()}


def _as_var(x, like: Var) -> Var:
    return x if isinstance(x, Var) else like.tape.constant(np.asarray(x, dtype=like.value.dtype))


def _pair(a, b):
    if isinstance(a, Var):
        return a, _as_var(b, a)
    if isinstance(b, Var):
        return _as_var(a, b), b
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Var:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record("add", (a, b), a.value + b.value,
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record("sub", (a, b), a.value - b.value,
                         lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record("mul", (a, b), av * bv,
                         lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(x: Var, c: float) -> Var:
    return x.tape.record("scale", (x,), x.value * c, lambda g: (g * c,))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape.record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Var) -> Var:
    y = _sigmoid(x.value)
    return x.tape.record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape.record("relu", (x,), np.where(mask, x.value, 0.0), lambda g: (g * mask,))


def leaky_relu(x: Var, slope: float = 0.2) -> Var:
    d = np.where(x.value > 0, 1.0, slope)
    return x.tape.record("leaky_relu", (x,), x.value * d, lambda g: (g * d,))


def abs(x: Var) -> Var:  # noqa: A001 - mirrors numpy naming
    s = np.sign(x.value)
    return x.tape.record("abs", (x,), np.abs(x.value), lambda g: (g * s,))


def reciprocal(x: Var) -> Var:
    y = 1.0 / x.value
    return x.tape.record("reciprocal", (x,), y, lambda g: (-g * y * y,))


def dropout(x: Var, rate: float, train: bool, rng: np.random.Generator | None = None) -> Var:
    """Inverted dropout. Identity when ``train`` is false or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x.tape.record("dropout", (x,), x.value * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra and shape


def matmul(a, b) -> Var:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def concat(xs, axis: int = -1) -> Var:
    xs = list(xs)
    ref = xs[0] if isinstance(xs[0], Var) else next(x for x in xs if isinstance(x, Var))
    xs = [_as_var(x, ref) for x in xs]
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[x.shape for x in xs]} along axis {axis}: {e}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return ref.tape.record("concat", xs, value, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis: int = 0) -> Var:
    xs = list(xs)
    try:
        value = np.stack([x.value for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {[x.shape for x in xs]}: {e}") from None
    n = len(xs)
    return xs[0].tape.record(
        "stack", xs, value,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def take(x: Var, index) -> Var:
    """Basic (slice/int) indexing."""
    shape = x.shape
    try:
        value = x.value[index]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {shape}") from None

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return x.tape.record("slice", (x,), value, back)


def reshape(x: Var, shape) -> Var:
    old = x.shape
    try:
        value = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return x.tape.record("reshape", (x,), value, lambda g: (g.reshape(old),))


def transpose(x: Var, axes) -> Var:
    inv = np.argsort(axes)
    return x.tape.record("transpose", (x,), np.transpose(x.value, axes), lambda g: (np.transpose(g, inv),))


def flip(x: Var, axis: int) -> Var:
    return x.tape.record("flip", (x,), np.flip(x.value, axis=axis), lambda g: (np.flip(g, axis=axis),))


# ---------------------------------------------------------------- reductions


def sum(x: Var, axis=None) -> Var:  # noqa: A001
    shape = x.shape
    value = np.sum(x.value, axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.record("sum", (x,), np.asarray(value), back)


def mean(x: Var, axis=None) -> Var:
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis), 1.0 / n)


def sum_sq(x: Var) -> Var:
    xv = x.value
    return x.tape.record("sum_sq", (x,), np.asarray(np.sum(xv * xv)), lambda g: (2.0 * g * xv,))


def norm(x: Var, axis: int = -1) -> Var:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    xv = x.value
    n = np.sqrt(np.sum(xv * xv, axis=axis))
    safe = np.where(n > 0, n, 1.0)

    def back(g):
        return (np.expand_dims(g / safe * (n > 0), axis) * xv,)

    return x.tape.record("norm", (x,), n, back)


def pairwise_sqdist(x: Var, y: Var) -> Var:
    """Matrix of squared distances between rows of ``x`` (n, d) and ``y`` (m, d)."""
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"pairwise_sqdist: incompatible shapes {x.shape} and {y.shape}")
    xv, yv = x.value, y.value
    diff = xv[:, None, :] - yv[None, :, :]
    value = np.sum(diff * diff, axis=-1)

    def back(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return x.tape.record("pairwise_sqdist", (x, y), value, back)


# ---------------------------------------------------------------- recurrent cell


def _gru_forward(xv, hv, Wv, Uv, bv, bhn):
    H = hv.shape[-1]
    ax = xv @ Wv + bv
    ah = hv @ Uv
    r = _sigmoid(ax[:, :H] + ah[:, :H])
    u = _sigmoid(ax[:, H:2 * H] + ah[:, H:2 * H])
    hn = ah[:, 2 * H:] + bhn
    n = np.tanh(ax[:, 2 * H:] + r * hn)
    return (1.0 - u) * n + u * hv, (r, u, n, hn)


def gru_cell(x: Var, h: Var, W: Var, U: Var, b: Var, b_hn: Var) -> Var:
    """One GRU step with the reset gate applied to the recurrent candidate term.

    Shapes: x (B, I), h (B, H), W (I, 3H), U (H, 3H), b (3H,), b_hn (H,).
    Gate blocks are ordered [reset, update, candidate].
    """
    B, I = x.shape
    H = h.shape[-1]
    if h.shape != (B, H) or W.shape != (I, 3 * H) or U.shape != (H, 3 * H) \
            or b.shape != (3 * H,) or b_hn.shape != (H,):
        raise ShapeError(
            f"gru_cell: x{x.shape} h{h.shape} W{W.shape} U{U.shape} b{b.shape} b_hn{b_hn.shape} "
            f"inconsistent with input {I}, hidden {H}"
        )
    xv, hv, Wv, Uv = x.value, h.value, W.value, U.value
    h_new, (r, u, n, hn) = _gru_forward(xv, hv, Wv, Uv, b.value, b_hn.value)

    def back(g):
        dn = g * (1.0 - u)
        du = g * (hv - n)
        dan = dn * (1.0 - n * n)
        dr = dan * hn
        dhn = dan * r
        dar = dr * r * (1.0 - r)
        dau = du * u * (1.0 - u)
        dax = np.concatenate([dar, dau, dan], axis=1)
        dah = np.concatenate([dar, dau, dhn], axis=1)
        return (
            dax @ Wv.T,
            g * u + dah @ Uv.T,
            xv.T @ dax,
            hv.T @ dah,
            dax.sum(axis=0),
            dhn.sum(axis=0),
        )

    return x.tape.record("gru_cell", (x, h, W, U, b, b_hn), h_new, back)


# ---------------------------------------------------------------- convolution


def conv_out_length(length: int, kernel: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - kernel) // stride + 1


def _reflect_index(length: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, length + pad)
    idx = np.abs(idx)
    return np.where(idx >= length, 2 * (length - 1) - idx, idx)


def conv1d(x: Var, w: Var, b: Var | None = None, stride: int = 1, pad: int = 0) -> Var:
    """1-D convolution with reflect padding.

    x (B, C_in, L), w (C_out, C_in, K), b (C_out,) -> (B, C_out, L_out).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    B, C, L = x.shape
    K = w.shape[2]
    if pad >= L:
        raise ShapeError(f"conv1d: reflect padding {pad} needs length > {pad}, got {L}")
    L_out = conv_out_length(L, K, stride, pad)
    if L_out < 1:
        raise ShapeError(f"conv1d: length {L} too short for kernel {K}, stride {stride}, pad {pad}")
    idx = _reflect_index(L, pad)
    xp = x.value[:, :, idx]
    win = sliding_window_view(xp, K, axis=2)[:, :, : (L_out - 1) * stride + 1 : stride, :]
    wv = w.value
    out = np.einsum("bclk,ock->bol", win, wv, optimize=True)
    if b is not None:
        out = out + b.value[None, :, None]
    Lp = len(idx)

    def back(g):
        gw = np.einsum("bol,bclk->ock", g, win, optimize=True)
        gwin = np.einsum("bol,ock->bclk", g, wv, optimize=True)
        gxp = np.zeros((B, C, Lp), dtype=g.dtype)
        pos = np.arange(L_out) * stride
        for k in range(K):
            gxp[:, :, pos + k] += gwin[:, :, :, k]
        gx = np.zeros((B, C, L), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), idx), gxp)
        gb = None if b is None else g.sum(axis=(0, 2))
        return (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return x.tape.record("conv1d", inputs, out, lambda g: back(g)[: len(inputs)])


def batch_norm(x: Var, gamma: Var, beta: Var, running_mean=None, running_var=None, eps: float = 1e-5):
    """Per-channel normalization of x (B, C, L).

    With running statistics given, normalizes with them (evaluation mode);
    otherwise uses the batch statistics. Returns ``(y, batch_mean, batch_var)``
    where the batch statistics are None in evaluation mode.
    """
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xv, gv = x.value, gamma.value
    if running_mean is not None:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xv - running_mean[None, :, None]) * inv[None, :, None]

        def back(g):
            return (g * (gv * inv)[None, :, None], (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2)))

        y = x.tape.record("batch_norm", (x, gamma, beta), xhat * gv[None, :, None] + beta.value[None, :, None], back)
        return y, None, None

    m = xv.mean(axis=(0, 2))
    var = xv.var(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - m[None, :, None]) * inv[None, :, None]
    N = xv.shape[0] * xv.shape[2]

    def back(g):
        gxhat = g * gv[None, :, None]
        gx = (inv[None, :, None] / N) * (
            N * gxhat
            - gxhat.sum(axis=(0, 2))[None, :, None]
            - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
        )
        return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    y = x.tape.record("batch_norm", (x, gamma, beta), xhat * gv[None, :, None] + beta.value[None, :, None], back)
    return y, m, var


# ---------------------------------------------------------------- gradient checking


@dataclass
class BlockError:
    name: str
    max_rel_error: float
    n_checked: int
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tol: float
    blocks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.max_rel_error < self.tol for b in self.blocks)

    @property
    def worst(self) -> BlockError | None:
        return max(self.blocks, key=lambda b: b.max_rel_error, default=None)

    def failures(self) -> list:
        return [b for b in self.blocks if not b.max_rel_error < self.tol]

    def format(self) -> str:
        lines = [f"{'block':<28} {'max rel err':>12} {'checked':>8}"]
        for b in self.blocks:
            flag = "ok" if b.max_rel_error < self.tol else "FAIL"
            lines.append(f"{b.name:<28} {b.max_rel_error:12.3e} {b.n_checked:8d}  {flag}")
        w = self.worst
        if w is not None:
            lines.append(
                f"worst: {w.name}{list(w.worst_index)} rel={w.max_rel_error:.3e} "
                f"analytic={w.analytic:.6e} numeric={w.numeric:.6e}"
            )
        return "\n".join(lines)


def gradient_check(
    f: Callable,
    params: dict,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    atol: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f(tape, leaves)`` must build a scalar Var from the leaf dict. For large
    blocks, ``max_entries`` limits the check to a seeded random subset of
    entries. Relative error is ``|a - n| / max(|a|, |n|, atol)``.
    """
    for k, v in params.items():
        if np.asarray(v).dtype != np.float64:
            raise ValueError(f"gradient check needs float64 parameters; '{k}' is {np.asarray(v).dtype}")

    def evaluate(p):
        tape = Tape()
        leaves = {k: tape.var(v, name=k) for k, v in p.items()}
        return tape, leaves, f(tape, leaves)

    tape, leaves, loss = evaluate(params)
    _, _, again = evaluate(params)
    if not np.array_equal(loss.value, again.value):
        raise ContractError("function is not deterministic: two evaluations disagree")
    analytic = tape.backward(loss).collect(leaves)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, value in params.items():
        value = np.asarray(value)
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        worst = (0.0, (), 0.0, 0.0)
        for fi in flat_idx:
            idx = np.unravel_index(fi, value.shape)
            plus = dict(params)
            minus = dict(params)
            vp = value.copy()
            vm = value.copy()
            vp[idx] += step
            vm[idx] -= step
            plus[name] = vp
            minus[name] = vm
            num = float((evaluate(plus)[2].value - evaluate(minus)[2].value) / (2 * step))
            ana = float(analytic[name][idx])
            rel = np.abs(ana - num) / max(np.abs(ana), np.abs(num), atol)
            if rel >= worst[0]:
                worst = (rel, tuple(int(i) for i in idx), ana, num)
        report.blocks.append(BlockError(name, float(worst[0]), len(flat_idx), worst[1], worst[2], worst[3]))
    return report
