"""Dense float tensors with a reverse-mode autodiff tape.

Values are stored in float32 by default (float64 is available for gradient
checking); every kernel computes in float64 and rounds once on output, so
reductions are stable and results are bit-deterministic for a fixed input.
Gradients accumulate sum-into, never overwrite. Tensors that participate in
a tape are treated as immutable.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "backward",
    "stop_gradient",
    "concat",
    "matmul",
    "softmax",
    "conv2d",
    "upsample2x",
    "set_nan_check",
    "nan_check_enabled",
    "OP_NAMES",
]

# Registered differentiable primitives, used by the gradient-check suite.
OP_NAMES = (
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sqrt",
    "sigmoid", "silu", "normalize", "matmul", "reshape", "transpose", "sum",
    "mean", "softmax", "concat", "slice", "conv2d", "upsample2x",
)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf while finite checking was enabled."""


class TapeError(RuntimeError):
    """backward() called on a loss that is not live on a tape."""


_NAN_CHECK = os.environ.get("ANYI2V_DEBUG_NANCHECK", "0") == "1"


def set_nan_check(enabled: bool) -> None:
    global _NAN_CHECK
    _NAN_CHECK = bool(enabled)


def nan_check_enabled() -> bool:
    return _NAN_CHECK


class _Node:
    __slots__ = ("out", "pairs", "name")

    def __init__(self, out: "Tensor", pairs, name: str):
        self.out = out
        self.pairs = pairs  # list of (input Tensor, vjp: grad64 -> grad64)
        self.name = name


class Tape:
    """Ordered record of ops; execution order is the topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        assert _TAPES.pop() is self


_TAPES: list[Tape] = []


class Tensor:
    """Dense N-d array of reals, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def softmax(self, axis=-1):
        return softmax(self, axis=axis)

    def stop_gradient(self):
        return stop_gradient(self)

    def backward(self):
        backward(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _result_dtype(*tensors: Tensor):
    for t in tensors:
        if t.data.dtype == np.float64:
            return np.float64
    return np.float32


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _make(out64: np.ndarray, dtype, name: str) -> Tensor:
    out = Tensor(out64, dtype=dtype)
    if _NAN_CHECK and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by op '{name}'")
    return out


def _record(name: str, out: Tensor, pairs) -> Tensor:
    """Attach a node to the innermost tape when any input carries grad."""
    if _TAPES and any(inp.requires_grad for inp, _ in pairs):
        tape = _TAPES[-1]
        tape.nodes.append(_Node(out, [(i, f) for i, f in pairs], name))
        out.requires_grad = True
        out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss; consumes the tape it lives on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() expects a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or tape.consumed or not any(n.out is loss for n in tape.nodes):
        raise TapeError("loss is detached: not produced under an active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(n.out) for n in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        for inp, vjp in node.pairs:
            if not inp.requires_grad:
                continue
            gi = vjp(g)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = inp
    # Whatever is left was never produced by a node: the leaves.
    for key, g in grads.items():
        leaf = holders[key]
        if key in produced:
            continue
        g = g.astype(leaf.data.dtype)
        if leaf.grad is None:
            leaf.grad = g
        else:
            leaf.grad = leaf.grad + g
    tape.nodes.clear()
    tape.consumed = True


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical copy that blocks gradient flow."""
    return Tensor(x.data.copy())


# -- elementwise ------------------------------------------------------------


def _broadcast_b(a: Tensor, b: Tensor) -> np.ndarray:
    """Trailing-dimension broadcast of b up to a's shape; a never changes shape."""
    if a.shape == b.shape:
        return _f64(b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}") from None
    if out_shape != a.shape:
        raise ShapeError(f"broadcast of {b.shape} would change shape {a.shape} to {out_shape}")
    return np.broadcast_to(_f64(b), a.shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(name, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    b = _wrap(b, a)
    a64 = _f64(a)
    b64 = _broadcast_b(a, b)
    out = _make(fwd(a64, b64), _result_dtype(a, b), name)
    if not (_TAPES and (a.requires_grad or b.requires_grad)):
        return out
    return _record(name, out, [
        (a, lambda g, a64=a64, b64=b64: vjp_a(g, a64, b64)),
        (b, lambda g, a64=a64, b64=b64: _unbroadcast(vjp_b(g, a64, b64), b.shape)),
    ])


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def _unary(name, x, fwd, vjp) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    x64 = _f64(x)
    out64 = fwd(x64)
    out = _make(out64, x.data.dtype, name)
    if not (_TAPES and x.requires_grad):
        return out
    return _record(name, out, [(x, lambda g, x64=x64, out64=out64: vjp(g, x64, out64))])


def neg(x) -> Tensor:
    return _unary("neg", x, lambda v: -v, lambda g, v, o: -g)


def power(x, p: float) -> Tensor:
    p = float(p)
    return _unary("pow", x, lambda v: v ** p, lambda g, v, o: g * p * v ** (p - 1.0))


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x) -> Tensor:
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def sqrt(x) -> Tensor:
    return _unary("sqrt", x, np.sqrt, lambda g, v, o: g * 0.5 / o)


def sigmoid(x) -> Tensor:
    return _unary("sigmoid", x, _sigmoid64, lambda g, v, o: g * o * (1.0 - o))


def _sigmoid64(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def silu(x) -> Tensor:
    def vjp(g, v, o):
        s = _sigmoid64(v)
        return g * (s + v * s * (1.0 - s))

    return _unary("silu", x, lambda v: v * _sigmoid64(v), vjp)


def normalize(x: Tensor, axis, eps: float = 1e-5,
              gamma: "Tensor | None" = None, beta: "Tensor | None" = None) -> Tensor:
    """Zero-mean unit-variance standardization along the given axes.

    Optional gamma/beta apply a trailing-broadcast affine map to the result.
    """
    axes = _norm_axis(axis, x.ndim)
    x64 = _f64(x)
    mu = x64.mean(axis=axes, keepdims=True)
    var = x64.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    u64 = (x64 - mu) * inv
    y64 = u64
    g64 = None
    if gamma is not None:
        g64 = _broadcast_b(x, gamma)
        y64 = u64 * g64
    if beta is not None:
        y64 = y64 + _broadcast_b(x, beta)
    out = _make(y64, x.data.dtype, "normalize")
    needs = _TAPES and (x.requires_grad
                        or (gamma is not None and gamma.requires_grad)
                        or (beta is not None and beta.requires_grad))
    if not needs:
        return out

    def vjp_x(g):
        du = g if g64 is None else g * g64
        dm = du.mean(axis=axes, keepdims=True)
        dy = (du * u64).mean(axis=axes, keepdims=True)
        return (du - dm - u64 * dy) * inv

    pairs = [(x, vjp_x)]
    if gamma is not None:
        pairs.append((gamma, lambda g: _unbroadcast(g * u64, gamma.shape)))
    if beta is not None:
        pairs.append((beta, lambda g: _unbroadcast(g, beta.shape)))
    return _record("normalize", out, pairs)


# -- shape ops --------------------------------------------------------------


def reshape(x: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = x.shape
    out = _make(_f64(x).reshape(shape), x.data.dtype, "reshape")
    return _record("reshape", out, [(x, lambda g: g.reshape(old))])


def transpose(x: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = np.argsort(axes)
    out = _make(_f64(x).transpose(axes).copy(), x.data.dtype, "transpose")
    return _record("transpose", out, [(x, lambda g: g.transpose(inv))])


def tslice(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing with a scatter backward."""
    out64 = _f64(x)[key]
    out = _make(out64.copy(), x.data.dtype, "slice")

    def vjp(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[key] = g
        return full

    return _record("slice", out, [(x, vjp)])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out64 = np.concatenate([_f64(t) for t in tensors], axis=axis)
    out = _make(out64, _result_dtype(*tensors), "concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return _record("concat", out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


# -- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out64 = _f64(x).sum(axis=axes, keepdims=keepdims)
    out = _make(out64, x.data.dtype, "sum")
    shape = x.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g):
        return np.broadcast_to(g.reshape(kshape), shape).copy()

    return _record("sum", out, [(x, vjp)])


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out64 = _f64(x).mean(axis=axes, keepdims=keepdims)
    out = _make(out64, x.data.dtype, "mean")
    shape = x.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g):
        return np.broadcast_to(g.reshape(kshape) / count, shape).copy()

    return _record("mean", out, [(x, vjp)])


# -- matmul / softmax -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    a64, b64 = _f64(a), _f64(b)
    out = _make(np.matmul(a64, b64), _result_dtype(a, b), "matmul")

    def vjp_a(g):
        ga = np.matmul(g, b64.swapaxes(-1, -2))
        return _unbroadcast(ga, a.shape)

    def vjp_b(g):
        gb = np.matmul(a64.swapaxes(-1, -2), g)
        return _unbroadcast(gb, b.shape)

    return _record("matmul", out, [(a, vjp_a), (b, vjp_b)])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x64 = _f64(x)
    shifted = x64 - x64.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y64 = e / e.sum(axis=axis, keepdims=True)
    out = _make(y64, x.data.dtype, "softmax")

    def vjp(g):
        return y64 * (g - (g * y64).sum(axis=axis, keepdims=True))

    return _record("softmax", out, [(x, vjp)])


# -- structured ops for the backbone ---------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 2-D convolution, x [B,C,H,W], w [O,C,kh,kw]."""
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d supports odd kernel sizes only")
    ph, pw = kh // 2, kw // 2
    x64 = _f64(x)
    xp = np.pad(x64, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, H * W, C * kh * kw)
    wflat = _f64(w).reshape(O, C * kh * kw)
    out64 = np.matmul(cols, wflat.T)
    if b is not None:
        out64 = out64 + _f64(b)[None, None, :]
    out64 = out64.transpose(0, 2, 1).reshape(B, O, H, W)
    out = _make(out64, _result_dtype(x, w), "conv2d")

    def vjp_x(g):
        gflat = g.reshape(B, O, H * W).transpose(0, 2, 1)
        dcols = np.matmul(gflat, wflat)  # [B, HW, C*kh*kw]
        dcols = dcols.reshape(B, H, W, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + H, j:j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, ph:ph + H, pw:pw + W]

    def vjp_w(g):
        gflat = g.reshape(B, O, H * W)
        dw = np.einsum("bot,btk->ok", gflat, cols)
        return dw.reshape(O, C, kh, kw)

    pairs = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        pairs.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _record("conv2d", out, pairs)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of [B,C,H,W]."""
    B, C, H, W = x.shape
    out64 = np.repeat(np.repeat(_f64(x), 2, axis=2), 2, axis=3)
    out = _make(out64, x.data.dtype, "upsample2x")

    def vjp(g):
        return g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))

    return _record("upsample2x", out, [(x, vjp)])


def avg_pool2x(x: Tensor) -> Tensor:
    """Composite 2x average pooling via reshape + mean."""
    B, C, H, W = x.shape
    r = reshape(x, B, C, H // 2, 2, W // 2, 2)
    return tmean(r, axis=(3, 5))
