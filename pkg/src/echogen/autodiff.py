"""Minimal tensor engine: reverse-mode gradients plus forward-mode JVPs.

Tensors wrap numpy arrays (float64 by default) and record a call graph as
operations run. Reverse mode walks that graph backwards; forward mode threads
dual numbers (primal, tangent) through the same operations, so a JVP result is
itself reverse-differentiable unless wrapped in stop_gradient.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "DualTensor",
    "NonFiniteError",
    "ShapeError",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
    "set_finite_checks",
    "tensor",
    "parameter",
    "zeros_like",
    "stop_gradient",
    "backward",
    "grad",
    "jvp",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "pow_scalar",
    "exp",
    "log",
    "sin",
    "cos",
    "sigmoid",
    "silu",
    "matmul",
    "conv2d",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "getitem",
    "softmax_lastaxis",
]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf from its inputs."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_DTYPE = np.float64
_CHECK_FINITE = True
_tls = threading.local()


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DTYPE = dt.type


def get_default_dtype():
    return _DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _grad_enabled() -> bool:
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (thread-local)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls.grad_enabled = self._prev
        return False


def _assert_finite(data: np.ndarray, op: str) -> None:
    if not _CHECK_FINITE:
        return
    # Reduction trick: NaN/Inf anywhere poisons the sum. Cheaper than a full
    # isfinite pass; can only false-positive if legitimate values overflow
    # float range, which is already a broken state worth surfacing.
    s = data.sum()
    if not np.isfinite(s):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"op '{op}' produced non-finite values")


class Tensor:
    """Immutable-by-convention array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")
    __array_ufunc__ = None  # defer numpy binary ops to our reflected methods

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        _assert_finite(arr, "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar (definitions attached below, after the op functions)


class DualTensor:
    """Forward-mode pair: primal value plus tangent (None means zero)."""

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None

    def __init__(self, primal: Tensor, tangent):
        if tangent is not None and tangent.shape != primal.shape:
            raise ShapeError(
                f"tangent shape {tangent.shape} != primal shape {primal.shape}"
            )
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    def __repr__(self):
        return f"DualTensor(shape={self.shape}, tangent={'0' if self.tangent is None else 'set'})"


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _from_op(op: str, data: np.ndarray, parents, vjp) -> Tensor:
    _assert_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


def _coerce(x) -> Tensor:
    if isinstance(x, (Tensor, DualTensor)):
        return x
    return Tensor(x)


def _split(x):
    if isinstance(x, DualTensor):
        return x.primal, x.tangent
    return x, None


def _any_dual(*xs) -> bool:
    return any(isinstance(x, DualTensor) for x in xs)


def _accum(p: Tensor, g: np.ndarray) -> None:
    # accumulation rebinds rather than mutating, so views of upstream grads
    # are safe to hold
    if not p.requires_grad:
        return
    p.grad = g if p.grad is None else p.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    if _any_dual(a, b):
        ap, at = _split(_coerce(a))
        bp, bt = _split(_coerce(b))
        prim = add(ap, bp)
        if at is None and bt is None:
            tan = None
        elif at is None:
            tan = _match_shape(bt, prim)
        elif bt is None:
            tan = _match_shape(at, prim)
        else:
            tan = add(at, bt)
        return DualTensor(prim, tan)
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def vjp(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _from_op("add", out, (a, b), vjp)


def _match_shape(t: Tensor, like: Tensor) -> Tensor:
    # tangent of a broadcasting add must follow the broadcast output shape
    if t.shape == like.shape:
        return t
    return broadcast_to(t, like.shape)


def sub(a, b):
    if _any_dual(a, b):
        ap, at = _split(_coerce(a))
        bp, bt = _split(_coerce(b))
        prim = sub(ap, bp)
        if at is None and bt is None:
            tan = None
        elif at is None:
            tan = _match_shape(neg(bt), prim)
        elif bt is None:
            tan = _match_shape(at, prim)
        else:
            tan = sub(at, bt)
        return DualTensor(prim, tan)
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def vjp(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _from_op("sub", out, (a, b), vjp)


def neg(a):
    if _any_dual(a):
        ap, at = _split(a)
        return DualTensor(neg(ap), None if at is None else neg(at))
    a = _coerce(a)
    out = -a.data

    def vjp(g):
        _accum(a, -g)

    return _from_op("neg", out, (a,), vjp)


def mul(a, b):
    if _any_dual(a, b):
        ap, at = _split(_coerce(a))
        bp, bt = _split(_coerce(b))
        prim = mul(ap, bp)
        tan = None
        if at is not None:
            tan = mul(at, bp)
        if bt is not None:
            q = mul(ap, bt)
            tan = q if tan is None else add(tan, q)
        if tan is not None:
            tan = _match_shape(tan, prim)
        return DualTensor(prim, tan)
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def vjp(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _from_op("mul", out, (a, b), vjp)


def div(a, b):
    if _any_dual(a, b):
        ap, at = _split(_coerce(a))
        bp, bt = _split(_coerce(b))
        prim = div(ap, bp)
        tan = None
        if at is not None:
            tan = div(at, bp)
        if bt is not None:
            q = div(mul(prim, bt), bp)
            tan = neg(q) if tan is None else sub(tan, q)
        if tan is not None:
            tan = _match_shape(tan, prim)
        return DualTensor(prim, tan)
    a, b = _coerce(a), _coerce(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _from_op("div", out, (a, b), vjp)


def pow_scalar(a, e: float):
    """Elementwise a**e for a fixed real exponent."""
    if _any_dual(a):
        ap, at = _split(a)
        prim = pow_scalar(ap, e)
        if at is None:
            tan = None
        else:
            tan = mul(mul(pow_scalar(ap, e - 1.0), float(e)), at)
        return DualTensor(prim, tan)
    a = _coerce(a)
    out = a.data ** e

    def vjp(g):
        _accum(a, g * e * a.data ** (e - 1.0))

    return _from_op("pow", out, (a,), vjp)


def _unary(name, fwd, dual_rule):
    """Build a smooth unary op from a numpy forward and a tangent rule.

    dual_rule(ap, prim, at) returns the tangent expressed in graph ops, so
    forward-mode results stay reverse-differentiable.
    """

    def op(a):
        if _any_dual(a):
            ap, at = _split(a)
            prim = op(ap)
            tan = None if at is None else dual_rule(ap, prim, at)
            return DualTensor(prim, tan)
        a = _coerce(a)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = fwd(a.data)

        def vjp(g):
            # derivative recomputed on raw data; closures capture a and out
            _accum(a, g * _unary_grads[name](a.data, out))

        return _from_op(name, out, (a,), vjp)

    op.__name__ = name
    return op


_unary_grads = {
    "exp": lambda x, y: y,
    "log": lambda x, y: 1.0 / x,
    "sin": lambda x, y: np.cos(x),
    "cos": lambda x, y: -np.sin(x),
    "sigmoid": lambda x, y: y * (1.0 - y),
}

exp = _unary("exp", np.exp, lambda ap, prim, at: mul(prim, at))
log = _unary("log", np.log, lambda ap, prim, at: div(at, ap))
sin = _unary("sin", np.sin, lambda ap, prim, at: mul(cos(ap), at))
cos = _unary("cos", np.cos, lambda ap, prim, at: neg(mul(sin(ap), at)))
sigmoid = _unary(
    "sigmoid",
    lambda x: 1.0 / (1.0 + np.exp(-x)),
    lambda ap, prim, at: mul(mul(prim, sub(1.0, prim)), at),
)


def silu(a):
    """x * sigmoid(x): smooth gating nonlinearity, differentiable everywhere."""
    return mul(a, sigmoid(a))


def tsum(a, axis=None, keepdims: bool = False):
    if _any_dual(a):
        ap, at = _split(a)
        prim = tsum(ap, axis=axis, keepdims=keepdims)
        tan = None if at is None else tsum(at, axis=axis, keepdims=keepdims)
        return DualTensor(prim, tan)
    a = _coerce(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, in_shape))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        gg = g
        if not keepdims:
            for ax in sorted(ax % len(in_shape) for ax in axes):
                gg = np.expand_dims(gg, ax)
        _accum(a, np.broadcast_to(gg, in_shape))

    return _from_op("sum", out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False):
    p = a.primal if isinstance(a, DualTensor) else _coerce(a)
    if axis is None:
        n = p.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= p.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    if _any_dual(a):
        ap, at = _split(a)
        return DualTensor(reshape(ap, shape), None if at is None else reshape(at, shape))
    a = _coerce(a)
    out = a.data.reshape(shape)
    in_shape = a.shape

    def vjp(g):
        _accum(a, g.reshape(in_shape))

    return _from_op("reshape", out, (a,), vjp)


def transpose(a, axes):
    if _any_dual(a):
        ap, at = _split(a)
        return DualTensor(transpose(ap, axes), None if at is None else transpose(at, axes))
    a = _coerce(a)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def vjp(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _from_op("transpose", out, (a,), vjp)


def broadcast_to(a, shape):
    if _any_dual(a):
        ap, at = _split(a)
        return DualTensor(
            broadcast_to(ap, shape), None if at is None else broadcast_to(at, shape)
        )
    a = _coerce(a)
    out = np.broadcast_to(a.data, shape).copy()
    in_shape = a.shape

    def vjp(g):
        _accum(a, _unbroadcast(g, in_shape))

    return _from_op("broadcast", out, (a,), vjp)


def concat(parts, axis: int = 0):
    parts = [_coerce(p) for p in parts]
    if _any_dual(*parts):
        prims, tans = [], []
        for p in parts:
            pp, pt = _split(p)
            prims.append(pp)
            tans.append(pt)
        prim = concat(prims, axis=axis)
        if all(t is None for t in tans):
            tan = None
        else:
            filled = [
                t if t is not None else zeros_like(pp)
                for t, pp in zip(tans, prims)
            ]
            tan = concat(filled, axis=axis)
        return DualTensor(prim, tan)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def vjp(g):
        off = 0
        idx = [slice(None)] * g.ndim
        for p, s in zip(parts, sizes):
            idx[axis] = slice(off, off + s)
            _accum(p, g[tuple(idx)])
            off += s

    return _from_op("concat", out, tuple(parts), vjp)


def getitem(a, idx):
    if _any_dual(a):
        ap, at = _split(a)
        return DualTensor(getitem(ap, idx), None if at is None else getitem(at, idx))
    a = _coerce(a)
    out = np.ascontiguousarray(a.data[idx])
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[idx] = g
        _accum(a, full)

    return _from_op("getitem", out, (a,), vjp)


# ---------------------------------------------------------------------------
# matmul / conv
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product (..., n, k) @ (..., k, m). Both operands >= 2-D."""
    if _any_dual(a, b):
        ap, at = _split(_coerce(a))
        bp, bt = _split(_coerce(b))
        prim = matmul(ap, bp)
        tan = None
        if at is not None:
            tan = matmul(at, bp)
        if bt is not None:
            q = matmul(ap, bt)
            tan = q if tan is None else add(tan, q)
        return DualTensor(prim, tan)
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    with np.errstate(invalid="ignore", over="ignore"):
        out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _from_op("matmul", out, (a, b), vjp)


def _im2col(x: np.ndarray, kh: int, kw: int):
    """(B,C,H,W) with 'same' zero padding -> (B, H*W, C*kh*kw) patch matrix."""
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    b, c, h, w = x.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * kh * kw)
    return np.ascontiguousarray(cols)


def _conv_raw(x: np.ndarray, w: np.ndarray):
    """Correlation with 'same' padding on raw arrays; returns (out, cols)."""
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    cols = _im2col(x, kh, kw)
    out = (cols @ w.reshape(cout, -1).T).transpose(0, 2, 1).reshape(b, cout, h, wd)
    return out, cols


def conv2d(x, w):
    """2-D convolution, stride 1, 'same' zero padding.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw) with odd kh, kw.
    """
    if _any_dual(x, w):
        xp_, xt = _split(_coerce(x))
        wp, wt = _split(_coerce(w))
        prim = conv2d(xp_, wp)
        tan = None
        if xt is not None:
            tan = conv2d(xt, wp)
        if wt is not None:
            q = conv2d(xp_, wt)
            tan = q if tan is None else add(tan, q)
        return DualTensor(prim, tan)
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x (B,Cin,H,W) and w (Cout,Cin,kh,kw)")
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: x has {cin}, w has {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel sizes must be odd for 'same' padding")
    out, cols = _conv_raw(x.data, w.data)

    def vjp(g):
        gmat = g.reshape(b, cout, h * wd).transpose(0, 2, 1)  # (B, HW, Cout)
        gw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1]))  # (Cout, C*kh*kw)
        _accum(w, gw.reshape(w.shape))
        # input gradient of a stride-1 'same' correlation: correlate the
        # upstream grad with the kernel rotated 180 deg and channel-swapped
        wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _conv_raw(np.ascontiguousarray(g), wflip)
        _accum(x, gx)

    return _from_op("conv2d", out, (x, w), vjp)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def softmax_lastaxis(x):
    """Softmax over the last axis, stabilized by a constant max shift.

    The shift is treated as a constant (softmax is shift-invariant, so the
    derivative is exact) and is read from primal data so the same code path
    serves plain and dual evaluation.
    """
    p = x.primal if isinstance(x, DualTensor) else _coerce(x)
    shift = Tensor(np.max(p.data, axis=-1, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, tsum(e, axis=-1, keepdims=True))


def stop_gradient(x):
    """Value-identical tensor that blocks reverse flow and zeroes tangents."""
    if isinstance(x, DualTensor):
        return stop_gradient(x.primal)
    x = _coerce(x)
    t = Tensor.__new__(Tensor)
    t.data = x.data
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._vjp = None
    return t


# ---------------------------------------------------------------------------
# reverse mode driver
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> list:
    """Accumulate .grad over the graph below `loss`; returns visited nodes."""
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is not None:
            node._vjp(node.grad)
    return order


def grad(loss: Tensor, params: dict) -> dict:
    """Gradients of a scalar loss for each named parameter tensor.

    Parameters not reached by the graph get zero gradients. Graph grads are
    cleared afterwards so parameter tensors can be reused across steps.
    """
    visited = backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
    for node in visited:
        node.grad = None
    for p in params.values():
        p.grad = None
    return out


# ---------------------------------------------------------------------------
# forward mode driver
# ---------------------------------------------------------------------------


def jvp(f, inputs, tangents):
    """Jacobian-vector product of f at `inputs` along `tangents`.

    Returns (f(inputs), directional derivative). Both outputs participate in
    the reverse-mode graph unless wrapped in stop_gradient.
    """
    if len(inputs) != len(tangents):
        raise ShapeError("jvp needs one tangent per input")
    duals = []
    for x, t in zip(inputs, tangents):
        x = _coerce(x)
        if t is None:
            duals.append(DualTensor(x, None))
            continue
        t = _coerce(t)
        if t.shape != x.shape:
            raise ShapeError(f"tangent shape {t.shape} != input shape {x.shape}")
        duals.append(DualTensor(x, None if not np.any(t.data) else t))
    out = f(*duals)
    if isinstance(out, DualTensor):
        prim = out.primal
        tan = out.tangent if out.tangent is not None else zeros_like(prim)
        return prim, tan
    out = _coerce(out)
    return out, zeros_like(out)


# ---------------------------------------------------------------------------
# operator sugar
# ---------------------------------------------------------------------------


def _install_operators(cls):
    cls.__add__ = lambda s, o: add(s, o)
    cls.__radd__ = lambda s, o: add(o, s)
    cls.__sub__ = lambda s, o: sub(s, o)
    cls.__rsub__ = lambda s, o: sub(o, s)
    cls.__mul__ = lambda s, o: mul(s, o)
    cls.__rmul__ = lambda s, o: mul(o, s)
    cls.__truediv__ = lambda s, o: div(s, o)
    cls.__rtruediv__ = lambda s, o: div(o, s)
    cls.__neg__ = lambda s: neg(s)
    cls.__pow__ = lambda s, e: pow_scalar(s, e)
    cls.__matmul__ = lambda s, o: matmul(s, o)
    cls.__getitem__ = lambda s, idx: getitem(s, idx)


_install_operators(Tensor)
_install_operators(DualTensor)
