"""Dense tensors with tape-based reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional record of the operation
that produced it. Calling :func:`backward` on a scalar loss walks the tape
in reverse topological order and accumulates gradients into every reachable
tensor that requires them. Gradient rules are themselves written in terms
of tensor operations, so :func:`grad` can be called with ``create_graph=True``
to differentiate through a gradient (used for the discriminator input-gradient
penalty). There is no broadcasting beyond the explicit ``expand`` op.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_finite_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording within the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf validation (debug aid, off by default)."""
    global _finite_checks
    _finite_checks = bool(enabled)


class Tensor:
    """N-dimensional float array, optionally participating in the tape."""

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 parents: tuple = ()):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents  # tuple of (Tensor, vjp) pairs

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    # Operator sugar; python scalars go through scale/add_scalar.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, pow_const(other, -1.0))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, float(p))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor from array-like data."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        raise DimensionError(f"unsupported dtype {arr.dtype}")
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[tuple]) -> Tensor:
    """Wrap an op result, keeping only tape edges that can carry gradient."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError("non-finite values produced by a forward op")
    if _grad_enabled:
        kept = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        if kept:
            return Tensor(data, requires_grad=True, parents=kept)
    return Tensor(data)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, [(a, lambda g: g), (b, lambda g: neg(g))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    return _make(a.data * b.data,
                 [(a, lambda g: mul(g, b)), (b, lambda g: mul(g, a))])


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [(a, lambda g: neg(g))])


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, [(a, lambda g: scale(g, c))])


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, [(a, lambda g: g)])


def cmul(a: Tensor, const: np.ndarray) -> Tensor:
    """Multiply by a constant array of identical shape (no gradient to const)."""
    if const.shape != a.shape:
        raise DimensionError(f"cmul: shape mismatch {a.shape} vs {const.shape}")
    return _make(a.data * const, [(a, lambda g: cmul(g, const))])


def pow_const(a: Tensor, p: float) -> Tensor:
    """a**p elementwise. For non-integer or negative p the input must be > 0."""
    out = a.data ** p

    def vjp(g):
        return mul(g, scale(pow_const(a, p - 1.0), p))

    return _make(out, [(a, vjp)])


def sqrt(a: Tensor) -> Tensor:
    return pow_const(a, 0.5)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), [(a, None)])
    if out._parents:
        # 1 - y**2 written with tape ops so the rule itself is differentiable
        out._parents = ((a, lambda g: mul(g, add_scalar(neg(square(out)), 1.0))),)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), numerically stable.

    The gradient rule treats sigmoid(a) as a constant, so this op supports
    first-order differentiation only.
    """
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    sig = expit(a.data)
    return _make(out, [(a, lambda g: cmul(g, sig))])


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.data >= 0, np.asarray(1.0, a.dtype),
                    np.asarray(slope, a.dtype))
    return _make(np.where(a.data >= 0, a.data, a.data * slope),
                 [(a, lambda g: cmul(g, mask))])


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), [(a, lambda g: reshape(g, old))])


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    return _make(np.transpose(a.data, axes), [(a, lambda g: permute(g, inv))])


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast size-1 axes of ``a`` up to ``shape`` (same rank)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != a.data.ndim:
        raise DimensionError(f"expand: rank mismatch {a.shape} -> {shape}")
    grown = []
    for ax, (s_in, s_out) in enumerate(zip(a.shape, shape)):
        if s_in != s_out:
            if s_in != 1:
                raise DimensionError(f"expand: axis {ax} is {s_in}, want {s_out}")
            grown.append(ax)
    axes = tuple(grown)
    return _make(np.broadcast_to(a.data, shape),
                 [(a, lambda g: rsum(g, axes, keepdims=True))])


def rsum(a: Tensor, axes, keepdims: bool = True) -> Tensor:
    """Sum over the given axes."""
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    out = a.data.sum(axis=axes, keepdims=keepdims) if axes else a.data
    kept_shape = a.data.sum(axis=axes, keepdims=True).shape if axes else a.shape
    full = a.shape

    def vjp(g):
        gk = g if keepdims or not axes else reshape(g, kept_shape)
        return expand(gk, full)

    return _make(np.asarray(out), [(a, vjp)])


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    full = a.shape

    def vjp(g):
        return expand(reshape(g, (1,) * len(full)), full) if full else g

    return _make(np.asarray(a.data.sum()), [(a, vjp)])


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1; all other extents must agree."""
    if not parts:
        raise ContractError("concat_channels: empty input")
    ref = parts[0]
    for p in parts[1:]:
        if p.data.ndim != ref.data.ndim or p.dtype != ref.dtype:
            raise DimensionError("concat_channels: rank or dtype mismatch")
        for ax in range(ref.data.ndim):
            if ax != 1 and p.shape[ax] != ref.shape[ax]:
                raise DimensionError(
                    f"concat_channels: axis {ax} mismatch "
                    f"{p.shape} vs {ref.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    edges = []
    off = 0
    for p in parts:
        width = p.shape[1]
        edges.append((p, (lambda o, w: lambda g: narrow_channels(g, o, w))(off, width)))
        off += width
    return _make(out, edges)


def narrow_channels(a: Tensor, start: int, length: int) -> Tensor:
    """Slice ``length`` channels starting at ``start`` along axis 1."""
    if start < 0 or start + length > a.shape[1]:
        raise DimensionError(
            f"narrow_channels: [{start}:{start + length}] out of {a.shape[1]}")
    before, after = start, a.shape[1] - start - length
    out = np.ascontiguousarray(a.data[:, start:start + length])
    return _make(out, [(a, lambda g: channel_pad(g, before, after))])


def channel_pad(a: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad along axis 1 (adjoint of narrow_channels)."""
    pads = [(0, 0)] * a.data.ndim
    pads[1] = (before, after)
    return _make(np.pad(a.data, pads),
                 [(a, lambda g: narrow_channels(g, before, a.shape[1]))])


# ---------------------------------------------------------------------------
# matrix products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul: expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    return _make(a.data @ b.data,
                 [(a, lambda g: matmul(g, permute(b, (1, 0)))),
                  (b, lambda g: matmul(permute(a, (1, 0)), g))])


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading batch axes."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError("bmm: expects 3-D operands")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: incompatible {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"bmm: dtype mismatch {a.dtype} vs {b.dtype}")
    return _make(np.matmul(a.data, b.data),
                 [(a, lambda g: bmm(g, permute(b, (0, 2, 1)))),
                  (b, lambda g: bmm(permute(a, (0, 2, 1)), g))])


# ---------------------------------------------------------------------------
# spatial ops (operate on the trailing two axes)

def up_nearest_2x(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError("up_nearest_2x: needs at least 2 axes")
    out = np.repeat(np.repeat(a.data, 2, axis=-2), 2, axis=-1)
    return _make(out, [(a, lambda g: scale(down_avg_2x(g), 4.0))])


def down_avg_2x(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError("down_avg_2x: needs at least 2 axes")
    h, w = a.shape[-2], a.shape[-1]
    if h % 2 or w % 2:
        raise DimensionError(f"down_avg_2x: odd spatial extents ({h}, {w})")
    lead = a.shape[:-2]
    out = a.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    return _make(out, [(a, lambda g: scale(up_nearest_2x(g), 0.25))])


def unfold(x: Tensor, kh: int, kw: int, pad: int) -> Tensor:
    """im2col: (b, c, H, W) -> (b, c*kh*kw, L) patch matrix with zero padding."""
    if x.data.ndim != 4:
        raise DimensionError("unfold: expects (b, c, H, W)")
    b, c, h, w = x.shape
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"unfold: kernel ({kh}, {kw}) too large for ({h}, {w})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * kh * kw, oh * ow)
    return _make(cols, [(x, lambda g: fold(g, (h, w), kh, kw, pad))])


def fold(cols: Tensor, out_hw: tuple, kh: int, kw: int, pad: int) -> Tensor:
    """col2im scatter-add, the exact adjoint of :func:`unfold`."""
    if cols.data.ndim != 3:
        raise DimensionError("fold: expects (b, c*kh*kw, L)")
    h, w = out_hw
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    b = cols.shape[0]
    c, rem = divmod(cols.shape[1], kh * kw)
    if rem or cols.shape[2] != oh * ow:
        raise DimensionError(f"fold: column shape {cols.shape} does not match "
                             f"({h}, {w}) with kernel ({kh}, {kw}), pad {pad}")
    patches = cols.data.reshape(b, c, kh, kw, oh, ow)
    buf = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for dy in range(kh):
        for dx in range(kw):
            buf[:, :, dy:dy + oh, dx:dx + ow] += patches[:, :, dy, dx]
    out = buf[:, :, pad:pad + h, pad:pad + w] if pad else buf
    return _make(np.ascontiguousarray(out),
                 [(cols, lambda g: unfold(g, kh, kw, pad))])


# ---------------------------------------------------------------------------
# convolution (composite of unfold + matmul, differentiable end to end)

def conv2d(x: Tensor, w: Tensor, pad: int) -> Tensor:
    """Cross-correlation of (b, c_in, H, W) with (c_out, c_in, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d: expects 4-D input and kernel")
    b, c_in, h, ww = x.shape
    c_out, kc, kh, kw = w.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: channel mismatch {c_in} vs kernel {kc}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d: kernel extents must be odd")
    oh = h + 2 * pad - kh + 1
    ow = ww + 2 * pad - kw + 1
    cols = unfold(x, kh, kw, pad)                      # (b, ckk, L)
    cols2 = reshape(permute(cols, (1, 0, 2)), (c_in * kh * kw, b * oh * ow))
    w2 = reshape(w, (c_out, c_in * kh * kw))
    y2 = matmul(w2, cols2)                             # (c_out, b*L)
    return permute(reshape(y2, (c_out, b, oh, ow)), (1, 0, 2, 3))


def conv2d_per_sample(x: Tensor, w: Tensor, pad: int) -> Tensor:
    """Convolution with one kernel per batch element: w is (b, c_out, c_in, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise DimensionError("conv2d_per_sample: expects 4-D input, 5-D kernels")
    b, c_in, h, ww = x.shape
    wb, c_out, kc, kh, kw = w.shape
    if wb != b or kc != c_in:
        raise DimensionError(
            f"conv2d_per_sample: mismatch x {x.shape} vs w {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d_per_sample: kernel extents must be odd")
    oh = h + 2 * pad - kh + 1
    ow = ww + 2 * pad - kw + 1
    cols = unfold(x, kh, kw, pad)                      # (b, ckk, L)
    wmat = reshape(w, (b, c_out, c_in * kh * kw))
    y = bmm(wmat, cols)                                # (b, c_out, L)
    return reshape(y, (b, c_out, oh, ow))


# ---------------------------------------------------------------------------
# normalization

def rms_normalize(v: Tensor, eps: float = 1e-8) -> Tensor:
    """v / sqrt(mean(v**2) + eps) over the last axis."""
    nd = v.data.ndim
    ms = rsum(square(v), (nd - 1,), keepdims=True)
    inv = pow_const(add_scalar(scale(ms, 1.0 / v.shape[-1]), eps), -0.5)
    return mul(v, expand(inv, v.shape))


# ---------------------------------------------------------------------------
# reverse-mode driver

def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        if idx == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if idx < len(node._parents):
            stack.append((node, idx + 1))
            parent = node._parents[idx][0]
            if id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def _run_reverse(root: Tensor, create_graph: bool,
                 targets: set | None) -> dict:
    """Propagate the seed gradient from ``root``; return {id(t): grad Tensor}.

    When ``targets`` is given, edges that cannot reach a target are skipped.
    """
    order = _toposort(root)
    need: dict[int, bool]
    if targets is None:
        need = {id(n): n.requires_grad for n in order}
    else:
        need = {}
        for n in order:  # parents precede consumers in ``order``
            need[id(n)] = id(n) in targets or any(
                need.get(id(p), False) for p, _ in n._parents)

    seed = Tensor(np.ones_like(root.data))
    grads: dict[int, Tensor] = {id(root): seed}
    out: dict[int, Tensor] = {}
    ctxt = contextlib.nullcontext() if create_graph else no_grad()
    with ctxt:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if need.get(id(node), False) and (targets is None
                                              or id(node) in targets):
                out[id(node)] = g
            for parent, vjp in node._parents:
                if not need.get(id(parent), False):
                    continue
                pg = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into ``t.grad`` for every reachable tensor
    with ``requires_grad``. Repeated calls without resetting accumulate."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss has {loss.data.size} elements")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    result = _run_reverse(loss, create_graph=False, targets=None)
    for node in order:
        g = result.get(id(node))
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.data.copy()
        else:
            node.grad = node.grad + g.data


def grad(output: Tensor, inputs: Sequence[Tensor],
         create_graph: bool = False) -> list:
    """d(output)/d(input) for each input, as tensors; ``.grad`` is untouched.

    With ``create_graph=True`` the returned tensors are recorded on the tape
    and can be differentiated again.
    """
    if output.data.size != 1:
        raise ContractError(f"grad: output has {output.data.size} elements")
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("grad: every input must require gradient")
    targets = {id(t) for t in inputs}
    result = _run_reverse(output, create_graph=create_graph, targets=targets)
    outs = []
    for t in inputs:
        g = result.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        outs.append(g)
    return outs
