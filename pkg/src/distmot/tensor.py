"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Tensors are immutable value holders: ops return new tensors and never write
to their inputs. A tensor created with ``requires_grad=True`` becomes a leaf
of the tape; every op result that depends on at least one tracked tensor
carries a backward closure. ``backward()`` on a scalar root walks the graph
in reverse topological order and accumulates gradients additively into
``.grad``, so a tensor used twice receives the sum of both contributions.

Rank is capped at 4 (batch, channel, height, width covers everything this
package needs) and all data is C-contiguous float64.
"""

from __future__ import annotations

import threading

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """An operation's shape contract was violated."""


# grad_check records relu input signs here during its finite-difference
# passes so it can exclude elements that cross the kink. Thread-local so
# concurrent checks in independent experiments never share a sink.
_TRACE = threading.local()


def _trace_relu(mask: np.ndarray) -> None:
    sink = getattr(_TRACE, "relu_masks", None)
    if sink is not None:
        sink.append(mask)


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C", not ascontiguousarray: the latter promotes
        # 0-d scalars to rank 1 and losses are rank-0 tensors here.
        arr = np.asarray(data, dtype=np.float64, order="C")
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if arr.size == 0:
            raise ShapeError(f"shape {arr.shape} has a zero-length dimension")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -_as_scalar(other, "subtract"))

    def __rsub__(self, other):
        return add_scalar(neg(self), _as_scalar(other, "subtract"))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        c = _as_scalar(other, "divide")
        if c == 0.0:
            raise ZeroDivisionError("tensor division by zero scalar")
        return mul_scalar(self, 1.0 / c)

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``.grad``.

        The root must be a scalar (single-element) tensor that depends on at
        least one tensor with ``requires_grad=True``. Call once per forward
        graph; leaf gradients from earlier graphs are kept and added to.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward root does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def _as_scalar(value, what: str) -> float:
    if isinstance(value, (int, float, np.integer, np.floating)):
        return float(value)
    raise TypeError(f"cannot {what} a Tensor and {type(value).__name__}")


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward_fn
    return out


def _add_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# -- elementwise and scalar ops ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def backward(g):
        _add_grad(a, g)
        _add_grad(b, g)

    return _from_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def backward(g):
        _add_grad(a, g)
        _add_grad(b, -g)

    return _from_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def backward(g):
        _add_grad(a, g * b.data)
        _add_grad(b, g * a.data)

    return _from_op(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _add_grad(a, -g)

    return _from_op(-a.data, (a,), backward)


def add_scalar(a: Tensor, c) -> Tensor:
    c = _as_scalar(c, "add")

    def backward(g):
        _add_grad(a, g)

    return _from_op(a.data + c, (a,), backward)


def mul_scalar(a: Tensor, c) -> Tensor:
    c = _as_scalar(c, "multiply")

    def backward(g):
        _add_grad(a, g * c)

    return _from_op(a.data * c, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        _add_grad(a, np.ones_like(a.data) * g)

    return _from_op(np.asarray(a.data.sum()), (a,), backward)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        _add_grad(a, np.ones_like(a.data) * (g / n))

    return _from_op(np.asarray(a.data.mean()), (a,), backward)


def relu(a: Tensor) -> Tensor:
    """max(x, 0) elementwise; the gradient at exactly zero is zero."""
    mask = a.data > 0.0
    _trace_relu(mask)

    def backward(g):
        _add_grad(a, g * mask)

    return _from_op(np.where(mask, a.data, 0.0), (a,), backward)


# -- shape ops ----------------------------------------------------------------


def view(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reinterpret the row-major element order under a new shape. No copy."""
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds the supported maximum of {MAX_RANK}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"view: shape {shape} has a non-positive extent")
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"view: cannot reshape {a.data.size} elements into {shape}")

    def backward(g):
        _add_grad(a, g.reshape(a.data.shape))

    return _from_op(a.data.reshape(shape), (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Reorder axes and materialize the result contiguously."""
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of axes of rank {a.data.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        _add_grad(a, np.ascontiguousarray(g.transpose(inverse)))

    return _from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` indices starting at ``start`` along one axis."""
    if not 0 <= axis < a.data.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for rank {a.data.ndim}")
    extent = a.data.shape[axis]
    if length < 1:
        raise ShapeError(f"narrow: length must be positive, got {length}")
    if start < 0 or start + length > extent:
        raise ShapeError(
            f"narrow: window [{start}, {start + length}) exceeds extent {extent} on axis {axis}"
        )
    index = tuple(
        slice(start, start + length) if d == axis else slice(None) for d in range(a.data.ndim)
    )

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        _add_grad(a, buf)

    return _from_op(a.data[index].copy(), (a,), backward)


# -- neural net ops ------------------------------------------------------------


def _conv_windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    b, c, hp, wp = padded.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sb, sc, sh, sw = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(b, c, oh, ow, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2d cross-correlation: (B,C,H,W) * (O,C,kh,kw) -> (B,O,H',W').

    Lowered to a single matmul over im2col columns; the backward pass reuses
    the columns for the weight gradient and scatters the column gradient back
    through each kernel offset.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4, got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be rank 4, got shape {weight.data.shape}")
    b, c, h, w = x.data.shape
    o, ck, kh, kw = weight.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ck}")
    if bias is not None and bias.data.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} does not match {o} output channels")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel ({kh}, {kw}) larger than padded input ({hp}, {wp})"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.ascontiguousarray(
        _conv_windows(padded, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5)
    ).reshape(b * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * oh * ow, o)
        if weight.requires_grad:
            _add_grad(weight, (gmat.T @ cols).reshape(o, c, kh, kw))
        if bias is not None and bias.requires_grad:
            _add_grad(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j]
            _add_grad(x, dpad[:, :, padding:padding + h, padding:padding + w])

    return _from_op(np.ascontiguousarray(out), parents, backward)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (batch, height, width).

    Uses the biased variance (divide by N, not N-1) of the current batch;
    there are no running statistics, this package only ever trains.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm2d: input must be rank 4, got shape {x.data.shape}")
    b, c, h, w = x.data.shape
    if gamma.data.shape != (c,):
        raise ShapeError(f"batch_norm2d: gamma shape {gamma.data.shape} does not match {c} channels")
    if beta.data.shape != (c,):
        raise ShapeError(f"batch_norm2d: beta shape {beta.data.shape} does not match {c} channels")
    if eps <= 0.0:
        raise ValueError(f"batch_norm2d: eps must be positive, got {eps}")
    n = b * h * w
    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    var = x.data.var(axis=(0, 2, 3), keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mean) / std
    gvec = gamma.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            _add_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _add_grad(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gvec
            term = (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            _add_grad(x, term / (n * std))

    return _from_op(gvec * xhat + beta.data[None, :, None, None], (x, gamma, beta), backward)


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix for one spatial axis.

    Source coordinates follow the half-pixel-center convention
    s = (d + 0.5) * n_in / n_out - 0.5, clamped to [0, n_in - 1]; each output
    index blends the two neighbouring inputs linearly.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize (B,C,H,W) to (B,C,out_h,out_w) with half-pixel-center bilinear
    interpolation. Resizing to the input extents is the identity."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize: input must be rank 4, got shape {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output extents ({out_h}, {out_w}) must be positive")
    _, _, h, w = x.data.shape
    my = _axis_weights(h, out_h)
    mx = _axis_weights(w, out_w)

    def backward(g):
        _add_grad(x, np.einsum("bcyx,yh,xw->bchw", g, my, mx, optimize=True))

    out = np.einsum("bchw,yh,xw->bcyx", x.data, my, mx, optimize=True)
    return _from_op(np.ascontiguousarray(out), (x,), backward)


# -- gradient checking ---------------------------------------------------------


def grad_check(f, x: Tensor, step: float = 1e-3) -> float:
    """Worst relative disagreement between analytic and numeric gradients.

    ``f`` must deterministically map one tensor to a scalar tensor. The
    analytic gradient comes from one backward pass; the numeric one from
    central differences, element by element. The reported error for element
    i is |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8), and
    the maximum over elements is returned.

    Elements whose +/- step evaluations disagree on the sign of any relu
    input are excluded: the difference quotient straddles the kink there and
    does not estimate a derivative.
    """
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar tensor")
    out.backward()
    analytic = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)).reshape(-1)

    base = np.array(x.data, dtype=np.float64).reshape(-1)
    shape = x.data.shape
    n = base.size
    numeric = np.zeros(n)
    excluded = np.zeros(n, dtype=bool)
    for i in range(n):
        plus, masks_plus = _probe(f, base, i, +step, shape)
        minus, masks_minus = _probe(f, base, i, -step, shape)
        numeric[i] = (plus - minus) / (2.0 * step)
        excluded[i] = _kink_crossed(masks_plus, masks_minus)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    rel[excluded] = 0.0
    return float(rel.max())


def _probe(f, base: np.ndarray, i: int, delta: float, shape) -> tuple[float, list[np.ndarray]]:
    vals = base.copy()
    vals[i] += delta
    sink: list[np.ndarray] = []
    _TRACE.relu_masks = sink
    try:
        out = f(Tensor(vals.reshape(shape)))
    finally:
        _TRACE.relu_masks = None
    return out.data.reshape(()).item(), sink


def _kink_crossed(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return True
    return any(not np.array_equal(m, n) for m, n in zip(a, b))
