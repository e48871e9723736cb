"""Minimal reverse-mode autodiff over numpy arrays.

Each op computes its forward value eagerly and records parent links plus a
closure that maps the output gradient to parent gradients. ``backward`` on a
scalar loss walks that implicit graph in reverse topological order and
accumulates gradients into every tensor with ``requires_grad`` set. Repeated
backward calls keep accumulating until ``zero_grads`` resets them.

The op set is exactly what the segmentation model needs: 3x3 same-padded
convolution, 2x2 max pooling, 2x2 stride-2 transposed convolution, channel
concatenation, relu, sigmoid, a spatial crop, and weighted binary
cross-entropy on logits. Convolutions run as im2col + matmul so the heavy
lifting stays in BLAS.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording, e.g. for validation and inference passes."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float numpy array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        data = self.data
        out = np.asarray(data.sum(), dtype=data.dtype)

        def grad_fn(g):
            return (np.broadcast_to(g, data.shape).astype(data.dtype, copy=True),)

        return _record(out, (self,), grad_fn)

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.data.dtype))
        if other.data.shape != self.data.shape and other.data.shape != ():
            raise ValueError(f"shape mismatch: {self.shape} + {other.shape}")
        out = self.data + other.data

        def grad_fn(g):
            ga = g
            gb = g if other.data.shape == self.data.shape else np.asarray(g.sum(), g.dtype)
            return ga, gb

        return _record(out, (self, other), grad_fn)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.data.dtype))
        if other.data.shape != self.data.shape and other.data.shape != ():
            raise ValueError(f"shape mismatch: {self.shape} * {other.shape}")
        out = self.data * other.data

        def grad_fn(g):
            ga = g * other.data
            gb = g * self.data
            if other.data.shape != self.data.shape:
                gb = np.asarray(gb.sum(), g.dtype)
            return ga, gb

        return _record(out, (self, other), grad_fn)

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _record(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every requires_grad tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params: Iterable[Tensor] | Mapping[str, "Tensor"]) -> None:
    tensors = params.values() if isinstance(params, Mapping) else params
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# activations and loss
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient 0 at the kink

    def grad_fn(g):
        return (g * mask,)

    return _record(out, (x,), grad_fn)


def sigmoid_values(z: np.ndarray) -> np.ndarray:
    """Stable elementwise logistic, branch by sign so exp never overflows."""
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_values(x.data)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _record(s, (x,), grad_fn)


def softplus_values(z: np.ndarray) -> np.ndarray:
    # softplus(z) = max(z, 0) + log1p(exp(-|z|)) stays finite for |z| ~ 1e4
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def weighted_bce_with_logits(
    logits: Tensor, target: Tensor, pos_weight: float = 1.0
) -> Tensor:
    """Mean of pos_weight*y*softplus(-z) + (1-y)*softplus(z) over all cells.

    The mean divides by the plain cell count regardless of pos_weight, and
    the target is treated as a constant (no gradient flows into it).
    """
    if logits.data.shape != target.data.shape:
        raise ValueError(
            f"logits {logits.data.shape} vs target {target.data.shape}"
        )
    if not pos_weight > 0:
        raise ValueError(f"pos_weight must be > 0, got {pos_weight}")
    y = target.data
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("target must be binary (only 0 and 1)")
    z = logits.data
    per_cell = pos_weight * y * softplus_values(-z) + (1.0 - y) * softplus_values(z)
    out = np.asarray(per_cell.mean(), dtype=z.dtype)
    n = z.size

    def grad_fn(g):
        gz = (g / n) * (
            -pos_weight * y * sigmoid_values(-z) + (1.0 - y) * sigmoid_values(z)
        )
        return gz.astype(z.dtype, copy=False), None

    return _record(out, (logits, target), grad_fn)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.data.shape, b.data.shape
    if len(sa) != 4 or len(sb) != 4:
        raise ValueError("concat_channels expects [batch, ch, h, w] tensors")
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ValueError(f"incompatible shapes for concat: {sa} vs {sb}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = sa[1]

    def grad_fn(g):
        return g[:, :ca], g[:, ca:]

    return _record(out, (a, b), grad_fn)


def crop_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window; gradient zero-pads back."""
    b, c, h, w = x.data.shape
    if height > h or width > w or height < 1 or width < 1:
        raise ValueError(f"cannot crop {h}x{w} to {height}x{width}")
    out = x.data[:, :, :height, :width].copy()

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :height, :width] = g
        return (gx,)

    return _record(out, (x,), grad_fn)


def _im2col3(x: np.ndarray) -> np.ndarray:
    """[batch, ch, h, w] -> [batch, h*w, ch*9] patches under zero padding."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)


def _col2im3(cols: np.ndarray, b: int, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col3: scatter-add patches back into the image."""
    m = cols.reshape(b, h, w, c, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for ki in range(3):
        for kj in range(3):
            xp[:, :, ki : ki + h, kj : kj + w] += m[:, :, ki, kj]
    return xp[:, :, 1 : h + 1, 1 : w + 1]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (same-size output).

    kernel is [out_ch, in_ch, 3, 3]; bias is [out_ch].
    """
    b, cin, h, w = x.data.shape
    if kernel.data.ndim != 4 or kernel.data.shape[2:] != (3, 3):
        raise ValueError(f"kernel must be [out, in, 3, 3], got {kernel.data.shape}")
    cout, ck = kernel.data.shape[:2]
    if ck != cin:
        raise ValueError(f"kernel expects {ck} input channels, input has {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"bias shape {bias.data.shape} != ({cout},)")
    cols = _im2col3(x.data)  # [b, h*w, cin*9]
    wmat = kernel.data.reshape(cout, cin * 9)
    out = cols @ wmat.T + bias.data
    out = out.transpose(0, 2, 1).reshape(b, cout, h, w)

    def grad_fn(g):
        gm = g.reshape(b, cout, h * w).transpose(0, 2, 1)  # [b, h*w, cout]
        gx = _col2im3(gm @ wmat, b, cin, h, w) if x.requires_grad else None
        gw = None
        if kernel.requires_grad:
            gw = np.tensordot(gm, cols, axes=([0, 1], [0, 1])).reshape(
                kernel.data.shape
            )
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, kernel, bias), grad_fn)


def max_pool_2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    maximum in row-major window order."""
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even for 2x2 pooling, got {h}x{w}")
    win = (
        x.data.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(b, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )
        return (gx,)

    return _record(out, (x,), grad_fn)


def transposed_conv_2x2(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """2x2 stride-2 transposed convolution (learned 2x upsampling).

    kernel is [in_ch, out_ch, 2, 2]; output is [batch, out_ch, 2h, 2w] with
    out[b, o, 2i+dy, 2j+dx] = sum_c x[b, c, i, j] * kernel[c, o, dy, dx].
    Adjoint of a 2x2 stride-2 convolution; windows never overlap.
    """
    b, cin, h, w = x.data.shape
    if kernel.data.ndim != 4 or kernel.data.shape[2:] != (2, 2):
        raise ValueError(f"kernel must be [in, out, 2, 2], got {kernel.data.shape}")
    ck, cout = kernel.data.shape[:2]
    if ck != cin:
        raise ValueError(f"kernel expects {ck} input channels, input has {cin}")
    if bias.data.shape != (cout,):
        raise ValueError(f"bias shape {bias.data.shape} != ({cout},)")
    t = np.tensordot(x.data, kernel.data, axes=([1], [0]))  # [b, h, w, cout, 2, 2]
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(b, cout, 2 * h, 2 * w)
    out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gt = g.reshape(b, cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)
        gx = None
        if x.requires_grad:
            gx = np.tensordot(gt, kernel.data, axes=([3, 4, 5], [1, 2, 3]))
            gx = gx.transpose(0, 3, 1, 2)
        gk = None
        if kernel.requires_grad:
            gk = np.tensordot(x.data, gt, axes=([0, 2, 3], [0, 1, 2]))
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return _record(out, (x, kernel, bias), grad_fn)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments and step counter, keyed by parameter name."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place; gradients are left alone."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * (g * g) if v is None else state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
