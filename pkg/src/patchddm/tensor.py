"""Dense N-D tensors with reverse-mode autodiff.

Covers exactly the operations the volumetric denoiser needs: 3D
convolution, averaging skip combine, nearest/average resampling, group
normalization, SiLU, affine (linear) layers, broadcast add, reshape and
scalar summation. Values are float32 in all product paths; the ops are
dtype-generic so gradient checks can run them in float64.

Tensors produced by an operation are treated as immutable. Only leaf
tensors (parameters) may be updated in place, and only between forward
passes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

from . import backend

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array value plus the bookkeeping needed for backpropagation."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.float32, np.float64) else np.float32
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would turn 0-d into 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def sum(self) -> "Tensor":
        out = Tensor(np.sum(self.data, keepdims=False), dtype=self.data.dtype)
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)

            def _bw():
                self._accumulate(np.broadcast_to(out.grad, self.shape))

            out._backward = _bw
        return out

    def reshape(self, shape) -> "Tensor":
        out = Tensor(self.data.reshape(shape), dtype=self.data.dtype)
        if _grad_enabled and self.requires_grad:
            out.requires_grad = True
            out._parents = (self,)

            def _bw():
                self._accumulate(out.grad.reshape(self.shape))

            out._backward = _bw
        return out

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed dtypes in one operation: {sorted(map(str, dtypes))}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    _check_same_dtype(a, b)
    out = Tensor(a.data + b.data, dtype=a.data.dtype)
    if _grad_enabled and (a.requires_grad or b.requires_grad):
        out.requires_grad = True
        out._parents = tuple(t for t in (a, b) if t.requires_grad)

        def _bw():
            if a.requires_grad:
                a._accumulate(_unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out.grad, b.shape))

        out._backward = _bw
    return out


def averaging_combine(x_s: Tensor, x_u: Tensor) -> Tensor:
    """Skip-connection junction: elementwise (x_s + x_u) / 2.

    Unlike concatenation this keeps the channel count, and unlike a plain
    sum it preserves the variance of i.i.d. inputs.
    """
    if x_s.shape != x_u.shape:
        raise ValueError(
            f"averaging_combine: shapes differ, {x_s.shape} vs {x_u.shape}"
        )
    _check_same_dtype(x_s, x_u)
    half = x_s.data.dtype.type(0.5)
    out = Tensor((x_s.data + x_u.data) * half, dtype=x_s.data.dtype)
    if _grad_enabled and (x_s.requires_grad or x_u.requires_grad):
        out.requires_grad = True
        out._parents = tuple(t for t in (x_s, x_u) if t.requires_grad)

        def _bw():
            g = out.grad * half
            if x_s.requires_grad:
                x_s._accumulate(g)
            if x_u.requires_grad:
                x_u._accumulate(g)

        out._backward = _bw
    return out


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """3D cross-correlation over a channel-first volume.

    ``x`` is (C_in, D, H, W); ``kernel`` is (C_out, C_in, k, k, k); output
    spatial extent is floor((in + 2*padding - k) / stride) + 1 per axis.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv3d: input must be 4-D (C,D,H,W), got {x.shape}")
    if kernel.data.ndim != 5:
        raise ValueError(f"conv3d: kernel must be 5-D, got {kernel.shape}")
    k = kernel.shape[2]
    if kernel.shape[3] != k or kernel.shape[4] != k:
        raise ValueError(f"conv3d: kernel must be cubic, got {kernel.shape}")
    if x.shape[0] != kernel.shape[1]:
        raise ValueError(
            f"conv3d: input channels do not match kernel, input shape "
            f"{x.shape} vs kernel shape {kernel.shape}"
        )
    if bias.shape != (kernel.shape[0],):
        raise ValueError(
            f"conv3d: bias shape {bias.shape} does not match output channels "
            f"of kernel shape {kernel.shape}"
        )
    if padding < 0 or stride < 1:
        raise ValueError(f"conv3d: invalid stride={stride} padding={padding}")
    for extent in x.shape[1:]:
        if extent + 2 * padding < k:
            raise ValueError(
                f"conv3d: extent {extent} too small for kernel {k} with "
                f"padding {padding}"
            )
    _check_same_dtype(x, kernel, bias)

    y = backend.conv3d_forward(x.data, kernel.data, stride, padding)
    y += bias.data[:, None, None, None]
    out = Tensor(y, dtype=x.data.dtype)
    if _grad_enabled and (x.requires_grad or kernel.requires_grad or bias.requires_grad):
        out.requires_grad = True
        out._parents = tuple(t for t in (x, kernel, bias) if t.requires_grad)

        def _bw():
            gy = out.grad
            if x.requires_grad:
                x._accumulate(
                    backend.conv3d_grad_input(gy, kernel.data, x.shape, stride, padding)
                )
            if kernel.requires_grad:
                kernel._accumulate(
                    backend.conv3d_grad_kernel(gy, x.data, kernel.shape, stride, padding)
                )
            if bias.requires_grad:
                bias._accumulate(gy.sum(axis=(1, 2, 3)))

        out._backward = _bw
    return out


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Replicate each voxel factor^3 times (channel axis untouched)."""
    if factor < 2:
        raise ValueError(f"nearest_upsample: factor must be >= 2, got {factor}")
    if x.data.ndim != 4:
        raise ValueError(f"nearest_upsample: expected (C,D,H,W), got {x.shape}")
    data = x.data.repeat(factor, axis=1).repeat(factor, axis=2).repeat(factor, axis=3)
    out = Tensor(data, dtype=x.data.dtype)
    if _grad_enabled and x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            c, d, h, w = x.shape
            g = out.grad.reshape(c, d, factor, h, factor, w, factor)
            x._accumulate(g.sum(axis=(2, 4, 6)))

        out._backward = _bw
    return out


def avg_downsample(x: Tensor, factor: int) -> Tensor:
    """Average non-overlapping factor^3 blocks; extents must divide evenly."""
    if factor < 2:
        raise ValueError(f"avg_downsample: factor must be >= 2, got {factor}")
    if x.data.ndim != 4:
        raise ValueError(f"avg_downsample: expected (C,D,H,W), got {x.shape}")
    c, d, h, w = x.shape
    if d % factor or h % factor or w % factor:
        raise ValueError(
            f"avg_downsample: extents {x.shape[1:]} not divisible by {factor}"
        )
    blocks = x.data.reshape(c, d // factor, factor, h // factor, factor, w // factor, factor)
    out = Tensor(blocks.mean(axis=(2, 4, 6)), dtype=x.data.dtype)
    if _grad_enabled and x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            scale = x.data.dtype.type(1.0 / factor**3)
            g = (out.grad * scale).repeat(factor, axis=1).repeat(factor, axis=2).repeat(factor, axis=3)
            x._accumulate(g)

        out._backward = _bw
    return out


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # exp(-|v|) never overflows; mirror the result for negative inputs
    s = 1.0 / (1.0 + np.exp(-np.abs(v)))
    return np.where(v >= 0, s, 1.0 - s)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), numerically safe for large |x|."""
    s = _sigmoid(x.data)
    out = Tensor(x.data * s, dtype=x.data.dtype)
    if _grad_enabled and x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def _bw():
            x._accumulate(out.grad * (s + x.data * s * (1.0 - s)))

        out._backward = _bw
    return out


def groupnorm(x: Tensor, groups: int, gain: Tensor, bias: Tensor,
              eps: float = 1e-5) -> Tensor:
    """Normalize channel groups to zero mean / unit variance, then affine.

    The eps stabilizer keeps constant inputs well-defined: a zero-variance
    group normalizes to 0 and the output equals the affine bias.
    """
    channels = x.shape[0]
    if channels % groups:
        raise ValueError(
            f"groupnorm: {channels} channels not divisible by {groups} groups"
        )
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ValueError(
            f"groupnorm: gain/bias must be ({channels},), got {gain.shape} and {bias.shape}"
        )
    _check_same_dtype(x, gain, bias)
    dt = x.data.dtype
    grouped = x.data.reshape(groups, -1)
    mu = grouped.mean(axis=1, keepdims=True)
    var = grouped.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = ((grouped - mu) * inv).reshape(x.shape)
    cshape = (channels,) + (1,) * (x.data.ndim - 1)
    out = Tensor(gain.data.reshape(cshape) * xhat + bias.data.reshape(cshape), dtype=dt)
    if _grad_enabled and (x.requires_grad or gain.requires_grad or bias.requires_grad):
        out.requires_grad = True
        out._parents = tuple(t for t in (x, gain, bias) if t.requires_grad)

        def _bw():
            gy = out.grad
            spatial_axes = tuple(range(1, x.data.ndim))
            if gain.requires_grad:
                gain._accumulate((gy * xhat).sum(axis=spatial_axes))
            if bias.requires_grad:
                bias._accumulate(gy.sum(axis=spatial_axes))
            if x.requires_grad:
                m = grouped.shape[1]
                dxhat = (gy * gain.data.reshape(cshape)).reshape(groups, m)
                xh = xhat.reshape(groups, m)
                gx = (inv / m) * (
                    m * dxhat
                    - dxhat.sum(axis=1, keepdims=True)
                    - xh * (dxhat * xh).sum(axis=1, keepdims=True)
                )
                x._accumulate(gx.reshape(x.shape))

        out._backward = _bw
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map on the trailing axis: y = x @ weight.T + bias."""
    if weight.data.ndim != 2:
        raise ValueError(f"linear: weight must be 2-D (out, in), got {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input features {x.shape} do not match weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} vs weight {weight.shape}")
    _check_same_dtype(x, weight, bias)
    out = Tensor(x.data @ weight.data.T + bias.data, dtype=x.data.dtype)
    if _grad_enabled and (x.requires_grad or weight.requires_grad or bias.requires_grad):
        out.requires_grad = True
        out._parents = tuple(t for t in (x, weight, bias) if t.requires_grad)

        def _bw():
            gy = out.grad
            gy2 = gy.reshape(-1, weight.shape[0])
            if x.requires_grad:
                x._accumulate((gy @ weight.data).reshape(x.shape))
            if weight.requires_grad:
                weight._accumulate(gy2.T @ x.data.reshape(-1, weight.shape[1]))
            if bias.requires_grad:
                bias._accumulate(gy2.sum(axis=0))

        out._backward = _bw
    return out


def mse_loss(target: Tensor, pred: Tensor) -> Tensor:
    """Mean squared error over all elements; differentiable w.r.t. both sides."""
    if target.shape != pred.shape:
        raise ValueError(f"mse_loss: shapes differ, {target.shape} vs {pred.shape}")
    _check_same_dtype(target, pred)
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff), dtype=target.data.dtype)
    if _grad_enabled and (target.requires_grad or pred.requires_grad):
        out.requires_grad = True
        out._parents = tuple(t for t in (target, pred) if t.requires_grad)

        def _bw():
            g = out.grad * diff * target.data.dtype.type(2.0 / diff.size)
            if pred.requires_grad:
                pred._accumulate(g)
            if target.requires_grad:
                target._accumulate(-g)

        out._backward = _bw
    return out


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
