"""Neural-network primitives on plain numpy arrays.

Every operation comes as an explicit forward/backward pair; there is no
graph machinery.  Activations are ``(batch, channels, height, width)``
arrays.  Forward functions return the output plus whatever the matching
backward function needs, backward functions take the upstream gradient and
return gradients in the same order as the forward inputs.

Convolution is evaluated as a patch-matrix product (im2col followed by one
GEMM), which keeps the arithmetic inside the BLAS and therefore bit-stable
across thread counts.  The input-gradient pass scatters patch gradients
back with one strided accumulation per kernel tap.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import InputError, TrainingAbort
from .metrics import SsimConfig, _moment_maps, _sliding_sums


class Tensor:
    """A learnable array paired with an optional gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None

    def add_grad(self, g: np.ndarray) -> None:
        """Accumulate a gradient contribution; the first one is adopted as is."""
        if g.shape != self.value.shape:
            raise InputError(
                f"gradient shape {g.shape} does not match value shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    @property
    def shape(self):
        return self.value.shape


class ParamStore:
    """Ordered, name-addressed parameter collection with Adam moment state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise InputError(f"parameter {name!r} registered twice")
        self._params[name] = tensor
        self.m[name] = np.zeros_like(tensor.value)
        self.v[name] = np.zeros_like(tensor.value)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    @property
    def n_values(self) -> int:
        return sum(t.value.size for t in self._params.values())


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x, weight, stride, padding):
    if x.ndim != 4 or weight.ndim != 4:
        raise InputError("conv2d expects (B, C, H, W) input and (O, C, kh, kw) weight")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise InputError(f"input has {cin} channels but weight expects {cin_w}")
    if stride < 1 or padding < 0:
        raise InputError(f"bad stride/padding: {stride}/{padding}")
    # Positions that do not fit a full kernel footprint are dropped (floor
    # semantics), matching the usual strided-convolution shape rule.
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or kw > w + 2 * padding or oh < 1 or ow < 1:
        raise InputError(
            f"kernel {kh}x{kw} stride {stride} pad {padding} cannot be applied "
            f"to a {h}x{w} input"
        )
    return b, cin, cout, kh, kw, oh, ow


def _pad_hw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp, kh, kw, stride, oh, ow):
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]  # (B, C, oh, ow, kh, kw)
    b, c = xp.shape[:2]
    return np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * oh * ow, c * kh * kw
    )


def conv2d_forward(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlate a channel-grouped kernel stack over the input."""
    b, cin, cout, kh, kw, oh, ow = _conv_geometry(x, weight, stride, padding)
    cols = _im2col(_pad_hw(x, padding), kh, kw, stride, oh, ow)
    out = cols @ weight.reshape(cout, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(b, oh, ow, cout).transpose(0, 3, 1, 2))


def conv2d_backward(dy, x, weight, stride: int = 1, padding: int = 0, bias: bool = True):
    """Gradients of conv2d_forward w.r.t. input, weight, and bias.

    The patch matrix is rebuilt from the saved input rather than cached, so
    the memory cost of a training step stays one activation per layer.
    """
    b, cin, cout, kh, kw, oh, ow = _conv_geometry(x, weight, stride, padding)
    if dy.shape != (b, cout, oh, ow):
        raise InputError(f"upstream gradient has shape {dy.shape}, expected {(b, cout, oh, ow)}")
    dy2 = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(b * oh * ow, cout)
    xp = _pad_hw(x, padding)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    dweight = (dy2.T @ cols).reshape(weight.shape)
    dbias = dy2.sum(axis=0) if bias else None
    dcols = dy2 @ weight.reshape(cout, -1)
    dpatches = dcols.reshape(b, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            dxp[
                :,
                :,
                u : u + (oh - 1) * stride + 1 : stride,
                v : v + (ow - 1) * stride + 1 : stride,
            ] += dpatches[..., u, v]
    if padding:
        dx = dxp[:, :, padding:-padding, padding:-padding].copy()
    else:
        dx = dxp
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d_forward(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    *,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
):
    """Per-channel normalization with affine scale and shift.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (the running variance stores the unbiased
    estimate).  In eval mode the running buffers are frozen inputs, which
    makes the op a pure per-channel affine map.
    """
    if x.ndim != 4:
        raise InputError("batchnorm2d expects a (B, C, H, W) input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InputError(f"gamma/beta must have shape ({c},)")
    if train:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        n = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv, gamma, train)
    return y, cache


def batchnorm2d_backward(dy, cache):
    xhat, inv, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    scale = (gamma * inv)[None, :, None, None]
    if not train:
        return dy * scale, dgamma, dbeta
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = (scale / n) * (
        n * dy - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None]
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise and resampling ops


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def sigmoid_forward(x):
    """Logistic function with saturated outputs nudged to the nearest interior
    representable value, so results are strictly inside (0, 1) in any dtype."""
    y = expit(x)
    info = np.finfo(y.dtype)
    np.clip(y, info.tiny, np.nextafter(y.dtype.type(1.0), y.dtype.type(0.0)), out=y)
    return y, y


def sigmoid_backward(dy, y):
    return dy * (y * (1.0 - y))


def upsample_nearest2x_forward(x):
    if x.ndim != 4:
        raise InputError("upsample expects a (B, C, H, W) input")
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2x_backward(dy):
    b, c, h2, w2 = dy.shape
    return dy.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# loss heads: scalar objective plus gradient w.r.t. the prediction


def _check_pair(x, y):
    if x.shape != y.shape:
        raise InputError(f"prediction shape {x.shape} does not match target {y.shape}")
    if x.ndim != 4:
        raise InputError("loss heads expect (B, C, H, W) arrays")


def l1_objective(x, y):
    """Mean absolute error and its gradient in the prediction."""
    _check_pair(x, y)
    d = x.astype(np.float64) - y.astype(np.float64)
    loss = float(np.mean(np.abs(d)))
    dx = (np.sign(d) / d.size).astype(x.dtype)
    return loss, dx


def l2_objective(x, y):
    """Mean squared error and its gradient in the prediction."""
    _check_pair(x, y)
    d = x.astype(np.float64) - y.astype(np.float64)
    loss = float(np.mean(d * d))
    dx = (2.0 * d / d.size).astype(x.dtype)
    return loss, dx


def ssim_objective(x, y, config: SsimConfig = SsimConfig()):
    """Structural-dissimilarity objective: 1 - mean windowed SSIM.

    Returns the scalar loss and its exact gradient with respect to the
    prediction ``x``.  Internals run in double precision regardless of the
    input dtype; the gradient is cast back to ``x.dtype``.
    """
    _check_pair(x, y)
    w = config.window_size
    if x.shape[2] < w or x.shape[3] < w:
        raise InputError(f"spatial size {x.shape[2:]} is smaller than the window {w}")
    c1, c2 = config.c1, config.c2
    n = w * w
    m = n - 1
    x64 = x.astype(np.float64)
    y64 = y.astype(np.float64)
    mx, my, vx, vy, cxy = _moment_maps(x64, y64, w)
    a1 = 2.0 * mx * my + c1
    a2 = 2.0 * cxy + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    inv_bb = 1.0 / (b1 * b2)
    s = a1 * a2 * inv_bb
    loss = 1.0 - float(np.mean(s))
    # dS/dx_i decomposes into a per-window constant plus terms linear in the
    # pixel values; each is scattered back through the window footprint.
    ty = (2.0 / m) * a1 * inv_bb
    tx = (-2.0 / m) * s / b2
    t0 = (2.0 / n) * (my * a2 * inv_bb - s * mx / b1) - ty * my - tx * mx
    grad = _scatter_windows(t0, w) + y64 * _scatter_windows(ty, w) + x64 * _scatter_windows(tx, w)
    grad *= -1.0 / s.size
    return loss, grad.astype(x.dtype)


def _scatter_windows(maps, w):
    """Transpose of the stride-1 window average: sum map cells into pixels."""
    pad = [(0, 0)] * (maps.ndim - 2) + [(w - 1, w - 1), (w - 1, w - 1)]
    return _sliding_sums(np.pad(maps, pad), w)


OBJECTIVES = {
    "l1": lambda x, y, cfg: l1_objective(x, y),
    "l2": lambda x, y, cfg: l2_objective(x, y),
    "ssim": ssim_objective,
}


# ---------------------------------------------------------------------------
# optimizer


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update over every parameter in the store.

    All gradients are validated before any state is touched; a missing or
    non-finite gradient aborts the step with the parameter name and leaves
    parameters, moments, and the step counter untouched.
    """
    if not (lr >= 0) or not np.isfinite(lr):
        raise InputError(f"learning rate must be finite and non-negative, got {lr}")
    if not (0 <= beta1 < 1) or not (0 <= beta2 < 1):
        raise InputError("betas must lie in [0, 1)")
    if not (eps > 0):
        raise InputError("eps must be positive")
    for name, tensor in store.items():
        if tensor.grad is None:
            raise TrainingAbort(f"parameter {name!r} has no gradient")
        if tensor.grad.shape != tensor.value.shape:
            raise TrainingAbort(f"parameter {name!r} has a mis-shaped gradient")
        if not np.all(np.isfinite(tensor.grad)):
            raise TrainingAbort(f"non-finite gradient in parameter {name!r}")
    store.t += 1
    bc1 = 1.0 - beta1**store.t
    bc2 = 1.0 - beta2**store.t
    for name, tensor in store.items():
        g = tensor.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        tensor.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
