"""A small convolutional network with hand-written backward passes.

Tensors are NCHW numpy arrays.  Convolutions are stride 1 with zero "same"
padding; kernels are 1x1 or 3x3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    has_batchnorm: bool = True
    has_activation: bool = True
    activation_slope: float = 0.01

    def __post_init__(self):
        if self.kernel_size not in (1, 3):
            raise UsageError("kernel_size must be 1 or 3")
        if self.in_channels < 1 or self.out_channels < 1:
            raise UsageError("channel counts must be positive")
        if not 0 < self.activation_slope < 1:
            raise UsageError("leaky ReLU slope must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "has_batchnorm": self.has_batchnorm,
            "has_activation": self.has_activation,
            "activation_slope": self.activation_slope,
        }


def default_layer_specs(width: int = 32, depth: int = 5, slope: float = 0.01) -> list[ConvLayerSpec]:
    """``depth - 1`` 3x3 conv+BN+leaky-ReLU blocks followed by a bare 1x1 conv."""
    if depth < 2:
        raise UsageError("depth must be >= 2")
    specs = [ConvLayerSpec(1, width, 3, True, True, slope)]
    specs += [ConvLayerSpec(width, width, 3, True, True, slope) for _ in range(depth - 2)]
    specs.append(ConvLayerSpec(width, 1, 1, False, False, slope))
    return specs


# -- layers -----------------------------------------------------------------------
#
# The network runs channel-last (N, H, W, C).  A 3x3 same-padded convolution is
# evaluated on the zero-padded input flattened to rows of length C: for kernel
# tap (i, j) the input rows needed by every output pixel form one contiguous
# slice starting at i * (W + 2) + j, so each tap is a single matmul with no
# patch copies.  Rows that fall in the padding border are computed and dropped.


def _pad_flat(x: np.ndarray, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    flat = np.zeros((n * hp * wp + 2 * pad * wp + 2 * pad, c), dtype=x.dtype)
    flat[: n * hp * wp].reshape(n, hp, wp, c)[:, pad : pad + h, pad : pad + w] = x
    return flat


def _conv_nhwc(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    c_out, c_in, k, _ = weights.shape
    n, h, w, _ = x.shape
    if k == 1:
        out = x.reshape(-1, c_in) @ np.ascontiguousarray(weights.reshape(c_out, c_in).T)
        out += bias
        return out.reshape(n, h, w, c_out)
    pad = k // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    rows = n * hp * wp
    flat = _pad_flat(x, pad)
    taps = np.ascontiguousarray(weights.transpose(2, 3, 1, 0))  # (k, k, C_in, C_out)
    out = np.empty((rows, c_out), dtype=np.result_type(x, weights))
    first = True
    for i in range(k):
        for j in range(k):
            s = i * wp + j
            if first:
                np.matmul(flat[s : s + rows], taps[i, j], out=out)
                first = False
            else:
                out += flat[s : s + rows] @ taps[i, j]
    out += bias
    return out.reshape(n, hp, wp, c_out)[:, :h, :w]


def _conv_nhwc_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray, input_grad: bool = True):
    c_out, c_in, k, _ = weights.shape
    n, h, w, _ = x.shape
    dbias = dout.sum(axis=(0, 1, 2))
    if k == 1:
        dmat = dout.reshape(-1, c_out)
        dweights = (dmat.T @ x.reshape(-1, c_in)).reshape(weights.shape)
        dx = (dmat @ weights.reshape(c_out, c_in)).reshape(n, h, w, c_in) if input_grad else None
        return dx, dweights, dbias
    pad = k // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    rows = n * hp * wp
    flat = _pad_flat(x, pad)
    dpad = np.zeros((rows, c_out), dtype=dout.dtype)
    dpad.reshape(n, hp, wp, c_out)[:, :h, :w] = dout
    dflat = np.zeros_like(flat) if input_grad else None
    dweights = np.empty((k, k, c_in, c_out), dtype=np.result_type(x, dout))
    taps_t = np.ascontiguousarray(weights.transpose(2, 3, 0, 1))  # (k, k, C_out, C_in)
    for i in range(k):
        for j in range(k):
            s = i * wp + j
            dweights[i, j] = flat[s : s + rows].T @ dpad
            if input_grad:
                dflat[s : s + rows] += dpad @ taps_t[i, j]
    dweights = dweights.transpose(3, 2, 0, 1)
    if not input_grad:
        return None, dweights, dbias
    dx = dflat[:rows].reshape(n, hp, wp, c_in)[:, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(dx), dweights, dbias


def _check_conv(x, weights, bias):
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weights")
    c_out, c_in, k, k2 = weights.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError("conv2d kernels must be 1x1 or 3x3")
    if x.shape[1] != c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``weights`` (C_out, C_in, k, k) plus bias."""
    _check_conv(x, weights, bias)
    out = _conv_nhwc(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), weights, bias)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Return ``(dx, dweights, dbias)`` for :func:`conv2d_forward`."""
    _check_conv(x, weights, None)
    n, _, h, w = x.shape
    if dout.shape != (n, weights.shape[0], h, w):
        raise ShapeError(f"upstream gradient shape {dout.shape} does not match forward output")
    dx, dw, db = _conv_nhwc_backward(
        np.ascontiguousarray(dout.transpose(0, 2, 3, 1)),
        np.ascontiguousarray(x.transpose(0, 2, 3, 1)),
        weights,
    )
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dw, db


def _bn_nhwc(x, gamma, beta, running_mean, running_var, mode, momentum, eps):
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm parameters do not match channel count")
    if mode == "train":
        if x.shape[0] < 2:
            raise UsageError("train-mode batchnorm needs a batch of at least 2")
        m = x.size // c
        mean = x.mean(axis=(0, 1, 2))
        centered = x - mean
        var = np.einsum("nhwc,nhwc->c", centered, centered) / m
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered
        xhat *= inv_std
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
    else:
        raise UsageError(f"unknown batchnorm mode {mode!r}")
    out = xhat * gamma
    out += beta
    return out, (xhat, inv_std, mode)


def _bn_nhwc_backward(dout, cache, gamma):
    xhat, inv_std, mode = cache
    dgamma = np.einsum("nhwc,nhwc->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 1, 2))
    if mode == "eval":
        return dout * (gamma * inv_std), dgamma, dbeta
    m = xhat.size // xhat.shape[-1]
    # dx = gamma * inv_std * (dout - mean(dout) - xhat * mean(dout * xhat))
    dx = dout - dbeta / m
    dx -= xhat * (dgamma / m)
    dx *= gamma * inv_std
    return dx, dgamma, dbeta


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation of an NCHW tensor.

    ``"train"`` mode normalises with batch statistics over (N, H, W) and
    updates ``running_mean`` / ``running_var`` in place (the latter with the
    unbiased variance); ``"eval"`` mode uses the running statistics.  Returns
    ``(output, cache)``.
    """
    out, cache = _bn_nhwc(
        np.ascontiguousarray(x.transpose(0, 2, 3, 1)), gamma, beta,
        running_mean, running_var, mode, momentum, eps,
    )
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cache


def batchnorm_backward(dout, cache, gamma):
    """Return ``(dx, dgamma, dbeta)`` for an NCHW upstream gradient."""
    dx, dgamma, dbeta = _bn_nhwc_backward(
        np.ascontiguousarray(dout.transpose(0, 2, 3, 1)), cache, gamma
    )
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), dgamma, dbeta


def leaky_relu(x, slope=0.01):
    # max(x, slope * x) equals the piecewise definition for 0 < slope < 1
    return np.maximum(x, x * np.asarray(slope, dtype=x.dtype))


def leaky_relu_backward(dout, x, slope=0.01):
    """Upstream gradient times 1 (x >= 0, including exactly 0) or ``slope``."""
    factor = np.maximum((x >= 0).astype(dout.dtype), np.asarray(slope, dtype=dout.dtype))
    return dout * factor


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.vdot(diff, diff).real / n), (2.0 / n) * diff


# -- network ----------------------------------------------------------------------

PARAM_ORDER = ("weight", "bias", "gamma", "beta", "running_mean", "running_var")


@dataclass
class ConvNet:
    specs: list[ConvLayerSpec]
    layers: list[dict]
    mode: str = "train"
    dtype: np.dtype = np.float32
    momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS
    _cache: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.specs[0].in_channels != 1 or self.specs[-1].out_channels != 1:
            raise UsageError("network must map 1 channel to 1 channel")
        last = self.specs[-1]
        if last.kernel_size != 1 or last.has_batchnorm or last.has_activation:
            raise UsageError("last layer must be a bare 1x1 convolution")
        for a, b in zip(self.specs, self.specs[1:]):
            if a.out_channels != b.in_channels:
                raise UsageError("consecutive layer channel counts disagree")
        self.dtype = np.dtype(self.dtype)

    @classmethod
    def create(cls, specs=None, seed: int = 0, dtype=np.float32) -> "ConvNet":
        """Fan-in scaled uniform weights; BN at gamma=1, beta=0, mean=0, var=1."""
        specs = list(specs or default_layer_specs())
        rng = np.random.default_rng(seed)
        layers = []
        for s in specs:
            fan_in = s.in_channels * s.kernel_size**2
            bound = math.sqrt(1.0 / fan_in)
            shape = (s.out_channels, s.in_channels, s.kernel_size, s.kernel_size)
            layer = {
                "weight": rng.uniform(-bound, bound, shape).astype(dtype),
                "bias": rng.uniform(-bound, bound, s.out_channels).astype(dtype),
            }
            if s.has_batchnorm:
                layer["gamma"] = np.ones(s.out_channels, dtype)
                layer["beta"] = np.zeros(s.out_channels, dtype)
                layer["running_mean"] = np.zeros(s.out_channels, dtype)
                layer["running_var"] = np.ones(s.out_channels, dtype)
            layers.append(layer)
        return cls(specs, layers, dtype=np.dtype(dtype))

    @classmethod
    def identity(cls, dtype=np.float64) -> "ConvNet":
        """Single 1x1 convolution with weight 1 and bias 0."""
        spec = ConvLayerSpec(1, 1, 1, False, False)
        layer = {"weight": np.ones((1, 1, 1, 1), dtype), "bias": np.zeros(1, dtype)}
        return cls([spec], [layer], mode="eval", dtype=np.dtype(dtype))

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def copy(self) -> "ConvNet":
        return ConvNet(
            list(self.specs),
            [{k: v.copy() for k, v in layer.items()} for layer in self.layers],
            self.mode,
            self.dtype,
            self.momentum,
            self.bn_eps,
        )

    def astype(self, dtype) -> "ConvNet":
        net = self.copy()
        net.dtype = np.dtype(dtype)
        net.layers = [{k: v.astype(dtype) for k, v in layer.items()} for layer in net.layers]
        return net

    def trainable(self) -> list[tuple[int, str]]:
        """(layer index, name) of every trainable tensor, in declared order."""
        keys = []
        for i, layer in enumerate(self.layers):
            for name in ("weight", "bias", "gamma", "beta"):
                if name in layer:
                    keys.append((i, name))
        return keys

    def parameters(self) -> list[np.ndarray]:
        return [self.layers[i][name] for i, name in self.trainable()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Apply all layers to (N, 1, H, W) input; caches intermediates for :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"network input must be (N, 1, H, W), got {x.shape}")
        n, _, h, w = x.shape
        x = x.reshape(n, h, w, 1)
        self._cache = []
        for spec, layer in zip(self.specs, self.layers):
            entry = {"conv_in": x}
            x = _conv_nhwc(x, layer["weight"], layer["bias"])
            if spec.has_batchnorm:
                x, entry["bn"] = _bn_nhwc(
                    x, layer["gamma"], layer["beta"], layer["running_mean"],
                    layer["running_var"], self.mode, self.momentum, self.bn_eps,
                )
            if spec.has_activation:
                entry["act_in"] = x
                x = leaky_relu(x, spec.activation_slope)
            self._cache.append(entry)
        return np.ascontiguousarray(x).reshape(n, 1, h, w)

    __call__ = forward

    def backward(self, dout: np.ndarray, input_grad: bool = True):
        """Return ``(dinput, grads)`` with ``grads`` aligned to :meth:`trainable`.

        With ``input_grad=False`` the input gradient is skipped and ``dinput`` is None.
        """
        if not self._cache:
            raise UsageError("backward called before forward")
        dout = np.asarray(dout, dtype=self.dtype)
        n, _, h, w = dout.shape
        dout = dout.reshape(n, h, w, 1)
        per_layer = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            spec, layer, entry = self.specs[i], self.layers[i], self._cache[i]
            g = {}
            if spec.has_activation:
                dout = leaky_relu_backward(dout, entry["act_in"], spec.activation_slope)
            if spec.has_batchnorm:
                dout, g["gamma"], g["beta"] = _bn_nhwc_backward(dout, entry["bn"], layer["gamma"])
            dout, g["weight"], g["bias"] = _conv_nhwc_backward(
                dout, entry["conv_in"], layer["weight"], input_grad or i > 0
            )
            per_layer[i] = g
        grads = [per_layer[i][name] for i, name in self.trainable()]
        return (dout.reshape(n, 1, h, w) if input_grad else None), grads


def cnn_forward(net: ConvNet, images: np.ndarray) -> np.ndarray:
    return net.forward(images)


def cnn_backward(net: ConvNet, upstream: np.ndarray, input_grad: bool = True):
    return net.backward(upstream, input_grad)


# -- optimiser --------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at Adam step {state.t + 1}", index=state.t + 1)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)
    return params, state
