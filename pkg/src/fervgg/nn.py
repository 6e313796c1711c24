"""Layers with explicit forward and backward passes.

Each layer caches what its backward pass needs during ``forward`` and
stores parameter gradients in ``self.grads`` (same keys and shapes as
``self.params``). Convolution runs as im2col + matmul.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import DegenerateBatchError, LabelError, NumericError, ShapeError, StateError
from .tensor import SeededRng, matmul


class Layer:
    training = True

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}

    def train(self, mode: bool = True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x, rng: Optional[SeededRng] = None):
        raise NotImplementedError

    def backward(self, upstream):
        raise NotImplementedError


class Conv2d(Layer):
    """2-d cross-correlation with bias; weights are ``out x in x kh x kw``."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 1):
        super().__init__()
        if weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got {weight.shape}")
        kh, kw = weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.params = {"weight": weight, "bias": bias}
        self.stride = stride
        self.padding = padding
        self._cache = None

    @property
    def weight(self):
        return self.params["weight"]

    @property
    def bias(self):
        return self.params["bias"]

    def output_hw(self, h, w):
        kh, kw = self.weight.shape[2:]
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        return oh, ow

    def forward(self, x, rng=None):
        out_ch, in_ch, kh, kw = self.weight.shape
        if x.ndim != 4 or x.shape[1] != in_ch:
            raise ShapeError(f"conv expects n x {in_ch} x h x w input, got {x.shape}")
        n, _, h, w = x.shape
        if h + 2 * self.padding < kh or w + 2 * self.padding < kw:
            raise ShapeError(f"input {h}x{w} too small for a {kh}x{kw} kernel")
        oh, ow = self.output_hw(h, w)
        s, p = self.stride, self.padding
        xp = np.zeros((n, in_ch, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p:p + h, p:p + w] = x
        # im2col: rows (c, i, j), columns (n, y, x)
        cols = np.empty((in_ch, kh, kw, n, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s].transpose(1, 0, 2, 3)
        cols = cols.reshape(in_ch * kh * kw, n * oh * ow)
        # the tall (pixels x out) product is markedly faster than the wide one
        out = matmul(cols.T, self.weight.reshape(out_ch, -1).T)
        out += self.bias
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(out.reshape(n, oh, ow, out_ch).transpose(0, 3, 1, 2))

    def backward(self, upstream):
        if self._cache is None:
            raise StateError("conv backward called before forward")
        x_shape, cols = self._cache
        out_ch, in_ch, kh, kw = self.weight.shape
        n, _, h, w = x_shape
        oh, ow = self.output_hw(h, w)
        if upstream.shape != (n, out_ch, oh, ow):
            raise ShapeError(f"upstream shape {upstream.shape} != output shape {(n, out_ch, oh, ow)}")
        up_rows = np.ascontiguousarray(upstream.transpose(1, 0, 2, 3)).reshape(out_ch, -1)
        up_cols = upstream.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        dw = matmul(cols, up_cols).T.reshape(self.weight.shape)
        self.grads = {"weight": np.ascontiguousarray(dw), "bias": up_rows.sum(axis=1)}
        dcols = matmul(self.weight.reshape(out_ch, -1).T, up_rows).reshape(in_ch, kh, kw, n, oh, ow)
        s, p = self.stride, self.padding
        dxp = np.zeros((n, in_ch, h + 2 * p, w + 2 * p), dtype=upstream.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
        return dxp[:, :, p:p + h, p:p + w]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return upstream * (x > 0)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x, rng=None):
        self._x = x
        return relu(x)

    def backward(self, upstream):
        if self._x is None:
            raise StateError("relu backward called before forward")
        return relu_backward(self._x, upstream)


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (n, h, w).

    Running statistics follow ``running <- (1 - momentum) * running + momentum * batch``
    with the unbiased batch variance; normalization itself uses the biased one.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        if not 0 < momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.buffers = {"running_mean": np.zeros(channels, dtype), "running_var": np.ones(channels, dtype)}
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def forward(self, x, rng=None):
        c = self.params["gamma"].shape[0]
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeError(f"batchnorm expects n x {c} x h x w, got {x.shape}")
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if self.training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise DegenerateBatchError("train-mode batchnorm needs at least 2 values per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1 - mom) * rm + mom * mean
            rv[...] = (1 - mom) * rv + mom * var * (m / (m - 1))
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean[None, :, None, None].astype(x.dtype)) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, self.training)
        return gamma * xhat + beta

    def backward(self, upstream):
        if self._cache is None:
            raise StateError("batchnorm backward called before forward")
        xhat, inv_std, training = self._cache
        if upstream.shape != xhat.shape:
            raise ShapeError(f"upstream shape {upstream.shape} != {xhat.shape}")
        gamma = self.params["gamma"]
        dbeta = upstream.sum(axis=(0, 2, 3))
        dgamma = (upstream * xhat).sum(axis=(0, 2, 3))
        self.grads = {"gamma": dgamma, "beta": dbeta}
        scale = (gamma * inv_std)[None, :, None, None]
        if not training:
            return upstream * scale
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        return scale * (upstream - (dbeta[None, :, None, None] + xhat * dgamma[None, :, None, None]) / m)


def maxpool_forward(x: np.ndarray):
    """2x2 max pooling with stride 2.

    Returns ``(y, indices)`` where ``indices`` holds the row-major window
    position (0..3) of each maximum; ties go to the first position.
    """
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool expects n x c x h x w with h, w >= 2, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    windows = x[:, :, :2 * oh, :2 * ow].reshape(n, c, oh, 2, ow, 2)
    windows = windows.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool_backward(indices: np.ndarray, upstream: np.ndarray, input_shape) -> np.ndarray:
    n, c, h, w = input_shape
    oh, ow = h // 2, w // 2
    if upstream.shape != (n, c, oh, ow) or indices.shape != upstream.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != pooled shape {(n, c, oh, ow)}")
    routed = np.zeros((n, c, oh, ow, 4), dtype=upstream.dtype)
    np.put_along_axis(routed, indices[..., None], upstream[..., None], axis=-1)
    routed = routed.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
    dx = np.zeros(input_shape, dtype=upstream.dtype)
    dx[:, :, :2 * oh, :2 * ow] = routed
    return dx


class MaxPool2d(Layer):
    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, rng=None):
        y, idx = maxpool_forward(x)
        self._cache = (idx, x.shape)
        return y

    def backward(self, upstream):
        if self._cache is None:
            raise StateError("maxpool backward called before forward")
        idx, shape = self._cache
        return maxpool_backward(idx, upstream, shape)


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        if self._shape is None:
            raise StateError("flatten backward called before forward")
        return upstream.reshape(self._shape)


class Linear(Layer):
    """``y = x W^T + b`` with ``W`` of shape ``out x in``."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        super().__init__()
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"bad linear parameter shapes {weight.shape}, {bias.shape}")
        self.params = {"weight": weight, "bias": bias}
        self._x = None

    def forward(self, x, rng=None):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear expects n x {w.shape[1]} input, got {x.shape}")
        self._x = x
        return matmul(x, w.T) + self.params["bias"]

    def backward(self, upstream):
        if self._x is None:
            raise StateError("linear backward called before forward")
        w = self.params["weight"]
        if upstream.shape != (self._x.shape[0], w.shape[0]):
            raise ShapeError(f"upstream shape {upstream.shape} does not match linear output")
        self.grads = {"weight": matmul(upstream.T, self._x), "bias": upstream.sum(axis=0)}
        return matmul(upstream, w)


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1/(1-p)`` so eval is the identity."""

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p
        self.mask = None

    def forward(self, x, rng=None):
        if not self.training or self.p == 0:
            self.mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout requires an rng")
        keep = rng.random(x.shape) >= self.p
        self.mask = (keep / (1.0 - self.p)).astype(x.dtype)
        return x * self.mask

    def forward_with_mask(self, x, mask):
        self.mask = mask
        return x * mask

    def backward(self, upstream):
        if self.mask is None:
            return upstream
        return upstream * self.mask


@dataclass
class LossResult:
    loss: float
    logit_grad: np.ndarray


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> LossResult:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1
    grad /= n
    return LossResult(loss, grad.astype(logits.dtype, copy=False))
