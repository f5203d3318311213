"""Layer zoo with hand-written backward passes.

Tensors are ``float64`` arrays in ``(N, C, H, W)`` layout.  Each layer
caches what its backward pass needs during ``forward`` and *accumulates*
parameter gradients into ``self.grads`` in ``backward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from ..core import _bilinear_matrix
from ..shapecodec import disc

KINDS = ("CONV", "TCONV", "MAXPOOL", "UPSAMPLE", "LEAKY_RELU", "BATCHNORM", "SIGMOID", "DENSE",
         "DT_FIXED")
PARAMETRIC = ("CONV", "TCONV", "DENSE")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    alpha: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.stride < 1 or min(self.kernel) < 1:
            raise ValueError(f"{self.kind}: stride and kernel must be >= 1")
        if self.kind in PARAMETRIC + ("DT_FIXED",) and self.filters < 1:
            raise ValueError(f"{self.kind} needs a positive filter count")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "filters": self.filters, "kernel": list(self.kernel),
                "stride": self.stride, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], d.get("filters", 0), tuple(d.get("kernel", (1, 1))),
                   d.get("stride", 1), d.get("alpha", 0.1))


def conv(filters, k=3, stride=1) -> LayerSpec:
    return LayerSpec("CONV", filters, (k, k), stride)


def tconv(filters, k=3, stride=1) -> LayerSpec:
    return LayerSpec("TCONV", filters, (k, k), stride)


def maxpool(k=2, stride=2) -> LayerSpec:
    return LayerSpec("MAXPOOL", 0, (k, k), stride)


def upsample(factor=2) -> LayerSpec:
    return LayerSpec("UPSAMPLE", 0, (factor, factor), 1)


def leaky(alpha=0.1) -> LayerSpec:
    return LayerSpec("LEAKY_RELU", alpha=alpha)


def batchnorm() -> LayerSpec:
    return LayerSpec("BATCHNORM")


def sigmoid() -> LayerSpec:
    return LayerSpec("SIGMOID")


def dense(units) -> LayerSpec:
    return LayerSpec("DENSE", units)


def dt_fixed(levels) -> LayerSpec:
    k = 2 * levels - 1
    return LayerSpec("DT_FIXED", levels, (k, k), 1)


class Layer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.in_shape: tuple[int, int, int] | None = None
        self.out_shape: tuple[int, int, int] | None = None
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def build(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(self.output_shape(self.in_shape))
        return self.out_shape

    def output_shape(self, in_shape):
        return in_shape

    def init(self, rng: np.random.Generator) -> None:
        pass

    def zero_grad(self) -> None:
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.spec.kind}: backward called without a forward cache")
        return self._cache

    def _accumulate(self, name: str, g: np.ndarray) -> None:
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.copy()


def _same_pad(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


class Conv2D(Layer):
    """Zero-padded convolution with output side ``ceil(in / stride)``."""

    def output_shape(self, in_shape):
        c, h, w = in_shape
        kh, kw = self.spec.kernel
        return (self.spec.filters, _same_pad(h, kh, self.spec.stride)[0],
                _same_pad(w, kw, self.spec.stride)[0])

    def init(self, rng):
        c = self.in_shape[0]
        kh, kw = self.spec.kernel
        fan_in = c * kh * kw
        bound = math.sqrt(6.0 / fan_in)
        self.params = {"W": rng.uniform(-bound, bound, (self.spec.filters, c, kh, kw)),
                       "b": np.zeros(self.spec.filters)}
        self.zero_grad()

    def _pad(self, x):
        kh, kw = self.spec.kernel
        s = self.spec.stride
        ho, pt, pb = _same_pad(x.shape[2], kh, s)
        wo, pl, pr = _same_pad(x.shape[3], kw, s)
        return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))), (pt, pl, ho, wo)

    def forward(self, x, train=False):
        kh, kw = self.spec.kernel
        s = self.spec.stride
        xp, (pt, pl, ho, wo) = self._pad(x)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        n, c = x.shape[:2]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)
        wmat = self.params["W"].reshape(self.spec.filters, -1)
        out = cols @ wmat.T + self.params["b"]
        self._cache = (cols, x.shape, xp.shape, pt, pl, ho, wo)
        return out.transpose(0, 3, 1, 2)

    def backward(self, g):
        cols, xshape, xpshape, pt, pl, ho, wo = self._need_cache()
        kh, kw = self.spec.kernel
        s = self.spec.stride
        n, c = xshape[:2]
        gt = g.transpose(0, 2, 3, 1)  # (n, ho, wo, O)
        wmat = self.params["W"].reshape(self.spec.filters, -1)
        self._accumulate("W", (gt.reshape(-1, gt.shape[-1]).T @ cols.reshape(-1, cols.shape[-1]))
                         .reshape(self.params["W"].shape))
        self._accumulate("b", gt.sum(axis=(0, 1, 2)))
        dcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(xpshape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, pt:pt + xshape[2], pl:pl + xshape[3]]


class TConv2D(Layer):
    """Transposed convolution (no cropping): output side ``stride * (in - 1) + k``."""

    def output_shape(self, in_shape):
        c, h, w = in_shape
        kh, kw = self.spec.kernel
        s = self.spec.stride
        return (self.spec.filters, s * (h - 1) + kh, s * (w - 1) + kw)

    def init(self, rng):
        c = self.in_shape[0]
        kh, kw = self.spec.kernel
        bound = math.sqrt(6.0 / (c * kh * kw))
        self.params = {"W": rng.uniform(-bound, bound, (c, self.spec.filters, kh, kw)),
                       "b": np.zeros(self.spec.filters)}
        self.zero_grad()

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        kh, kw = self.spec.kernel
        s = self.spec.stride
        o = self.spec.filters
        xt = x.transpose(0, 2, 3, 1)  # (n, h, w, c)
        y = (xt @ self.params["W"].reshape(c, -1)).reshape(n, h, w, o, kh, kw)
        _, ho, wo = self.output_shape((c, h, w))
        out = np.zeros((n, o, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out[:, :, i:i + s * h:s, j:j + s * w:s] += y[..., i, j].transpose(0, 3, 1, 2)
        out += self.params["b"][None, :, None, None]
        self._cache = xt
        return out

    def backward(self, g):
        xt = self._need_cache()
        n, h, w, c = xt.shape
        kh, kw = self.spec.kernel
        s = self.spec.stride
        o = self.spec.filters
        dy = np.empty((n, h, w, o, kh, kw))
        for i in range(kh):
            for j in range(kw):
                dy[..., i, j] = g[:, :, i:i + s * h:s, j:j + s * w:s].transpose(0, 2, 3, 1)
        dy2 = dy.reshape(n * h * w, -1)
        self._accumulate("W", (xt.reshape(-1, c).T @ dy2).reshape(self.params["W"].shape))
        self._accumulate("b", g.sum(axis=(0, 2, 3)))
        dx = dy2 @ self.params["W"].reshape(c, -1).T
        return dx.reshape(n, h, w, c).transpose(0, 3, 1, 2)


class MaxPool(Layer):
    def output_shape(self, in_shape):
        c, h, w = in_shape
        s = self.spec.stride
        if h % s or w % s:
            raise ValueError(f"MAXPOOL stride {s} does not divide input {h}x{w}")
        return (c, h // s, w // s)

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        kh, kw = self.spec.kernel
        s = self.spec.stride
        ho, wo = h // s, w // s
        ph = max((ho - 1) * s + kh - h, 0)
        pw = max((wo - 1) * s + kw - w, 0)
        xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(n, c, ho, wo, kh * kw)
        arg = flat.argmax(axis=-1)
        self._cache = (arg, x.shape, xp.shape)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        arg, xshape, xpshape = self._need_cache()
        kh, kw = self.spec.kernel
        s = self.spec.stride
        ho, wo = g.shape[2:]
        dxp = np.zeros(xpshape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(arg == i * kw + j, g, 0.0)
        return dxp[:, :, :xshape[2], :xshape[3]]


class Upsample(Layer):
    """Fixed bilinear up-sampling by an integer factor."""

    def output_shape(self, in_shape):
        c, h, w = in_shape
        fh, fw = self.spec.kernel
        return (c, h * fh, w * fw)

    def forward(self, x, train=False):
        _, _, h, w = x.shape
        fh, fw = self.spec.kernel
        uh, uw = _bilinear_matrix(h, h * fh), _bilinear_matrix(w, w * fw)
        self._cache = (uh, uw)
        return np.einsum("yh,nchw,xw->ncyx", uh, x, uw, optimize=True)

    def backward(self, g):
        uh, uw = self._need_cache()
        return np.einsum("yh,ncyx,xw->nchw", uh, g, uw, optimize=True)


class LeakyReLU(Layer):
    def forward(self, x, train=False):
        self._cache = x > 0
        return np.where(self._cache, x, self.spec.alpha * x)

    def backward(self, g):
        pos = self._need_cache()
        return np.where(pos, g, self.spec.alpha * g)


class Sigmoid(Layer):
    def forward(self, x, train=False):
        out = 0.5 * (1.0 + np.tanh(0.5 * x))
        self._cache = out
        return out

    def backward(self, g):
        y = self._need_cache()
        return g * y * (1 - y)


class BatchNorm(Layer):
    """Per-channel batch normalization; batch statistics in training, running ones otherwise."""

    eps = 1e-5
    momentum = 0.9

    def init(self, rng):
        c = self.in_shape[0]
        self.params = {"gamma": np.ones(c), "beta": np.zeros(c)}
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.zero_grad()

    def forward(self, x, train=False):
        gamma = self.params["gamma"][None, :, None, None]
        beta = self.params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            cnt = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * cnt / max(cnt - 1, 1)
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, train)
        return gamma * xhat + beta

    def backward(self, g):
        xhat, inv, train = self._need_cache()
        gamma = self.params["gamma"]
        self._accumulate("gamma", (g * xhat).sum(axis=(0, 2, 3)))
        self._accumulate("beta", g.sum(axis=(0, 2, 3)))
        gx = g * (gamma * inv)[None, :, None, None]
        if not train:
            return gx
        cnt = g.shape[0] * g.shape[2] * g.shape[3]
        return gx - (gx.sum(axis=(0, 2, 3), keepdims=True)
                     + xhat * (gx * xhat).sum(axis=(0, 2, 3), keepdims=True)) / cnt


class Dense(Layer):
    """Fully connected layer; output shape ``(units, 1, 1)``."""

    def output_shape(self, in_shape):
        return (self.spec.filters, 1, 1)

    def init(self, rng):
        d = int(np.prod(self.in_shape))
        bound = math.sqrt(6.0 / d)
        self.params = {"W": rng.uniform(-bound, bound, (d, self.spec.filters)),
                       "b": np.zeros(self.spec.filters)}
        self.zero_grad()

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        self._cache = (flat, x.shape)
        return (flat @ self.params["W"] + self.params["b"])[:, :, None, None]

    def backward(self, g):
        flat, xshape = self._need_cache()
        g2 = g.reshape(g.shape[0], -1)
        self._accumulate("W", flat.T @ g2)
        self._accumulate("b", g2.sum(axis=0))
        return (g2 @ self.params["W"].T).reshape(xshape)


class DtFixed(Layer):
    """Channel ``r - 1`` is filtered with the fixed disc of radius ``r``; no parameters."""

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.spec.filters:
            raise ValueError(f"DT_FIXED expects {self.spec.filters} level channels, got {c}")
        return in_shape

    def _apply(self, x):
        out = np.empty_like(x)
        for r in range(1, x.shape[1] + 1):
            k = disc(r).astype(np.float64)
            for n in range(x.shape[0]):
                out[n, r - 1] = ndimage.correlate(x[n, r - 1], k, mode="constant", cval=0.0)
        return out

    def forward(self, x, train=False):
        self._cache = True
        return self._apply(x)

    def backward(self, g):
        self._need_cache()
        # disc filters are symmetric, so the adjoint is the same filtering
        return self._apply(g)


LAYER_TYPES = {"CONV": Conv2D, "TCONV": TConv2D, "MAXPOOL": MaxPool, "UPSAMPLE": Upsample,
               "LEAKY_RELU": LeakyReLU, "SIGMOID": Sigmoid, "BATCHNORM": BatchNorm,
               "DENSE": Dense, "DT_FIXED": DtFixed}


def make_layer(spec: LayerSpec) -> Layer:
    return LAYER_TYPES[spec.kind](spec)
