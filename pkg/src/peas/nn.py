"""Minimal dense-tensor neural network engine.

Images are CHW float32 arrays in [0, 1]; batches are NCHW. Every layer has an
exact forward pass and a hand-written backward pass, so the same code gives
parameter gradients (training) and input gradients (attacks).

Layers never store state during a forward pass: caches are returned to the
caller, which keeps a trained :class:`Network` safe to share across threads.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a tensor does not match the shape a network expects."""


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, dout, param_grads=True):
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def init_params(self, in_shape, rng):
        pass


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def config(self):
        return {
            "kind": self.kind,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "stride": self.stride,
            "padding": self.padding,
        }

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        k, s, p = self.kernel_size, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {k} does not fit input {in_shape}")
        return (self.out_channels, ho, wo)

    def init_params(self, in_shape, rng):
        fan_in = in_shape[0] * self.kernel_size**2
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.out_channels, in_shape[0], self.kernel_size, self.kernel_size))
        self.params = {"W": w.astype(DTYPE), "b": np.zeros(self.out_channels, DTYPE)}

    def _cols(self, x):
        k, s, p = self.kernel_size, self.stride, self.padding
        # channel-major (C, N, H, W): each im2col row is then a strided slab of one channel
        xt = x.transpose(1, 0, 2, 3)
        if p:
            n, c, h, w = x.shape
            padded = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
            padded[:, :, p:-p, p:-p] = xt
            xt = padded
        win = sliding_window_view(xt, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        c, n, ho, wo = win.shape[:4]
        # (C*k*k, N*Ho*Wo), matching W.reshape(O, C*k*k)
        cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, n * ho * wo)
        return cols, xt.shape, ho, wo

    def forward(self, x):
        w, b = self.params["W"], self.params["b"]
        cols, padded_shape, ho, wo = self._cols(x)
        out = w.reshape(self.out_channels, -1) @ cols + b[:, None]
        out = out.reshape(self.out_channels, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(out), (cols, padded_shape, ho, wo)

    def backward(self, cache, dout, param_grads=True):
        cols, padded_shape, ho, wo = cache
        w = self.params["W"]
        k, s, p = self.kernel_size, self.stride, self.padding
        c, n = padded_shape[:2]
        dmat = dout.transpose(1, 0, 2, 3).reshape(self.out_channels, -1)
        grads = {}
        if param_grads:
            grads["W"] = (dmat @ cols.T).reshape(w.shape)
            grads["b"] = dmat.sum(axis=1)
        dcols = (w.reshape(self.out_channels, -1).T @ dmat).reshape(c, k, k, n, ho, wo)
        dxp = np.zeros(padded_shape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3)), grads


class Dense(Layer):
    kind = "dense"

    def __init__(self, out_features: int):
        super().__init__()
        self.out_features = out_features

    def config(self):
        return {"kind": self.kind, "out_features": self.out_features}

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {in_shape}")
        return (self.out_features,)

    def init_params(self, in_shape, rng):
        w = rng.normal(0.0, np.sqrt(2.0 / in_shape[0]), (self.out_features, in_shape[0]))
        self.params = {"W": w.astype(DTYPE), "b": np.zeros(self.out_features, DTYPE)}

    def forward(self, x):
        return x @ self.params["W"].T + self.params["b"], x

    def backward(self, cache, dout, param_grads=True):
        grads = {}
        if param_grads:
            grads["W"] = dout.T @ cache
            grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"], grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, dout, param_grads=True):
        return dout * cache, {}


class MaxPool2D(Layer):
    """Non-overlapping max pool; trailing rows/columns that do not fill a window are dropped."""

    kind = "maxpool"

    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def config(self):
        return {"kind": self.kind, "size": self.size}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool expects a (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ShapeError(f"maxpool window {self.size} larger than input {in_shape}")
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        s = self.size
        ho, wo = x.shape[2] // s, x.shape[3] // s
        # running max over the s*s strided views; strict > keeps the first maximum
        out = x[:, :, 0 : ho * s : s, 0 : wo * s : s].copy()
        idx = np.zeros(out.shape, dtype=np.int8)
        for k in range(1, s * s):
            i, j = divmod(k, s)
            v = x[:, :, i : ho * s : s, j : wo * s : s]
            better = v > out
            np.copyto(out, v, where=better)
            np.copyto(idx, np.int8(k), where=better)
        return out, (x.shape, idx)

    def backward(self, cache, dout, param_grads=True):
        shape, idx = cache
        s = self.size
        ho, wo = idx.shape[2:]
        dx = np.zeros(shape, dtype=dout.dtype)
        for k in range(s * s):
            i, j = divmod(k, s)
            np.multiply(dout, idx == k, out=dx[:, :, i : ho * s : s, j : wo * s : s])
        return dx, {}


class GlobalAvgPool(Layer):
    kind = "gap"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"global average pool expects a (C, H, W) input, got {in_shape}")
        return (in_shape[0],)

    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, cache, dout, param_grads=True):
        n, c, h, w = cache
        dx = np.broadcast_to(dout[:, :, None, None] / (h * w), cache)
        return np.array(dx, dtype=dout.dtype), {}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dout, param_grads=True):
        return dout.reshape(cache), {}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, Dense, ReLU, MaxPool2D, GlobalAvgPool, Flatten)}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_TYPES[kind](**cfg)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class Network:
    """Feed-forward classifier: an ordered stack of layers ending in K logits."""

    arch: str
    input_shape: tuple
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ShapeError(f"network {self.arch!r} must end in a flat output, got {shape}")
        self.num_classes = shape[0]

    @classmethod
    def build(cls, arch: str, input_shape: Sequence[int], layers: list, seed: int = 0) -> "Network":
        rng = np.random.default_rng(seed)
        shape = tuple(input_shape)
        for layer in layers:
            layer.init_params(shape, rng)
            shape = layer.output_shape(shape)
        return cls(arch, tuple(input_shape), layers)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def parameters(self):
        """Yield ``(name, array)`` pairs in a stable order."""
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                yield f"{i}.{key}", layer.params[key]

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def _check_batch(self, x):
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network {self.arch!r} expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        return x

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Batched forward pass, ``(N, *input_shape) -> (N, K)``."""
        out = self._check_batch(x).astype(DTYPE, copy=False)
        for layer in self.layers:
            out, _ = layer.forward(out)
        return out

    def _forward_cached(self, x):
        caches = []
        out = self._check_batch(x).astype(DTYPE, copy=False)
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append(cache)
        return out, caches

    def _backward(self, caches, dlogits, param_grads):
        grads = {}
        d = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            d, g = self.layers[i].backward(caches[i], d, param_grads)
            for key, val in g.items():
                grads[f"{i}.{key}"] = val
        return d, grads

    def loss_and_input_grad(self, x: np.ndarray, y: np.ndarray):
        """Per-sample cross-entropy losses and their gradients w.r.t. each input."""
        y = np.asarray(y)
        logits, caches = self._forward_cached(x)
        # float64 here avoids cancellation in p_y - 1 for confident predictions
        probs = softmax(logits.astype(np.float64))
        losses = -np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))
        dlogits = probs
        dlogits[np.arange(len(y)), y] -= 1.0
        dx, _ = self._backward(caches, dlogits.astype(DTYPE), param_grads=False)
        return losses, dx

    def loss_and_param_grads(self, x: np.ndarray, y: np.ndarray):
        """Mean cross-entropy over the batch and its gradient for every parameter."""
        y = np.asarray(y)
        n = len(y)
        logits, caches = self._forward_cached(x)
        probs = softmax(logits)
        loss = float(-np.log(np.clip(probs[np.arange(n), y], 1e-38, None)).mean())
        dlogits = probs
        dlogits[np.arange(n), y] -= 1.0
        _, grads = self._backward(caches, (dlogits / n).astype(DTYPE), param_grads=True)
        return loss, grads

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [self.logits(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def probabilities(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = [softmax(self.logits(x[i : i + batch_size])) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), dtype=DTYPE)


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------


@dataclass
class GradientResult:
    loss: float
    input_grad: np.ndarray


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Raw logits of a single CHW image."""
    x = np.asarray(x)
    if x.shape != net.input_shape:
        raise ShapeError(f"network {net.arch!r} expects an input of shape {net.input_shape}, got {x.shape}")
    return net.logits(x[None])[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax of non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, y: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= y < logits.shape[-1]:
        raise ValueError(f"label {y} out of range for {logits.shape[-1]} classes")
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[y])


def input_gradient(net: Network, x: np.ndarray, y: int) -> GradientResult:
    x = np.asarray(x)
    if x.shape != net.input_shape:
        raise ShapeError(f"network {net.arch!r} expects an input of shape {net.input_shape}, got {x.shape}")
    if not 0 <= y < net.num_classes:
        raise ValueError(f"label {y} out of range for {net.num_classes} classes")
    losses, dx = net.loss_and_input_grad(x[None], np.array([y]))
    return GradientResult(float(losses[0]), dx[0])


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0


def train_epoch(net: Network, data, config: TrainConfig | dict):
    """One epoch of plain minibatch SGD.

    ``data`` is either a list of ``(image, label)`` samples or an ``(X, y)``
    array pair. Returns a trained copy of ``net`` and the mean batch loss; the
    input network is left untouched.
    """
    if isinstance(config, dict):
        config = TrainConfig(**config)
    if config.lr < 0:
        raise ValueError("learning rate must be non-negative")
    x, y = as_arrays(data)
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(y))
    lr = DTYPE(config.lr)
    losses = []
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        loss, grads = net.loss_and_param_grads(x[idx], y[idx])
        losses.append(loss)
        for i, layer in enumerate(net.layers):
            for key in layer.params:
                layer.params[key] = (layer.params[key] - lr * grads[f"{i}.{key}"]).astype(DTYPE)
    mean_loss = float(np.mean(losses))
    if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(p)) for _, p in net.parameters()):
        raise FloatingPointError(f"training of {net.arch!r} diverged (loss {mean_loss})")
    return net, mean_loss


def as_arrays(data):
    """Normalize a sample list or an ``(X, y)`` pair to stacked arrays."""
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray) and np.ndim(data[1]) == 1:
        return data[0].astype(DTYPE, copy=False), np.asarray(data[1], dtype=np.int64)
    data = list(data)
    if not data:
        return np.zeros((0,), DTYPE), np.zeros(0, dtype=np.int64)
    x = np.stack([np.asarray(s[0], dtype=DTYPE) for s in data])
    y = np.array([int(s[1]) for s in data], dtype=np.int64)
    return x, y


class LabeledSample(NamedTuple):
    image: np.ndarray
    label: int
