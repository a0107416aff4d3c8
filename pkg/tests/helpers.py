"""Independent oracles shared by the test modules.

The reference forward pass re-implements every layer in float64 with direct
loops (no im2col, no cached masks) and also reports the piecewise-linear
"pattern" of the input: every ReLU on/off mask and every max-pool winner.
Finite differences are only meaningful where that pattern does not change
inside [x - h, x + h].
"""

import numpy as np

from peas.nn import Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool2D, Network, ReLU


def _conv64(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = w.shape[2]
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], w.shape[0], ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out + b[None, :, None, None]


def _maxpool64(x, s):
    n, c, h, w = x.shape
    ho, wo = h // s, w // s
    win = x[:, :, : ho * s, : wo * s].reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], -1)[..., 0], arg


def reference_forward(net: Network, x):
    """float64 logits of a batch plus the activation pattern (one array per kinked layer)."""
    out = np.asarray(x, dtype=np.float64)
    pattern = []
    for layer in net.layers:
        p = {k: v.astype(np.float64) for k, v in layer.params.items()}
        if isinstance(layer, Conv2D):
            out = _conv64(out, p["W"], p["b"], layer.stride, layer.padding)
        elif isinstance(layer, Dense):
            out = out @ p["W"].T + p["b"]
        elif isinstance(layer, ReLU):
            mask = out > 0
            pattern.append(mask.reshape(len(out), -1))
            out = out * mask
        elif isinstance(layer, MaxPool2D):
            out, arg = _maxpool64(out, layer.size)
            pattern.append(arg.reshape(len(out), -1))
        elif isinstance(layer, GlobalAvgPool):
            out = out.mean(axis=(2, 3))
        elif isinstance(layer, Flatten):
            out = out.reshape(len(out), -1)
        else:
            raise TypeError(type(layer))
    return out, pattern


def ce64(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(z)), y]


def fd_input_grad(net: Network, x, y: int, h: float = 1e-3):
    """Central differences of the float64 loss; returns ``(grad, valid)``.

    ``valid`` is False for coordinates whose ±h probes land on different
    linear pieces (a ReLU flips or a max-pool winner changes).
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    eye = np.eye(d).reshape((d,) + x.shape) * h
    plus, minus = x[None] + eye, x[None] - eye
    lp, pp = reference_forward(net, plus)
    lm, pm = reference_forward(net, minus)
    yy = np.full(d, y)
    grad = ((ce64(lp, yy) - ce64(lm, yy)) / (2 * h)).reshape(x.shape)
    valid = np.ones(d, dtype=bool)
    for a, b in zip(pp, pm):
        valid &= np.all(a == b, axis=1)
    return grad, valid.reshape(x.shape)


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def random_small_net(seed: int, num_classes: int = 4) -> Network:
    """One of several small conv/dense families, with random (non-zero) biases."""
    rng = np.random.default_rng(seed)
    c = int(rng.choice([1, 3]))
    hw = int(rng.integers(6, 11))
    family = seed % 4
    if family == 0:
        layers = [Conv2D(int(rng.integers(2, 5)), 3, 1, 1), ReLU(), MaxPool2D(2), Flatten(), Dense(num_classes)]
    elif family == 1:
        layers = [Conv2D(int(rng.integers(2, 5)), 3, 2, 1), ReLU(), GlobalAvgPool(), Dense(num_classes)]
    elif family == 2:
        layers = [Flatten(), Dense(int(rng.integers(4, 12))), ReLU(), Dense(num_classes)]
    else:
        layers = [Conv2D(3, 3, 1, 0), ReLU(), Conv2D(4, 3, 2, 1), ReLU(), Flatten(), Dense(6), ReLU(), Dense(num_classes)]
    net = Network.build(f"rand{seed}", (c, hw, hw), layers, seed=seed)
    for layer in net.layers:
        if "b" in layer.params:
            layer.params["b"] = rng.normal(0, 0.1, layer.params["b"].shape).astype(np.float32)
    return net


def gradient_check(net: Network, x, y: int, h: float = 1e-3) -> float:
    """Max relative error of ``net``'s analytic input gradient over valid coordinates."""
    _, g = net.loss_and_input_grad(np.asarray(x, np.float32)[None], np.array([y]))
    num, valid = fd_input_grad(net, x, y, h)
    err = relative_error(g[0], num)
    return float(err[valid].max()) if valid.any() else 0.0


def tiny_linear_net(w, b=None) -> Network:
    """Single dense layer on a flat (1, 1, d) input: logits = W x + b."""
    w = np.asarray(w, dtype=np.float32)
    net = Network("linear", (1, 1, w.shape[1]), [Flatten(), Dense(w.shape[0])])
    net.layers[1].params = {"W": w, "b": np.zeros(w.shape[0], np.float32) if b is None else np.asarray(b, np.float32)}
    return net
