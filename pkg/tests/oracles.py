"""Independent reference implementations used by the tests.

Nothing here imports the code under test except for the data types it
operates on, so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import numpy as np

from pstdet import tensor_nn as tn
from pstdet.geometry import BoundingBox


def pixel_iou(a: BoundingBox, b: BoundingBox, n: int = 64) -> float:
    """IoU of integer boxes by counting pixels of their half-open rasters."""
    ra = np.zeros((n, n), dtype=bool)
    rb = np.zeros((n, n), dtype=bool)
    ra[int(a.y1) : int(a.y2), int(a.x1) : int(a.x2)] = True
    rb[int(b.y1) : int(b.y2), int(b.x1) : int(b.x2)] = True
    return np.count_nonzero(ra & rb) / np.count_nonzero(ra | rb)


def loop_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, s: int, p: int) -> tuple[np.ndarray, int]:
    """Direct nested-loop convolution; also returns the multiply-accumulates performed.

    Padded zeros are multiplied like any other input, as a dense kernel would.
    """
    c_in, h, wd = x.shape
    c_out, _, f, _ = w.shape
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
    xp[:, p : p + h, p : p + wd] = x
    oh = (h + 2 * p - f) // s + 1
    ow = (wd + 2 * p - f) // s + 1
    out = np.zeros((c_out, oh, ow))
    macs = 0
    for co in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = b[co]
                for ci in range(c_in):
                    for u in range(f):
                        for v in range(f):
                            acc += w[co, ci, u, v] * xp[ci, i * s + u, j * s + v]
                            macs += 1
                out[co, i, j] = acc
    return out, macs


def loop_maxpool(x: np.ndarray, f: int, s: int) -> np.ndarray:
    c, h, w = x.shape
    oh, ow = (h - f) // s + 1, (w - f) // s + 1
    out = np.empty((c, oh, ow))
    for k in range(c):
        for i in range(oh):
            for j in range(ow):
                out[k, i, j] = x[k, i * s : i * s + f, j * s : j * s + f].max()
    return out


def rf_recurrence(fs, ss) -> list[int]:
    """r_n = r_{n-1} + (f_n - 1) * prod(s_1..s_{n-1}), r_0 = 1."""
    r, jump, out = 1, 1, []
    for f, s in zip(fs, ss):
        r += (f - 1) * jump
        jump *= s
        out.append(r)
    return out


def random_config(rng: np.random.Generator) -> tuple[list[tn.LayerSpec], tuple[int, int, int]]:
    """A small random network touching conv, maxpool, fullyconnected, relu and sigmoid."""
    c, h = int(rng.integers(1, 3)), int(rng.integers(6, 10))
    shape = (c, h, h)
    layers: list[tn.LayerSpec] = []
    acts = [None, "relu", "sigmoid"]
    for _ in range(int(rng.integers(1, 3))):
        f = int(rng.integers(1, 4))
        layers.append(tn.conv(int(rng.integers(1, 4)), f=f, s=int(rng.integers(1, 3)), p=int(rng.integers(0, 2)), activation=acts[int(rng.integers(3))]))
        if rng.random() < 0.6:
            layers.append(tn.maxpool(f=int(rng.integers(2, 4)), s=int(rng.integers(1, 3)), p=int(rng.integers(0, 2)) if rng.random() < 0.3 else 0))
        if rng.random() < 0.3:
            layers.append(tn.LayerSpec("relu"))
    layers.append(tn.fullyconnected(int(rng.integers(2, 5)), activation=acts[int(rng.integers(3))]))
    if rng.random() < 0.5:
        layers.append(tn.LayerSpec("sigmoid"))
    layers.append(tn.fullyconnected(1, activation="sigmoid"))
    try:
        tn.Network(layers, shape)
    except ValueError:
        return random_config(rng)
    return layers, shape


def finite_difference_check(net: tn.Network, x: np.ndarray, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences over
    every weight, bias and input entry, for the loss ``sum(R * output)``."""
    out, cache = tn.forward(net, x)
    r = rng.standard_normal(out.shape)
    grads = tn.backward(net, cache, r)

    def loss() -> float:
        return float(np.sum(tn.forward(net, x)[0] * r))

    pairs = []
    for i, w in enumerate(net.weights):
        if w is not None:
            pairs += [(w, grads.weights[i]), (net.biases[i], grads.biases[i])]
    pairs.append((x, grads.input))
    worst = 0.0
    for arr, analytic in pairs:
        for k in range(arr.size):
            orig = arr.flat[k]
            arr.flat[k] = orig + h
            up = loss()
            arr.flat[k] = orig - h
            down = loss()
            arr.flat[k] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.flat[k]
            denom = max(abs(a) + abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def random_check_network(rng: np.random.Generator, layers, shape) -> tn.Network:
    net = tn.init_network(layers, shape, rng)
    for b in net.biases:
        if b is not None:
            b[:] = rng.normal(0.0, 0.1, size=b.shape)
    return net
