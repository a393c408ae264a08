"""Small float64 CNN kernel: conv, max-pool, fully connected, activations.

Every layer has an explicit forward and backward pass so gradients can be
checked against finite differences. Inputs are ``(C, H, W)`` arrays or
batches ``(N, C, H, W)``; internally everything runs batched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pstdet.cost_model import conv_output_shape

LAYER_KINDS = ("conv", "maxpool", "fullyconnected", "relu", "sigmoid")
ACTIVATIONS = (None, "relu", "sigmoid")

# sigmoid(+-36) stays strictly inside (0, 1) in float64
_LOGIT_CLIP = 36.0


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""

    def __init__(self, layer: int, message: str):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


class StaleCacheError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    f: int = 1
    s: int = 1
    p: int = 0
    c_f: int = 0
    j: int = 0
    activation: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.f < 1 or self.s < 1 or self.p < 0:
            raise ValueError(f"bad geometry f={self.f} s={self.s} p={self.p}")
        if self.kind == "conv" and self.c_f < 1:
            raise ValueError("conv layer needs c_f >= 1")
        if self.kind == "fullyconnected" and self.j < 1:
            raise ValueError("fullyconnected layer needs j >= 1")

    @property
    def spatial(self) -> bool:
        return self.kind in ("conv", "maxpool")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "f": self.f,
            "s": self.s,
            "p": self.p,
            "c_f": self.c_f,
            "j": self.j,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            f=int(d.get("f", 1)),
            s=int(d.get("s", 1)),
            p=int(d.get("p", 0)),
            c_f=int(d.get("c_f", 0)),
            j=int(d.get("j", 0)),
            activation=d.get("activation"),
        )


def conv(c_f: int, f: int = 3, s: int = 1, p: int = 1, activation: str | None = "relu") -> LayerSpec:
    return LayerSpec("conv", f=f, s=s, p=p, c_f=c_f, activation=activation)


def maxpool(f: int = 2, s: int = 2, p: int = 0) -> LayerSpec:
    return LayerSpec("maxpool", f=f, s=s, p=p)


def fullyconnected(j: int, activation: str | None = None) -> LayerSpec:
    return LayerSpec("fullyconnected", j=j, activation=activation)


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...], index: int = 0) -> tuple[int, ...]:
    """Shape produced by ``spec`` for one (unbatched) input of ``in_shape``."""
    if spec.kind in ("conv", "maxpool"):
        if len(in_shape) != 3:
            raise ShapeError(index, f"{spec.kind} expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        try:
            oh, ow = conv_output_shape(h, w, spec.f, spec.p, spec.s)
        except ValueError as exc:
            raise ShapeError(index, str(exc)) from None
        return (spec.c_f if spec.kind == "conv" else c, oh, ow)
    if spec.kind == "fullyconnected":
        return (spec.j,)
    return tuple(in_shape)


def param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]] | None:
    if spec.kind == "conv":
        return (spec.c_f, in_shape[0], spec.f, spec.f), (spec.c_f,)
    if spec.kind == "fullyconnected":
        return (int(np.prod(in_shape)), spec.j), (spec.j,)
    return None


@dataclass
class Network:
    """Ordered layers plus their parameters.

    ``weights[i]``/``biases[i]`` are None for layers without parameters.
    Conv weights are ``(C_out, C_in, f, f)``; fully connected weights are
    ``(I, J)`` acting on the row-major flattened input.
    """

    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    weights: list[np.ndarray | None] = field(default_factory=list)
    biases: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shapes = self.shapes()
        if not self.weights:
            self.weights = [None] * len(self.layers)
            self.biases = [None] * len(self.layers)
            for i, spec in enumerate(self.layers):
                ps = param_shapes(spec, shapes[i])
                if ps is not None:
                    self.weights[i] = np.zeros(ps[0])
                    self.biases[i] = np.zeros(ps[1])
        if len(self.weights) != len(self.layers) or len(self.biases) != len(self.layers):
            raise ValueError("one weight/bias slot per layer required")
        for i, spec in enumerate(self.layers):
            ps = param_shapes(spec, shapes[i])
            w, b = self.weights[i], self.biases[i]
            if ps is None:
                if w is not None or b is not None:
                    raise ShapeError(i, f"{spec.kind} layer takes no parameters")
                continue
            if w is None or b is None or w.shape != ps[0] or b.shape != ps[1]:
                got = None if w is None else w.shape
                raise ShapeError(i, f"weights should be {ps[0]}, got {got}")

    def shapes(self) -> list[tuple[int, ...]]:
        """Input shape of every layer followed by the output shape."""
        out = [self.input_shape]
        for i, spec in enumerate(self.layers):
            out.append(output_shape(spec, out[-1], i))
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def copy(self) -> "Network":
        return Network(
            list(self.layers),
            self.input_shape,
            [None if w is None else w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
        )

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases) if w is not None)

    # -- serialization -------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "layers": [s.to_dict() for s in self.layers],
            "input_shape": list(self.input_shape),
            "weights": [[] if w is None else w.ravel().tolist() for w in self.weights],
            "biases": [[] if b is None else b.ravel().tolist() for b in self.biases],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Network":
        doc = json.loads(text)
        layers = [LayerSpec.from_dict(d) for d in doc["layers"]]
        probe = cls(layers, tuple(doc["input_shape"]))
        weights, biases = [], []
        for i, (w, b) in enumerate(zip(doc["weights"], doc["biases"])):
            if probe.weights[i] is None:
                weights.append(None)
                biases.append(None)
            else:
                weights.append(np.array(w, dtype=np.float64).reshape(probe.weights[i].shape))
                biases.append(np.array(b, dtype=np.float64).reshape(probe.biases[i].shape))
        return cls(layers, probe.input_shape, weights, biases)

    def save(self, path: str | Path) -> None:
        from pstdet.io import atomic_write_text

        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        return cls.from_json(Path(path).read_text())


def init_network(layers: Sequence[LayerSpec], input_shape: tuple[int, ...], seed: int | np.random.Generator = 0) -> Network:
    """He-normal weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    net = Network(list(layers), input_shape)
    for i, w in enumerate(net.weights):
        if w is None:
            continue
        fan_in = int(np.prod(w.shape[1:])) if net.layers[i].kind == "conv" else w.shape[0]
        net.weights[i] = rng.standard_normal(w.shape) * math.sqrt(2.0 / fan_in)
    return net


# -- layer kernels ------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -_LOGIT_CLIP, _LOGIT_CLIP)))


def _window(xp, i, j, f, s, oh, ow):
    return xp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s]


# Spatial activations are kept as (C, N, H, W) internally: every im2col
# reshape is then free and col2im is f*f contiguous slice additions.


def _conv_forward(x, w, b, spec):
    f, s, p = spec.f, spec.s, spec.p
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    oh = (xp.shape[2] - f) // s + 1
    ow = (xp.shape[3] - f) // s + 1
    n = xp.shape[1]
    cols = np.stack([_window(xp, i, j, f, s, oh, ow) for i in range(f) for j in range(f)], axis=1)
    cols = cols.reshape(-1, n * oh * ow)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape(w.shape[0], n, oh, ow), (cols, xp.shape)


def _conv_backward(dout, w, spec, aux, need_dx=True):
    cols, xp_shape = aux
    f, s, p = spec.f, spec.s, spec.p
    c_out, n, oh, ow = dout.shape
    d2 = dout.reshape(c_out, -1)
    w2 = w.reshape(c_out, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (w2.T @ d2).reshape(xp_shape[0], f, f, n, oh, ow)
    dxp = np.zeros(xp_shape)
    for i in range(f):
        for j in range(f):
            _window(dxp, i, j, f, s, oh, ow)[...] += dcols[:, i, j]
    dx = dxp[:, :, p : xp_shape[2] - p, p : xp_shape[3] - p] if p else dxp
    return dx, dw, db


def _pool_forward(x, spec):
    f, s, p = spec.f, spec.s, spec.p
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
    oh = (xp.shape[2] - f) // s + 1
    ow = (xp.shape[3] - f) // s + 1
    out = _window(xp, 0, 0, f, s, oh, ow).copy()
    for k in range(1, f * f):
        np.maximum(out, _window(xp, k // f, k % f, f, s, oh, ow), out=out)
    # argmax is only needed for backward, so it is recovered there
    return out, xp


def _pool_backward(dout, spec, xp):
    f, s, p = spec.f, spec.s, spec.p
    oh, ow = dout.shape[2:]
    best = _window(xp, 0, 0, f, s, oh, ow).copy()
    for k in range(1, f * f):
        np.maximum(best, _window(xp, k // f, k % f, f, s, oh, ow), out=best)
    dxp = np.zeros(xp.shape)
    # route to the first maximum only, so the routed sum equals the upstream sum
    taken = np.zeros(best.shape, dtype=bool)
    for k in range(f * f):
        hit = _window(xp, k // f, k % f, f, s, oh, ow) == best
        hit &= ~taken
        taken |= hit
        _window(dxp, k // f, k % f, f, s, oh, ow)[...] += dout * hit
    return dxp[:, :, p : xp.shape[2] - p, p : xp.shape[3] - p] if p else dxp


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return _sigmoid(z)
    return z


def _activate_backward(dout, z, a, act):
    if act == "relu":
        return dout * (z > 0)
    if act == "sigmoid":
        return dout * a * (1.0 - a)
    return dout


@dataclass
class Cache:
    """Per-layer state recorded by :func:`forward` for :func:`backward`."""

    batched: bool
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    aux: list[object]


@dataclass
class Gradients:
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]
    input: np.ndarray | None


def _to_internal(a: np.ndarray) -> np.ndarray:
    return a.transpose(1, 0, 2, 3) if a.ndim == 4 else a


def _to_external(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)) if a.ndim == 4 else a


def _sample_shape(a: np.ndarray) -> tuple[int, ...]:
    return (a.shape[0],) + a.shape[2:] if a.ndim == 4 else a.shape[1:]


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], False
    if x.shape[1:] == net.input_shape:
        return x, True
    raise ShapeError(0, f"input shape {x.shape} does not match {net.input_shape}")


def forward(net: Network, x) -> tuple[np.ndarray, Cache]:
    """Run every layer; returns the output and the cache for backward."""
    batch, batched = _as_batch(net, x)
    a = _to_internal(batch)
    cache = Cache(batched, [], [], [], [])
    for i, spec in enumerate(net.layers):
        cache.inputs.append(a)
        if spec.kind == "conv":
            z, aux = _conv_forward(a, net.weights[i], net.biases[i], spec)
        elif spec.kind == "maxpool":
            z, aux = _pool_forward(a, spec)
        elif spec.kind == "fullyconnected":
            flat = _to_external(a).reshape(batch.shape[0], -1)
            z, aux = flat @ net.weights[i] + net.biases[i], flat
        else:
            z, aux = a, None
        act = spec.kind if spec.kind in ("relu", "sigmoid") else spec.activation
        a = _activate(z, act)
        cache.pre.append(z)
        cache.post.append(a)
        cache.aux.append(aux)
    out = _to_external(a)
    return (out if batched else out[0]), cache


def _backward(net: Network, cache: Cache, grad: np.ndarray, from_logits: bool, need_input: bool = True) -> Gradients:
    if len(cache.inputs) != len(net.layers):
        raise StaleCacheError("cache was produced by a different network")
    grad = np.asarray(grad, dtype=np.float64)
    if not cache.batched:
        grad = grad[None]
    grad = _to_internal(grad)
    if grad.shape != cache.post[-1].shape:
        raise StaleCacheError(f"gradient shape {grad.shape} vs output {cache.post[-1].shape}")
    shapes = net.shapes()
    for i, x in enumerate(cache.inputs):
        if _sample_shape(x) != shapes[i]:
            raise StaleCacheError(f"cached input {_sample_shape(x)} does not fit layer {i} ({shapes[i]})")
    gw: list[np.ndarray | None] = [None] * len(net.layers)
    gb: list[np.ndarray | None] = [None] * len(net.layers)
    last = len(net.layers) - 1
    for i in range(last, -1, -1):
        spec = net.layers[i]
        act = spec.kind if spec.kind in ("relu", "sigmoid") else spec.activation
        if not (from_logits and i == last):
            grad = _activate_backward(grad, cache.pre[i], cache.post[i], act)
        if spec.kind == "conv":
            grad, gw[i], gb[i] = _conv_backward(grad, net.weights[i], spec, cache.aux[i], need_input or i > 0)
            if grad is None:
                return Gradients(gw, gb, None)
        elif spec.kind == "maxpool":
            grad = _pool_backward(grad, spec, cache.aux[i])
        elif spec.kind == "fullyconnected":
            gw[i] = cache.aux[i].T @ grad
            gb[i] = grad.sum(axis=0)
            x = cache.inputs[i]
            grad = _to_internal((grad @ net.weights[i].T).reshape((grad.shape[0],) + _sample_shape(x)))
    grad = _to_external(grad)
    return Gradients(gw, gb, grad if cache.batched else grad[0])


def backward(net: Network, cache: Cache, grad_output) -> Gradients:
    """Gradients of a scalar loss given ``dL/d(output)``.

    Batched gradients are summed over the batch.
    """
    return _backward(net, cache, grad_output, from_logits=False)


def backward_from_logits(net: Network, cache: Cache, grad_logits, need_input: bool = True) -> Gradients:
    """Like :func:`backward` but ``grad_logits`` is taken w.r.t. the
    pre-activation of the final layer (skips its sigmoid).

    With ``need_input=False`` the input gradient is not computed and
    ``Gradients.input`` is None.
    """
    return _backward(net, cache, grad_logits, from_logits=True, need_input=need_input)


# -- optimisation -------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


Velocity = list  # list[tuple[np.ndarray, np.ndarray] | None]


def zero_velocity(net: Network) -> Velocity:
    return [None if w is None else (np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]


def sgd_step(net: Network, grads: Gradients, velocity: Velocity | None, cfg: TrainConfig) -> tuple[Network, Velocity]:
    """``v <- momentum * v - lr * g``; ``w <- w + v``. Returns new objects."""
    if velocity is None:
        velocity = zero_velocity(net)
    new = net.copy()
    new_v: Velocity = []
    for i, w in enumerate(net.weights):
        if w is None:
            new_v.append(None)
            continue
        gw, gb = grads.weights[i], grads.biases[i]
        if gw.shape != w.shape or gb.shape != net.biases[i].shape:
            raise ShapeError(i, "gradient shape does not match weights")
        vw = cfg.momentum * velocity[i][0] - cfg.lr * gw
        vb = cfg.momentum * velocity[i][1] - cfg.lr * gb
        new.weights[i] = w + vw
        new.biases[i] = net.biases[i] + vb
        new_v.append((vw, vb))
    return new, new_v


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits."""
    z = logits.reshape(-1)
    y = labels.reshape(-1).astype(np.float64)
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    p = 1.0 / (1.0 + np.exp(-z))
    return float(loss), ((p - y) / z.size).reshape(logits.shape)


def train_batch(net: Network, x: np.ndarray, y: np.ndarray, velocity: Velocity | None, cfg: TrainConfig) -> tuple[Network, Velocity, float]:
    """One SGD step on a batch; the network must end in a single sigmoid unit."""
    _, cache = forward(net, x)
    loss, dz = bce_with_logits(cache.pre[-1], y)
    grads = backward_from_logits(net, cache, dz, need_input=False)
    net, velocity = sgd_step(net, grads, velocity, cfg)
    return net, velocity, loss


def train(net: Network, inputs, labels, cfg: TrainConfig) -> tuple[Network, list[float]]:
    """Mini-batch SGD on binary cross-entropy.

    Shuffling uses ``cfg.seed`` so identical inputs give identical weights.
    Returns the trained network and the mean loss of each epoch.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if x.shape[1:] != net.input_shape:
        raise ShapeError(0, f"samples have shape {x.shape[1:]}, network expects {net.input_shape}")
    if len(y) != len(x):
        raise ValueError("inputs and labels differ in length")
    rng = np.random.default_rng(cfg.seed)
    velocity = zero_velocity(net)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            net, velocity, loss = train_batch(net, x[idx], y[idx], velocity, cfg)
            if not math.isfinite(loss):
                raise TrainingError(epoch, "loss became non-finite")
            total += loss * len(idx)
        trace.append(total / len(x))
    return net, trace


def predict(net: Network, x) -> float | np.ndarray:
    """Sigmoid score of one input, or an array of scores for a batch."""
    if net.output_shape != (1,):
        raise ShapeError(len(net.layers) - 1, "predict needs a single-unit head")
    out, _ = forward(net, x)
    return out.reshape(-1) if out.ndim == 2 else float(out[0])


def predict_batched(net: Network, x: np.ndarray, chunk: int = 16) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(0)
    return np.concatenate([predict(net, x[i : i + chunk]) for i in range(0, len(x), chunk)])
