"""Dense feed-forward networks with hand-written reverse-mode gradients.

Only three layer kinds exist: ``affine``, ``leaky_relu`` and ``l2_normalize``.
A :class:`Network` is a plain sequence of them. ``forward`` caches whatever
``backward`` needs; ``backward`` accumulates parameter gradients and returns
the gradient with respect to the network input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, NumericError, ShapeError, StateError

DEFAULT_SLOPE = 0.2
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        if self.kind not in ("affine", "leaky_relu", "l2_normalize"):
            raise InvalidConfigError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidConfigError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.kind != "affine" and self.in_dim != self.out_dim:
            raise InvalidConfigError(f"{self.kind} must preserve its width")

    def to_dict(self):
        d = {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}
        if self.kind == "leaky_relu":
            d["slope"] = self.slope
        return d


class Network:
    """A sequential stack of layers with parameters, gradients and a forward cache."""

    def __init__(self, layers, rng=None):
        layers = list(layers)
        if not layers:
            raise InvalidConfigError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise InvalidConfigError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = layers
        self.params = []
        self.grads = []
        for spec in layers:
            if spec.kind == "affine":
                limit = math.sqrt(6.0 / (spec.in_dim + spec.out_dim))
                if rng is None:
                    W = np.zeros((spec.in_dim, spec.out_dim))
                else:
                    W = rng.uniform(-limit, limit, size=(spec.in_dim, spec.out_dim))
                p = {"W": W, "b": np.zeros(spec.out_dim)}
            else:
                p = {}
            self.params.append(p)
            self.grads.append({k: np.zeros_like(v) for k, v in p.items()})
        self._cache = None

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected (n, {self.in_dim}) input, got {x.shape}")
        cache = []
        for spec, p in zip(self.layers, self.params):
            if spec.kind == "affine":
                cache.append(x)
                x = x @ p["W"] + p["b"]
            elif spec.kind == "leaky_relu":
                cache.append(x)
                x = np.where(x > 0, x, spec.slope * x)
            else:
                norm = np.sqrt(np.einsum("ij,ij->i", x, x))[:, None]
                cache.append((x, norm))
                x = x / (norm + NORM_EPS)
        self._cache = (cache, x.shape)
        return x

    def backward(self, grad):
        """Backpropagate ``grad`` (d loss / d output); returns d loss / d input.

        Parameter gradients are accumulated, not overwritten. The forward cache
        is consumed, so each forward pass supports exactly one backward pass.
        """
        if self._cache is None:
            raise StateError("backward called without a matching forward pass")
        cache, out_shape = self._cache
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != out_shape:
            raise StateError(f"upstream grad shape {grad.shape} does not match forward output {out_shape}")
        self._cache = None
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            saved = cache[i]
            if spec.kind == "affine":
                self.grads[i]["W"] += saved.T @ grad
                self.grads[i]["b"] += grad.sum(axis=0)
                grad = grad @ self.params[i]["W"].T
            elif spec.kind == "leaky_relu":
                grad = np.where(saved > 0, grad, spec.slope * grad)
            else:
                x, norm = saved
                denom = norm + NORM_EPS
                # d/dx [x / (|x| + eps)] applied to grad; the x x^T term vanishes at x = 0
                safe = np.where(norm > 0, norm, 1.0)
                proj = np.einsum("ij,ij->i", x, grad)[:, None]
                grad = grad / denom - x * proj / (denom * denom * safe)
        return grad

    def zero_grad(self):
        for g in self.grads:
            for v in g.values():
                v.fill(0.0)

    def copy(self):
        other = Network(self.layers)
        for dst, src in zip(other.params, self.params):
            for k, v in src.items():
                dst[k] = v.copy()
        return other

    def n_params(self):
        return sum(v.size for p in self.params for v in p.values())

    def to_dict(self):
        return {
            "layers": [spec.to_dict() for spec in self.layers],
            "params": [
                {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in p.items()}
                for p in self.params
            ],
        }

    @classmethod
    def from_dict(cls, d):
        net = cls([LayerSpec(**spec) for spec in d["layers"]])
        for i, p in enumerate(d["params"]):
            for k, blob in p.items():
                arr = np.asarray(blob["data"], dtype=np.float64).reshape(blob["shape"])
                if arr.shape != net.params[i][k].shape:
                    raise ShapeError(f"layer {i} param {k}: shape {arr.shape} != {net.params[i][k].shape}")
                net.params[i][k] = arr
        return net


def hidden_width(input_dim, repr_dim):
    return -(-(input_dim + repr_dim) // 2)


def build_representation_mapping(input_dim, repr_dim, rng=None, slope=DEFAULT_SLOPE):
    """affine -> leaky_relu -> affine -> leaky_relu -> l2_normalize.

    The hidden width is the midpoint of the input and representation widths,
    rounded up.
    """
    if input_dim < 1 or repr_dim < 1:
        raise InvalidConfigError(f"dims must be >= 1, got input_dim={input_dim}, repr_dim={repr_dim}")
    hidden = hidden_width(input_dim, repr_dim)
    layers = [
        LayerSpec("affine", input_dim, hidden),
        LayerSpec("leaky_relu", hidden, hidden, slope),
        LayerSpec("affine", hidden, repr_dim),
        LayerSpec("leaky_relu", repr_dim, repr_dim, slope),
        LayerSpec("l2_normalize", repr_dim, repr_dim),
    ]
    return Network(layers, rng)


def build_classifier(repr_dim, n_classes, rng=None, slope=DEFAULT_SLOPE):
    # the trailing leaky_relu on logits is deliberate, see README
    if n_classes < 2:
        raise InvalidConfigError(f"n_classes must be >= 2, got {n_classes}")
    if repr_dim < 1:
        raise InvalidConfigError(f"repr_dim must be >= 1, got {repr_dim}")
    layers = [
        LayerSpec("affine", repr_dim, n_classes),
        LayerSpec("leaky_relu", n_classes, n_classes, slope),
    ]
    return Network(layers, rng)


def check_finite_grads(net):
    for i, g in enumerate(net.grads):
        for k, v in g.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite gradient in layer {i} ({k})", layer=i)


def sgd_step(net, learning_rate):
    """p <- p - learning_rate * grad(p) for every parameter, then zero the grads."""
    if learning_rate < 0:
        raise InvalidConfigError("learning rate must be non-negative")
    check_finite_grads(net)
    for p, g in zip(net.params, net.grads):
        for k in p:
            p[k] -= learning_rate * g[k]
    net.zero_grad()


class Adam:
    """Adam over one or more networks; opt-in alternative to plain SGD."""

    def __init__(self, nets, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.nets = list(nets)
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [[{k: np.zeros_like(v) for k, v in p.items()} for p in n.params] for n in self.nets]
        self.v = [[{k: np.zeros_like(v) for k, v in p.items()} for p in n.params] for n in self.nets]

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for net, ms, vs in zip(self.nets, self.m, self.v):
            check_finite_grads(net)
            for p, g, m, v in zip(net.params, net.grads, ms, vs):
                for k in p:
                    m[k] = self.beta1 * m[k] + (1 - self.beta1) * g[k]
                    v[k] = self.beta2 * v[k] + (1 - self.beta2) * g[k] ** 2
                    p[k] -= self.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + self.eps)
            net.zero_grad()
