"""Dense numerics shared by every model in the package.

Diagonal-Gaussian densities, the reparameterized sampler, a small
feedforward network with exact reverse-mode gradients, and Adam.

All arrays are float64. Networks operate on batches: rows are examples.

Random numbers come from :class:`RngStream`, which pins NumPy's Philox
counter-based bit generator. Given the same seed (and spawn key) the
stream of draws is identical on every platform NumPy supports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LAYER_NORM_EPS = 1e-5
ACTIVATIONS = ("relu", "identity", "exp", "logistic")


class RngStream:
    """Seeded Philox stream.

    Children created with :meth:`spawn` are independent of the parent and
    of each other, and are keyed deterministically, so a training run can
    hand separate streams to initialization, batching and noise without
    the draw order of one affecting another.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, high, size=None) -> np.ndarray:
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


@dataclass(frozen=True)
class GaussianPair:
    """Mean and variance of a diagonal-covariance Gaussian.

    Both arrays share a shape; the last axis is the event dimension, any
    leading axes are batch axes.
    """

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        variance = np.asarray(self.variance, dtype=np.float64)
        if mean.shape != variance.shape:
            raise ValueError(f"mean shape {mean.shape} != variance shape {variance.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def check_positive(self):
        if not np.all(self.variance > 0):
            raise ValueError("variance entries must be strictly positive")


def gaussian_log_pdf_diag(x, g: GaussianPair):
    """Log density of ``x`` under a diagonal Gaussian, summed over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != g.dim:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, gaussian has {g.dim}")
    g.check_positive()
    return np.sum(gaussian_log_pdf_terms(x, g.mean, g.variance), axis=-1)


def gaussian_log_pdf_terms(x, mean, variance):
    """Per-coordinate log density terms, no validation."""
    r = x - mean
    return -0.5 * LOG_2PI - 0.5 * np.log(variance) - r * r / (2.0 * variance)


def kl_diag_to_standard(g: GaussianPair):
    """KL(N(mean, diag(variance)) || N(0, I)) in closed form."""
    g.check_positive()
    v, m = g.variance, g.mean
    return 0.5 * np.sum(v + m * m - 1.0 - np.log(v), axis=-1)


def reparam_sample(g: GaussianPair, rng: RngStream) -> np.ndarray:
    """Draw ``mean + sqrt(variance) * eps`` with one standard normal per coordinate."""
    if np.any(g.variance < 0):
        raise ValueError("variance must be non-negative")
    eps = rng.normal(g.mean.shape)
    return g.mean + np.sqrt(g.variance) * eps


def dropout_mask(shape, drop_prob: float, rng: RngStream) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``drop_prob``, else ``1/(1-drop_prob)``."""
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must lie in [0, 1), got {drop_prob}")
    if drop_prob == 0.0:
        return np.ones(shape)
    keep = rng.uniform(shape) >= drop_prob
    return keep / (1.0 - drop_prob)


# --------------------------------------------------------------------------
# feedforward networks


@dataclass(frozen=True)
class LayerSpec:
    """One affine layer, optionally followed by layer norm, then an activation.

    ``in_dim`` counts every input column, including any auxiliary vector
    concatenated onto this layer's input.
    """

    in_dim: int
    out_dim: int
    has_layer_norm: bool = False
    activation: str = "identity"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def init_params(layers: Sequence[LayerSpec], rng: RngStream, std: float = 0.02) -> list[dict]:
    """Weights ~ N(0, std^2), biases 0, layer-norm gain 1 and shift 0."""
    params = []
    for spec in layers:
        p = {
            "W": std * rng.normal((spec.in_dim, spec.out_dim)),
            "b": np.zeros(spec.out_dim),
        }
        if spec.has_layer_norm:
            p["gain"] = np.ones(spec.out_dim)
            p["shift"] = np.zeros(spec.out_dim)
        params.append(p)
    return params


def _activate(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "identity":
        return a
    if name == "exp":
        return np.exp(a)
    # logistic, computed without overflow for large |a|
    return np.exp(-np.logaddexp(0.0, -a))


def _activation_grad(name, a, out, g):
    if name == "relu":
        return g * (a > 0)
    if name == "identity":
        return g
    if name == "exp":
        return g * out
    return g * out * (1.0 - out)


@dataclass
class MlpCache:
    layers: tuple
    params: Sequence = ()
    records: list = field(default_factory=list)
    input_mask: np.ndarray | None = None
    aux_dims: tuple = ()


def mlp_forward(
    layers: Sequence[LayerSpec],
    params: Sequence[Mapping[str, np.ndarray]],
    inputs,
    aux_inputs: Sequence | None = None,
    dropout_mask: np.ndarray | None = None,
    mode: str = "eval",
):
    """Run a batch through the network.

    Args:
        layers: layer specs, first to last.
        params: one dict per layer with ``W``, ``b`` and, for layer-normed
            layers, ``gain`` and ``shift``.
        inputs: ``(batch, in_dim)`` array (a single vector is promoted).
        aux_inputs: optional per-layer arrays concatenated onto that
            layer's input; ``None`` entries mean nothing is added.
        dropout_mask: multiplies ``inputs`` in train mode; ignored in eval.
        mode: ``"train"`` or ``"eval"``.

    Returns:
        ``(outputs, cache)``; ``cache`` feeds :func:`mlp_backward`.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if len(params) != len(layers):
        raise ValueError("one parameter dict per layer required")
    h = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    batch = h.shape[0]
    aux_inputs = list(aux_inputs) if aux_inputs is not None else [None] * len(layers)
    if len(aux_inputs) != len(layers):
        raise ValueError("aux_inputs must have one entry per layer")

    cache = MlpCache(layers=tuple(layers), params=params)
    if mode == "train" and dropout_mask is not None:
        mask = np.broadcast_to(dropout_mask, h.shape)
        cache.input_mask = mask
        h = h * mask

    aux_dims = []
    for spec, p, aux in zip(layers, params, aux_inputs):
        if aux is not None:
            aux = np.asarray(aux, dtype=np.float64)
            if aux.ndim == 1:
                aux = np.broadcast_to(aux, (batch, aux.shape[0]))
            h = np.concatenate([h, aux], axis=1)
            aux_dims.append(aux.shape[1])
        else:
            aux_dims.append(0)
        if h.shape[1] != spec.in_dim:
            raise ValueError(f"layer expects {spec.in_dim} inputs, got {h.shape[1]}")
        a = h @ p["W"] + p["b"]
        rec = {"input": h, "pre": a}
        if spec.has_layer_norm:
            mu = a.mean(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(a.var(axis=1, keepdims=True) + LAYER_NORM_EPS)
            xhat = (a - mu) * inv_std
            rec["xhat"] = xhat
            rec["inv_std"] = inv_std
            a = xhat * p["gain"] + p["shift"]
        rec["act_in"] = a
        h = _activate(spec.activation, a)
        rec["out"] = h
        cache.records.append(rec)
    cache.aux_dims = tuple(aux_dims)
    return h, cache


def mlp_backward(cache: MlpCache, output_gradient):
    """Reverse pass matching one :func:`mlp_forward` call.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` mirrors the
    parameter list and ``input_grad`` is the gradient with respect to the
    original ``inputs`` (after undoing the dropout scaling; auxiliary
    columns are dropped).
    """
    if not cache.records:
        raise ValueError("cache holds no forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != cache.records[-1]["out"].shape:
        raise ValueError(
            f"output gradient shape {g.shape} does not match forward output "
            f"{cache.records[-1]['out'].shape}"
        )
    grads = [None] * len(cache.layers)
    for i in range(len(cache.layers) - 1, -1, -1):
        spec, rec, p = cache.layers[i], cache.records[i], cache.params[i]
        g = _activation_grad(spec.activation, rec["act_in"], rec["out"], g)
        pg = {}
        if spec.has_layer_norm:
            xhat = rec["xhat"]
            pg["gain"] = np.sum(g * xhat, axis=0)
            pg["shift"] = np.sum(g, axis=0)
            dx = g * p["gain"]
            n = dx.shape[1]
            g = rec["inv_std"] / n * (
                n * dx - dx.sum(axis=1, keepdims=True) - xhat * np.sum(dx * xhat, axis=1, keepdims=True)
            )
        pg["W"] = rec["input"].T @ g
        pg["b"] = np.sum(g, axis=0)
        grads[i] = pg
        g = g @ p["W"].T
        if cache.aux_dims[i]:
            g = g[:, : g.shape[1] - cache.aux_dims[i]]
    if cache.input_mask is not None:
        g = g * cache.input_mask
    return grads, g


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            **kw,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            self.alpha, self.beta1, self.beta2, self.epsilon, self.step,
            [m.copy() for m in self.first_moment],
            [v.copy() for v in self.second_moment],
        )


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Inputs are not modified.

    Returns ``(new_params, new_state)``.
    """
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ValueError("params, grads and optimizer moments differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.alpha * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(state.alpha, b1, b2, state.epsilon, t, new_m, new_v)
    return new_p, new_state


def flatten_params(nets: Mapping[str, Sequence[Mapping[str, np.ndarray]]]) -> dict[str, np.ndarray]:
    """Name every array as ``<net>.<layer>.<key>`` in a fixed order."""
    out = {}
    for net_name, net in nets.items():
        for i, layer in enumerate(net):
            for key in ("W", "b", "gain", "shift"):
                if key in layer:
                    out[f"{net_name}.{i}.{key}"] = layer[key]
    return out


def unflatten_params(flat: Mapping[str, np.ndarray], net_name: str, n_layers: int) -> list[dict]:
    net = [dict() for _ in range(n_layers)]
    for name, arr in flat.items():
        prefix, idx, key = name.split(".")
        if prefix == net_name:
            net[int(idx)][key] = arr
    return net
