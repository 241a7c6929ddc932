"""Dense layers, activations, Adam and a finite-difference gradient checker.

Everything is float64 numpy. Gradients are written by hand for the fixed graphs used
by the appraisal model; there is no tape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
ACTIVATIONS = ("selu", "sigmoid", "tanh", "linear")


def selu(x):
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activate(name: str, z):
    if name == "selu":
        return selu(z)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, z, a):
    """d activation / d pre-activation, from the cached pre-activation and output."""
    if name == "selu":
        return np.where(z > 0, SELU_LAMBDA, a + SELU_LAMBDA * SELU_ALPHA)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    if name == "linear":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


def softmax(scores, axis: int = -1, mask=None):
    """Max-shifted softmax. Masked-out entries get weight exactly 0."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or s.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax row with no unmasked entry")
        s = np.where(mask, s, -np.inf)
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class DenseStack:
    layers: list[Layer] = field(default_factory=list)

    @classmethod
    def init(cls, sizes, activations, rng: np.random.Generator) -> "DenseStack":
        """Glorot-uniform weights, zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def spec(self) -> list[dict]:
        return [{"rows": int(l.weight.shape[0]), "cols": int(l.weight.shape[1]), "activation": l.activation}
                for l in self.layers]

    def to_vector(self) -> np.ndarray:
        if not self.layers:
            return np.empty(0)
        return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers])

    def with_vector(self, vec) -> "DenseStack":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {vec.shape}")
        out, p = [], 0
        for l in self.layers:
            r, c = l.weight.shape
            w = vec[p:p + r * c].reshape(r, c).copy()
            p += r * c
            b = vec[p:p + r].copy()
            p += r
            out.append(Layer(w, b, l.activation))
        return DenseStack(out)

    @classmethod
    def from_spec(cls, spec: list[dict], vec) -> "DenseStack":
        skeleton = cls([Layer(np.zeros((d["rows"], d["cols"])), np.zeros(d["rows"]), d["activation"]) for d in spec])
        return skeleton.with_vector(vec)

    def forward(self, x):
        """Apply the stack over the last axis of ``x``. Returns (output, cache)."""
        a = np.asarray(x, dtype=np.float64)
        if a.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {a.shape[-1]} != stack input dim {self.in_dim}")
        cache = []
        for l in self.layers:
            z = a @ l.weight.T + l.bias
            out = activate(l.activation, z)
            cache.append((a, z, out))
            a = out
        return a, cache

    def backward(self, cache, grad_out):
        """Reverse pass. Returns (grad wrt input, flat parameter gradient)."""
        if len(cache) != len(self.layers):
            raise ValueError("cache does not match this stack")
        g = np.asarray(grad_out, dtype=np.float64)
        grads = []
        for l, (a_in, z, a_out) in zip(reversed(self.layers), reversed(cache)):
            if z.shape[-1] != l.weight.shape[0] or g.shape != z.shape:
                raise ValueError("stale cache or gradient shape mismatch")
            dz = g * activation_grad(l.activation, z, a_out)
            dz2 = dz.reshape(-1, dz.shape[-1])
            a2 = a_in.reshape(-1, a_in.shape[-1])
            grads.append((dz2.T @ a2, dz2.sum(axis=0)))
            g = dz @ l.weight
        flat = np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in reversed(grads)])
        return g, flat


# ------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr)


def adam_step(params, grads, state: AdamState, lr_scale=1.0):
    """One bias-corrected Adam update. ``lr_scale`` may be a scalar or per-parameter array.

    Returns (new_params, new_state); inputs are not modified.
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ValueError("parameter, gradient and optimizer-state layouts differ")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_p = p - state.lr * np.asarray(lr_scale, dtype=np.float64) * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_p, replace(state, m=m, v=v, step=t)


# ---------------------------------------------------------------- gradient check


def grad_check(closure: Callable, params, probe_count: int | None = None, h: float = 1e-5,
               seed: int = 0, atol: float = 1e-6) -> float:
    """Max relative error between ``closure``'s analytic gradient and central differences.

    ``closure(p)`` returns ``(value, gradient)``. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, atol)``; ``atol`` keeps near-zero coordinates from
    reporting noise as error. ``probe_count=None`` checks every coordinate.
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    p = np.array(params, dtype=np.float64)
    _, analytic = closure(p.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if probe_count is None or probe_count >= p.size:
        probes = np.arange(p.size)
    else:
        probes = np.random.default_rng(seed).choice(p.size, probe_count, replace=False)
    worst = 0.0
    for j in probes:
        up = p.copy()
        up[j] += h
        dn = p.copy()
        dn[j] -= h
        numeric = (closure(up)[0] - closure(dn)[0]) / (2.0 * h)
        a = analytic[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- serialization


def save_params(path, stacks: dict, meta: dict | None = None) -> None:
    """Write ``<u64 header length><JSON header><float64 LE parameters>``.

    The header lists each stack's layer shapes in storage order.
    """
    names = [k for k, s in stacks.items() if s is not None]
    header = {
        "format": "rea-params-v1",
        "dtype": "<f8",
        "stacks": {k: stacks[k].spec() for k in names},
        "order": names,
        "meta": meta or {},
    }
    header["count"] = int(sum(stacks[k].n_params for k in names))
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    vec = np.concatenate([stacks[k].to_vector() for k in names]) if names else np.empty(0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(vec.astype("<f8").tobytes())


def load_params(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_params`. Returns ({name: DenseStack}, header)."""
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        vec = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if vec.size != header["count"]:
        raise ValueError(f"{path}: expected {header['count']} parameters, found {vec.size}")
    stacks, p = {}, 0
    for name in header["order"]:
        spec = header["stacks"][name]
        size = sum(d["rows"] * d["cols"] + d["rows"] for d in spec)
        stacks[name] = DenseStack.from_spec(spec, vec[p:p + size])
        p += size
    return stacks, header
