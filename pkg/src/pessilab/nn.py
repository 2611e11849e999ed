"""Small fully-connected networks with hand-written reverse-mode gradients.

Parameters live in one flat float array (``ParamVector``) with per-layer views.
A network may carry a leading member axis so that a whole critic ensemble is
evaluated with a single batched matmul per layer.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .mdp import NumericError

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
TANH_EPS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: Literal["relu", "tanh"] = "relu"

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"need input and output sizes >= 1, got {sizes}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


class ParamVector:
    """Flat parameter storage plus a manifest of named segments.

    ``manifest`` is a list of ``(name, shape)``; ``views[name]`` reshapes the
    matching slice of ``flat`` without copying.
    """

    def __init__(self, flat: np.ndarray, manifest: list[tuple[str, tuple[int, ...]]], dtype=None):
        flat = np.ascontiguousarray(flat, dtype=dtype or getattr(flat, "dtype", np.float64))
        total = sum(math.prod(shape) for _, shape in manifest)
        if flat.shape != (total,):
            raise ValueError(f"flat length {flat.shape} does not match manifest total {total}")
        self.flat = flat
        self.manifest = [(name, tuple(shape)) for name, shape in manifest]
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in self.manifest:
            n = math.prod(shape)
            self.views[name] = flat[offset : offset + n].reshape(shape)
            offset += n
        self.version = 0

    def __len__(self) -> int:
        return self.flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    @property
    def dtype(self):
        return self.flat.dtype

    def like(self, flat: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(flat, dtype=self.dtype), self.manifest)

    def copy(self) -> "ParamVector":
        return self.like(self.flat.copy())

    def zeros_like(self) -> "ParamVector":
        return self.like(np.zeros_like(self.flat))

    def assign(self, flat: np.ndarray) -> None:
        """Overwrite the values in place; invalidates caches built from this vector."""
        self.flat[...] = flat
        self.version += 1

    def unflatten(self) -> dict[str, np.ndarray]:
        return {name: view.copy() for name, view in self.views.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamVector":
        manifest = [(name, tuple(a.shape)) for name, a in arrays.items()]
        flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays.values()])
        return cls(flat, manifest)


def mlp_manifest(spec: MlpSpec, members: int | None = None) -> list[tuple[str, tuple[int, ...]]]:
    lead = () if members is None else (members,)
    manifest = []
    for i, (n_in, n_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        manifest.append((f"W{i}", lead + (n_in, n_out)))
        manifest.append((f"b{i}", lead + (n_out,)))
    return manifest


def init_mlp(spec: MlpSpec, rng: np.random.Generator, members: int | None = None, dtype=np.float64) -> ParamVector:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), for weights and biases."""
    manifest = mlp_manifest(spec, members)
    params = ParamVector(np.zeros(sum(math.prod(s) for _, s in manifest), dtype=dtype), manifest)
    for i, n_in in enumerate(spec.layer_sizes[:-1]):
        bound = 1.0 / math.sqrt(n_in)
        for name in (f"W{i}", f"b{i}"):
            view = params[name]
            view[...] = rng.uniform(-bound, bound, size=view.shape)
    return params


@dataclass
class MlpCache:
    params: ParamVector
    spec: MlpSpec
    version: int
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    output_shape: tuple[int, ...] = ()


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _activate_grad(pre: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return pre > 0.0
    t = np.tanh(pre)
    return 1.0 - t * t


def mlp_forward(params: ParamVector, spec: MlpSpec, x: np.ndarray):
    """Evaluate the network; ``x`` is (in,), (B, in) or (k, B, in) for stacked members.

    Returns ``(output, cache)``; the output has a leading member axis whenever the
    parameters do.
    """
    x = np.asarray(x, dtype=params.dtype)
    if x.shape[-1] != spec.layer_sizes[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match layer size {spec.layer_sizes[0]}")
    cache = MlpCache(params, spec, params.version)
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        cache.inputs.append(h)
        bias = params[f"b{i}"]
        pre = h @ params[f"W{i}"] + (bias[..., None, :] if h.ndim > 1 else bias)
        cache.preacts.append(pre)
        h = pre if i == last else _activate(pre, spec.activation)
    cache.output_shape = h.shape
    return h, cache


def mlp_backward(cache: MlpCache, upstream: np.ndarray, want_input_grad: bool = False, want_param_grad: bool = True):
    """Reverse-mode gradient of sum(output * upstream) with respect to the parameters.

    Returns a ``ParamVector`` shaped like the forward parameters, or a tuple
    ``(grad, input_grad)`` when ``want_input_grad`` is set. With
    ``want_param_grad=False`` the parameter gradient is skipped and returned as None.
    """
    params, spec = cache.params, cache.spec
    if cache.version != params.version:
        raise RuntimeError("stale cache: parameters were modified after the forward pass")
    g = np.asarray(upstream, dtype=params.dtype)
    if g.shape != cache.output_shape:
        raise ValueError(f"upstream shape {g.shape} does not match output {cache.output_shape}")
    grad = params.zeros_like() if want_param_grad else None
    for i in reversed(range(spec.n_layers)):
        if i != spec.n_layers - 1:
            g = g * _activate_grad(cache.preacts[i], spec.activation)
        x = cache.inputs[i]
        W = params[f"W{i}"]
        if grad is None:
            pass
        elif g.ndim == 1:
            grad[f"W{i}"][...] = np.outer(x, g)
            grad[f"b{i}"][...] = g
        else:
            grad[f"W{i}"][...] = np.swapaxes(x, -1, -2) @ g
            grad[f"b{i}"][...] = g.sum(axis=-2)
        if i > 0 or want_input_grad:
            g = g @ np.swapaxes(W, -1, -2)
    if want_input_grad:
        return grad, g
    return grad


@dataclass
class AdamState:
    learning_rate: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, n: int, learning_rate: float, dtype=np.float64, **kwargs) -> "AdamState":
        return cls(learning_rate, np.zeros(n, dtype=dtype), np.zeros(n, dtype=dtype), **kwargs)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """Bias-corrected Adam update. Returns ``(new_state, new_params)``; inputs are untouched."""
    params = np.asarray(params)
    grad = np.asarray(grad, dtype=params.dtype)
    if grad.shape != params.shape or grad.shape != state.first_moment.shape:
        raise ValueError("gradient, parameter and moment shapes must match")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient; Adam update refused")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(state.learning_rate, m, v, t, state.beta1, state.beta2, state.epsilon)
    return new_state, new_params


def polyak_update(target: np.ndarray, online: np.ndarray, tau: float) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return (1.0 - tau) * target + tau * online


class Adam:
    """Stateful wrapper that applies ``adam_step`` to a ``ParamVector`` in place."""

    def __init__(self, params: ParamVector, learning_rate: float):
        self.params = params
        self.state = AdamState.create(len(params), learning_rate, params.dtype)

    def step(self, grad: np.ndarray) -> None:
        self.state, new = adam_step(self.state, self.params.flat, grad)
        self.params.assign(new)


# --- policy head -------------------------------------------------------------


@dataclass
class PolicySample:
    action: np.ndarray  # (B, d) in (-1, 1)
    log_prob: np.ndarray  # (B,)
    mean: np.ndarray
    log_std: np.ndarray
    eps: np.ndarray
    clipped: np.ndarray  # True where log-std sat on a clamp
    cache: MlpCache


class GaussianPolicyHead:
    """tanh-squashed diagonal Gaussian policy; the network emits (mean, log_std)."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64), activation="relu", rng=None, params=None,
                 dtype=np.float64):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.spec = MlpSpec((obs_dim, *hidden, 2 * act_dim), activation)
        if params is None:
            params = init_mlp(self.spec, rng if rng is not None else np.random.default_rng(0), dtype=dtype)
            params[f"b{self.spec.n_layers - 1}"][act_dim:] = -1.0
        self.params = params

    def _heads(self, obs: np.ndarray):
        out, cache = mlp_forward(self.params, self.spec, obs)
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite policy network output")
        mean, raw_log_std = out[..., : self.act_dim], out[..., self.act_dim :]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        clipped = raw_log_std != log_std
        return mean, log_std, clipped, cache

    def sample(self, obs: np.ndarray, rng: np.random.Generator | None, mode: str = "stochastic") -> PolicySample:
        obs = np.atleast_2d(np.asarray(obs, dtype=self.params.dtype))
        mean, log_std, clipped, cache = self._heads(obs)
        if mode == "stochastic":
            eps = rng.standard_normal(mean.shape).astype(mean.dtype)
        elif mode == "greedy":
            eps = np.zeros_like(mean)
        else:
            raise ValueError(f"unknown sampling mode {mode!r}")
        pre = mean + np.exp(log_std) * eps
        # tanh rounds to +-1 for large inputs; keep actions strictly inside (-1, 1)
        edge = np.nextafter(mean.dtype.type(1), mean.dtype.type(0))
        action = np.clip(np.tanh(pre), -edge, edge)
        log_prob = gaussian_tanh_log_prob(eps, log_std, action)
        return PolicySample(action, log_prob, mean, log_std, eps, clipped, cache)

    def log_prob(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Log-density of given squashed actions (used for stored transitions)."""
        obs = np.atleast_2d(np.asarray(obs, dtype=self.params.dtype))
        mean, log_std, _, _ = self._heads(obs)
        a = np.clip(np.asarray(action, dtype=mean.dtype).reshape(mean.shape), -1 + 1e-6, 1 - 1e-6)
        eps = (np.arctanh(a) - mean) / np.exp(log_std)
        return gaussian_tanh_log_prob(eps, log_std, a)

    def backward(self, sample: PolicySample, d_action: np.ndarray, d_log_prob: np.ndarray) -> np.ndarray:
        """Flat parameter gradient of sum(d_action * a + d_log_prob * log_prob) under
        the reparameterisation a = tanh(mean + std * eps) with eps held fixed."""
        a, eps, std = sample.action, sample.eps, np.exp(sample.log_std)
        one_minus = 1.0 - a * a
        dlogp_dpre = 2.0 * a * one_minus / (one_minus + TANH_EPS)
        d_pre = d_action * one_minus + d_log_prob[:, None] * dlogp_dpre
        d_mean = d_pre
        d_log_std = d_pre * std * eps - d_log_prob[:, None]
        d_log_std = np.where(sample.clipped, 0.0, d_log_std)
        grad = mlp_backward(sample.cache, np.concatenate([d_mean, d_log_std], axis=-1))
        return grad.flat


def gaussian_tanh_log_prob(eps: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    per_dim = -0.5 * eps * eps - log_std - 0.5 * LOG_2PI - np.log(1.0 - action * action + TANH_EPS)
    return per_dim.sum(axis=-1)


# --- critic ensemble ---------------------------------------------------------


@dataclass
class EnsembleOutput:
    values: np.ndarray  # (k, B)
    mean: np.ndarray
    std: np.ndarray
    lower_bound: np.ndarray
    cache: MlpCache | None = None


def ensemble_statistics(values: np.ndarray, beta: float):
    """Mean, population std and mean - beta * std over the leading member axis."""
    mean = np.where(np.all(values == values[0], axis=0), values[0], values.mean(axis=0))
    std = np.sqrt(((values - mean) ** 2).mean(axis=0))
    return mean, std, mean - beta * std


def lower_bound_member_weights(values: np.ndarray, beta: float) -> np.ndarray:
    """d lower_bound / d Q_i for every member; the std term is dropped where std == 0."""
    k = values.shape[0]
    mean, std, _ = ensemble_statistics(values, beta)
    safe = np.where(std > 0.0, std, 1.0)
    dstd = np.where(std > 0.0, (values - mean) / (k * safe), 0.0)
    return 1.0 / k - beta * dstd


class CriticEnsembleNet:
    """k independent Q(s, a) networks stored as one stacked parameter vector,
    plus a target copy."""

    def __init__(self, obs_dim: int, act_dim: int, k: int = 2, hidden=(64, 64), activation="relu", rng=None,
                 dtype=np.float64):
        if k < 1:
            raise ValueError("ensemble size must be positive")
        self.k = k
        self.spec = MlpSpec((obs_dim + act_dim, *hidden, 1), activation)
        self.params = init_mlp(self.spec, rng if rng is not None else np.random.default_rng(0), members=k, dtype=dtype)
        self.target = self.params.copy()

    def hard_update(self) -> None:
        self.target.assign(self.params.flat)

    def forward(self, obs: np.ndarray, action: np.ndarray, beta: float, use_target: bool = False) -> EnsembleOutput:
        if beta < 0:
            raise ValueError("beta must be non-negative")
        x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(action)], axis=-1).astype(self.params.dtype, copy=False)
        params = self.target if use_target else self.params
        out, cache = mlp_forward(params, self.spec, x)
        values = out[..., 0]
        mean, std, lb = ensemble_statistics(values, beta)
        return EnsembleOutput(values, mean, std, lb, cache)

    def input_grad(self, out: EnsembleOutput, upstream: np.ndarray) -> np.ndarray:
        """Per-member gradient w.r.t. the (obs, action) input for ``upstream`` of shape (k, B)."""
        _, d_input = mlp_backward(out.cache, upstream[..., None], want_input_grad=True, want_param_grad=False)
        return d_input


def ensemble_forward(nets: CriticEnsembleNet, state, action, beta: float, use_target: bool = False):
    out = nets.forward(state, action, beta, use_target)
    return out.values, out.mean, out.std, out.lower_bound


# --- checkpoints -------------------------------------------------------------


def save_blob(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write arrays as a JSON manifest followed by little-endian float64 data.

    Layout: 8-byte little-endian header length, UTF-8 JSON header, then the
    concatenated flat arrays.
    """
    manifest = [[name, list(np.shape(a))] for name, a in arrays.items()]
    header = json.dumps({"manifest": manifest, "meta": meta or {}}, sort_keys=True).encode()
    data = np.concatenate([np.asarray(a, dtype="<f8").ravel() for a in arrays.values()]) if arrays else np.zeros(0, "<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(data.astype("<f8").tobytes())


def load_blob(path: str | Path):
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + n].decode())
    data = np.frombuffer(raw[8 + n :], dtype="<f8")
    arrays, offset = {}, 0
    for name, shape in header["manifest"]:
        size = math.prod(shape)
        arrays[name] = data[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != data.size:
        raise ValueError("checkpoint payload length does not match its manifest")
    return arrays, header["meta"]
