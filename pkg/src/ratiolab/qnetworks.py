"""Value-network heads: plain, dueling, noisy and categorical (C51)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Tensor

HEAD_KINDS = ("scalar", "dueling", "categorical", "dueling-categorical")


class ContractViolation(ValueError):
    """A precondition on the inputs of an operation does not hold."""


def argmax_action(q) -> int:
    """Greedy action; ties go to the lowest index."""
    q = np.asarray(q, dtype=np.float64)
    if q.size == 0:
        raise ContractViolation("argmax over an empty action vector")
    return int(np.argmax(q))


def dueling_combine(v, adv):
    """``q_a = v + adv_a - mean(adv)``; works on numpy arrays or Tensors."""
    if isinstance(v, Tensor) or isinstance(adv, Tensor):
        return nc.add(v, nc.sub(adv, nc.reduce_mean(adv, axis=-1, keepdims=True)))
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size == 0:
        raise ContractViolation("dueling_combine needs at least one advantage")
    return v + adv - adv.mean(axis=-1, keepdims=True)


@dataclass
class CategoricalSupport:
    v_min: float = -10.0
    v_max: float = 10.0
    n_atoms: int = 51

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise nc.ParameterError(f"v_min {self.v_min} must be < v_max {self.v_max}")
        if self.n_atoms < 2:
            raise nc.ParameterError(f"n_atoms must be >= 2, got {self.n_atoms}")

    @property
    def delta_z(self) -> float:
        return (self.v_max - self.v_min) / (self.n_atoms - 1)

    @property
    def atoms(self) -> np.ndarray:
        return self.v_min + np.arange(self.n_atoms) * self.delta_z

    def expectation(self, probs) -> np.ndarray:
        return np.asarray(probs) @ self.atoms


def _check_distribution(probs: np.ndarray, tol: float = 1e-6) -> None:
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > tol):
        raise ContractViolation("probabilities must be non-negative and sum to 1")


def categorical_project_batch(probs, rewards, discounts, dones, support: CategoricalSupport) -> np.ndarray:
    """Project ``r + discount * Z`` back onto the fixed atom grid, row by row."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_distribution(probs)
    batch, n = probs.shape
    z = support.atoms
    rewards = np.asarray(rewards, dtype=np.float64).reshape(batch, 1)
    live = (1.0 - np.asarray(dones, dtype=np.float64)).reshape(batch, 1)
    disc = np.asarray(discounts, dtype=np.float64).reshape(batch, 1)
    tz = np.clip(rewards + live * disc * z[None, :], support.v_min, support.v_max)
    b = (tz - support.v_min) / support.delta_z
    # clip guards against b drifting a hair outside [0, n-1] in floating point
    b = np.clip(b, 0.0, n - 1)
    lower = np.floor(b).astype(np.int64)
    upper = np.ceil(b).astype(np.int64)
    w_upper = b - lower
    w_lower = 1.0 - w_upper  # lower == upper gives w_lower = 1, all mass kept
    out = np.zeros_like(probs)
    rows = np.repeat(np.arange(batch), n)
    np.add.at(out, (rows, lower.ravel()), (probs * w_lower).ravel())
    np.add.at(out, (rows, upper.ravel()), (probs * w_upper).ravel())
    return out


def categorical_project(probs, reward: float, discount: float, done: bool,
                        support: CategoricalSupport | None = None) -> np.ndarray:
    support = support or CategoricalSupport(n_atoms=len(probs))
    if not 0.0 <= discount <= 1.0:
        raise ContractViolation(f"discount must lie in [0, 1], got {discount}")
    return categorical_project_batch(np.asarray(probs)[None, :], [reward], [discount], [done], support)[0]


def cross_entropy_loss(target_probs, predicted_log_probs) -> float:
    t = np.asarray(target_probs, dtype=np.float64)
    lp = np.asarray(predicted_log_probs, dtype=np.float64)
    if t.shape != lp.shape:
        raise DimensionError(f"cross entropy: target{list(t.shape)} vs prediction{list(lp.shape)}")
    return float(-(t * lp).sum())


class DenseLayer:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.W = nc.parameter(nc.glorot_uniform(rng, fan_out, fan_in))
        self.b = nc.parameter(np.zeros(fan_out))

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return nc.dense_forward(self.W, self.b, x)

    def resample(self, rng) -> None:
        pass


def _f(u: np.ndarray) -> np.ndarray:
    return np.sign(u) * np.sqrt(np.abs(u))


class NoisyLayer:
    """Factored-Gaussian noisy dense layer.

    Effective weights are ``mu_W + sigma_W * eps_W`` with
    ``eps_W = outer(f(eps_out), f(eps_in))`` and ``f(u) = sign(u) sqrt|u|``.
    Noise starts at zero, so a fresh layer behaves like a dense layer on ``mu``.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, sigma0: float = 0.5):
        bound = 1.0 / math.sqrt(fan_in)
        self.mu_W = nc.parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        self.mu_b = nc.parameter(rng.uniform(-bound, bound, size=fan_out))
        self.sigma_W = nc.parameter(np.full((fan_out, fan_in), sigma0 / math.sqrt(fan_in)))
        self.sigma_b = nc.parameter(np.full(fan_out, sigma0 / math.sqrt(fan_in)))
        self.eps_W = np.zeros((fan_out, fan_in))
        self.eps_b = np.zeros(fan_out)

    def parameters(self) -> list[Tensor]:
        return [self.mu_W, self.mu_b, self.sigma_W, self.sigma_b]

    def resample(self, rng: np.random.Generator) -> None:
        fan_out, fan_in = self.eps_W.shape
        e_in = _f(rng.standard_normal(fan_in))
        e_out = _f(rng.standard_normal(fan_out))
        self.eps_W = np.outer(e_out, e_in)
        self.eps_b = e_out

    def freeze_noise(self) -> None:
        self.eps_W = np.zeros_like(self.eps_W)
        self.eps_b = np.zeros_like(self.eps_b)

    def __call__(self, x: Tensor) -> Tensor:
        W = nc.add(self.mu_W, nc.mul(self.sigma_W, self.eps_W))
        b = nc.add(self.mu_b, nc.mul(self.sigma_b, self.eps_b))
        return nc.dense_forward(W, b, x)


def noisy_forward(layer: NoisyLayer, x, resample: bool, rng: np.random.Generator | None = None) -> np.ndarray:
    if resample:
        if rng is None:
            raise ValueError("resampling noise needs an rng")
        layer.resample(rng)
    return layer(nc.as_tensor(x)).value


class QNetwork:
    """MLP trunk with one of four heads.

    ``forward`` returns Q-values ``[B, A]`` for scalar heads and per-action
    log-probabilities ``[B, A, N]`` for categorical heads.
    """

    def __init__(self, obs_dim: int, n_actions: int, hidden=(64,), head: str = "scalar",
                 noisy: bool = False, support: CategoricalSupport | None = None,
                 rng: np.random.Generator | None = None, sigma0: float = 0.5):
        if head not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {head!r}; expected one of {HEAD_KINDS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim, self.n_actions, self.hidden = obs_dim, n_actions, tuple(hidden)
        self.head, self.noisy = head, noisy
        self.categorical = head.endswith("categorical")
        self.dueling = head.startswith("dueling")
        self.support = (support or CategoricalSupport()) if self.categorical else None
        n_out = self.support.n_atoms if self.categorical else 1

        def layer(i, o):
            return NoisyLayer(i, o, rng, sigma0) if noisy else DenseLayer(i, o, rng)

        dims = (obs_dim,) + self.hidden
        self.trunk = [layer(i, o) for i, o in zip(dims[:-1], dims[1:])]
        self.adv_out = layer(dims[-1], n_actions * n_out)
        self.value_out = layer(dims[-1], n_out) if self.dueling else None

    @property
    def layers(self):
        return self.trunk + [self.adv_out] + ([self.value_out] if self.value_out else [])

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def resample_noise(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.resample(rng)

    def freeze_noise(self) -> None:
        for layer in self.layers:
            if isinstance(layer, NoisyLayer):
                layer.freeze_noise()

    def forward(self, obs) -> Tensor:
        x = nc.as_tensor(np.atleast_2d(obs))
        for layer in self.trunk:
            x = nc.relu(layer(x))
        batch = x.shape[0]
        if not self.categorical:
            adv = self.adv_out(x)
            return dueling_combine(self.value_out(x), adv) if self.dueling else adv
        n = self.support.n_atoms
        logits = nc.reshape(self.adv_out(x), (batch, self.n_actions, n))
        if self.dueling:
            v = nc.reshape(self.value_out(x), (batch, 1, n))
            logits = nc.add(v, nc.sub(logits, nc.reduce_mean(logits, axis=1, keepdims=True)))
        return nc.log_softmax(logits, axis=-1)

    def q_values(self, obs) -> np.ndarray:
        """Expected action values as a plain ``[B, A]`` array."""
        out = self.forward(obs).value
        if self.categorical:
            return np.exp(out) @ self.support.atoms
        return out

    def get_weights(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]

    def set_weights(self, weights) -> None:
        params = self.parameters()
        if len(params) != len(weights):
            raise DimensionError(f"expected {len(params)} weight arrays, got {len(weights)}")
        for p, w in zip(params, weights):
            if p.shape != np.shape(w):
                raise DimensionError(f"weight {list(np.shape(w))} does not fit {list(p.shape)}")
            p.value = np.array(w, dtype=np.float64, copy=True)

    def noise_state(self) -> list[np.ndarray]:
        return [a for layer in self.layers if isinstance(layer, NoisyLayer) for a in (layer.eps_W, layer.eps_b)]

    def set_noise_state(self, arrays) -> None:
        it = iter(arrays)
        for layer in self.layers:
            if isinstance(layer, NoisyLayer):
                layer.eps_W, layer.eps_b = np.array(next(it)), np.array(next(it))
