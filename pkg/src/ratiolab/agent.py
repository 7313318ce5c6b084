"""DQN / Rainbow-style agents whose update cadence sets the replay ratio.

Every ``tau_u`` interactions (once ``warmup`` interactions have been
collected) the agent performs ``k`` gradient updates, so the ratio of
updates to interactions is ``k / tau_u``. ``tau_t`` counts gradient updates
between target-network refreshes.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import binio
from . import numcore as nc
from .envs import Environment
from .numcore import AdamState, DimensionError
from .qnetworks import CategoricalSupport, QNetwork, argmax_action, categorical_project_batch
from .replay import NotReadyError, NStepAccumulator, ReplayBuffer, Transition


class ConfigError(ValueError):
    pass


@dataclass
class AgentConfig:
    gamma: float = 0.99
    n_step: int = 1
    batch_size: int = 32
    tau_u: int = 4
    k: int = 1
    tau_t: int = 8000
    warmup: int = 20000
    eps_start: float = 1.0
    eps_final: float = 0.01
    eps_decay_period: int = 250000
    eps_eval: float = 0.001
    eps_final_noisy: float = 0.0
    eval_episodes: int = 30
    replay_capacity: int = 100000
    double_q: bool = False
    dueling: bool = False
    noisy: bool = False
    categorical: bool = False
    prioritized: bool = False
    hidden: tuple = (64,)
    lr: float = 1e-3
    adam_eps: float = 1e-8
    huber_kappa: float = 1.0
    v_min: float = -10.0
    v_max: float = 10.0
    n_atoms: int = 51
    sigma0: float = 0.5
    alpha: float = 0.5
    beta_start: float = 0.4
    beta_final: float = 1.0
    eps_p: float = 1e-6
    reward_clip: bool = False
    seed: int = 0
    label: str = "custom"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def ratio(self) -> float:
        return self.k / self.tau_u

    @property
    def head(self) -> str:
        if self.categorical:
            return "dueling-categorical" if self.dueling else "categorical"
        return "dueling" if self.dueling else "scalar"

    def violations(self) -> list[str]:
        out = []
        if not 0.0 <= self.gamma <= 1.0:
            out.append(f"gamma {self.gamma} outside [0, 1]")
        for name in ("n_step", "batch_size", "tau_u", "k", "tau_t", "eps_decay_period",
                     "eval_episodes", "replay_capacity"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1, got {getattr(self, name)}")
        # n-step assembly lags up to n - 1 steps behind the interaction count
        if self.warmup < self.batch_size + self.n_step - 1:
            out.append(f"warmup {self.warmup} must be >= batch_size + n_step - 1 "
                       f"= {self.batch_size + self.n_step - 1}")
        if self.replay_capacity < self.batch_size:
            out.append("replay_capacity must be >= batch_size")
        if self.categorical and not self.v_min < self.v_max:
            out.append("v_min must be < v_max")
        if self.categorical and self.n_atoms < 2:
            out.append("n_atoms must be >= 2")
        if self.lr <= 0:
            out.append("lr must be > 0")
        return out

    def validate(self) -> "AgentConfig":
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "AgentConfig":
        return dataclasses.replace(self, **changes)


_RAINBOW = dict(n_step=3, double_q=True, dueling=True, noisy=True, categorical=True, prioritized=True)

# Atari-scale schedules. OTDQN/OTRainbow carry the overtrained values; the
# standard-cadence pair uses Dopamine's DQN/Rainbow defaults.
PRESETS: dict[str, AgentConfig] = {
    "OTDQN": AgentConfig(tau_u=1, k=1, tau_t=5000, warmup=25000, eps_decay_period=250000, label="OTDQN"),
    "OTRainbow": AgentConfig(tau_u=1, k=8, tau_t=500, warmup=20000, eps_decay_period=50000,
                             label="OTRainbow", **_RAINBOW),
    "SDQN-cadence": AgentConfig(tau_u=4, k=1, tau_t=8000, warmup=20000, eps_decay_period=250000,
                                label="SDQN-cadence"),
    "HRainbow-proxy": AgentConfig(tau_u=4, k=1, tau_t=8000, warmup=20000, eps_decay_period=250000,
                                  label="HRainbow-proxy (SDQN-cadence Rainbow)", **_RAINBOW),
}


def preset(name: str) -> AgentConfig:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def scale_schedule(config: AgentConfig, factor: float) -> AgentConfig:
    """Shrink warmup, epsilon decay and target period by ``factor``.

    ``tau_u`` and ``k`` are left untouched so the replay ratio is preserved.
    """
    if factor <= 0:
        raise ConfigError("scale factor must be positive")
    floor = config.batch_size + config.n_step - 1
    return config.replace(
        warmup=max(floor, math.ceil(config.warmup / factor)),
        eps_decay_period=max(1, math.ceil(config.eps_decay_period / factor)),
        tau_t=max(1, math.ceil(config.tau_t / factor)),
        replay_capacity=min(config.replay_capacity, max(config.batch_size, math.ceil(1e6 / factor))),
    )


def epsilon_at(t: int, config: AgentConfig) -> float:
    if t < config.warmup:
        return 1.0
    final = config.eps_final_noisy if config.noisy else config.eps_final
    if config.noisy:
        return final
    frac = min(1.0, (t - config.warmup) / config.eps_decay_period)
    return config.eps_start + frac * (final - config.eps_start)


def beta_at(t: int, horizon: int, config: AgentConfig) -> float:
    if horizon <= config.warmup:
        return config.beta_final
    frac = min(1.0, max(0.0, (t - config.warmup) / (horizon - config.warmup)))
    return config.beta_start + frac * (config.beta_final - config.beta_start)


def greedy_action(network: QNetwork, obs) -> int:
    return argmax_action(network.q_values(obs)[0])


def select_action(obs, t: int, config: AgentConfig, network: QNetwork, rng: np.random.Generator,
                  epsilon: float | None = None) -> int:
    eps = epsilon_at(t, config) if epsilon is None else epsilon
    if rng.random() < eps:
        return int(rng.integers(network.n_actions))
    if config.noisy:
        network.resample_noise(rng)
    return greedy_action(network, obs)


def double_q_target(reward: float, discount_n: float, done: bool, q_online_next, q_target_next) -> float:
    q_online_next = np.asarray(q_online_next, dtype=np.float64)
    q_target_next = np.asarray(q_target_next, dtype=np.float64)
    if q_online_next.shape != q_target_next.shape:
        raise DimensionError(f"online {list(q_online_next.shape)} vs target {list(q_target_next.shape)}")
    if done:
        return float(reward)
    return float(reward + discount_n * q_target_next[argmax_action(q_online_next)])


def bootstrap_actions(q_online_next: np.ndarray, q_target_next: np.ndarray, double_q: bool) -> np.ndarray:
    """Next-state actions: chosen by the online net (double Q) or the target net."""
    return np.argmax(q_online_next if double_q else q_target_next, axis=1)


def build_network(config: AgentConfig, obs_dim: int, n_actions: int, rng) -> QNetwork:
    support = CategoricalSupport(config.v_min, config.v_max, config.n_atoms) if config.categorical else None
    return QNetwork(obs_dim, n_actions, config.hidden, config.head, config.noisy, support, rng, config.sigma0)


@dataclass
class AgentState:
    config: AgentConfig
    online: QNetwork
    target: QNetwork
    replay: ReplayBuffer
    adam: AdamState
    rngs: dict[str, np.random.Generator]
    t: int = 0
    u: int = 0
    horizon: int = 0
    updates_since_sync: int = 0

    @classmethod
    def create(cls, config: AgentConfig, obs_dim: int, n_actions: int, horizon: int = 0) -> "AgentState":
        config.validate()
        streams = np.random.SeedSequence(config.seed).spawn(4)
        rngs = {name: np.random.default_rng(s) for name, s in zip(("init", "act", "replay", "noise"), streams)}
        online = build_network(config, obs_dim, n_actions, rngs["init"])
        target = build_network(config, obs_dim, n_actions, rngs["init"])
        replay = ReplayBuffer(config.replay_capacity, "prioritized" if config.prioritized else "uniform",
                              config.alpha, config.beta_start, config.eps_p)
        adam = AdamState.for_params(online.parameters(), lr=config.lr, eps=config.adam_eps)
        state = cls(config, online, target, replay, adam, rngs, horizon=horizon)
        sync_target(state)
        return state


def sync_target(state: AgentState) -> None:
    state.target.set_weights(state.online.get_weights())
    state.updates_since_sync = 0


def _loss_and_errors(state: AgentState, b: dict, weights: np.ndarray):
    cfg, online, target = state.config, state.online, state.target
    batch = len(b["actions"])
    live = ~b["dones"]
    rewards, discounts = b["rewards"], b["discounts"]
    if not cfg.categorical:
        q_online_next = online.q_values(b["next_states"])
        q_target_next = target.q_values(b["next_states"])
        a_next = bootstrap_actions(q_online_next, q_target_next, cfg.double_q)
        y = rewards + live * discounts * q_target_next[np.arange(batch), a_next]
        q = nc.gather(online.forward(b["states"]), b["actions"])
        delta = nc.sub(q, y)
        per_sample = nc.huber(delta, cfg.huber_kappa)
        errors = np.abs(delta.value)
    else:
        support = online.support
        q_online_next = online.q_values(b["next_states"])
        target_logp = target.forward(b["next_states"]).value
        target_probs = np.exp(target_logp)
        q_target_next = target_probs @ support.atoms
        a_next = bootstrap_actions(q_online_next, q_target_next, cfg.double_q)
        p_next = target_probs[np.arange(batch), a_next]
        p_next /= p_next.sum(axis=1, keepdims=True)
        projected = categorical_project_batch(p_next, rewards, discounts, b["dones"], support)
        logp = nc.gather(online.forward(b["states"]), b["actions"])
        per_sample = nc.mul(nc.reduce_sum(nc.mul(logp, projected), axis=1), -1.0)
        errors = per_sample.value.copy()
    loss = nc.reduce_mean(nc.mul(per_sample, weights))
    return loss, errors


def train_step(state: AgentState, config: AgentConfig | None = None) -> dict:
    """One gradient update on a replay batch; may refresh the target network."""
    cfg = config or state.config
    if len(state.replay) < cfg.batch_size:
        raise NotReadyError(f"replay holds {len(state.replay)} transitions, batch needs {cfg.batch_size}")
    if cfg.prioritized:
        state.replay.beta = beta_at(state.t, state.horizon, cfg)
    idx, weights = state.replay.sample_indices(cfg.batch_size, state.rngs["replay"])
    b = state.replay.batch(idx)
    if cfg.noisy:
        state.online.resample_noise(state.rngs["noise"])
        state.target.resample_noise(state.rngs["noise"])
    loss, errors = _loss_and_errors(state, b, weights)
    params = state.online.parameters()
    for p in params:
        p.zero_grad()
    nc.backward(loss)
    nc.adam_step(params, [p.grad for p in params], state.adam)
    state.replay.update_priorities(idx, errors)
    state.u += 1
    state.updates_since_sync += 1
    if state.u % cfg.tau_t == 0:
        sync_target(state)
    return {"loss": float(loss.value), "mean_error": float(errors.mean())}


@dataclass
class LearningCurve:
    interactions: list[int] = field(default_factory=list)
    eval_return: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    updates: list[int] = field(default_factory=list)
    loss_mean: list[float] = field(default_factory=list)

    def append(self, t, ret, eps, updates, loss):
        if self.interactions and t <= self.interactions[-1]:
            raise ValueError("learning-curve interactions must strictly increase")
        self.interactions.append(int(t))
        self.eval_return.append(float(ret))
        self.epsilon.append(float(eps))
        self.updates.append(int(updates))
        self.loss_mean.append(float(loss))

    def __len__(self):
        return len(self.interactions)

    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.interactions, self.eval_return))

    def rows(self):
        return zip(self.interactions, self.eval_return, self.epsilon, self.updates, self.loss_mean)


def evaluate(network: QNetwork, env: Environment, config: AgentConfig, rng: np.random.Generator,
             episodes: int | None = None) -> float:
    """Mean undiscounted return with eps_eval exploration and frozen (zero) noise."""
    saved = network.noise_state()
    network.freeze_noise()
    total = 0.0
    for _ in range(episodes or config.eval_episodes):
        obs, done = env.reset(), False
        while not done:
            if rng.random() < config.eps_eval:
                a = int(rng.integers(env.n_actions))
            else:
                a = greedy_action(network, obs)
            res = env.step(a)
            total += res.reward
            obs, done = res.observation, res.done
    network.set_noise_state(saved)
    return total / (episodes or config.eval_episodes)


class RunFailure(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


def _env_seeds(seed: int) -> tuple[int, int, int]:
    words = np.random.SeedSequence([seed, 0xE57]).generate_state(3, dtype=np.uint64)
    return tuple(int(w) for w in words)


class Trainer:
    """Owns one training run: agent, environments, episode bookkeeping, curve."""

    MAGIC = b"RRCK"

    def __init__(self, env: Environment, eval_env: Environment, config: AgentConfig,
                 eval_schedule, max_interactions: int, stop_at_return: float | None = None):
        self.env, self.eval_env, self.config = env, eval_env, config.validate()
        self.eval_schedule = sorted(set(int(s) for s in eval_schedule))
        if any(s < 1 for s in self.eval_schedule):
            raise ConfigError("evaluation points must be >= 1 interaction")
        self.max_interactions = int(max_interactions)
        self.stop_at_return = stop_at_return
        self.state = AgentState.create(config, env.obs_dim, env.n_actions, horizon=self.max_interactions)
        train_seed, eval_seed, eval_rng_seed = _env_seeds(config.seed)
        self.eval_rng = np.random.default_rng(eval_rng_seed)
        self.obs = env.reset(seed=train_seed)
        self.eval_env.reset(seed=eval_seed)
        self.nstep = NStepAccumulator(config.n_step, config.gamma)
        self.episode_return = 0.0
        self.curve = LearningCurve()
        self.losses: list[float] = []
        self.stopped = False

    @property
    def t(self) -> int:
        return self.state.t

    def _should_train(self, s: int) -> bool:
        return s >= self.config.warmup and s % self.config.tau_u == 0

    def interact(self) -> None:
        st, cfg = self.state, self.config
        s = st.t
        action = select_action(self.obs, s, cfg, st.online, st.rngs["act"])
        res = self.env.step(action)
        reward = float(np.sign(res.reward)) if cfg.reward_clip else res.reward
        for tr in self.nstep.push(self.obs, action, reward, res.observation, res.done):
            st.replay.append(tr)
        self.episode_return += res.reward
        if res.done:
            self.obs = self.env.reset()
            self.episode_return = 0.0
        else:
            self.obs = res.observation
        st.t = s + 1
        if self._should_train(s):
            for _ in range(cfg.k):
                self.losses.append(train_step(st, cfg)["loss"])

    def _maybe_evaluate(self) -> None:
        t = self.state.t
        if self.eval_schedule and t == self.eval_schedule[0]:
            self.eval_schedule.pop(0)
            ret = evaluate(self.state.online, self.eval_env, self.config, self.eval_rng)
            loss = float(np.mean(self.losses)) if self.losses else float("nan")
            self.curve.append(t, ret, epsilon_at(t, self.config), self.state.u, loss)
            self.losses = []
            if self.stop_at_return is not None and ret >= self.stop_at_return:
                self.stopped = True

    def run(self, until: int | None = None, on_step: Callable[["Trainer"], None] | None = None) -> LearningCurve:
        until = self.max_interactions if until is None else min(until, self.max_interactions)
        while self.state.t < until and not self.stopped:
            try:
                self.interact()
            except Exception as exc:  # environment or numeric fault
                record = {"interactions": self.state.t, "updates": self.state.u,
                          "error": f"{type(exc).__name__}: {exc}"}
                raise RunFailure(f"training failed at interaction {self.state.t}", record) from exc
            self._maybe_evaluate()
            if on_step is not None:
                on_step(self)
        return self.curve

    @property
    def finished(self) -> bool:
        return self.stopped or self.state.t >= self.max_interactions

    # checkpointing
    def checkpoint(self) -> bytes:
        st = self.state
        arrays: dict[str, np.ndarray] = {}
        for i, w in enumerate(st.online.get_weights()):
            arrays[f"online/{i}"] = w
        for i, w in enumerate(st.target.get_weights()):
            arrays[f"target/{i}"] = w
        for i, a in enumerate(st.online.noise_state()):
            arrays[f"online_noise/{i}"] = a
        for i, a in enumerate(st.target.noise_state()):
            arrays[f"target_noise/{i}"] = a
        for i, (m, v) in enumerate(zip(st.adam.m, st.adam.v)):
            arrays[f"adam_m/{i}"], arrays[f"adam_v/{i}"] = m, v
        replay_meta, replay_arrays = st.replay.state_dict()
        for k, v in replay_arrays.items():
            arrays[f"replay/{k}"] = v
        pending = list(self.nstep.pending)
        for i, entry in enumerate(pending):
            arrays[f"nstep/{i}"] = np.asarray(entry[0])
        arrays["obs"] = self.obs
        arrays["curve"] = np.array(list(self.curve.rows()), dtype=np.float64).reshape(-1, 5)
        arrays["losses"] = np.array(self.losses)
        meta = {
            "config": self.config.to_dict(),
            "t": st.t, "u": st.u, "horizon": st.horizon, "updates_since_sync": st.updates_since_sync,
            "adam_t": st.adam.t,
            "rngs": {k: g.bit_generator.state for k, g in st.rngs.items()},
            "eval_rng": self.eval_rng.bit_generator.state,
            "replay": replay_meta,
            "nstep": [[e[1], e[2], e[3], e[4]] for e in pending],
            "episode_return": self.episode_return,
            "env": self.env.get_state(), "eval_env": self.eval_env.get_state(),
            "eval_schedule": self.eval_schedule, "max_interactions": self.max_interactions,
            "stop_at_return": self.stop_at_return, "stopped": self.stopped,
        }
        return binio.dumps(self.MAGIC, json.loads(json.dumps(meta)), arrays)

    @classmethod
    def restore(cls, data: bytes, env: Environment, eval_env: Environment) -> "Trainer":
        meta, arrays = binio.loads(cls.MAGIC, data)
        config = AgentConfig.from_dict(meta["config"])
        tr = cls(env, eval_env, config, meta["eval_schedule"], meta["max_interactions"], meta["stop_at_return"])
        st = tr.state
        n_params = len(st.online.parameters())
        st.online.set_weights([arrays[f"online/{i}"] for i in range(n_params)])
        st.target.set_weights([arrays[f"target/{i}"] for i in range(n_params)])
        n_noise = len(st.online.noise_state())
        st.online.set_noise_state([arrays[f"online_noise/{i}"] for i in range(n_noise)])
        st.target.set_noise_state([arrays[f"target_noise/{i}"] for i in range(n_noise)])
        st.adam.m = [arrays[f"adam_m/{i}"] for i in range(n_params)]
        st.adam.v = [arrays[f"adam_v/{i}"] for i in range(n_params)]
        st.adam.t = meta["adam_t"]
        st.t, st.u, st.horizon = meta["t"], meta["u"], meta["horizon"]
        st.updates_since_sync = meta["updates_since_sync"]
        for k, g in st.rngs.items():
            g.bit_generator.state = meta["rngs"][k]
        tr.eval_rng.bit_generator.state = meta["eval_rng"]
        st.replay.load_state_dict(meta["replay"], {k[len("replay/"):]: v for k, v in arrays.items()
                                                   if k.startswith("replay/")})
        tr.nstep.pending.clear()
        for i, (a, ret, disc, m) in enumerate(meta["nstep"]):
            tr.nstep.pending.append([arrays[f"nstep/{i}"], a, ret, disc, m])
        tr.obs = arrays["obs"]
        tr.episode_return = meta["episode_return"]
        env.set_state(meta["env"])
        eval_env.set_state(meta["eval_env"])
        for row in arrays["curve"]:
            tr.curve.append(int(row[0]), row[1], row[2], int(row[3]), row[4])
        tr.losses = list(arrays["losses"])
        tr.stopped = meta["stopped"]
        return tr


def run_training(env: Environment, config: AgentConfig, eval_schedule, max_interactions: int | None = None,
                 eval_env: Environment | None = None, stop_at_return: float | None = None) -> LearningCurve:
    """Train from scratch and return the evaluation curve.

    ``eval_env`` defaults to an independent deep copy of ``env``.
    """
    eval_schedule = sorted(set(eval_schedule))
    if max_interactions is None:
        max_interactions = eval_schedule[-1] if eval_schedule else 0
    eval_env = eval_env if eval_env is not None else copy.deepcopy(env)
    trainer = Trainer(env, eval_env, config, eval_schedule, max_interactions, stop_at_return)
    return trainer.run()


def expected_updates(k: int, tau_u: int, warmup: int, t: int) -> int:
    """``k * |{s in [warmup, t) : s mod tau_u == 0}|``."""
    if t <= warmup:
        return 0
    first = -(-warmup // tau_u) * tau_u
    return 0 if first >= t else k * ((t - 1 - first) // tau_u + 1)
