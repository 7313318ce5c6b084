"""Seeded desk-scale environments and a uniform-random reference agent."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MASK64 = (1 << 64) - 1


class SplitMix64:
    """Integer-state generator; identical streams on every platform."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def randint(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by multiply-shift."""
        return (self.next_u64() * n) >> 64

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


class EnvSpecError(ValueError):
    pass


class EpisodeDone(RuntimeError):
    pass


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


class Environment:
    obs_dim: int
    n_actions: int
    max_steps: int

    def __init__(self, seed: int = 0):
        self.rng = SplitMix64(seed)
        self._done = True
        self.steps = 0

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = SplitMix64(seed)
        self._done = False
        self.steps = 0
        self._reset()
        return self.observe()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeDone("step() called on a finished episode; call reset()")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} outside [0, {self.n_actions})")
        self.steps += 1
        reward, done = self._step(int(action))
        if self.steps >= self.max_steps:
            done = True
        self._done = done
        return StepResult(self.observe(), float(reward), done)

    def get_state(self) -> dict:
        return {"rng": self.rng.state, "done": self._done, "steps": self.steps, **self._get_state()}

    def set_state(self, state: dict) -> None:
        self.rng.state = state["rng"]
        self._done, self.steps = state["done"], state["steps"]
        self._set_state(state)

    def optimal_return(self) -> float:
        """Expected undiscounted return of an optimal policy from a fresh reset."""
        raise NotImplementedError


class Catch(Environment):
    """Ball drops from a random top-row column; the bottom paddle must meet it.

    Actions: 0 left, 1 stay, 2 right. Observation: ball plane then paddle
    plane, each ``height x width``, flattened. Reward +1 on catch, -1 on miss.
    """

    def __init__(self, width: int = 5, height: int = 10, seed: int = 0):
        if width < 2 or height < 2:
            raise EnvSpecError(f"catch needs width, height >= 2, got {width}x{height}")
        super().__init__(seed)
        self.width, self.height = width, height
        self.obs_dim = 2 * width * height
        self.n_actions = 3
        self.max_steps = height - 1
        self.ball_row = self.ball_col = 0
        self.paddle = width // 2

    def _reset(self):
        self.ball_row = 0
        self.ball_col = self.rng.randint(self.width)
        self.paddle = self.width // 2

    def _step(self, action):
        self.paddle = min(self.width - 1, max(0, self.paddle + action - 1))
        self.ball_row += 1
        if self.ball_row == self.height - 1:
            return (1.0 if self.paddle == self.ball_col else -1.0), True
        return 0.0, False

    def observe(self) -> np.ndarray:
        obs = np.zeros((2, self.height, self.width))
        obs[0, self.ball_row, self.ball_col] = 1.0
        obs[1, self.height - 1, self.paddle] = 1.0
        return obs.ravel()

    def _get_state(self):
        return {"ball_row": self.ball_row, "ball_col": self.ball_col, "paddle": self.paddle}

    def _set_state(self, s):
        self.ball_row, self.ball_col, self.paddle = s["ball_row"], s["ball_col"], s["paddle"]

    def optimal_return(self) -> float:
        reach = self.height - 1
        caught = sum(abs(c - self.width // 2) <= reach for c in range(self.width))
        return (caught - (self.width - caught)) / self.width


def catch_env(width: int = 5, height: int = 10, seed: int = 0) -> Catch:
    return Catch(width, height, seed)


MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


class GridWorld(Environment):
    """Deterministic 4-action navigation; bumping a wall or border stays put.

    Entering the goal pays ``goal_reward`` and ends the episode; every other
    step pays ``step_reward``. Hitting ``max_steps`` ends the episode without
    the goal reward.
    """

    def __init__(self, rows: int, cols: int, start, goal, walls=(), step_reward: float = 0.0,
                 goal_reward: float = 1.0, max_steps: int = 50, seed: int = 0):
        super().__init__(seed)
        self.rows, self.cols = rows, cols
        self.start, self.goal = tuple(start), tuple(goal)
        self.walls = frozenset(tuple(w) for w in walls)
        self.step_reward, self.goal_reward = step_reward, goal_reward
        self.max_steps = max_steps
        self.obs_dim = rows * cols
        self.n_actions = 4
        self.pos = self.start
        self._validate()

    def _validate(self):
        if self.rows < 1 or self.cols < 1 or self.max_steps < 1:
            raise EnvSpecError("rows, cols and max_steps must be positive")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self._inside(cell) or cell in self.walls:
                raise EnvSpecError(f"{name} {cell} is outside the grid or on a wall")
        if self.start == self.goal:
            raise EnvSpecError("start and goal coincide")
        if self.goal not in self.reachable():
            raise EnvSpecError(f"goal {self.goal} is unreachable from start {self.start}")

    def _inside(self, cell) -> bool:
        return 0 <= cell[0] < self.rows and 0 <= cell[1] < self.cols

    def move(self, cell, action):
        nxt = (cell[0] + MOVES[action][0], cell[1] + MOVES[action][1])
        return nxt if self._inside(nxt) and nxt not in self.walls else cell

    def reachable(self) -> set:
        seen, queue = {self.start}, deque([self.start])
        while queue:
            cell = queue.popleft()
            for a in range(4):
                nxt = self.move(cell, a)
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return seen

    def cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols) if (r, c) not in self.walls]

    def encode(self, cell) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[cell[0] * self.cols + cell[1]] = 1.0
        return obs

    def _reset(self):
        self.pos = self.start

    def _step(self, action):
        self.pos = self.move(self.pos, action)
        if self.pos == self.goal:
            return self.goal_reward, True
        return self.step_reward, False

    def observe(self):
        return self.encode(self.pos)

    def _get_state(self):
        return {"pos": list(self.pos)}

    def _set_state(self, s):
        self.pos = tuple(s["pos"])

    def optimal_return(self) -> float:
        # finite-horizon dynamic programming on undiscounted return
        value = {c: 0.0 for c in self.cells()}
        for _ in range(self.max_steps):
            new = {}
            for c in value:
                if c == self.goal:
                    new[c] = 0.0
                    continue
                best = -np.inf
                for a in range(4):
                    nxt = self.move(c, a)
                    q = self.goal_reward if nxt == self.goal else self.step_reward + value[nxt]
                    best = max(best, q)
                new[c] = best
            value = new
        return float(value[self.start])


def gridworld_env(spec: dict, seed: int = 0) -> GridWorld:
    keys = ("rows", "cols", "start", "goal", "walls", "step_reward", "goal_reward", "max_steps")
    missing = [k for k in ("rows", "cols", "start", "goal") if k not in spec]
    if missing:
        raise EnvSpecError(f"gridworld spec missing {missing}")
    return GridWorld(**{k: spec[k] for k in keys if k in spec}, seed=seed)


def make_env(spec: dict, seed: int = 0) -> Environment:
    kind = spec.get("kind")
    if kind == "catch":
        return catch_env(spec.get("width", 5), spec.get("height", 10), seed=seed)
    if kind == "gridworld":
        return gridworld_env(spec, seed=seed)
    raise EnvSpecError(f"unknown environment kind {kind!r}")


def load_env_spec(path) -> dict:
    spec = json.loads(Path(path).read_text())
    make_env(spec)  # validate eagerly
    return spec


def random_agent_baseline(env: Environment, episodes: int, seed: int) -> float:
    """Mean undiscounted return of the uniform-random policy."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    actions = SplitMix64(seed ^ 0x5EED)
    env.reset(seed=seed)
    total = 0.0
    for ep in range(episodes):
        if ep:
            env.reset()
        done = False
        while not done:
            res = env.step(actions.randint(env.n_actions))
            total += res.reward
            done = res.done
    return total / episodes
