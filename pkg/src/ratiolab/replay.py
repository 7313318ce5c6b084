"""Experience replay: uniform ring buffer, proportional prioritization, n-step returns."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import binio


class ReplayContractError(ValueError):
    pass


class NotReadyError(RuntimeError):
    """The buffer holds fewer transitions than the requested batch."""


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    n: int = 1
    discount_n: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ReplayContractError(f"n must be >= 1, got {self.n}")


class SumTree:
    """Binary tree over ``capacity`` leaves (rounded up to a power of two).

    Node ``1`` is the root, node ``i`` has children ``2i`` and ``2i + 1``, leaf
    ``j`` lives at ``capacity + j``. Parents are always recomputed from their
    children rather than patched with deltas, so no drift accumulates.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        size = 1
        while size < capacity:
            size *= 2
        self.capacity = size
        self.nodes = np.zeros(2 * size)
        self._max = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    @property
    def max_leaf(self) -> float:
        return float(self._max[1])

    def leaf(self, index) -> np.ndarray:
        return self.nodes[self.capacity + np.asarray(index)]

    @property
    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity:]

    def update(self, index, priority) -> None:
        index = np.atleast_1d(np.asarray(index, dtype=np.int64))
        priority = np.broadcast_to(np.asarray(priority, dtype=np.float64), index.shape)
        if np.any(index < 0) or np.any(index >= self.capacity):
            raise ReplayContractError(f"leaf index out of range [0, {self.capacity})")
        if np.any(priority < 0) or not np.all(np.isfinite(priority)):
            raise ReplayContractError("priorities must be finite and non-negative")
        pos = self.capacity + index
        # duplicates: the last write wins, matching sequential semantics
        self.nodes[pos] = priority
        self._max[pos] = priority
        # repeated parents just rewrite the same sum
        pos = pos // 2
        while pos[0] >= 1:
            left = 2 * pos
            self.nodes[pos] = self.nodes[left] + self.nodes[left + 1]
            self._max[pos] = np.maximum(self._max[left], self._max[left + 1])
            pos = pos // 2

    def find(self, u) -> np.ndarray:
        """Leaf whose prefix-sum interval ``[c_{j-1}, c_j)`` contains each ``u``."""
        u = np.array(u, dtype=np.float64, ndmin=1)
        total = self.total
        if total <= 0:
            raise ReplayContractError("cannot sample from an empty tree")
        if np.any(u < 0) or np.any(u >= total):
            raise ReplayContractError(f"u must lie in [0, {total})")
        idx = np.ones(u.shape, dtype=np.int64)
        while idx[0] < self.capacity:
            left = self.nodes[2 * idx]
            right = u >= left
            u = np.where(right, u - left, u)
            idx = 2 * idx + right
        leaf = idx - self.capacity
        # rounding can land on an empty leaf right of the mass; step back
        for i in np.flatnonzero(self.nodes[idx] <= 0):
            j = leaf[i]
            while j > 0 and self.nodes[self.capacity + j] <= 0:
                j -= 1
            leaf[i] = j
        return leaf


def sumtree_sample(tree: SumTree, u: float) -> int:
    return int(tree.find(u)[0])


class ReplayBuffer:
    def __init__(self, capacity: int, mode: str = "uniform", alpha: float = 0.5,
                 beta: float = 0.4, eps_p: float = 1e-6):
        if mode not in ("uniform", "prioritized"):
            raise ValueError(f"unknown replay mode {mode!r}")
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.mode = mode
        self.alpha, self.beta, self.eps_p = alpha, beta, eps_p
        self.cursor = 0
        self.size = 0
        self.tree = SumTree(capacity) if mode == "prioritized" else None
        self._store: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return self.size

    def _allocate(self, obs_dim: int) -> None:
        c = self.capacity
        self._store = {
            "states": np.zeros((c, obs_dim)),
            "actions": np.zeros(c, dtype=np.int64),
            "rewards": np.zeros(c),
            "next_states": np.zeros((c, obs_dim)),
            "dones": np.zeros(c, dtype=bool),
            "n": np.zeros(c, dtype=np.int64),
            "discounts": np.zeros(c),
        }

    def append(self, t: Transition, initial_priority: float | None = None) -> int:
        state = np.asarray(t.state, dtype=np.float64).ravel()
        if self._store is None:
            self._allocate(state.size)
        s, i = self._store, self.cursor
        s["states"][i] = state
        s["actions"][i] = t.action
        s["rewards"][i] = t.reward
        s["next_states"][i] = np.asarray(t.next_state, dtype=np.float64).ravel()
        s["dones"][i] = t.done
        s["n"][i] = t.n
        s["discounts"][i] = t.discount_n
        if self.tree is not None:
            if initial_priority is None:
                # the slot being overwritten must not count towards the default
                self.tree.update(i, 0.0)
                initial_priority = self.tree.max_leaf or 1.0
            self.tree.update(i, initial_priority)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def transition(self, i: int) -> Transition:
        s = self._store
        return Transition(s["states"][i].copy(), int(s["actions"][i]), float(s["rewards"][i]),
                          s["next_states"][i].copy(), bool(s["dones"][i]), int(s["n"][i]),
                          float(s["discounts"][i]))

    def sample_indices(self, batch_size: int, rng: np.random.Generator):
        if self.size < batch_size or batch_size < 1:
            raise NotReadyError(f"replay holds {self.size} transitions, batch needs {batch_size}")
        if self.tree is None:
            idx = rng.choice(self.size, size=batch_size, replace=False)
            return idx, np.ones(batch_size)
        total = self.tree.total
        seg = total / batch_size
        u = (np.arange(batch_size) + rng.random(batch_size)) * seg
        u = np.minimum(u, np.nextafter(total, 0.0))
        idx = self.tree.find(u)
        probs = self.tree.leaf(idx) / total
        w = (self.size * probs) ** (-self.beta)
        return idx, w / w.max()

    def batch(self, idx) -> dict[str, np.ndarray]:
        return {k: v[idx] for k, v in self._store.items()}

    def sample_batch(self, batch_size: int, rng: np.random.Generator):
        idx, w = self.sample_indices(batch_size, rng)
        return [self.transition(i) for i in idx], idx, w

    def priority_from_error(self, td_errors) -> np.ndarray:
        return (np.abs(np.asarray(td_errors, dtype=np.float64)) + self.eps_p) ** self.alpha

    def update_priorities(self, indices, td_errors) -> None:
        if self.tree is None:
            return
        indices = np.asarray(indices, dtype=np.int64)
        if np.any(indices < 0) or np.any(indices >= self.size):
            raise ReplayContractError(f"priority index outside [0, {self.size})")
        self.tree.update(indices, self.priority_from_error(td_errors))

    # snapshot
    MAGIC = b"RRBF"

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"capacity": self.capacity, "mode": self.mode, "alpha": self.alpha, "beta": self.beta,
                "eps_p": self.eps_p, "cursor": self.cursor, "size": self.size,
                "allocated": self._store is not None}
        arrays = dict(self._store or {})
        if self.tree is not None:
            arrays["priorities"] = self.tree.leaves[: self.capacity].copy()
        return meta, arrays

    def load_state_dict(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.__init__(meta["capacity"], meta["mode"], meta["alpha"], meta["beta"], meta["eps_p"])
        self.cursor, self.size = meta["cursor"], meta["size"]
        if meta["allocated"]:
            self._store = {k: arrays[k].copy() for k in
                           ("states", "actions", "rewards", "next_states", "dones", "n", "discounts")}
        if self.tree is not None:
            self.tree.update(np.arange(self.capacity), arrays["priorities"])

    def snapshot(self) -> bytes:
        meta, arrays = self.state_dict()
        return binio.dumps(self.MAGIC, meta, arrays)

    @classmethod
    def restore(cls, data: bytes) -> "ReplayBuffer":
        meta, arrays = binio.loads(cls.MAGIC, data)
        buf = cls(1)
        buf.load_state_dict(meta, arrays)
        return buf


def nstep_assemble(window, n: int, gamma: float) -> Transition:
    """Fold the first ``min(n, steps to episode end)`` raw steps into one transition.

    ``window`` is a sequence of ``(state, action, reward, next_state, done)``.
    """
    if not window:
        raise ReplayContractError("empty n-step window")
    m = min(n, len(window))
    reward, discount = 0.0, 1.0
    for j in range(m):
        s, a, r, s_next, done = window[j]
        if j > 0 and not np.array_equal(np.asarray(window[j - 1][3]), np.asarray(s)):
            raise ReplayContractError("n-step window is not a contiguous trajectory")
        reward += discount * r
        discount *= gamma
        if done:
            if j + 1 < min(n, len(window)):
                raise ReplayContractError("n-step window continues past a terminal step")
            m = j + 1
    first, last = window[0], window[m - 1]
    return Transition(first[0], first[1], reward, last[3], bool(last[4]), m, discount)


class NStepAccumulator:
    """Turns a stream of raw steps into n-step transitions.

    Returns are accumulated as rewards arrive: each pending start keeps a
    running sum and the discount applied so far. A terminal step flushes every
    pending start with a shortened horizon.
    """

    def __init__(self, n: int, gamma: float):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n, self.gamma = n, gamma
        self.pending: deque = deque()  # [state, action, return, discount, steps]

    def push(self, state, action, reward, next_state, done) -> list[Transition]:
        for entry in self.pending:
            entry[2] += entry[3] * reward
            entry[3] *= self.gamma
            entry[4] += 1
        self.pending.append([state, action, reward, self.gamma, 1])
        out = []
        if done:
            while self.pending:
                s, a, ret, disc, m = self.pending.popleft()
                out.append(Transition(s, a, ret, next_state, True, m, disc))
        elif self.pending[0][4] == self.n:
            s, a, ret, disc, m = self.pending.popleft()
            out.append(Transition(s, a, ret, next_state, False, m, disc))
        return out

    def reset(self) -> None:
        self.pending.clear()
