"""Bounded replay of recent steps with reward-skewed and uniform sequence sampling."""

from dataclasses import dataclass

import numpy as np

from . import kernels

# reward-prediction classes
ZERO, POSITIVE, NEGATIVE = 0, 1, 2


class InsufficientData(Exception):
    """Not enough valid windows in the buffer; the caller skips that update."""


@dataclass
class StoredStep:
    observation: object  # env.Observation seen before acting
    action: int
    reward: float  # reward received for ``action``
    pixel_change: np.ndarray  # n x n pseudo-rewards between this frame and the next
    terminal: bool  # the episode ended with this step


def reward_class(reward):
    if reward > 0:
        return POSITIVE
    if reward < 0:
        return NEGATIVE
    return ZERO


def pixel_change(prev, cur, crop, grid):
    """Mean |cur - prev| over pixels and channels of each cell of the central crop."""
    if prev.shape != cur.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {cur.shape}")
    _, h, w = cur.shape
    if crop > min(h, w) or crop % grid:
        raise ValueError(f"crop {crop} must fit the {h}x{w} frame and be divisible by grid {grid}")
    return kernels.cell_mean_abs_diff(prev, cur, crop, grid)


class ReplayBuffer:
    """Ring buffer; ``rewarding`` holds ring positions whose reward is nonzero."""

    def __init__(self, capacity=2000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._ring = [None] * capacity
        self._cursor = 0
        self._size = 0
        self._terminal = np.zeros(capacity, dtype=bool)
        self.rewarding = set()

    def __len__(self):
        return self._size

    def append(self, step):
        pos = self._cursor
        old = self._ring[pos]
        if old is not None and old.reward != 0:
            self.rewarding.discard(pos)
        self._ring[pos] = step
        self._terminal[pos] = step.terminal
        if step.reward != 0:
            self.rewarding.add(pos)
        self._cursor = (pos + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _start(self):
        return self._cursor if self._size == self.capacity else 0

    def position(self, k):
        """Ring position of the k-th oldest stored step."""
        return (self._start() + k) % self.capacity

    def __getitem__(self, k):
        if not -self._size <= k < self._size:
            raise IndexError(k)
        return self._ring[self.position(k % self._size)]

    def steps(self):
        return [self[k] for k in range(self._size)]

    def audit(self):
        """True when the rewarding index matches a full scan."""
        scan = {p for p, s in enumerate(self._ring) if s is not None and s.reward != 0}
        return scan == self.rewarding

    def _terminal_prefix(self):
        # prefix[k] = number of terminal steps among chronological indices < k
        flags = np.roll(self._terminal, -self._start())[:self._size]
        return np.concatenate([[0], np.cumsum(flags)])

    def valid_starts(self, length):
        """Chronological starts whose window has no terminal before its last step."""
        if length < 1 or self._size < length:
            return np.empty(0, dtype=np.int64)
        prefix = self._terminal_prefix()
        starts = np.arange(self._size - length + 1)
        inner = prefix[starts + length - 1] - prefix[starts]
        return starts[inner == 0]

    def sample_sequence(self, length, rng):
        starts = self.valid_starts(length)
        if starts.size == 0:
            raise InsufficientData(f"no {length}-step window inside one episode")
        k = int(starts[rng.integers(starts.size)])
        return [self[k + i] for i in range(length)]

    def rp_candidates(self):
        """Chronological indices j usable as reward-prediction targets, split by reward."""
        if self._size < 3:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        prefix = self._terminal_prefix()
        targets = np.arange(2, self._size)
        # frames j-2, j-1, j must share an episode: no terminal at j-2 or j-1
        ok = targets[(prefix[targets] - prefix[targets - 2]) == 0]
        flags = np.zeros(self.capacity, dtype=bool)
        flags[list(self.rewarding)] = True
        mask = np.roll(flags, -self._start())[ok]
        return ok[mask], ok[~mask]

    def sample_rp(self, rng):
        """Three consecutive steps and the class of the last step's reward.

        The frames are the observations of steps j-2, j-1, j; the predicted
        reward is the one step j earns, which arrives with the next, unseen
        frame. Rewarding and non-rewarding targets are drawn with equal
        probability.
        """
        rewarding, plain = self.rp_candidates()
        if rewarding.size == 0 or plain.size == 0:
            raise InsufficientData("reward prediction needs rewarding and non-rewarding targets")
        pool = rewarding if rng.random() < 0.5 else plain
        j = int(pool[rng.integers(pool.size)])
        window = [self[j - 2], self[j - 1], self[j]]
        return window, reward_class(window[-1].reward)

    def stats(self):
        return {"fill": self._size / self.capacity,
                "rewarding_frac": len(self.rewarding) / self._size if self._size else 0.0}
