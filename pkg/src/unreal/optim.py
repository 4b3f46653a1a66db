"""Shared RMSProp parameter store for asynchronous workers."""

import threading
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class OptimError(Exception):
    pass


@dataclass
class OptimConfig:
    learning_rate: float = 7e-4
    decay: float = 0.99
    epsilon: float = 0.1
    clip_norm: float = 40.0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise OptimError("decay must lie in (0, 1)")
        if self.epsilon < 0:
            raise OptimError("epsilon must be nonnegative")
        if self.learning_rate <= 0:
            raise OptimError("learning_rate must be positive")


def clip_by_global_norm(grads, clip_norm):
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if clip_norm and norm > clip_norm:
        factor = clip_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return grads, norm


class SharedParamStore:
    """Master parameters plus RMSProp accumulators behind one store lock.

    ``snapshot`` and ``apply_gradients`` may be called from many threads. A
    snapshot never mixes tensors from before and after an update; gradients
    from different workers are applied in whatever order they arrive.
    """

    def __init__(self, params, config):
        self.config = config
        self.params = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in params.items()}
        self.accum = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._lock = threading.Lock()
        self.updates = 0
        self.skipped = 0
        self.last_grad_norm = 0.0

    def snapshot(self):
        """Deep copy of the master parameters as fresh leaf Tensors."""
        with self._lock:
            copies = {k: v.copy() for k, v in self.params.items()}
        return {k: Tensor(v, requires_grad=True) for k, v in copies.items()}

    def apply_gradients(self, grads):
        """Clip by global norm, then g <- d g + (1-d) grad^2, p <- p - lr grad / sqrt(g + eps).

        Returns False (and counts a skip) when any gradient is non-finite.
        """
        missing = set(self.params) - set(grads)
        if missing:
            raise OptimError(f"gradients missing for {sorted(missing)}")
        for k, g in grads.items():
            if k not in self.params or np.shape(g) != self.params[k].shape:
                raise OptimError(f"gradient shape mismatch for {k}: {np.shape(g)} vs "
                                 f"{self.params[k].shape if k in self.params else 'unknown'}")
        if not all(np.isfinite(g).all() for g in grads.values()):
            with self._lock:
                self.skipped += 1
            return False
        grads, norm = clip_by_global_norm(grads, self.config.clip_norm)
        cfg = self.config
        with self._lock:
            for k, g in grads.items():
                acc = self.accum[k]
                acc *= cfg.decay
                acc += (1.0 - cfg.decay) * g * g
                self.params[k] -= cfg.learning_rate * g / np.sqrt(acc + cfg.epsilon)
            self.updates += 1
            self.last_grad_norm = norm
        return True

    def state_dict(self):
        with self._lock:
            return {"params": {k: v.copy() for k, v in self.params.items()},
                    "accum": {k: v.copy() for k, v in self.accum.items()},
                    "updates": self.updates, "skipped": self.skipped}

    def load_state_dict(self, state):
        for k in self.params:
            self.params[k][...] = state["params"][k]
            self.accum[k][...] = state["accum"][k]
        self.updates = int(state.get("updates", 0))
        self.skipped = int(state.get("skipped", 0))
