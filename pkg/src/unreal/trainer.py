"""Asynchronous actor-learner loop.

Each worker owns an environment, a replay buffer, a recurrent state and an
rng. Per unroll it snapshots the shared parameters, acts for up to ``unroll``
steps, computes the combined loss on the fresh unroll and on replayed
sequences, and applies one gradient to the shared store.
"""

import heapq
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, losses, net
from . import tensor as T
from .env import GridPixEnv
from .metrics import MetricsWriter, worker_returns_field
from .optim import SharedParamStore
from .replay import InsufficientData, ReplayBuffer, StoredStep, pixel_change

log = logging.getLogger(__name__)

COMPONENTS = ("a3c", "vr", "pc", "rp", "fc", "total")


class TrainingError(Exception):
    pass


class ResumeMismatch(TrainingError):
    pass


def _reached(value, threshold):
    return threshold is not None and value is not None and value >= threshold


def sample_action(logits, rng):
    z = logits - logits.max()
    p = np.exp(z)
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


def compute_gradients(params, preset, batch, buffer, rng, config, target_params=None):
    """Gradients of the combined loss for one update.

    Returns (grads, component values). Replayed terms are skipped whenever the
    buffer is below warmup or has no valid window; draws from ``rng`` happen
    in a fixed order (value replay, pixel control, reward prediction, feature
    control) so single-worker runs are reproducible.
    """
    w, aux = config.loss, config.aux
    comps, values = {}, {}
    comps["a3c"], _ = losses.unroll_a3c_loss(params, preset, batch, w, target_params=target_params)
    warm = buffer is not None and len(buffer) >= config.replay.warmup
    length = w.unroll + 1
    if warm and aux.use_vr:
        try:
            seq = buffer.sample_sequence(length, rng)
            comps["vr"] = losses.replay_value_loss(params, preset, seq, w, target_params=target_params)
        except InsufficientData:
            pass
    if warm and aux.use_pc:
        try:
            seq = buffer.sample_sequence(length, rng)
            comps["pc"] = losses.pixel_control_loss(params, preset, seq, w, target_params=target_params)
        except InsufficientData:
            pass
    if warm and aux.use_rp:
        try:
            comps["rp"] = losses.rp_loss(params, preset, buffer.sample_rp(rng))
        except InsufficientData:
            pass
    if warm and aux.use_fc:
        try:
            seq = buffer.sample_sequence(length, rng)
            comps["fc"] = losses.feature_control_loss(params, preset, seq, w, target_params=target_params)
        except InsufficientData:
            pass
    total = losses.unreal_loss(comps, w)
    for k, v in comps.items():
        values[k] = v.item()
    values["total"] = total.item()
    grads = T.gradients(total, params)
    return grads, values


@dataclass
class WorkerState:
    worker_id: int
    env: GridPixEnv
    buffer: ReplayBuffer
    rng: np.random.Generator
    state: net.RecurrentState = None
    observation: object = None
    returns: deque = field(default_factory=lambda: deque(maxlen=100))
    episode_return: float = 0.0
    steps: int = 0


@dataclass
class TrainResult:
    store: SharedParamStore
    rows: list
    metrics_path: Path = None
    checkpoint_path: Path = None
    global_step: int = 0


class Trainer:
    def __init__(self, config, out_dir=None, resume=None, frames_dump=None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir else None
        self.frames_dump = frames_dump
        n_actions = config.level.n_actions
        self.preset = net.get_preset(config.preset, n_actions=n_actions)
        fc = config.aux.use_fc
        self.store = SharedParamStore(net.init_params(self.preset, seed=config.seed, feature_control=fc), config.optim)
        self.global_step = 0
        self.episodes = 0
        self.start_step = 0
        if resume is not None:
            self._resume(resume)
        self._lock = threading.Lock()
        self._eval_lock = threading.Lock()
        self._stop = threading.Event()
        self._pending = []
        self._next_row = self._first_row_step()
        self._loss_sums = {k: 0.0 for k in COMPONENTS}
        self._loss_counts = {k: 0 for k in COMPONENTS}
        self.rows = []
        self.workers = []
        self._errors = []
        self._t0 = None
        self._writer = self._timing = None

    # --- setup ----------------------------------------------------------------

    def _resume(self, path):
        tensors, meta = checkpoint.load(path)
        if meta.get("preset") != self.preset.name or meta.get("n_actions") != self.preset.n_actions:
            raise ResumeMismatch(f"checkpoint preset {meta.get('preset')}/{meta.get('n_actions')} differs from "
                                 f"config {self.preset.name}/{self.preset.n_actions}")
        params, accum = checkpoint.split_store(tensors)
        if set(params) != set(self.store.params) or any(params[k].shape != v.shape for k, v in self.store.params.items()):
            raise ResumeMismatch("checkpoint tensors do not match the configured architecture")
        self.store.load_state_dict({"params": params, "accum": accum,
                                    "updates": meta.get("updates", 0), "skipped": meta.get("skipped", 0)})
        self.global_step = self.start_step = int(meta["global_step"])
        self.episodes = int(meta.get("episodes", 0))

    def _first_row_step(self):
        interval = self.config.eval_interval
        if self.start_step == 0:
            return 0
        return (self.start_step // interval + 1) * interval

    def _make_worker(self, wid):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, wid, self.start_step])
        return WorkerState(wid, GridPixEnv(cfg.level), ReplayBuffer(cfg.replay.capacity), rng)

    # --- metrics --------------------------------------------------------------

    def _metadata(self):
        return {"preset": self.preset.name, "n_actions": self.preset.n_actions, "global_step": self.global_step,
                "episodes": self.episodes, "run_id": self.config.run_id, "feature_control": self.config.aux.use_fc}

    def evaluate(self, params=None, episodes=None, frames_dump=None):
        """Run evaluation episodes on a private env with a frozen snapshot."""
        cfg = self.config
        params = params if params is not None else self.store.snapshot()
        episodes = cfg.eval_episodes if episodes is None else episodes
        env = GridPixEnv(cfg.level, frame_dump=frames_dump)
        rng = np.random.default_rng([cfg.seed, 0xE7A1])
        returns, optimal = [], []
        for ep in range(episodes):
            obs = env.reset(episode_seed=10_000_019 * (ep + 1) + cfg.seed)
            if cfg.level.category == "fruit-static":
                optimal.append(env.optimal_return())
            state = net.RecurrentState.zeros(self.preset.lstm_size)
            done, total = False, 0.0
            while not done:
                with T.no_grad():
                    out = net.trunk_forward(params, self.preset, obs, state)
                logits = out.policy_logits.data[0]
                action = int(np.argmax(logits)) if cfg.eval_greedy else sample_action(logits, rng)
                obs, reward, done = env.step(action)
                state = out.state
                total += reward
            returns.append(total)
        mean_opt = float(np.mean(optimal)) if optimal else None
        mean_ret = float(np.mean(returns)) if returns else None
        return mean_ret, mean_opt, returns

    def _row(self, step):
        params = self.store.snapshot()
        eval_return, eval_opt, _ = self.evaluate(params)
        with self._lock:
            means = [float(np.mean(w.returns)) if w.returns else None for w in self.workers]
            done = [m for m in means if m is not None]
            losses_mean = {k: (self._loss_sums[k] / self._loss_counts[k]) if self._loss_counts[k] else None
                           for k in COMPONENTS}
            self._loss_sums = {k: 0.0 for k in COMPONENTS}
            self._loss_counts = {k: 0 for k in COMPONENTS}
            fills = [w.buffer.stats() for w in self.workers]
            episodes = self.episodes
        row = {
            "run_id": self.config.run_id, "label": self.config.label, "global_step": step,
            "updates": self.store.updates, "episodes": episodes,
            "train_return": float(np.mean(done)) if done else None,
            "worker_returns": worker_returns_field([m if m is not None else float("nan") for m in means]),
            "eval_return": eval_return, "eval_optimal": eval_opt,
            "eval_normalized": (eval_return / eval_opt) if eval_opt else None,
            "buffer_fill": float(np.mean([f["fill"] for f in fills])) if fills else 0.0,
            "buffer_rewarding_frac": float(np.mean([f["rewarding_frac"] for f in fills])) if fills else 0.0,
            "skipped_updates": self.store.skipped,
            **{f"loss_{k}": v for k, v in losses_mean.items()},
            **self.config.hyperparameters(),
        }
        return row

    def _emit(self, row):
        heapq.heappush(self._pending, (row["global_step"], id(row), row))
        while self._pending and self._pending[0][0] == self._next_row:
            _, _, ready = heapq.heappop(self._pending)
            self.rows.append(ready)
            if self._writer:
                self._writer.write(ready)
                self._timing.write(f"{ready['global_step']},{time.perf_counter() - self._t0:.3f}\n")
                self._timing.flush()
            self._next_row += self.config.eval_interval
            if _reached(ready["eval_normalized"], self.config.stop_at_normalized) or \
                    _reached(ready["train_return"], self.config.stop_at_return):
                self._stop.set()

    def _maybe_eval(self, step):
        if step % self.config.eval_interval:
            return
        row = self._row(step)
        with self._eval_lock:
            self._emit(row)

    def _maybe_checkpoint(self, step):
        interval = self.config.checkpoint_interval
        if self.out_dir is None or not interval or step % interval:
            return
        checkpoint.save_store(self.out_dir / "checkpoints" / f"ckpt_{step:09d}.bin", self.store,
                              dict(self._metadata(), global_step=step))

    # --- acting ---------------------------------------------------------------

    def _reserve_step(self):
        with self._lock:
            if self._stop.is_set() or self.global_step >= self.config.total_steps:
                return None
            self.global_step += 1
            return self.global_step

    def _begin_episode(self, w):
        w.observation = w.env.reset(episode_seed=int(w.rng.integers(2**62)))
        w.state = net.RecurrentState.zeros(self.preset.lstm_size)
        w.episode_return = 0.0

    def run_unroll(self, w):
        """Act for one unroll and apply one update. Returns False once the budget is spent."""
        cfg, preset = self.config, self.preset
        params = self.store.snapshot()
        if w.observation is None:
            self._begin_episode(w)
        init_state = w.state
        obs_list, actions, rewards = [], [], []
        done = False
        for _ in range(cfg.loss.unroll):
            step = self._reserve_step()
            if step is None:
                break
            with T.no_grad():
                out = net.trunk_forward(params, preset, w.observation, w.state)
            action = sample_action(out.policy_logits.data[0], w.rng)
            nxt, reward, done = w.env.step(action)
            change = pixel_change(w.observation.pixels, nxt.pixels, preset.pc_crop, preset.pc_grid)
            w.buffer.append(StoredStep(w.observation, action, reward, change, done))
            obs_list.append(w.observation)
            actions.append(action)
            rewards.append(reward)
            w.observation, w.state = nxt, out.state
            w.episode_return += reward
            w.steps += 1
            self._maybe_eval(step)
            self._maybe_checkpoint(step)
            if done:
                with self._lock:
                    w.returns.append(w.episode_return)
                    self.episodes += 1
                break
        if obs_list:
            if done:
                bootstrap = 0.0
            else:
                with T.no_grad():
                    bootstrap = float(net.trunk_forward(params, preset, w.observation, w.state).value.data[0])
            batch = losses.UnrollBatch(obs_list, actions, rewards, bootstrap, init_state, terminal=done)
            grads, values = compute_gradients(params, preset, batch, w.buffer, w.rng, cfg)
            if self.store.apply_gradients(grads):
                with self._lock:
                    for k, v in values.items():
                        self._loss_sums[k] += v
                        self._loss_counts[k] += 1
        if done:
            self._begin_episode(w)
        return bool(obs_list) and not self._stop.is_set()

    def _worker_main(self, w):
        try:
            while self.run_unroll(w):
                pass
        except Exception as exc:  # surfaced by train()
            log.exception("worker %d failed", w.worker_id)
            self._errors.append((w.worker_id, exc))
            self._stop.set()

    # --- driver ---------------------------------------------------------------

    def train(self):
        cfg = self.config
        self._t0 = time.perf_counter()
        self._writer = self._timing = None
        metrics_path = ckpt_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = self.out_dir / "metrics.csv"
            self._writer = MetricsWriter(metrics_path, append=self.start_step > 0)
            self._timing = open(self.out_dir / "timing.csv", "a", encoding="utf-8")
        self.workers = [self._make_worker(i) for i in range(cfg.num_workers)]
        try:
            if self.start_step == 0:
                self._maybe_eval(0)
            if cfg.num_workers == 1:
                self._worker_main(self.workers[0])
            else:
                threads = [threading.Thread(target=self._worker_main, args=(w,), name=f"worker-{w.worker_id}")
                           for w in self.workers]
                for t in threads:
                    t.start()
                for t in threads:
                    t.join()
            if self._errors:
                wid, exc = self._errors[0]
                raise TrainingError(f"worker {wid} failed: {exc!r}") from exc
            if self.out_dir is not None:
                ckpt_path = checkpoint.save_store(self.out_dir / "checkpoints" / "final.bin", self.store,
                                                  self._metadata())
        finally:
            if self._writer:
                self._writer.close()
                self._timing.close()
        return TrainResult(self.store, self.rows, metrics_path, ckpt_path, self.global_step)


def train(config, out_dir=None, resume=None):
    return Trainer(config, out_dir=out_dir, resume=resume).train()
