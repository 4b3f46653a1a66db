"""Training objectives: A3C, value replay, n-step Q-learning for the control
tasks, reward prediction, and their weighted sum."""

from dataclasses import dataclass

import numpy as np

from . import kernels, net
from . import tensor as T
from .tensor import Tensor, no_grad


class LossError(Exception):
    pass


@dataclass
class LossWeights:
    lambda_vr: float = 1.0
    lambda_pc: float = 0.05
    lambda_rp: float = 1.0
    lambda_fc: float = 0.05
    entropy_cost: float = 1e-3
    gamma: float = 0.99
    gamma_pc: float = 0.9
    value_coef: float = 0.5
    unroll: int = 20

    def __post_init__(self):
        for name in ("lambda_vr", "lambda_pc", "lambda_rp", "lambda_fc", "entropy_cost", "value_coef"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be nonnegative")
        if not 0.0 <= self.gamma < 1.0 or not 0.0 <= self.gamma_pc < 1.0:
            raise LossError("discounts must lie in [0, 1)")
        if self.unroll < 1:
            raise LossError("unroll must be >= 1")


@dataclass
class UnrollBatch:
    observations: list
    actions: list
    rewards: list
    bootstrap_value: float
    initial_state: net.RecurrentState = None
    terminal: bool = False


def n_step_returns(rewards, bootstrap, gamma):
    """R_i = r_i + gamma * R_{i+1}, with the value after the last step = bootstrap.

    ``rewards`` may carry trailing axes (e.g. one return per pixel cell); the
    recursion runs along the first axis.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] == 0:
        return rewards.copy()
    if rewards.ndim == 1:
        return kernels.discounted_returns(rewards[:, None], np.atleast_1d(bootstrap), gamma)[:, 0]
    return kernels.discounted_returns(rewards, bootstrap, gamma)


def entropy(logits):
    """Per-row entropy of softmax(logits) as a Tensor."""
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.sum(T.mul(T.softmax(logits, axis=-1), logp), axis=-1), -1.0)


def a3c_loss(logits, values, actions, returns, entropy_cost, value_coef=0.5, baseline=None):
    """Policy-gradient, value regression and entropy bonus over one unroll.

    The advantage ``returns - baseline`` is a constant in the policy term;
    ``baseline`` defaults to the values themselves.
    Returns (loss, parts) where parts holds the three unweighted terms.
    """
    n = len(actions)
    if logits.shape[0] != n or values.shape != (n,) or len(returns) != n:
        raise LossError(f"misaligned batch: {logits.shape[0]} logits, {values.shape} values, "
                        f"{n} actions, {len(returns)} returns")
    returns = np.asarray(returns, dtype=np.float64)
    idx = (np.arange(n), np.asarray(actions, dtype=np.int64))
    logp = T.log_softmax(logits, axis=-1)
    advantage = returns - (values.data if baseline is None else np.asarray(baseline, dtype=np.float64))
    policy = T.scale(T.sum(T.mul(T.take(logp, idx), Tensor(advantage))), -1.0)
    err = T.sub(Tensor(returns), values)
    value = T.sum(T.mul(err, err))
    ent = T.sum(entropy(logits))
    loss = T.add(T.add(policy, T.scale(value, value_coef)), T.scale(ent, -entropy_cost))
    return loss, {"policy": policy.item(), "value": value.item(), "entropy": ent.item()}


def value_replay_loss(values, rewards, bootstrap, gamma):
    """Squared error between replayed n-step returns and V; ``bootstrap`` is a constant."""
    targets = n_step_returns(rewards, bootstrap, gamma)
    err = T.sub(Tensor(targets), values)
    return T.sum(T.mul(err, err))


def q_learning_loss(q, actions, pseudo_rewards, bootstrap_max, gamma):
    """n-step Q-learning over a sequence, summed over steps and all task cells.

    ``q`` is (T, A, *cells); ``pseudo_rewards`` is (T, *cells);
    ``bootstrap_max`` is max_a Q_target at the step after the sequence.
    """
    n = len(actions)
    pseudo_rewards = np.asarray(pseudo_rewards, dtype=np.float64)
    if q.shape[0] != n or pseudo_rewards.shape != (n,) + q.shape[2:]:
        raise LossError(f"misaligned Q-learning batch: q {q.shape}, rewards {pseudo_rewards.shape}, {n} actions")
    targets = n_step_returns(pseudo_rewards, bootstrap_max, gamma)
    chosen = T.take(q, (np.arange(n), np.asarray(actions, dtype=np.int64)))
    err = T.sub(Tensor(targets), chosen)
    return T.sum(T.mul(err, err))


def reward_prediction_loss(logits, target_class):
    """Three-class cross-entropy."""
    return T.scale(T.take(T.log_softmax(logits, axis=-1), int(target_class)), -1.0)


def unreal_loss(components, weights, include_a3c=True):
    """L_A3C + lambda_VR L_VR + lambda_PC L_PC + lambda_RP L_RP (+ lambda_FC L_FC).

    ``components`` maps "a3c", "vr", "pc", "rp", "fc" to scalar Tensors; a
    missing entry contributes nothing.
    """
    terms = []
    if include_a3c and components.get("a3c") is not None:
        terms.append(components["a3c"])
    for key, lam in (("vr", weights.lambda_vr), ("pc", weights.lambda_pc),
                     ("rp", weights.lambda_rp), ("fc", weights.lambda_fc)):
        if components.get(key) is not None and lam != 0:
            terms.append(T.scale(components[key], lam))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


# --- losses evaluated from raw experience -------------------------------------


# Every gradient-stopped quantity (advantage baseline, bootstraps, feature
# pseudo-rewards) is read from ``target_params``. By default that is the live
# parameter set, evaluated in the same forward pass.


def _separate(params, target_params):
    return target_params is not None and target_params is not params


def unroll_a3c_loss(params, preset, batch, weights, target_params=None):
    state = batch.initial_state or net.RecurrentState.zeros(preset.lstm_size)
    out = net.trunk_unroll(params, preset, batch.observations, state)
    returns = n_step_returns(batch.rewards, batch.bootstrap_value, weights.gamma)
    baseline = None
    if _separate(params, target_params):
        with no_grad():
            baseline = net.trunk_unroll(target_params, preset, batch.observations, state).value.data
    return a3c_loss(out.policy_logits, out.value, batch.actions, returns, weights.entropy_cost, weights.value_coef,
                    baseline=baseline)


def _replay_unroll(params, preset, sequence):
    # replayed windows start from a zero recurrent state
    obs = [s.observation for s in sequence]
    return net.trunk_unroll(params, preset, obs, net.RecurrentState.zeros(preset.lstm_size))


def _target_unroll(params, preset, sequence, target_params, out):
    if not _separate(params, target_params):
        return out
    with no_grad():
        return _replay_unroll(target_params, preset, sequence)


def _split(sequence):
    if len(sequence) < 2:
        raise LossError("replayed sequence needs at least one step plus a bootstrap step")
    if any(s.terminal for s in sequence[:-1]):
        raise LossError("replayed sequence crosses an episode boundary")
    return sequence[:-1], sequence[-1]


def replay_value_loss(params, preset, sequence, weights, target_params=None, out=None):
    """Value replay on ``len(sequence) - 1`` steps; the last step only bootstraps."""
    steps, _ = _split(sequence)
    out = out or _replay_unroll(params, preset, sequence)
    n = len(steps)
    bootstrap = float(_target_unroll(params, preset, sequence, target_params, out).value.data[n])
    values = T.take(out.value, slice(0, n))
    return value_replay_loss(values, [s.reward for s in steps], bootstrap, weights.gamma)


def pixel_control_loss(params, preset, sequence, weights, target_params=None, out=None):
    """n-step Q-learning on per-cell pixel change for ``len(sequence) - 1`` steps."""
    steps, _ = _split(sequence)
    if any(s.pixel_change is None for s in steps):
        raise LossError("replayed steps are missing pixel-change pseudo-rewards")
    out = out or _replay_unroll(params, preset, sequence)
    n = len(steps)
    q = net.pixel_control_head(params, T.take(out.lstm_output, slice(0, n)), preset)
    tout = _target_unroll(params, preset, sequence, target_params, out)
    with no_grad():
        q_boot = net.pixel_control_head(target_params or params, tout.lstm_output.detach()[n:n + 1], preset)
    bootstrap = q_boot.data[0].max(axis=0)
    rewards = np.stack([s.pixel_change for s in steps])
    actions = [s.action for s in steps]
    return q_learning_loss(q, actions, rewards, bootstrap, weights.gamma_pc)


def feature_control_loss(params, preset, sequence, weights, target_params=None, out=None):
    """n-step Q-learning on increases of conv2 channel means (experimental)."""
    steps, _ = _split(sequence)
    out = out or _replay_unroll(params, preset, sequence)
    n = len(steps)
    q = net.feature_control_head(params, T.take(out.lstm_output, slice(0, n)), preset.n_actions)
    tout = _target_unroll(params, preset, sequence, target_params, out)
    with no_grad():
        q_boot = net.feature_control_head(target_params or params, tout.lstm_output.detach()[n:n + 1],
                                          preset.n_actions)
    rewards = net.feature_pseudo_rewards(tout.features.data)
    return q_learning_loss(q, [s.action for s in steps], rewards, q_boot.data[0].max(axis=0), weights.gamma_pc)


def rp_loss(params, preset, sample):
    window, cls = sample
    logits = net.reward_prediction_head(params, preset, [s.observation for s in window])
    return reward_prediction_loss(logits, cls)
