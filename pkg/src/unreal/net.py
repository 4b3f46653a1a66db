"""CNN-LSTM trunk with policy/value heads and the auxiliary heads.

Parameters live in a flat ``dict[str, Tensor]``. The conv encoder tensors are
shared by the trunk, the reward-prediction head and every replayed forward
pass simply by referencing the same ``Tensor`` objects.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ArchError(Exception):
    pass


@dataclass(frozen=True)
class ArchPreset:
    name: str
    input_size: int
    conv1: tuple  # (filters, kernel, stride)
    conv2: tuple
    fc_size: int
    lstm_size: int
    n_actions: int
    pc_crop: int
    pc_grid: int
    pc_channels: int = 32
    deconv_kernel: int = 4
    deconv_stride: int = 2
    rp_hidden: int = 128
    channels: int = 3

    def __post_init__(self):
        for label, size in (("conv1", self.conv1_out), ("conv2", self.conv2_out), ("pc map", self.pc_map)):
            if size < 1:
                raise ArchError(f"{self.name}: {label} output size {size} < 1")
        s1 = self.input_size - self.conv1[1]
        if s1 % self.conv1[2] or (self.conv1_out - self.conv2[1]) % self.conv2[2]:
            raise ArchError(f"{self.name}: conv strides do not tile the input exactly")
        if (self.pc_map - 1) * self.deconv_stride + self.deconv_kernel != self.pc_grid:
            raise ArchError(f"{self.name}: deconv cannot produce a {self.pc_grid}x{self.pc_grid} grid")
        if self.pc_crop > self.input_size or self.pc_crop % self.pc_grid:
            raise ArchError(f"{self.name}: crop {self.pc_crop} incompatible with grid {self.pc_grid}")

    @property
    def conv1_out(self):
        return (self.input_size - self.conv1[1]) // self.conv1[2] + 1

    @property
    def conv2_out(self):
        return (self.conv1_out - self.conv2[1]) // self.conv2[2] + 1

    @property
    def feature_shape(self):
        return (self.conv2[0], self.conv2_out, self.conv2_out)

    @property
    def feature_size(self):
        c, h, w = self.feature_shape
        return c * h * w

    @property
    def pc_map(self):
        return (self.pc_grid - self.deconv_kernel) // self.deconv_stride + 1

    @property
    def lstm_input(self):
        return self.fc_size + self.n_actions + 1


PRESETS = {
    "paper": ArchPreset("paper", 84, (16, 8, 4), (32, 4, 2), 256, 256, 17, pc_crop=80, pc_grid=20),
    "desk": ArchPreset("desk", 36, (8, 4, 2), (16, 3, 1), 64, 64, 5, pc_crop=32, pc_grid=8,
                       pc_channels=16, rp_hidden=32),
    "tiny": ArchPreset("tiny", 20, (4, 4, 2), (4, 3, 2), 8, 8, 3, pc_crop=16, pc_grid=4,
                       pc_channels=4, rp_hidden=8),
}


def get_preset(name, n_actions=None):
    if name not in PRESETS:
        raise ArchError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[name]
    return preset if n_actions is None else replace(preset, n_actions=n_actions)


def param_shapes(preset, feature_control=False):
    p = preset
    c1, c2 = p.conv1, p.conv2
    h = p.lstm_size
    shapes = {
        "conv1.w": (c1[0], p.channels, c1[1], c1[1]),
        "conv1.b": (c1[0],),
        "conv2.w": (c2[0], c1[0], c2[1], c2[1]),
        "conv2.b": (c2[0],),
        "fc.w": (p.feature_size, p.fc_size),
        "fc.b": (p.fc_size,),
        "lstm.wx": (p.lstm_input, 4 * h),
        "lstm.wh": (h, 4 * h),
        "lstm.b": (4 * h,),
        "policy.w": (h, p.n_actions),
        "policy.b": (p.n_actions,),
        "value.w": (h, 1),
        "value.b": (1,),
        "pc.fc.w": (h, p.pc_channels * p.pc_map * p.pc_map),
        "pc.fc.b": (p.pc_channels * p.pc_map * p.pc_map,),
        "pc.value.w": (1, p.pc_channels, p.deconv_kernel, p.deconv_kernel),
        "pc.value.b": (1,),
        "pc.adv.w": (p.n_actions, p.pc_channels, p.deconv_kernel, p.deconv_kernel),
        "pc.adv.b": (p.n_actions,),
        "rp.fc.w": (3 * p.feature_size, p.rp_hidden),
        "rp.fc.b": (p.rp_hidden,),
        "rp.out.w": (p.rp_hidden, 3),
        "rp.out.b": (3,),
    }
    if feature_control:
        k = c2[0]
        shapes.update({
            "fcc.value.w": (h, k),
            "fcc.value.b": (k,),
            "fcc.adv.w": (h, p.n_actions * k),
            "fcc.adv.b": (p.n_actions * k,),
        })
    return shapes


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def init_params(preset, seed=0, feature_control=False):
    """Fan-in scaled uniform weights, orthogonal recurrent blocks, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(preset, feature_control).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name == "lstm.wh":
            h = shape[0]
            data = np.concatenate([_orthogonal(rng, h, h) for _ in range(4)], axis=1)
        else:
            if len(shape) == 4:
                # deconv kernels are (out, in, k, k); fan-in counts input channels either way
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    h = preset.lstm_size
    params["lstm.b"].data[h:2 * h] = 1.0  # forget gate
    return params


def zero_params(preset, feature_control=False):
    return {k: Tensor(np.zeros(s), requires_grad=True) for k, s in param_shapes(preset, feature_control).items()}


def check_params(params, preset, feature_control=False):
    expected = param_shapes(preset, feature_control)
    bad = [k for k, s in expected.items() if k not in params or params[k].shape != s]
    if bad:
        raise ArchError(f"parameters inconsistent with preset {preset.name}: {bad}")


# --- forward passes -----------------------------------------------------------


@dataclass
class RecurrentState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, size):
        return cls(np.zeros(size), np.zeros(size))


@dataclass
class AgentOutput:
    policy_logits: Tensor  # (T, A)
    value: Tensor  # (T,)
    state: RecurrentState
    features: Tensor  # conv2 output, (T, C, h, w)
    lstm_output: Tensor  # (T, H)


def encode(params, preset, pixels):
    """Shared conv encoder on a batch of frames (N, 3, S, S) -> (N, C, h, w)."""
    x = pixels if isinstance(pixels, Tensor) else Tensor(pixels)
    if x.ndim != 4 or x.shape[1:] != (preset.channels, preset.input_size, preset.input_size):
        raise T.ShapeError("encode", (preset.channels, preset.input_size, preset.input_size), x.shape[1:])
    y = T.relu(T.add_bias(T.conv2d(x, params["conv1.w"], preset.conv1[2]), params["conv1.b"]))
    return T.relu(T.add_bias(T.conv2d(y, params["conv2.w"], preset.conv2[2]), params["conv2.b"]))


def stack_observations(observations):
    pixels = np.stack([o.pixels for o in observations])
    actions = np.stack([o.last_action for o in observations])
    rewards = np.clip(np.array([o.last_reward for o in observations], dtype=np.float64), -1.0, 1.0)
    return pixels, actions, rewards


def trunk_unroll(params, preset, observations, state):
    """Run the trunk over a sequence of observations starting from ``state``."""
    pixels, actions, rewards = stack_observations(observations)
    n = len(observations)
    feats = encode(params, preset, pixels)
    flat = T.reshape(feats, (n, -1))
    if flat.shape[1] != params["fc.w"].shape[0]:
        raise T.ShapeError("trunk", params["fc.w"].shape[0], flat.shape[1])
    fc = T.relu(T.add_bias(T.matmul(flat, params["fc.w"]), params["fc.b"]))
    x = T.concat([fc, Tensor(actions), Tensor(rewards[:, None])], axis=1)
    gates_x = T.add_bias(T.matmul(x, params["lstm.wx"]), params["lstm.b"])
    hsize = params["lstm.wh"].shape[0]
    h, c = Tensor(state.hidden), Tensor(state.cell)
    hs = []
    for t in range(n):
        z = T.add(T.take(gates_x, t), T.matmul(h, params["lstm.wh"]))
        i = T.sigmoid(T.take(z, slice(0, hsize)))
        f = T.sigmoid(T.take(z, slice(hsize, 2 * hsize)))
        o = T.sigmoid(T.take(z, slice(2 * hsize, 3 * hsize)))
        g = T.tanh(T.take(z, slice(3 * hsize, 4 * hsize)))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        hs.append(h)
    lstm_out = T.stack(hs, axis=0)
    logits = T.add_bias(T.matmul(lstm_out, params["policy.w"]), params["policy.b"])
    value = T.reshape(T.add_bias(T.matmul(lstm_out, params["value.w"]), params["value.b"]), (n,))
    new_state = RecurrentState(h.data.copy(), c.data.copy())
    return AgentOutput(logits, value, new_state, feats, lstm_out)


def trunk_forward(params, preset, observation, state):
    """Single-step forward; outputs keep a leading time axis of length 1."""
    return trunk_unroll(params, preset, [observation], state)


def dueling(value, advantage, axis=1):
    """Q = V + A - mean_a A, with the action axis at ``axis``."""
    return T.add(value, T.sub(advantage, T.mean(advantage, axis=axis, keepdims=True)))


def pixel_control_head(params, lstm_out, preset):
    """LSTM outputs (T, H) -> Q_aux (T, N_act, n, n)."""
    n = lstm_out.shape[0]
    m = preset.pc_map
    hidden = T.relu(T.add_bias(T.matmul(lstm_out, params["pc.fc.w"]), params["pc.fc.b"]))
    spatial = T.reshape(hidden, (n, preset.pc_channels, m, m))
    value = T.add_bias(T.deconv2d(spatial, params["pc.value.w"], preset.deconv_stride), params["pc.value.b"])
    adv = T.add_bias(T.deconv2d(spatial, params["pc.adv.w"], preset.deconv_stride), params["pc.adv.b"])
    return dueling(value, adv, axis=1)


def reward_prediction_head(params, preset, observations):
    """Three consecutive observations -> logits over {zero, positive, negative}."""
    if len(observations) != 3:
        raise ArchError(f"reward prediction needs exactly 3 observations, got {len(observations)}")
    pixels = np.stack([o.pixels for o in observations])
    feats = encode(params, preset, pixels)
    flat = T.reshape(feats, (1, -1))
    hidden = T.relu(T.add_bias(T.matmul(flat, params["rp.fc.w"]), params["rp.fc.b"]))
    return T.reshape(T.add_bias(T.matmul(hidden, params["rp.out.w"]), params["rp.out.b"]), (3,))


def feature_control_head(params, lstm_out, n_actions):
    """LSTM outputs (T, H) -> Q_feat (T, N_act, K) over conv2 channel means."""
    n = lstm_out.shape[0]
    k = params["fcc.value.w"].shape[1]
    value = T.reshape(T.add_bias(T.matmul(lstm_out, params["fcc.value.w"]), params["fcc.value.b"]), (n, 1, k))
    adv = T.reshape(T.add_bias(T.matmul(lstm_out, params["fcc.adv.w"]), params["fcc.adv.b"]), (n, n_actions, k))
    return dueling(value, adv, axis=1)


def channel_means(features):
    """(T, C, h, w) array -> (T, C)."""
    data = features.data if isinstance(features, Tensor) else features
    return data.mean(axis=(2, 3))


def feature_pseudo_rewards(features):
    """max(0, mean_{t+1}(k) - mean_t(k)) for consecutive frames; (T+1, C, h, w) -> (T, C)."""
    m = channel_means(features)
    return np.maximum(0.0, m[1:] - m[:-1])
