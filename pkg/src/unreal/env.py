"""Procedurally generated pixel gridworlds.

Four level categories: a static fruit arena, a static maze with a fixed goal,
a static maze whose goal moves every episode, and fully random mazes. The
agent sees an egocentric top-down crop rendered to RGB, rotated so that its
heading points up.
"""

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CATEGORIES = ("fruit-static", "nav-static", "nav-random-goal", "nav-all-random")

# item codes in the item grid
EMPTY, APPLE, LEMON, MELON, GOAL = 0, 1, 2, 3, 4
# extra render codes
_WALL, _AGENT = 5, 6

PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],  # floor
        [1.0, 0.0, 0.0],  # apple
        [1.0, 1.0, 0.0],  # lemon
        [1.0, 0.5, 0.0],  # melon
        [0.0, 1.0, 0.0],  # goal
        [0.5, 0.5, 0.5],  # wall
        [1.0, 1.0, 1.0],  # agent
    ]
)

# heading 0 = north (row - 1), then clockwise
DIRECTIONS = ((-1, 0), (0, 1), (1, 0), (0, -1))

FORWARD, BACK, TURN_LEFT, TURN_RIGHT, NOOP = range(5)
ACTION_NAMES = ("forward", "back", "turn-left", "turn-right", "no-op")


class EnvError(Exception):
    pass


@dataclass(frozen=True)
class LevelSpec:
    category: str = "fruit-static"
    grid_size: int = 5
    episode_length: int = 30
    render_size: int = 36
    view_radius: int = 4
    action_repeat: int = 1
    n_actions: int = 5
    apple_density: float = 0.1
    rewards: dict = field(default_factory=lambda: {"apple": 1.0, "goal": 10.0, "lemon": -1.0, "melon": 10.0})
    seed: int = 0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise EnvError("; ".join(errors))

    def validate(self):
        errors = []
        if self.category not in CATEGORIES:
            errors.append(f"category must be one of {CATEGORIES}, got {self.category!r}")
        if self.grid_size < 5 or self.grid_size % 2 == 0:
            errors.append(f"grid_size must be odd and >= 5, got {self.grid_size}")
        if self.episode_length < 1:
            errors.append("episode_length must be >= 1")
        if self.view_radius < 1:
            errors.append("view_radius must be >= 1")
        window = 2 * self.view_radius + 1
        if self.render_size % window:
            errors.append(f"render_size {self.render_size} not divisible by view window {window}")
        if self.action_repeat < 1:
            errors.append("action_repeat must be >= 1")
        if not 1 <= self.n_actions <= len(ACTION_NAMES):
            errors.append(f"n_actions must be in [1, {len(ACTION_NAMES)}]")
        if not 0.0 <= self.apple_density < 1.0:
            errors.append("apple_density must be in [0, 1)")
        return errors

    @property
    def window(self):
        return 2 * self.view_radius + 1

    @property
    def cell_px(self):
        return self.render_size // self.window


@dataclass
class Observation:
    pixels: np.ndarray  # 3 x S x S, values in [0, 1]
    last_action: np.ndarray  # one-hot, all zeros at episode start
    last_reward: float


@dataclass
class EnvState:
    walls: np.ndarray
    items: np.ndarray
    pos: tuple
    heading: int
    steps: int = 0
    episode_return: float = 0.0
    done: bool = False
    counts: dict = field(default_factory=lambda: {"apple": 0, "lemon": 0, "melon": 0, "goal": 0})
    rng: np.random.Generator = None


def generate_maze(size, seed):
    """Perfect maze by randomized depth-first carving. True marks a wall."""
    if size < 5 or size % 2 == 0:
        raise EnvError(f"invalid maze size {size}: must be odd and >= 5")
    rng = np.random.default_rng(seed)
    walls = np.ones((size, size), dtype=bool)
    start = (1, 1)
    walls[start] = False
    stack = [start]
    while stack:
        r, c = stack[-1]
        options = []
        for dr, dc in DIRECTIONS:
            nr, nc = r + 2 * dr, c + 2 * dc
            if 0 < nr < size - 1 and 0 < nc < size - 1 and walls[nr, nc]:
                options.append((nr, nc, dr, dc))
        if not options:
            stack.pop()
            continue
        nr, nc, dr, dc = options[rng.integers(len(options))]
        walls[r + dr, c + dc] = False
        walls[nr, nc] = False
        stack.append((nr, nc))
    return walls


def open_arena(size):
    walls = np.zeros((size, size), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    return walls


def open_cells(walls):
    return [tuple(int(v) for v in rc) for rc in np.argwhere(~walls)]


def reachable(walls, start):
    seen = {start}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in DIRECTIONS:
            nxt = (r + dr, c + dc)
            if not walls[nxt] and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def _place(rng, cells, count):
    picks = rng.choice(len(cells), size=count, replace=False)
    return [cells[i] for i in sorted(picks)]


class GridPixEnv:
    """One environment instance. Not thread-safe; each worker owns its own."""

    def __init__(self, spec, frame_dump=None):
        self.spec = spec
        self.state = None
        self.frame_dump = Path(frame_dump) if frame_dump else None
        self._frames = 0
        layout_rng = np.random.default_rng([spec.seed, 0x5EED])
        self._static_walls = None
        self._static_items = None
        if spec.category == "fruit-static":
            walls = open_arena(spec.grid_size)
            self._static_walls = walls
            self._static_items = self._fruit_items(walls, layout_rng)
        elif spec.category in ("nav-static", "nav-random-goal"):
            walls = generate_maze(spec.grid_size, int(layout_rng.integers(2**63)))
            self._static_walls = walls
            items = self._apples(walls, layout_rng, exclude=())
            if spec.category == "nav-static":
                free = [c for c in open_cells(walls) if items[c] == EMPTY]
                items[free[layout_rng.integers(len(free))]] = GOAL
            self._static_items = items

    @property
    def n_actions(self):
        return self.spec.n_actions

    def _apple_count(self, walls):
        return int(round(self.spec.apple_density * int((~walls).sum())))

    def _apples(self, walls, rng, exclude):
        items = np.zeros(walls.shape, dtype=np.int8)
        cells = [c for c in open_cells(walls) if c not in exclude]
        n = min(self._apple_count(walls), max(len(cells) - 2, 0))
        for c in _place(rng, cells, n):
            items[c] = APPLE
        return items

    def _fruit_items(self, walls, rng):
        items = np.zeros(walls.shape, dtype=np.int8)
        cells = open_cells(walls)
        n = max(1, self._apple_count(walls))
        picks = _place(rng, cells, 2 * n + 1)
        order = rng.permutation(len(picks))
        picks = [picks[i] for i in order]
        for c in picks[:n]:
            items[c] = APPLE
        for c in picks[n:2 * n]:
            items[c] = LEMON
        items[picks[2 * n]] = MELON
        return items

    def reset(self, episode_seed):
        spec = self.spec
        rng = np.random.default_rng([spec.seed, int(episode_seed) & (2**63 - 1)])
        if spec.category == "nav-all-random":
            walls = generate_maze(spec.grid_size, int(rng.integers(2**63)))
            items = self._apples(walls, rng, exclude=())
            free = [c for c in open_cells(walls) if items[c] == EMPTY]
            items[free[rng.integers(len(free))]] = GOAL
        else:
            walls = self._static_walls
            items = self._static_items.copy()
            if spec.category == "nav-random-goal":
                free = [c for c in open_cells(walls) if items[c] == EMPTY]
                items[free[rng.integers(len(free))]] = GOAL
        free = [c for c in open_cells(walls) if items[c] == EMPTY]
        pos = free[rng.integers(len(free))]
        self.state = EnvState(walls=walls, items=items, pos=pos, heading=int(rng.integers(4)), rng=rng)
        obs = Observation(self.render(), np.zeros(spec.n_actions), 0.0)
        self._dump(obs)
        return obs

    def _respawn(self):
        s = self.state
        free = [c for c in open_cells(s.walls) if s.items[c] == EMPTY and c != s.pos]
        s.pos = free[s.rng.integers(len(free))]
        s.heading = int(s.rng.integers(4))

    def _move(self, sign):
        s = self.state
        dr, dc = DIRECTIONS[s.heading]
        nxt = (s.pos[0] + sign * dr, s.pos[1] + sign * dc)
        if s.walls[nxt]:
            return 0.0
        s.pos = nxt
        kind = int(s.items[nxt])
        table = self.spec.rewards
        if kind == APPLE:
            s.items[nxt] = EMPTY
            s.counts["apple"] += 1
            return table["apple"]
        if kind == LEMON:
            s.items[nxt] = EMPTY
            s.counts["lemon"] += 1
            return table["lemon"]
        if kind == MELON:
            s.items[nxt] = EMPTY
            s.counts["melon"] += 1
            return table["melon"]
        if kind == GOAL:
            s.counts["goal"] += 1
            self._respawn()
            return table["goal"]
        return 0.0

    def _apply(self, action):
        s = self.state
        if action == FORWARD:
            return self._move(1)
        if action == BACK:
            return self._move(-1)
        if action == TURN_LEFT:
            s.heading = (s.heading - 1) % 4
        elif action == TURN_RIGHT:
            s.heading = (s.heading + 1) % 4
        return 0.0

    def step(self, action):
        s = self.state
        if s is None:
            raise EnvError("step called before reset")
        if s.done:
            raise EnvError("step called after episode end")
        if not 0 <= action < self.spec.n_actions:
            raise EnvError(f"action {action} out of range [0, {self.spec.n_actions})")
        reward = 0.0
        for _ in range(self.spec.action_repeat):
            reward += self._apply(int(action))
        s.steps += 1
        s.episode_return += reward
        s.done = s.steps >= self.spec.episode_length
        last_action = np.zeros(self.spec.n_actions)
        last_action[action] = 1.0
        obs = Observation(self.render(), last_action, reward)
        self._dump(obs)
        return obs, reward, s.done

    def render(self, state=None):
        s = state or self.state
        v, px = self.spec.view_radius, self.spec.cell_px
        n = s.walls.shape[0]
        codes = np.where(s.walls, _WALL, s.items).astype(np.int8)
        padded = np.full((n + 2 * v, n + 2 * v), _WALL, dtype=np.int8)
        padded[v:v + n, v:v + n] = codes
        r, c = s.pos
        window = np.rot90(padded[r:r + 2 * v + 1, c:c + 2 * v + 1], k=s.heading)
        img = PALETTE[np.repeat(np.repeat(window, px, axis=0), px, axis=1)]
        chevron = _chevron(px)
        y0 = x0 = v * px
        img[y0:y0 + px, x0:x0 + px][chevron] = PALETTE[_AGENT]
        return np.ascontiguousarray(img.transpose(2, 0, 1))

    def optimal_return(self, horizon=None):
        """Best achievable return from the current state (fruit-static only)."""
        if self.spec.category != "fruit-static":
            raise EnvError("optimal_return is only defined for fruit-static levels")
        return fruit_optimal_return(self.state, self.spec, horizon)

    def _dump(self, obs):
        if self.frame_dump is None:
            return
        self.frame_dump.mkdir(parents=True, exist_ok=True)
        write_ppm(self.frame_dump / f"frame_{self._frames:06d}.ppm", obs.pixels)
        self._frames += 1


def _chevron(px):
    mask = np.zeros((px, px), dtype=bool)
    mid = (px - 1) / 2.0
    for row in range(px):
        for col in range(px):
            mask[row, col] = abs(col - mid) <= (row + 1) / 2.0
    return mask


def fruit_optimal_return(state, spec, horizon=None):
    """Exact planner over (position, heading, remaining items) for the fruit arena."""
    steps_left = spec.episode_length - state.steps if horizon is None else horizon
    table = spec.rewards
    value_of = {APPLE: table["apple"], LEMON: table["lemon"], MELON: table["melon"]}
    targets = [tuple(int(v) for v in rc) for rc in np.argwhere(state.items != EMPTY)]
    kinds = [int(state.items[c]) for c in targets]
    index = {c: i for i, c in enumerate(targets)}
    full = (1 << len(targets)) - 1

    def apply(pos, heading, mask, action):
        reward = 0.0
        for _ in range(spec.action_repeat):
            if action in (FORWARD, BACK):
                sign = 1 if action == FORWARD else -1
                dr, dc = DIRECTIONS[heading]
                nxt = (pos[0] + sign * dr, pos[1] + sign * dc)
                if not state.walls[nxt]:
                    pos = nxt
                    i = index.get(nxt)
                    if i is not None and mask >> i & 1:
                        mask &= ~(1 << i)
                        reward += value_of[kinds[i]]
            elif action == TURN_LEFT:
                heading = (heading - 1) % 4
            elif action == TURN_RIGHT:
                heading = (heading + 1) % 4
        return pos, heading, mask, reward

    # backward induction over time; states reachable only
    layer = {(state.pos, state.heading, full)}
    layers = [layer]
    trans = {}
    for _ in range(steps_left):
        nxt_layer = set()
        for key in layer:
            if key in trans:
                outs = trans[key]
            else:
                outs = [apply(*key, a) for a in range(spec.n_actions)]
                trans[key] = outs
            for p, h, m, _ in outs:
                nxt_layer.add((p, h, m))
        layers.append(nxt_layer)
        layer = nxt_layer
    value = {key: 0.0 for key in layers[-1]}
    for t in range(steps_left - 1, -1, -1):
        new = {}
        for key in layers[t]:
            new[key] = max(r + value[(p, h, m)] for p, h, m, r in trans[key])
        value = new
    return value[(state.pos, state.heading, full)]


def write_ppm(path, pixels):
    rgb = (np.clip(pixels, 0.0, 1.0).transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode("ascii"))
        fh.write(rgb.tobytes())
