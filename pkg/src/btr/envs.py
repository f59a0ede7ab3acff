"""Seeded pixel grid-worlds and the vectorized stepping protocol.

Layout files are plain text, one row per line::

    A....   A start cell (exactly one)
    .##.G   G goal (terminal, goal reward)
    ..H..   H hazard (terminal, hazard reward)
            # wall, . floor; lines starting with '#' followed by a space are comments

Every step costs ``step_penalty``; reaching a goal or hazard adds its reward
and ends the episode. Actions are 0=up, 1=down, 2=left, 3=right; bumping into
a wall or the border leaves the agent in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)
NUM_ACTIONS = len(MOVES)

FLOOR, WALL, HAZARD, GOAL, AGENT = 0, 96, 160, 208, 255


@dataclass(frozen=True)
class Layout:
    name: str
    walls: np.ndarray  # bool [rows, cols]
    start: tuple[int, int]
    goals: frozenset
    hazards: frozenset

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape

    def is_open(self, r: int, c: int) -> bool:
        rows, cols = self.shape
        return 0 <= r < rows and 0 <= c < cols and not self.walls[r, c]


def parse_layout(text: str, name: str = "<text>") -> Layout:
    rows = []
    for line in text.splitlines():
        if line.startswith("# ") or not line.strip():
            continue
        rows.append(line.rstrip("\n"))
    if not rows:
        raise ValueError(f"layout {name!r} is empty")
    width = max(len(r) for r in rows)
    if any(len(r) != width for r in rows):
        raise ValueError(f"layout {name!r} rows have different lengths")
    walls = np.zeros((len(rows), width), dtype=bool)
    start = None
    goals, hazards = set(), set()
    for i, row in enumerate(rows):
        for j, ch in enumerate(row):
            if ch == "#":
                walls[i, j] = True
            elif ch == "A":
                if start is not None:
                    raise ValueError(f"layout {name!r} has more than one start cell")
                start = (i, j)
            elif ch == "G":
                goals.add((i, j))
            elif ch == "H":
                hazards.add((i, j))
            elif ch != ".":
                raise ValueError(f"layout {name!r}: unknown cell {ch!r} at row {i}, col {j}")
    if start is None:
        raise ValueError(f"layout {name!r} has no start cell 'A'")
    if not goals:
        raise ValueError(f"layout {name!r} has no goal cell 'G'")
    return Layout(name, walls, start, frozenset(goals), frozenset(hazards))


def builtin_layouts() -> list[str]:
    files = resources.files("btr.layouts")
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".txt"))


def load_layout(name_or_path: str) -> Layout:
    """Load a builtin layout by name, or a layout file by path."""
    path = Path(name_or_path)
    if path.suffix == ".txt" and path.exists():
        return parse_layout(path.read_text(), path.stem)
    res = resources.files("btr.layouts").joinpath(f"{name_or_path}.txt")
    if not res.is_file():
        raise ValueError(f"unknown layout {name_or_path!r}; builtins: {builtin_layouts()}")
    return parse_layout(res.read_text(), name_or_path)


def render(layout: Layout, position: tuple[int, int], resolution: tuple[int, int]) -> np.ndarray:
    """Greyscale frame of the grid, nearest-neighbour upscaled to ``(H, W)``."""
    rows, cols = layout.shape
    h, w = resolution
    if h < rows or w < cols:
        raise ValueError(f"resolution {h}x{w} is smaller than the {rows}x{cols} grid")
    cells = np.where(layout.walls, WALL, FLOOR).astype(np.uint8)
    for r, c in layout.hazards:
        cells[r, c] = HAZARD
    for r, c in layout.goals:
        cells[r, c] = GOAL
    cells[position] = AGENT
    ri = np.arange(h) * rows // h
    ci = np.arange(w) * cols // w
    return cells[np.ix_(ri, ci)]


def jitter_brightness(frame: np.ndarray, amount: float, rng: np.random.Generator) -> np.ndarray:
    """Scale a frame by ``1 + u``, ``u ~ U(-amount, amount)``; rounds toward the original."""
    if amount <= 0:
        return frame
    u = rng.uniform(-amount, amount)
    f = frame.astype(np.float64)
    return np.clip(f + np.trunc(f * u), 0, 255).astype(np.uint8)


def clip_reward(r):
    return np.clip(r, -1.0, 1.0)


class GridPixelEnv:
    def __init__(
        self,
        layout: Layout | str,
        resolution: tuple[int, int] = (84, 84),
        step_penalty: float = -0.01,
        goal_reward: float = 1.0,
        hazard_reward: float = -1.0,
        max_episode_steps: int = 200,
        sticky_action_prob: float = 0.25,
        brightness_jitter: float = 0.0,
        seed=None,
    ):
        if isinstance(layout, str):
            layout = load_layout(layout)
        if not 0.0 <= sticky_action_prob < 1.0:
            raise ValueError("sticky_action_prob must lie in [0, 1)")
        if brightness_jitter < 0:
            raise ValueError("brightness_jitter must be >= 0")
        self.layout = layout
        self.resolution = tuple(resolution)
        self.step_penalty = step_penalty
        self.goal_reward = goal_reward
        self.hazard_reward = hazard_reward
        self.max_episode_steps = max_episode_steps
        self.sticky_action_prob = sticky_action_prob
        self.brightness_jitter = brightness_jitter
        self.num_actions = NUM_ACTIONS
        self.seed(seed)
        self.position = layout.start
        self.prev_action: int | None = None
        self.steps = 0
        self.last_sticky = False

    def seed(self, seed=None) -> None:
        dyn, jit = np.random.SeedSequence(seed).spawn(2)
        self.rng = np.random.default_rng(dyn)
        self.jitter_rng = np.random.default_rng(jit)

    @property
    def state(self) -> tuple[tuple[int, int], int | None]:
        return self.position, self.prev_action

    def frame(self) -> np.ndarray:
        f = render(self.layout, self.position, self.resolution)
        return jitter_brightness(f, self.brightness_jitter, self.jitter_rng)

    def reset(self) -> np.ndarray:
        self.position = self.layout.start
        self.prev_action = None
        self.steps = 0
        return self.frame()

    def move(self, position, action: int) -> tuple[int, int]:
        r, c = position[0] + MOVES[action][0], position[1] + MOVES[action][1]
        return (int(r), int(c)) if self.layout.is_open(r, c) else position

    def outcome(self, position) -> tuple[float, bool]:
        """Reward for arriving at ``position`` and whether that ends the episode."""
        if position in self.layout.goals:
            return self.step_penalty + self.goal_reward, True
        if position in self.layout.hazards:
            return self.step_penalty + self.hazard_reward, True
        return self.step_penalty, False

    def step(self, action: int, render_frame: bool = True):
        """Return ``(frame, reward, terminal, truncated)``."""
        if not 0 <= action < NUM_ACTIONS:
            raise ValueError(f"action {action} out of range [0, {NUM_ACTIONS})")
        executed = int(action)
        self.last_sticky = False
        if self.prev_action is not None and self.sticky_action_prob > 0:
            if self.rng.random() < self.sticky_action_prob:
                executed = self.prev_action
                self.last_sticky = True
        self.prev_action = executed
        self.position = self.move(self.position, executed)
        reward, terminal = self.outcome(self.position)
        self.steps += 1
        truncated = (not terminal) and self.steps >= self.max_episode_steps
        frame = self.frame() if render_frame else None
        return frame, reward, terminal, truncated

    @classmethod
    def from_config(cls, cfg, seed=None, **overrides) -> "GridPixelEnv":
        kwargs = dict(
            layout=cfg.env_layout,
            resolution=(cfg.env_height, cfg.env_width),
            step_penalty=cfg.env_step_penalty,
            goal_reward=cfg.env_goal_reward,
            hazard_reward=cfg.env_hazard_reward,
            max_episode_steps=cfg.env_max_steps,
            sticky_action_prob=cfg.env_sticky_prob,
            seed=seed,
        )
        kwargs.update(overrides)
        return cls(**kwargs)


class FrameStack:
    """Keeps the ``k`` most recent frames; reset fills the stack with copies of the first."""

    def __init__(self, env: GridPixelEnv, k: int = 4):
        self.env = env
        self.k = k
        self.frames: np.ndarray | None = None

    @property
    def num_actions(self) -> int:
        return self.env.num_actions

    @property
    def observation_shape(self) -> tuple[int, int, int]:
        return (self.k,) + tuple(self.env.resolution)

    def reset(self) -> np.ndarray:
        first = self.env.reset()
        self.frames = np.repeat(first[None], self.k, axis=0)
        return self.frames.copy()

    def step(self, action: int):
        frame, reward, terminal, truncated = self.env.step(action)
        self.frames = np.concatenate([self.frames[1:], frame[None]], axis=0)
        return self.frames.copy(), reward, terminal, truncated


class VectorEnv:
    """Steps a list of stacked environments in lockstep with auto-reset.

    ``step`` returns ``(obs, rewards, terminals, truncateds, info)``. For an env
    whose episode ended, ``obs`` holds the reset observation and
    ``info['final_obs'][i]`` the last observation of the finished episode.
    Results are merged in env-index order.
    """

    def __init__(self, envs: list[FrameStack]):
        if not envs:
            raise ValueError("VectorEnv needs at least one env")
        self.envs = envs
        self.num_envs = len(envs)
        self.num_actions = envs[0].num_actions
        self.observation_shape = envs[0].observation_shape
        self.closed = False

    @classmethod
    def from_config(cls, cfg, seeds, **overrides) -> "VectorEnv":
        return cls([FrameStack(GridPixelEnv.from_config(cfg, seed=s, **overrides), cfg.frame_stack) for s in seeds])

    def reset(self) -> np.ndarray:
        return np.stack([e.reset() for e in self.envs])

    def step(self, actions):
        if self.closed:
            raise RuntimeError("VectorEnv is closed")
        actions = np.asarray(actions)
        if actions.shape != (self.num_envs,):
            raise ValueError(f"expected {self.num_envs} actions, got shape {actions.shape}")
        for i, a in enumerate(actions):
            if not 0 <= a < self.num_actions:
                raise ValueError(f"env {i}: action {a} out of range [0, {self.num_actions})")
        obs = np.empty((self.num_envs,) + self.observation_shape, dtype=np.uint8)
        rewards = np.zeros(self.num_envs, dtype=np.float64)
        terminals = np.zeros(self.num_envs, dtype=bool)
        truncateds = np.zeros(self.num_envs, dtype=bool)
        final_obs = [None] * self.num_envs
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            o, r, term, trunc = env.step(int(a))
            rewards[i], terminals[i], truncateds[i] = r, term, trunc
            if term or trunc:
                final_obs[i] = o
                o = env.reset()
            obs[i] = o
        return obs, rewards, terminals, truncateds, {"final_obs": final_obs}

    def close(self) -> None:
        self.closed = True


# ---------------------------------------------------------------------------
# exact oracle


@dataclass
class OracleResult:
    discounted: float
    undiscounted: float
    discount: float
    num_states: int


def _tabulate(env: GridPixelEnv):
    """Enumerate (position, previous action) states and their transition tables."""
    layout = env.layout
    rows, cols = layout.shape
    positions = [
        (r, c)
        for r in range(rows)
        for c in range(cols)
        if not layout.walls[r, c] and (r, c) not in layout.goals and (r, c) not in layout.hazards
    ]
    prevs = [None] + list(range(NUM_ACTIONS)) if env.sticky_action_prob > 0 else [None]
    states = [(p, a) for p in positions for a in prevs]
    index = {s: i for i, s in enumerate(states)}
    S = len(states)
    # each (state, action) has at most two executed outcomes
    nxt = np.zeros((S, NUM_ACTIONS, 2), dtype=np.int64)
    prob = np.zeros((S, NUM_ACTIONS, 2))
    rew = np.zeros((S, NUM_ACTIONS, 2))
    done = np.zeros((S, NUM_ACTIONS, 2), dtype=bool)
    p = env.sticky_action_prob
    for (pos, prev), i in index.items():
        for a in range(NUM_ACTIONS):
            if prev is None or prev == a or p == 0:
                outcomes = [(a, 1.0)]
            else:
                outcomes = [(a, 1.0 - p), (prev, p)]
            for k, (ex, pr) in enumerate(outcomes):
                new_pos = env.move(pos, ex)
                r, term = env.outcome(new_pos)
                prob[i, a, k] = pr
                rew[i, a, k] = r
                done[i, a, k] = term
                nxt[i, a, k] = 0 if term else index[(new_pos, ex if p > 0 else None)]
    start = index[(layout.start, None)]
    return S, nxt, prob, rew, done, start


def _solve(S, nxt, prob, rew, done, gamma: float, horizon: int | None, tol: float, max_iter: int):
    v = np.zeros(S)
    if horizon is not None:
        for _ in range(horizon):
            q = (prob * (rew + gamma * np.where(done, 0.0, v[nxt]))).sum(-1)
            v = q.max(axis=1)
        return v
    for _ in range(max_iter):
        q = (prob * (rew + gamma * np.where(done, 0.0, v[nxt]))).sum(-1)
        new = q.max(axis=1)
        if np.max(np.abs(new - v)) < tol:
            return new
        v = new
    raise RuntimeError("value iteration did not converge")


def optimal_q_table(env: GridPixelEnv, discount: float, horizon: int | None = None):
    """Infinite-horizon optimal Q over (position, prev action) states.

    Returns ``(states, q)`` where ``states`` lists ``(position, prev_action)``.
    """
    S, nxt, prob, rew, done, _ = _tabulate(env)
    v = _solve(S, nxt, prob, rew, done, discount, horizon, 1e-12, 10_000_000)
    q = (prob * (rew + discount * np.where(done, 0.0, v[nxt]))).sum(-1)
    layout = env.layout
    rows, cols = layout.shape
    positions = [
        (r, c)
        for r in range(rows)
        for c in range(cols)
        if not layout.walls[r, c] and (r, c) not in layout.goals and (r, c) not in layout.hazards
    ]
    prevs = [None] + list(range(NUM_ACTIONS)) if env.sticky_action_prob > 0 else [None]
    states = [(p, a) for p in positions for a in prevs]
    return states, q


def oracle_optimal_return(
    env: GridPixelEnv,
    discount: float = 0.997,
    max_states: int = 200_000,
    horizon: int | None = -1,
    tol: float = 1e-10,
) -> OracleResult:
    """Optimal expected episodic return from the start state, computed exactly.

    Sticky actions are part of the state (previous executed action). With the
    default ``horizon=-1`` the env's truncation limit is honoured by backward
    induction over that many steps; ``horizon=None`` runs value iteration on
    the untruncated MDP to ``tol``. Both the ``discount``-discounted optimum and
    the undiscounted optimum are returned (each under its own optimal policy).
    """
    rows, cols = env.layout.shape
    est = rows * cols * (NUM_ACTIONS + 1)
    if est > max_states:
        raise ValueError(f"state space of ~{est} states exceeds cap {max_states}")
    if horizon == -1:
        horizon = env.max_episode_steps
    S, nxt, prob, rew, done, start = _tabulate(env)
    vd = _solve(S, nxt, prob, rew, done, discount, horizon, tol, 10_000_000)
    vu = _solve(S, nxt, prob, rew, done, 1.0, horizon, tol, 10_000_000)
    return OracleResult(float(vd[start]), float(vu[start]), discount, S)
