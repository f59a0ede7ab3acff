"""Prioritized n-step replay.

Transitions are accumulated per environment until ``n`` rewards are known
(or the episode ends), then written into a ring buffer whose sampling mass
lives in a :class:`SumTree`. Frames are deduplicated: every stored
observation stack is a tuple of ids into a shared frame ring, so a stack of
four 84x84 frames costs one new frame per environment step instead of eight.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class ReplayNotReadyError(RuntimeError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: int
    return_n: float
    next_state: np.ndarray
    terminal: bool
    horizon_m: int


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    horizons: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class SumTree:
    """Binary tree of partial sums over a power-of-two number of leaves.

    Node 1 is the root; leaves occupy ``[capacity, 2 * capacity)``. Parents
    are always recomputed from their children, never patched by deltas, so
    every internal node is exactly the float sum of its two children.
    """

    def __init__(self, capacity: int):
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError(f"capacity must be a power of two, got {capacity}")
        self.capacity = capacity
        self.nodes = np.zeros(2 * capacity, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity:]

    def get(self, indices) -> np.ndarray:
        return self.nodes[np.asarray(indices) + self.capacity]

    def set(self, indices, values) -> None:
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64)) + self.capacity
        vals = np.broadcast_to(np.asarray(values, dtype=np.float64), idx.shape)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("leaf values must be finite and non-negative")
        self.nodes[idx] = vals
        idx = np.unique(idx // 2)
        while idx[0] >= 1:
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1]
            if idx[0] == 1:
                break
            idx = np.unique(idx // 2)

    def find(self, values) -> np.ndarray:
        """Leaf index holding each cumulative mass in ``values``.

        Zero-mass subtrees are never entered, so as long as the root is
        positive every returned leaf has positive mass.
        """
        v = np.array(values, dtype=np.float64)
        node = np.ones(v.shape, dtype=np.int64)
        for _ in range(self.capacity.bit_length() - 1):
            left = self.nodes[2 * node]
            right = self.nodes[2 * node + 1]
            go_left = (v < left) | (right <= 0)
            v = np.where(go_left, v, np.minimum(v - left, right))
            node = np.where(go_left, 2 * node, 2 * node + 1)
        return node - self.capacity


class NStepAccumulator:
    """Per-environment window of the last ``n`` (state, action, reward) steps."""

    def __init__(self, n_step: int, discount: float):
        if n_step < 1:
            raise ValueError("n_step must be >= 1")
        self.n = n_step
        self.discount = discount
        self.pending: deque = deque()

    def __len__(self) -> int:
        return len(self.pending)

    def _mature(self, depth: int):
        """Pop the oldest entry using the ``depth`` oldest rewards."""
        items = list(self.pending)[:depth]
        ret = 0.0
        for k, (_, _, r) in enumerate(items):
            ret += self.discount**k * r
        state, action, _ = self.pending.popleft()
        return state, action, ret, depth

    def push(self, state, action: int, reward: float, terminal: bool, truncated: bool):
        """Append one step; return ``(state, action, return, horizon, ends_episode)`` tuples.

        ``ends_episode`` is true for every tuple produced by a terminal or
        truncation flush; the caller decides what to bootstrap from.
        """
        out = []
        if len(self.pending) == self.n:
            out.append(self._mature(self.n) + (False,))
        self.pending.append((state, action, float(reward)))
        if terminal or truncated:
            while self.pending:
                out.append(self._mature(len(self.pending)) + (True,))
        return out


class _FrameRing:
    """Lazily allocated ring of single frames addressed by a global frame id."""

    CHUNK = 2048

    def __init__(self, size: int, frame_shape: tuple[int, ...]):
        self.size = size
        self.frame_shape = tuple(frame_shape)
        self.chunks: dict[int, np.ndarray] = {}
        self.ids = np.full(size, -1, dtype=np.int64)
        self.next_id = 0

    def add(self, frame: np.ndarray) -> int:
        fid = self.next_id
        slot = fid % self.size
        chunk, offset = divmod(slot, self.CHUNK)
        if chunk not in self.chunks:
            n = min(self.CHUNK, self.size - chunk * self.CHUNK)
            self.chunks[chunk] = np.zeros((n,) + self.frame_shape, dtype=np.uint8)
        self.chunks[chunk][offset] = frame
        self.ids[slot] = fid
        self.next_id += 1
        return fid

    def gather(self, fids: np.ndarray) -> np.ndarray:
        fids = np.asarray(fids, dtype=np.int64)
        slots = fids % self.size
        if np.any(self.ids[slots] != fids):
            raise RuntimeError("replay frame was overwritten while still referenced")
        out = np.empty(fids.shape + self.frame_shape, dtype=np.uint8)
        flat_out = out.reshape((-1,) + self.frame_shape)
        flat_slots = slots.reshape(-1)
        chunk, offset = np.divmod(flat_slots, self.CHUNK)
        for c in np.unique(chunk):
            sel = chunk == c
            flat_out[sel] = self.chunks[int(c)][offset[sel]]
        return out


class PrioritizedReplay:
    """Ring buffer with per-environment n-step accumulation and proportional sampling.

    Raw priorities (``|td| + epsilon``) are kept in ``priorities``; the sum
    tree holds ``priority ** alpha`` so sampling is proportional to
    ``p_i^alpha / sum_j p_j^alpha``.
    """

    def __init__(
        self,
        capacity: int,
        num_envs: int,
        n_step: int,
        discount: float,
        alpha: float,
        frame_shape: tuple[int, int],
        stack: int = 4,
        priority_epsilon: float = 1e-6,
        min_size: int = 1,
        seed=None,
    ):
        self.capacity = capacity
        self.num_envs = num_envs
        self.n_step = n_step
        self.discount = discount
        self.alpha = alpha
        self.stack = stack
        self.priority_epsilon = priority_epsilon
        self.min_size = min_size
        self.frame_shape = tuple(frame_shape)
        self.rng = np.random.default_rng(seed)

        self.tree = SumTree(capacity)
        self.priorities = np.zeros(capacity, dtype=np.float64)
        self.max_priority = 1.0
        self.write_cursor = 0
        self.count = 0
        self.total_written = 0
        # generation of each slot, so stale indices from an old sample can be detected
        self.slot_gen = np.full(capacity, -1, dtype=np.int64)

        self.state_ids = np.zeros((capacity, stack), dtype=np.int64)
        self.next_ids = np.zeros((capacity, stack), dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.returns = np.zeros(capacity, dtype=np.float64)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.horizons = np.zeros(capacity, dtype=np.int64)

        # Each transition adds at most two fresh frames (its own step and a
        # final observation on episode end), plus the in-flight n-step window.
        margin = 2 * num_envs * (n_step + stack + 2)
        self.frames = _FrameRing(2 * capacity + margin, self.frame_shape)
        self.accumulators = [NStepAccumulator(n_step, discount) for _ in range(num_envs)]
        self._last_ids: list[np.ndarray | None] = [None] * num_envs
        self._last_stack: list[np.ndarray | None] = [None] * num_envs

    def __len__(self) -> int:
        return self.count

    @property
    def ready(self) -> bool:
        return self.count >= self.min_size

    # frames ----------------------------------------------------------------

    def _ids_for(self, stack_obs: np.ndarray, prev_ids, prev_stack) -> np.ndarray:
        stack_obs = np.asarray(stack_obs, dtype=np.uint8)
        if stack_obs.shape != (self.stack,) + self.frame_shape:
            raise ValueError(
                f"expected observation stack {(self.stack,) + self.frame_shape}, got {stack_obs.shape}"
            )
        if prev_ids is not None and np.array_equal(stack_obs[:-1], prev_stack[1:]):
            if np.array_equal(stack_obs[-1], prev_stack[-1]):
                newest = prev_ids[-1]
            else:
                newest = self.frames.add(stack_obs[-1])
            return np.concatenate([prev_ids[1:], [newest]])
        ids = np.empty(self.stack, dtype=np.int64)
        for k in range(self.stack):
            if k > 0 and np.array_equal(stack_obs[k], stack_obs[k - 1]):
                ids[k] = ids[k - 1]
            else:
                ids[k] = self.frames.add(stack_obs[k])
        return ids

    # writing ---------------------------------------------------------------

    def _write(self, state_ids, action, ret, next_ids, terminal, horizon) -> int:
        slot = self.write_cursor
        self.state_ids[slot] = state_ids
        self.next_ids[slot] = next_ids
        self.actions[slot] = action
        self.returns[slot] = ret
        self.terminals[slot] = terminal
        self.horizons[slot] = horizon
        self.priorities[slot] = self.max_priority
        self.tree.set(slot, self.max_priority**self.alpha)
        self.slot_gen[slot] = self.total_written
        self.write_cursor = (slot + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)
        self.total_written += 1
        return slot

    def push(
        self,
        env_id: int,
        state,
        action: int,
        reward: float,
        terminal: bool,
        truncated: bool = False,
        final_state=None,
    ) -> list[Transition]:
        """Record one step of environment ``env_id``; return the matured transitions.

        ``state`` is the stack observed *before* acting. ``final_state`` is the
        stack observed after the last step of an episode; it is required on
        truncation (it is the bootstrap state) and optional on termination.
        """
        if not 0 <= env_id < self.num_envs:
            raise IndexError(f"env_id {env_id} out of range for {self.num_envs} envs")
        ids = self._ids_for(state, self._last_ids[env_id], self._last_stack[env_id])
        self._last_ids[env_id] = ids
        self._last_stack[env_id] = np.asarray(state, dtype=np.uint8)

        acc = self.accumulators[env_id]
        matured = acc.push(ids, int(action), reward, terminal, truncated)
        if not matured:
            return []

        final_ids = None
        if terminal or truncated:
            if final_state is None:
                if truncated and not terminal:
                    raise ValueError("final_state is required on truncation")
                final_ids = ids
            else:
                final_ids = self._ids_for(final_state, ids, state)
            # the next push for this env starts a new episode
            self._last_ids[env_id] = None
            self._last_stack[env_id] = None

        out = []
        for state_ids, act, ret, horizon, ends in matured:
            if ends:
                next_ids, term = final_ids, bool(terminal)
            else:
                next_ids, term = ids, False
            slot = self._write(state_ids, act, ret, next_ids, term, horizon)
            out.append(self._materialize(slot))
        return out

    def _materialize(self, slot: int) -> Transition:
        return Transition(
            state=self.frames.gather(self.state_ids[slot]),
            action=int(self.actions[slot]),
            return_n=float(self.returns[slot]),
            next_state=self.frames.gather(self.next_ids[slot]),
            terminal=bool(self.terminals[slot]),
            horizon_m=int(self.horizons[slot]),
        )

    def get(self, indices) -> TransitionBatch:
        idx = np.asarray(indices, dtype=np.int64)
        return TransitionBatch(
            states=self.frames.gather(self.state_ids[idx]),
            actions=self.actions[idx].copy(),
            returns=self.returns[idx].copy(),
            next_states=self.frames.gather(self.next_ids[idx]),
            terminals=self.terminals[idx].copy(),
            horizons=self.horizons[idx].copy(),
        )

    # sampling --------------------------------------------------------------

    def probabilities(self) -> np.ndarray:
        """Sampling probability of every slot (zero for empty slots)."""
        leaves = self.tree.leaves()
        return leaves / leaves.sum()

    def sample_indices(self, batch_size: int) -> np.ndarray:
        """Stratified proportional draw: one uniform point per equal-mass segment."""
        total = self.tree.total
        if total <= 0:
            raise ReplayNotReadyError("replay holds no sampling mass")
        bounds = total * (np.arange(batch_size) + self.rng.random(batch_size)) / batch_size
        bounds = np.minimum(bounds, np.nextafter(total, 0))
        return self.tree.find(bounds)

    def sample(self, batch_size: int, beta: float):
        """Return ``(indices, batch, is_weights)``."""
        if self.count < self.min_size:
            raise ReplayNotReadyError(
                f"replay holds {self.count} transitions, need {self.min_size} before sampling"
            )
        idx = self.sample_indices(batch_size)
        probs = self.tree.get(idx) / self.tree.total
        weights = (self.count * probs) ** (-beta)
        weights = weights / weights.max()
        self._sampled_gen = dict(zip(idx.tolist(), self.slot_gen[idx].tolist()))
        return idx, self.get(idx), weights.astype(np.float32)

    def update_priorities(self, indices, td_magnitudes, generations=None) -> None:
        """Set raw priorities to ``|td| + epsilon`` for still-live slots.

        Slots overwritten since they were sampled are skipped. Liveness is
        judged against ``generations`` if given, else against the last sample.
        """
        idx = np.asarray(indices, dtype=np.int64)
        td = np.abs(np.asarray(td_magnitudes, dtype=np.float64))
        if generations is None:
            sampled = getattr(self, "_sampled_gen", {})
            generations = [sampled.get(int(i), self.slot_gen[i]) for i in idx]
        live = self.slot_gen[idx] == np.asarray(generations)
        if not np.all(live):
            log.debug("skipping %d stale priority updates", int((~live).sum()))
        idx, td = idx[live], td[live]
        if idx.size == 0:
            return
        prio = td + self.priority_epsilon
        # duplicates in a stratified batch: the last write wins, as with sequential updates
        self.priorities[idx] = prio
        self.tree.set(idx, self.priorities[idx] ** self.alpha)
        self.max_priority = max(self.max_priority, float(prio.max()))
