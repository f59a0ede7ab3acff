"""Training loop: exploration schedule, acting, replay feeding, learning, evaluation.

Frame accounting: the toy environments have no frameskip, so one frame is one
agent step in one environment. A vector step advances ``num_envs`` frames.
Transitions are counted separately (they lag frames by the n-step window).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import analysis, checkpoint
from .config import AgentConfig, dumps_config, loads_config
from .envs import FrameStack, GridPixelEnv, VectorEnv, clip_reward
from .learner import Learner
from .network import BTRNetwork, NetworkSpec, as_tensor_obs, build_network, sample_taus
from .replay import PrioritizedReplay

log = logging.getLogger(__name__)

CSV_COLUMNS = [
    "frame",
    "episodes",
    "mean",
    "iqm",
    "ci_low",
    "ci_high",
    "loss",
    "grad_norm",
    "epsilon",
    "action_gap",
    "churn",
    "dormant_pct",
    "srank",
    "l2_total",
]


# ---------------------------------------------------------------------------
# schedules


def _scaled(frames: int, cfg: AgentConfig) -> float:
    return frames * cfg.schedule_scale


def epsilon_at(frame: int, cfg: AgentConfig) -> float:
    """Linear decay to ``eps_end``, held, then exactly zero from the disable frame."""
    if frame < 0:
        raise ValueError("frame must be >= 0")
    if frame >= _scaled(cfg.eps_disable_frame, cfg):
        return 0.0
    decay = _scaled(cfg.eps_decay_frames, cfg)
    frac = min(1.0, frame / decay) if decay > 0 else 1.0
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def eval_epsilon_at(frame: int, cfg: AgentConfig) -> float:
    return cfg.eval_epsilon if frame < _scaled(cfg.eval_epsilon_until_frame, cfg) else 0.0


# ---------------------------------------------------------------------------
# acting


def greedy_actions(net: BTRNetwork, obs, generator: torch.Generator | None = None, n_taus: int = 8) -> np.ndarray:
    """Argmax of mean-over-tau Q; ties go to the lowest action index."""
    obs_t = as_tensor_obs(obs)
    dtype = next(net.parameters()).dtype
    taus = sample_taus(len(obs_t), n_taus, generator, dtype) if net.spec.iqn else None
    with torch.no_grad():
        q = net.q_values(obs_t, taus)
    return np.argmax(q.double().numpy(), axis=1)


def select_actions(
    net: BTRNetwork,
    obs,
    epsilon: float,
    rng: np.random.Generator,
    generator: torch.Generator | None = None,
    n_taus: int = 8,
) -> np.ndarray:
    """Epsilon-greedy over the network's current noise sample."""
    actions = greedy_actions(net, obs, generator, n_taus)
    n = len(actions)
    # always draw both so the rng stream does not depend on epsilon
    explore = rng.random(n) < epsilon
    random_actions = rng.integers(0, net.spec.num_actions, size=n)
    return np.where(explore, random_actions, actions)


def evaluate(
    policy,
    env_factory,
    episodes: int,
    eval_epsilon: float,
    seed: int = 0,
    stack: int | None = None,
    n_taus: int = 8,
    num_actions: int | None = None,
) -> list[float]:
    """Undiscounted, unclipped returns of ``episodes`` full episodes.

    ``policy`` is a :class:`BTRNetwork` (run with zero noise) or any callable
    mapping an observation batch ``[B, k, H, W]`` to actions. Each episode
    gets its own fresh environment ``env_factory(seed_i)``; episodes run in
    lockstep and are never auto-reset.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    ss = np.random.SeedSequence(seed)
    env_ss, act_ss, tau_ss = ss.spawn(3)
    env_seeds = env_ss.generate_state(episodes)
    rng = np.random.default_rng(act_ss)
    generator = torch.Generator().manual_seed(int(tau_ss.generate_state(1)[0]))

    is_net = isinstance(policy, BTRNetwork)
    if stack is None:
        stack = policy.spec.input_shape[0] if is_net else 4
    envs = [FrameStack(env_factory(int(s)), stack) for s in env_seeds]
    if num_actions is None:
        num_actions = envs[0].num_actions
    obs = np.stack([e.reset() for e in envs])
    returns = np.zeros(episodes)
    active = np.ones(episodes, dtype=bool)

    ctx = analysis.zero_noise(policy) if is_net else _nullcontext()
    with ctx:
        while active.any():
            idx = np.flatnonzero(active)
            if is_net:
                greedy = greedy_actions(policy, obs[idx], generator, n_taus)
            else:
                greedy = np.asarray(policy(obs[idx]), dtype=np.int64)
            explore = rng.random(len(idx)) < eval_epsilon
            random_actions = rng.integers(0, num_actions, size=len(idx))
            actions = np.where(explore, random_actions, greedy)
            for j, i in enumerate(idx):
                o, r, term, trunc = envs[i].step(int(actions[j]))
                returns[i] += r
                obs[i] = o
                if term or trunc:
                    active[i] = False
    return returns.tolist()


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    frame_count: int = 0
    vector_steps: int = 0
    grad_step_count: int = 0
    transitions: int = 0
    episodes: int = 0
    evals: int = 0
    warmup_frames: int = -1  # frame count just before the first gradient step
    resumed_from: int = -1


@dataclass
class Streams:
    """Independent random streams derived from the master seed."""

    action: np.random.Generator
    noise: torch.Generator
    taus: torch.Generator
    learn: torch.Generator
    env_seeds: list
    replay_seed: int
    eval_seed: int
    probe_seed: int
    init_seed: int

    @classmethod
    def from_seed(cls, seed: int, num_envs: int) -> "Streams":
        ss = np.random.SeedSequence(seed)
        act, noise, taus, learn, env, replay, ev, probe, init = ss.spawn(9)

        def tseed(s):
            return int(s.generate_state(1, np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)

        return cls(
            action=np.random.default_rng(act),
            noise=torch.Generator().manual_seed(tseed(noise)),
            taus=torch.Generator().manual_seed(tseed(taus)),
            learn=torch.Generator().manual_seed(tseed(learn)),
            env_seeds=[int(x) for x in env.generate_state(num_envs)],
            replay_seed=tseed(replay),
            eval_seed=tseed(ev),
            probe_seed=tseed(probe) % (2**31),
            init_seed=tseed(init) % (2**31),
        )


def env_factory_for(cfg: AgentConfig):
    def make(seed):
        return GridPixelEnv.from_config(cfg, seed=seed)

    return make


def make_network(cfg: AgentConfig, seed: int) -> BTRNetwork:
    spec = NetworkSpec.from_config(cfg, (cfg.frame_stack, cfg.env_height, cfg.env_width), 4)
    return build_network(spec, seed)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_csv_row(path: Path, row: dict, header: bool) -> None:
    missing = [c for c in CSV_COLUMNS if c not in row]
    if missing:
        raise ValueError(f"metrics row is missing columns {missing}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_COLUMNS)
    w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    with open(path, "a" if not header else "w", newline="") as f:
        f.write(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(f)]


# ---------------------------------------------------------------------------
# checkpoint bundling


def _np_rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_training_checkpoint(path, cfg, learner: Learner, state: TrainState, streams: Streams, extra=None) -> None:
    arrays = {}
    arrays.update(checkpoint.module_arrays("online", learner.online))
    arrays.update(checkpoint.module_arrays("target", learner.target))
    opt_arrays, opt_meta = checkpoint.optimizer_arrays("optim", learner.optimizer)
    arrays.update(opt_arrays)
    for name in ("noise", "taus", "learn"):
        arrays[f"rng/{name}"] = getattr(streams, name).get_state().numpy()
    arrays["rng/learner"] = learner.generator.get_state().numpy()
    meta = {
        "config": dumps_config(cfg),
        "spec": _spec_meta(learner.online.spec),
        "optimizer": opt_meta,
        "train_state": asdict(state),
        "learner": {"grad_steps": learner.grad_steps, "steps_since_sync": learner.steps_since_sync},
        "rng_action": _np_rng_state(streams.action),
        "streams": {
            "env_seeds": streams.env_seeds,
            "replay_seed": streams.replay_seed,
            "eval_seed": streams.eval_seed,
            "probe_seed": streams.probe_seed,
        },
    }
    if extra:
        meta.update(extra)
    checkpoint.save(path, arrays, meta)


def _spec_meta(spec: NetworkSpec) -> dict:
    d = asdict(spec)
    d["input_shape"] = list(spec.input_shape)
    return d


def spec_from_meta(meta: dict) -> NetworkSpec:
    d = dict(meta["spec"])
    d["input_shape"] = tuple(d["input_shape"])
    return NetworkSpec(**d)


def load_network(path) -> tuple[BTRNetwork, dict]:
    """Online network and metadata from a checkpoint file."""
    arrays, meta = checkpoint.load(path)
    if "spec" not in meta:
        raise checkpoint.CheckpointError("checkpoint has no network spec")
    net = BTRNetwork(spec_from_meta(meta))
    checkpoint.load_module("online", net, arrays)
    return net, meta


def save_policy_checkpoint(path, net: BTRNetwork, cfg: AgentConfig | None = None) -> None:
    """Checkpoint holding only a network (e.g. a hand-built policy)."""
    arrays = checkpoint.module_arrays("online", net)
    meta = {"spec": _spec_meta(net.spec)}
    if cfg is not None:
        meta["config"] = dumps_config(cfg)
    checkpoint.save(path, arrays, meta)


# ---------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    state: TrainState
    records: list = field(default_factory=list)
    last_checkpoint: Path | None = None
    learner: Learner | None = None


def _progress(state: TrainState, cfg: AgentConfig, record, started: float) -> None:
    rate = state.frame_count / max(1e-9, time.time() - started)
    msg = (
        f"frame {state.frame_count}/{cfg.total_frames} grad_steps {state.grad_step_count} "
        f"episodes {state.episodes} fps {rate:.0f}"
    )
    if record is not None:
        msg += f" eval_mean {record.mean:.3f} iqm {record.iqm:.3f}"
    print(msg, file=sys.stderr, flush=True)


def run_training(
    cfg: AgentConfig,
    run_dir=None,
    resume_from=None,
    progress: bool = False,
    on_eval=None,
) -> RunResult:
    """Train for ``cfg.total_frames`` frames.

    Writes ``metrics.csv`` and ``ckpt_<frame>.bin`` into ``run_dir`` at every
    evaluation (and once more at the end if the last frame was not an
    evaluation point). With ``resume_from`` the networks, optimizer, counters
    and random streams continue from the checkpoint; the replay buffer starts
    empty and refills through the usual warm-up gate.
    """
    torch.set_num_threads(cfg.torch_threads)
    streams = Streams.from_seed(cfg.master_seed, cfg.effective_num_envs)
    online = make_network(cfg, streams.init_seed)
    learner = Learner(online, cfg, streams.learn)
    state = TrainState()

    if resume_from is not None:
        arrays, meta = checkpoint.load(resume_from)
        saved_cfg = loads_config(meta["config"])
        if saved_cfg.replace(total_frames=cfg.total_frames) != cfg.replace(total_frames=cfg.total_frames):
            raise ValueError("resume checkpoint was written with a different config")
        checkpoint.load_module("online", learner.online, arrays)
        checkpoint.load_module("target", learner.target, arrays)
        checkpoint.load_optimizer("optim", learner.optimizer, arrays, meta["optimizer"])
        for name in ("noise", "taus", "learn"):
            getattr(streams, name).set_state(torch.from_numpy(arrays[f"rng/{name}"].copy()))
        learner.generator.set_state(torch.from_numpy(arrays["rng/learner"].copy()))
        streams.action.bit_generator.state = meta["rng_action"]
        state = TrainState(**meta["train_state"])
        state.resumed_from = state.frame_count
        learner.grad_steps = meta["learner"]["grad_steps"]
        learner.steps_since_sync = meta["learner"]["steps_since_sync"]

    num_envs = cfg.effective_num_envs
    # envs restart from a fresh episode on resume; offsetting seeds keeps them from replaying history
    env_seeds = [s + state.vector_steps for s in streams.env_seeds]
    venv = VectorEnv.from_config(cfg, env_seeds)
    frame_shape = (cfg.env_height, cfg.env_width)
    replay = PrioritizedReplay(
        cfg.replay_capacity,
        num_envs,
        cfg.n_step,
        cfg.discount,
        cfg.per_alpha if cfg.use_per else 0.0,
        frame_shape,
        stack=cfg.frame_stack,
        priority_epsilon=cfg.per_priority_epsilon,
        min_size=min(cfg.min_replay_size, cfg.replay_capacity),
        seed=streams.replay_seed + state.vector_steps,
    )

    run_path = Path(run_dir) if run_dir is not None else None
    csv_path = run_path / "metrics.csv" if run_path else None
    if run_path:
        run_path.mkdir(parents=True, exist_ok=True)
        if resume_from is None or not csv_path.exists():
            with open(csv_path, "w", newline="") as f:
                f.write(",".join(CSV_COLUMNS) + "\n")

    env_factory = env_factory_for(cfg)
    probe = None
    result = RunResult(state, learner=learner)
    started = time.time()

    losses: list[float] = []
    norms: list[float] = []
    episode_returns = np.zeros(num_envs)
    obs = venv.reset()
    next_eval = (state.frame_count // cfg.eval_interval + 1) * cfg.eval_interval
    last_eval_frame = state.frame_count if resume_from is not None else -1

    def do_eval():
        nonlocal probe, losses, norms, last_eval_frame
        epsilon = epsilon_at(state.frame_count, cfg)
        eval_seed = streams.eval_seed + state.evals
        scores = evaluate(
            learner.online,
            env_factory,
            cfg.eval_episodes,
            eval_epsilon_at(state.frame_count, cfg),
            seed=eval_seed,
            n_taus=cfg.iqn_taus,
        )
        rec = analysis.MetricsRecord(frame=state.frame_count, scores=scores, episodes=state.episodes)
        rec.summarize_scores(seed=eval_seed)
        rec.loss = float(np.mean(losses)) if losses else math.nan
        rec.grad_norm = float(np.mean(norms)) if norms else math.nan
        rec.epsilon = epsilon
        if cfg.analysis_on_eval:
            if probe is None:
                probe = analysis.build_probe(
                    env_factory, cfg.probe_size, streams.probe_seed, cfg.frame_stack, cfg.iqn_taus
                )
            m = analysis.network_metrics(learner.online, probe, cfg.dormant_threshold)
            for k, v in m.items():
                setattr(rec, k, v)
            rec.policy_churn_pct = _churn_after_one_step(learner, replay, probe, state, cfg)
        losses, norms = [], []
        state.evals += 1
        last_eval_frame = state.frame_count
        result.records.append(rec)
        if csv_path:
            write_csv_row(csv_path, rec.row(), header=False)
            ckpt = run_path / f"ckpt_{state.frame_count}.bin"
            save_training_checkpoint(ckpt, cfg, learner, state, streams)
            result.last_checkpoint = ckpt
        if on_eval is not None:
            on_eval(rec, state)
        if progress:
            _progress(state, cfg, rec, started)
        return rec

    try:
        while state.frame_count < cfg.total_frames:
            epsilon = epsilon_at(state.frame_count, cfg)
            if cfg.use_noisy:
                learner.online.sample_noise(streams.noise)
            actions = select_actions(learner.online, obs, epsilon, streams.action, streams.taus, cfg.iqn_taus)
            next_obs, rewards, terms, truncs, info = venv.step(actions)
            for i in range(num_envs):
                done = bool(terms[i] or truncs[i])
                final = info["final_obs"][i] if done else None
                matured = replay.push(
                    i, obs[i], int(actions[i]), float(clip_reward(rewards[i])), bool(terms[i]), bool(truncs[i]), final
                )
                state.transitions += len(matured)
                episode_returns[i] += rewards[i]
                if done:
                    state.episodes += 1
                    episode_returns[i] = 0.0
            obs = next_obs
            state.frame_count += num_envs
            state.vector_steps += 1

            if replay.ready and state.vector_steps % cfg.train_every == 0:
                if state.warmup_frames < 0:
                    state.warmup_frames = state.frame_count - num_envs * cfg.train_every
                report = learner.train_step(replay, state.frame_count)
                state.grad_step_count += 1
                losses.append(report.scalar_loss)
                norms.append(report.grad_norm_preclip)

            if state.frame_count >= next_eval:
                do_eval()
                next_eval = (state.frame_count // cfg.eval_interval + 1) * cfg.eval_interval
            elif progress and state.vector_steps % 1000 == 0:
                _progress(state, cfg, None, started)

        if last_eval_frame != state.frame_count:
            do_eval()
    except BaseException:
        if run_path is not None:
            try:
                save_training_checkpoint(run_path / "ckpt_crash.bin", cfg, learner, state, streams)
            except Exception:  # best effort only
                log.exception("could not write crash checkpoint")
        raise
    finally:
        venv.close()
    return result


def _churn_after_one_step(learner: Learner, replay, probe, state: TrainState, cfg: AgentConfig) -> float:
    """Greedy-action change on the probe after one extra step on a fresh batch.

    The step runs on a clone, so the real learner and its streams are untouched.
    """
    if not replay.ready:
        return math.nan
    clone = learner.clone()
    saved_rng = replay.rng.bit_generator.state
    replay.rng = np.random.default_rng(cfg.master_seed + state.evals)
    try:
        idx, batch, weights = replay.sample(cfg.effective_batch_size, 1.0)
    finally:
        replay.rng = np.random.default_rng()
        replay.rng.bit_generator.state = saved_rng
    use_w = weights if (cfg.use_per and cfg.per_use_is_weights) else None
    clone.update(batch, use_w)
    return analysis.policy_churn(learner.online, clone.online, probe)


def training_summary(result: RunResult) -> str:
    s = result.state
    return json.dumps(asdict(s), sort_keys=True)
