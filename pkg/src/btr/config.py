"""Hyperparameters and ablation switches.

A config file is flat ``key = value`` text. Blank lines and ``#`` comments are
ignored; every key must name a field of :class:`AgentConfig`. Values are parsed
according to the field's type, so ``1e-4``, ``200_000`` and ``true`` all work.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

# Length of the schedule the default milestones were written for.
REFERENCE_TOTAL_FRAMES = 200_000_000


class ConfigError(ValueError):
    """Raised for unparseable config text or invariant violations."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"{field}: "
        super().__init__(prefix + message)


@dataclass(frozen=True)
class AgentConfig:
    # learning
    learning_rate: float = 1e-4
    discount: float = 0.997
    n_step: int = 3
    iqn_taus: int = 8
    iqn_cos_embedding: int = 64
    huber_kappa: float = 1.0
    grad_clip_max_norm: float = 10.0
    num_envs: int = 64
    batch_size: int = 256
    target_update_period: int = 500
    adam_eps: float = 1.95e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    # network
    impala_width: int = 2
    maxpool_out: int = 6
    dueling_hidden: int = 512
    noisy_sigma0: float = 0.5

    # exploration, in frames
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_frames: int = 8_000_000
    eps_disable_frame: int = 100_000_000

    # replay
    replay_capacity: int = 2**20
    min_replay_size: int = 200_000
    per_alpha: float = 0.2
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    per_priority_epsilon: float = 1e-6
    per_use_is_weights: bool = True

    # munchausen
    munchausen_tau: float = 0.03
    munchausen_alpha: float = 0.9
    munchausen_l0: float = -1.0

    # evaluation
    eval_episodes: int = 100
    eval_epsilon: float = 0.01
    eval_epsilon_until_frame: int = 125_000_000
    eval_interval: int = 50_000
    eval_noisy: bool = False

    # run length and schedule scaling
    total_frames: int = 200_000_000
    scale_schedules: bool = True

    # ablations
    use_munchausen: bool = True
    use_iqn: bool = True
    use_spectral_norm: bool = True
    use_impala: bool = True
    use_maxpool: bool = True
    use_vectorization: bool = True
    use_noisy: bool = True
    use_dueling: bool = True
    use_per: bool = True
    use_layer_norm: bool = False

    # non-vectorized (Rainbow-style) cadence, used when use_vectorization is off
    single_env_batch_size: int = 32
    single_env_train_every: int = 4

    # toy environment
    env_layout: str = "grid8"
    env_height: int = 84
    env_width: int = 84
    env_sticky_prob: float = 0.25
    env_max_steps: int = 200
    env_step_penalty: float = -0.01
    env_goal_reward: float = 1.0
    env_hazard_reward: float = -1.0
    frame_stack: int = 4

    # analysis hooks run at each evaluation
    probe_size: int = 1000
    dormant_threshold: float = 0.025
    analysis_on_eval: bool = True

    master_seed: int = 0
    torch_threads: int = 1

    def __post_init__(self) -> None:
        validate(self)

    # derived quantities ---------------------------------------------------

    @property
    def effective_num_envs(self) -> int:
        return self.num_envs if self.use_vectorization else 1

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size if self.use_vectorization else self.single_env_batch_size

    @property
    def train_every(self) -> int:
        """Vector steps between gradient steps."""
        return 1 if self.use_vectorization else self.single_env_train_every

    @property
    def replay_ratio(self) -> float:
        """Gradient steps per environment step."""
        return 1.0 / (self.effective_num_envs * self.train_every)

    @property
    def schedule_scale(self) -> float:
        if not self.scale_schedules:
            return 1.0
        return self.total_frames / REFERENCE_TOTAL_FRAMES

    def replace(self, **changes: Any) -> "AgentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self, length: int = 10) -> str:
        """Short stable hash of every field except the seed."""
        text = dumps_config(self.replace(master_seed=0))
        return hashlib.sha256(text.encode()).hexdigest()[:length]


_FIELDS = {f.name: f for f in fields(AgentConfig)}
_TYPES = {f.name: f.type for f in fields(AgentConfig)}


def validate(cfg: AgentConfig) -> None:
    def check(cond: bool, name: str, msg: str) -> None:
        if not cond:
            raise ConfigError(msg, field=name)

    check(0.0 <= cfg.discount < 1.0, "discount", f"must lie in [0, 1), got {cfg.discount}")
    check(cfg.n_step >= 1, "n_step", "must be >= 1")
    check(cfg.iqn_taus >= 1, "iqn_taus", "must be >= 1")
    check(cfg.iqn_cos_embedding >= 1, "iqn_cos_embedding", "must be >= 1")
    check(cfg.huber_kappa > 0, "huber_kappa", "must be > 0")
    check(cfg.grad_clip_max_norm > 0, "grad_clip_max_norm", "must be > 0")
    check(cfg.learning_rate > 0, "learning_rate", "must be > 0")
    check(cfg.num_envs >= 1, "num_envs", "must be >= 1")
    check(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    check(cfg.single_env_batch_size >= 1, "single_env_batch_size", "must be >= 1")
    check(cfg.single_env_train_every >= 1, "single_env_train_every", "must be >= 1")
    check(cfg.target_update_period >= 1, "target_update_period", "must be >= 1")
    check(cfg.impala_width >= 1, "impala_width", "must be >= 1")
    check(cfg.maxpool_out >= 1, "maxpool_out", "must be >= 1")
    check(cfg.dueling_hidden >= 1, "dueling_hidden", "must be >= 1")
    check(cfg.noisy_sigma0 >= 0, "noisy_sigma0", "must be >= 0")
    for name in ("eps_start", "eps_end", "eval_epsilon"):
        v = getattr(cfg, name)
        check(0.0 <= v <= 1.0, name, f"must lie in [0, 1], got {v}")
    check(cfg.eps_decay_frames >= 1, "eps_decay_frames", "must be >= 1")
    check(cfg.eps_disable_frame >= 0, "eps_disable_frame", "must be >= 0")
    cap = cfg.replay_capacity
    check(cap >= 1 and cap & (cap - 1) == 0, "replay_capacity", f"must be a power of two, got {cap}")
    check(cfg.batch_size <= cap, "batch_size", "must not exceed replay_capacity")
    check(cfg.min_replay_size >= 1, "min_replay_size", "must be >= 1")
    check(cfg.min_replay_size <= cap, "min_replay_size", "must not exceed replay_capacity")
    check(cfg.per_alpha >= 0, "per_alpha", "must be >= 0")
    check(cfg.per_beta_start >= 0 and cfg.per_beta_end >= 0, "per_beta_start", "must be >= 0")
    check(cfg.per_priority_epsilon > 0, "per_priority_epsilon", "must be > 0")
    check(cfg.munchausen_tau > 0, "munchausen_tau", "must be > 0")
    check(0.0 <= cfg.munchausen_alpha <= 1.0, "munchausen_alpha", "must lie in [0, 1]")
    check(cfg.munchausen_l0 < 0, "munchausen_l0", "must be < 0 (the clip ceiling is 0)")
    check(cfg.eval_episodes >= 1, "eval_episodes", "must be >= 1")
    check(cfg.eval_interval >= 1, "eval_interval", "must be >= 1")
    check(cfg.total_frames >= 0, "total_frames", "must be >= 0")
    check(0.0 <= cfg.env_sticky_prob < 1.0, "env_sticky_prob", "must lie in [0, 1)")
    check(cfg.env_max_steps >= 1, "env_max_steps", "must be >= 1")
    check(cfg.env_height >= 1 and cfg.env_width >= 1, "env_height", "must be >= 1")
    check(cfg.frame_stack >= 1, "frame_stack", "must be >= 1")
    check(cfg.probe_size >= 1, "probe_size", "must be >= 1")
    check(cfg.dormant_threshold >= 0, "dormant_threshold", "must be >= 0")
    check(cfg.torch_threads >= 1, "torch_threads", "must be >= 1")


def _parse_value(name: str, raw: str, line: int | None = None) -> Any:
    kind = _TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            try:
                return int(raw.replace("_", ""))
            except ValueError:
                # accept 8e6 style integers as long as they are exact
                as_float = float(raw)
                if not as_float.is_integer():
                    raise ValueError(f"not an integer: {raw!r}") from None
                return int(as_float)
        if kind == "float":
            return float(raw.replace("_", ""))
        if raw[:1] in "\"'" and raw[-1:] == raw[:1] and len(raw) >= 2:
            return raw[1:-1]
        return raw
    except ValueError as exc:
        raise ConfigError(str(exc), line=line, field=name) from None


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat key-value text into a dict of typed overrides."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", line=lineno)
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        values[key] = _parse_value(key, raw, line=lineno)
    return values


def config_from_mapping(values: Mapping[str, Any], base: AgentConfig | None = None) -> AgentConfig:
    base = base or AgentConfig()
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}")
    return dataclasses.replace(base, **dict(values))


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    """Parse ``key=value`` strings as given to ``--set``."""
    out: dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> AgentConfig:
    """Read a config file; unspecified keys keep their defaults."""
    text = Path(path).read_text()
    values = parse_config_text(text)
    values.update(parse_overrides(overrides))
    return config_from_mapping(values)


def loads_config(text: str) -> AgentConfig:
    return config_from_mapping(parse_config_text(text))


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps_config(cfg: AgentConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"


def save_config(cfg: AgentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))
