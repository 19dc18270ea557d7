"""Experiment configuration: a flat key=value file with CLI overrides.

Every knob of the simulator, traffic generator, reward, PPO agent and HPA
baseline lives here so that a run can be reproduced from the effective
config written next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Bad config key or value; the message names the offender."""


@dataclass
class ExperimentConfig:
    # Reproducibility
    seed: int = 42

    # Episode / control timing (seconds)
    episode_s: float = 300.0
    control_interval_s: float = 15.0
    monitor_interval_s: float = 1.0
    window_s: float = 30.0

    # Pool bounds and device budget
    cpu_min: int = 1
    cpu_max: int = 6
    gpu_min: int = 0
    gpu_max: int = 3
    gpu_device_budget: int = 1
    init_cpu: int = 3
    init_gpu: int = 1

    # Service model (per-pod finite-concurrency server)
    base_service_s: float = 0.0816
    cpu_concurrency: int = 2
    gpu_concurrency: int = 8
    cpu_contention_exp: float = 0.9
    gpu_contention_exp: float = 0.35

    # Pod cold-start delays (seconds)
    cpu_startup_s: float = 5.0
    gpu_startup_s: float = 10.0

    # Node capacity and per-pod utilization constants
    node_millicores: float = 16000.0
    node_mem_bytes: float = 32.0 * 2**30
    cpu_pod_idle_millicores: float = 715.0
    cpu_pod_busy_millicores: float = 1062.0
    cpu_pod_mem_bytes: float = 540e6
    gpu_pod_idle_millicores: float = 42.0
    gpu_pod_busy_millicores: float = 72.0
    gpu_pod_mem_bytes: float = 825e6
    memory_pods: int = 3
    memory_pod_millicores: float = 3.0
    memory_pod_mem_bytes: float = 3.0 * 2**20

    # Traffic patterns
    users_min: int = 5
    users_max: int = 50
    hold_s: float = 0.5
    periodic_period_s: float = 120.0
    spike_at_s: float = 100.0
    spike_len_s: float = 30.0
    random_redraw_s: float = 15.0

    # Observation normalization caps
    latency_cap_s: float = 10.0
    throughput_cap_rps: float = 100.0

    # Reward weights
    reward_alpha: float = 1.0
    reward_beta: float = 0.5
    reward_gamma: float = 0.25
    reward_delta: float = 0.0

    # PPO hyperparameters
    ppo_lr: float = 3e-4
    ppo_clip: float = 0.2
    ppo_discount: float = 0.99
    ppo_gae_lambda: float = 0.95
    ppo_epochs: int = 4
    ppo_minibatch: int = 64
    ppo_entropy_coef: float = 0.01
    ppo_value_coef: float = 0.5
    ppo_update_every_episodes: int = 1
    hidden1: int = 256
    # second layer trimmed below 256 to keep the model inside its ~137k
    # parameter budget (see agent.param_count)
    hidden2: int = 250

    # Training schedule
    episodes: int = 100
    eval_every: int = 20
    moving_avg_window: int = 10

    # HPA baseline
    hpa_target_cpu_util: float = 0.5
    hpa_min_replicas: int = 1
    hpa_max_replicas: int = 6
    hpa_sync_period_s: float = 15.0
    hpa_stabilization_down_s: float = 300.0
    hpa_tolerance: float = 0.1

    # Fixed baselines
    fixed_cpu_replicas: int = 3
    fixed_gpu_replicas: int = 1

    # Output
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.cpu_min > self.cpu_max:
            raise ConfigError("cpu_min exceeds cpu_max")
        if self.gpu_min > self.gpu_max:
            raise ConfigError("gpu_min exceeds gpu_max")
        if self.users_min < 0 or self.users_min > self.users_max:
            raise ConfigError("users_min must satisfy 0 <= users_min <= users_max")
        if self.hpa_min_replicas > self.hpa_max_replicas:
            raise ConfigError("hpa_min_replicas exceeds hpa_max_replicas")
        if self.episode_s <= 0 or self.control_interval_s <= 0:
            raise ConfigError("episode_s and control_interval_s must be positive")

    @property
    def steps_per_episode(self) -> int:
        return int(round(self.episode_s / self.control_interval_s))

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)

    def to_text(self) -> str:
        """Serialize as the flat key = value format (diff-friendly)."""
        lines = ["# kisim experiment configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"invalid value for config key {key!r}: {raw!r}") from exc


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse `key = value` lines; '#' starts a comment; unknown keys are fatal."""
    cfg = base or ExperimentConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key!r}")
        updates[key] = _parse_value(key, raw)
    values = dataclasses.asdict(cfg)
    values.update(updates)
    return ExperimentConfig(**values)


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), base=base)


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply --set key=value overrides on top of a config."""
    values = dataclasses.asdict(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key!r}")
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)
