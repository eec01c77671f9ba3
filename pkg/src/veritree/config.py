"""Application configuration: TOML file, strict validation, model/sandbox wiring."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .evolution import ModelRegistry, RoundConfig
from .inference import InferenceConfig
from .models import (
    ChatCompletionsClient,
    ConstantReward,
    HttpPolicy,
    HttpReward,
    ScriptedPolicy,
    ScriptOracleReward,
)
from .sandbox import LocalSandbox, ResourceLimits, WorkerPoolSandbox
from .tree import PPM_AUGMENTED, TERMINAL_GUIDED, GenerationConfig
from .verify import SandboxVerifier, ScriptedVerifier


class ConfigError(ValueError):
    """Configuration failed validation (unknown keys fail fast)."""


@dataclass
class SandboxSettings:
    mode: str = "local"  # local | worker-pool
    python_bin: str | None = None
    worker_cmd: list[str] = field(default_factory=list)
    pool_size: int | None = None
    timeout_ms: int = 10_000
    memory_mb: int = 512
    scratch_dir: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("local", "worker-pool"):
            raise ConfigError(f"sandbox.mode must be local or worker-pool, got {self.mode!r}")
        if self.mode == "worker-pool" and not self.worker_cmd:
            raise ConfigError("sandbox.worker_cmd required for worker-pool mode")

    def limits(self) -> ResourceLimits:
        return ResourceLimits(timeout_ms=self.timeout_ms, memory_mb=self.memory_mb)

    def build(self):
        if self.mode == "worker-pool":
            return WorkerPoolSandbox(self.worker_cmd, pool_size=self.pool_size,
                                     limits=self.limits())
        return LocalSandbox(python_bin=self.python_bin, scratch_dir=self.scratch_dir,
                            limits=self.limits())


@dataclass
class EndpointSettings:
    kind: str = "none"  # none | http | scripted | constant | oracle
    base_url: str = ""
    model: str = ""
    api_key_env: str = "VERITREE_API_KEY"
    script_path: str = ""
    constant: float = 0.0
    max_inflight: int = 8
    max_retries: int = 3
    timeout_s: float = 60.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "http", "scripted", "constant", "oracle"):
            raise ConfigError(f"unknown endpoint kind {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise ConfigError("http endpoint requires base_url")
        if self.kind == "scripted" and not self.script_path:
            raise ConfigError("scripted endpoint requires script_path")

    def client(self) -> ChatCompletionsClient:
        return ChatCompletionsClient(
            base_url=self.base_url,
            model=self.model,
            api_key_env=self.api_key_env,
            timeout_s=self.timeout_s,
            max_retries=self.max_retries,
            max_inflight=self.max_inflight,
        )


@dataclass
class AppConfig:
    log_level: str = "info"
    out_dir: str = "out"
    workers: int = 1
    sandbox: SandboxSettings = field(default_factory=SandboxSettings)
    policy: EndpointSettings = field(default_factory=EndpointSettings)
    reward: EndpointSettings = field(default_factory=EndpointSettings)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    rounds: dict[int, RoundConfig] = field(default_factory=dict)

    def build_policy(self):
        if self.policy.kind == "http":
            return HttpPolicy(self.policy.client())
        if self.policy.kind == "scripted":
            return ScriptedPolicy.load(self.policy.script_path)
        raise ConfigError(f"policy kind {self.policy.kind!r} cannot be instantiated")

    def build_reward(self, policy=None):
        if self.reward.kind == "none":
            return None
        if self.reward.kind == "http":
            return HttpReward(self.reward.client())
        if self.reward.kind == "constant":
            return ConstantReward(self.reward.constant)
        if self.reward.kind == "oracle":
            if not isinstance(policy, ScriptedPolicy):
                raise ConfigError("oracle reward requires a scripted policy")
            return ScriptOracleReward(policy)
        if self.reward.kind == "scripted":
            return ScriptOracleReward(ScriptedPolicy.load(self.reward.script_path))
        raise ConfigError(f"reward kind {self.reward.kind!r} cannot be instantiated")

    def build_verifier(self, scripted: bool = False):
        if scripted:
            return ScriptedVerifier()
        return SandboxVerifier(self.sandbox.build(), self.sandbox.limits())

    def registry_for_round(self, round_config: RoundConfig) -> ModelRegistry:
        """Register the configured endpoints under the round's model refs
        (between rounds, real runs repoint the config at stronger endpoints)."""
        registry = ModelRegistry()
        policy = self.build_policy()
        registry.register_policy(round_config.policy_ref, policy)
        if round_config.reward_ref:
            reward = self.build_reward(policy)
            if reward is None:
                raise ConfigError("round requires a reward model but none is configured")
            registry.register_reward(round_config.reward_ref, reward)
        return registry


def _build_dataclass(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a table")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    coerced = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            hint = str(f.type)
            if hint.startswith("tuple"):
                coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _build_round(index_key: str, data: dict) -> RoundConfig:
    try:
        index = int(index_key)
    except ValueError as exc:
        raise ConfigError(f"rounds.{index_key}: round keys must be integers") from exc
    data = dict(data)
    data.setdefault("round_index", index)
    if data["round_index"] != index:
        raise ConfigError(f"rounds.{index_key}: round_index mismatch")
    if "annotation_mode" not in data:
        data["annotation_mode"] = PPM_AUGMENTED if data.get("reward_ref") else TERMINAL_GUIDED
    return _build_dataclass(RoundConfig, data, f"rounds.{index_key}")


def load_config(path: str | Path) -> AppConfig:
    """Parse and validate a TOML config; unknown keys anywhere are an error."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML ({exc})") from exc

    known_top = {"log_level", "out_dir", "workers", "sandbox", "policy", "reward",
                 "generation", "inference", "rounds"}
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")

    config = AppConfig(
        log_level=raw.get("log_level", "info"),
        out_dir=raw.get("out_dir", "out"),
        workers=int(raw.get("workers", 1)),
        sandbox=_build_dataclass(SandboxSettings, raw.get("sandbox", {}), "sandbox"),
        policy=_build_dataclass(EndpointSettings, raw.get("policy", {}), "policy"),
        reward=_build_dataclass(EndpointSettings, raw.get("reward", {}), "reward"),
        generation=_build_dataclass(GenerationConfig, raw.get("generation", {}), "generation"),
        inference=_build_dataclass(InferenceConfig, raw.get("inference", {}), "inference"),
    )
    for key, data in raw.get("rounds", {}).items():
        round_config = _build_round(key, data)
        config.rounds[round_config.round_index] = round_config
    if config.workers < 1:
        raise ConfigError("workers must be >= 1")
    return config
