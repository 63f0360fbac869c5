from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


QUERY_KINDS = ("rel_pos_h", "rel_pos_v", "quadrant", "nearest", "count_shape", "color_of")


class EnvConfig(BaseModel):
    """Scene/query generator settings."""
    model_config = ConfigDict(extra="forbid")

    grid_size: int = Field(8, ge=2)
    min_objects: int = Field(3, ge=2)
    max_objects: int = Field(6, ge=2)
    kinds: List[str] = Field(default_factory=lambda: list(QUERY_KINDS))
    # Probability that the correct option is laid out at position 0.
    answer_position_bias: float = Field(0.95, ge=0.0, le=1.0)
    negation_rate: float = Field(0.2, ge=0.0, le=1.0)
    max_attempts: int = Field(200, ge=1)
    # Corpus replay: sample (scene, query) records from a gen-corpus JSONL.
    corpus_path: Optional[str] = None

    @field_validator("kinds")
    @classmethod
    def _known_kinds(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one query kind is required")
        unknown = sorted(set(value) - set(QUERY_KINDS))
        if unknown:
            raise ValueError(f"unknown query kinds: {unknown}")
        return value

    @model_validator(mode="after")
    def _object_range(self) -> "EnvConfig":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must be <= max_objects")
        if self.max_objects > self.grid_size ** 2:
            raise ValueError("max_objects exceeds grid_size**2 distinct cells")
        return self


class PoolConfig(BaseModel):
    """Operation-pool lifecycle settings."""
    model_config = ConfigDict(extra="forbid")

    K: int = Field(3, ge=1)
    M: int = Field(12, ge=1)
    E: int = Field(100, ge=1)
    tau: float = Field(0.75, gt=0.0, le=1.0)
    gamma: float = Field(0.5, ge=0.0)
    p_f: float = Field(0.2, ge=0.0, le=1.0)
    probe_size: int = Field(256, ge=1)
    weight_floor: float = Field(0.05, ge=0.0)
    initial_active: List[str] = Field(default_factory=lambda: ["hflip", "option_reverse"])
    discover_candidates: bool = True
    discovery_verify_samples: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _bounds(self) -> "PoolConfig":
        if self.K > self.M:
            raise ValueError("K must be <= M")
        if len(self.initial_active) > self.K:
            raise ValueError("initial_active holds more operations than K")
        return self


class PolicyConfig(BaseModel):
    """Policy architecture and initialization."""
    model_config = ConfigDict(extra="forbid")

    hidden_units: int = Field(0, ge=0)
    bias_strength: float = Field(3.0, ge=0.0)
    init_scale: float = Field(0.05, ge=0.0)
    format_logit: float = Field(0.0)


class TrainConfig(BaseModel):
    """Full run configuration; every field defaults so ``{}`` is a valid document."""
    model_config = ConfigDict(extra="forbid")

    total_steps: int = Field(5000, ge=0)
    group_size: int = Field(8, ge=2)
    lam: float = Field(0.3, ge=0.0)
    beta: float = Field(0.04, ge=0.0)
    lr: float = Field(1e-2, gt=0.0)
    seed: int = 0
    # Dual completions add their own accuracy/format policy gradient (skipped when lam == 0).
    dual_gradient: bool = True
    pool_enabled: bool = True
    checkpoint_every: int = Field(1000, ge=1)
    log_every: int = Field(500, ge=1)
    pool: PoolConfig = Field(default_factory=PoolConfig)
    env: EnvConfig = Field(default_factory=EnvConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)

    @field_validator("group_size")
    @classmethod
    def _even_group(cls, value: int) -> int:
        if value % 2 != 0:
            raise ValueError("group_size must be even so G/2 dual completions exist")
        return value

    @field_validator("lam", "beta", "lr")
    @classmethod
    def _finite(cls, value: float) -> float:
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("must be finite")
        return value
