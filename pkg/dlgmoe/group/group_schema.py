from typing import Literal

from pydantic import BaseModel, Field, model_validator
from typing_extensions import Self

from dlgmoe.core.exceptions import ConfigError


class KPolicy(BaseModel):
    """How many experts each frame activates: a fixed k, or k drawn per training step."""

    mode: Literal["fixed", "dynamic"] = "fixed"
    k: int = Field(default=1, ge=1)
    k_min: int = Field(default=1, ge=1)
    k_max: int = Field(default=1, ge=1)
    rng_seed: int = 0

    @model_validator(mode="after")
    def _validate_bounds(self) -> Self:
        if self.mode == "dynamic" and self.k_min > self.k_max:
            raise ValueError("k_min must not exceed k_max")
        return self

    @classmethod
    def fixed(cls, k: int) -> "KPolicy":
        return cls(mode="fixed", k=k, k_min=k, k_max=k)

    @classmethod
    def dynamic(cls, k_min: int, k_max: int, rng_seed: int = 0) -> "KPolicy":
        return cls(mode="dynamic", k=k_max, k_min=k_min, k_max=k_max, rng_seed=rng_seed)

    @property
    def bounds(self) -> tuple[int, int]:
        if self.mode == "fixed":
            return self.k, self.k
        return self.k_min, self.k_max

    def check_against(self, n_experts: int) -> None:
        low, high = self.bounds
        if not 1 <= low <= high <= n_experts:
            raise ConfigError(
                f"k policy bounds [{low}, {high}] invalid for {n_experts} experts per group"
            )


class ExpertStats(BaseModel):
    layer: int
    language: int | None
    expert_counts: list[int]
    k: int
