from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ConfigError, ContractError, DimensionError
from dlgmoe.tensor.tensor_model import Tensor


@dataclass
class ExpertParams:
    """One FFN expert: d -> d_ffn -> d."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return (self.w1.shape, self.b1.shape, self.w2.shape, self.b2.shape)

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class ExpertGroup:
    """Experts serving one language, gated by their own unsupervised router (W_R).

    ``language`` is None for a language-agnostic group (plain sparse MoE).
    """

    experts: list[ExpertParams]
    unsup_router: Tensor  # d x n
    language: int | None = None

    def __post_init__(self) -> None:
        if not self.experts:
            raise ConfigError("An expert group needs at least one expert")
        shapes = self.experts[0].shapes
        if any(e.shapes != shapes for e in self.experts):
            raise ConfigError("All experts in a group must share identical shapes")
        if self.unsup_router.ndim != 2 or self.unsup_router.shape[1] != self.n_experts:
            raise DimensionError("ExpertGroup", self.unsup_router.shape, (shapes[0][0], self.n_experts))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d_model(self) -> int:
        return self.unsup_router.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        named = {"unsup_router": self.unsup_router}
        for i, expert in enumerate(self.experts):
            named.update({f"expert{i}.{k}": v for k, v in expert.tensors().items()})
        return named


@dataclass(frozen=True)
class DispatchPlan:
    """Sorted, disjoint frame index lists per language that cover [0, n_frames)."""

    index_lists: tuple[NDArray[np.int64], ...]
    n_frames: int

    def __post_init__(self) -> None:
        merged = np.concatenate(self.index_lists) if self.index_lists else np.zeros(0)
        if merged.size != self.n_frames or not np.array_equal(
            np.sort(merged), np.arange(self.n_frames)
        ):
            raise ContractError("Dispatch index lists must partition the frames")
        for idx in self.index_lists:
            if idx.size > 1 and np.any(np.diff(idx) <= 0):
                raise ContractError("Dispatch index lists must be sorted")

    def counts(self) -> list[int]:
        return [int(idx.size) for idx in self.index_lists]


@dataclass
class GroupOutput:
    output: Tensor
    gates: NDArray[np.float64]  # S x n, zero where an expert was not selected
    expert_counts: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
