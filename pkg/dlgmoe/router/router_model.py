from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ContractError, DimensionError
from dlgmoe.tensor.tensor_model import Tensor


class RoutingSource(str, Enum):
    ROUTER = "router"
    OVERRIDE = "override"


@dataclass
class SlrParams:
    """LID and ASR heads of the shared language router.

    One instance is referenced by every DLG-MoE layer; updating it is seen
    everywhere.
    """

    w_lid: Tensor  # d x (L+1), column 0 is the CTC blank
    b_lid: Tensor  # L+1
    w_asr: Tensor  # d x V
    b_asr: Tensor  # V

    def __post_init__(self) -> None:
        d = self.w_lid.shape[0]
        if self.w_asr.shape[0] != d:
            raise DimensionError("SlrParams", self.w_lid.shape, self.w_asr.shape)
        if self.b_lid.shape != (self.w_lid.shape[1],) or self.b_asr.shape != (
            self.w_asr.shape[1],
        ):
            raise DimensionError("SlrParams", self.b_lid.shape, self.b_asr.shape)
        if self.n_languages < 1:
            raise ContractError("SlrParams needs at least one language column")
        if self.vocab_size <= self.n_languages:
            raise ContractError("SlrParams needs vocab_size > n_languages")

    @property
    def d_model(self) -> int:
        return self.w_lid.shape[0]

    @property
    def n_languages(self) -> int:
        return self.w_lid.shape[1] - 1

    @property
    def vocab_size(self) -> int:
        return self.w_asr.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "w_lid": self.w_lid,
            "b_lid": self.b_lid,
            "w_asr": self.w_asr,
            "b_asr": self.b_asr,
        }


@dataclass(frozen=True)
class RoutingTable:
    """Hard per-frame language assignment, shape T x 1."""

    lang_ids: NDArray[np.int64]
    source: RoutingSource = RoutingSource.ROUTER
    override_lang: int | None = None
    n_languages: int = field(default=2)

    def __post_init__(self) -> None:
        ids = np.asarray(self.lang_ids, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "lang_ids", ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n_languages):
            raise ContractError(
                f"Routing table holds language ids outside [0, {self.n_languages})"
            )
        if (self.source == RoutingSource.OVERRIDE) != (self.override_lang is not None):
            raise ContractError("override_lang is set exactly when source is override")

    def __len__(self) -> int:
        return int(self.lang_ids.size)

    def frames_for(self, lang: int) -> NDArray[np.int64]:
        return np.flatnonzero(self.lang_ids == lang).astype(np.int64)

    def as_column(self) -> NDArray[np.int64]:
        return self.lang_ids.reshape(-1, 1)

    @property
    def source_label(self) -> str:
        if self.source == RoutingSource.OVERRIDE:
            return f"override({self.override_lang})"
        return self.source.value
