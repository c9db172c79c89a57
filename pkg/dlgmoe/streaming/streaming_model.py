from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ContractError
from dlgmoe.model.encoder_service import LayerCache
from dlgmoe.model.model_params import ModelParams
from dlgmoe.router.router_model import RoutingTable
from dlgmoe.tensor.tensor_model import Tensor


@dataclass
class ChunkState:
    """Everything one stream carries between chunks. Not shareable across streams."""

    caches: list[LayerCache]
    frames_consumed: int = 0
    routing: list[list[NDArray[np.int64]]] = field(default_factory=list)  # per MoE layer
    best_path: list[int] = field(default_factory=list)
    attention_scores: int = 0
    n_chunks: int = 0

    @classmethod
    def initial(cls, params: ModelParams) -> ChunkState:
        config = params.config
        return cls(
            caches=[LayerCache.empty(config) for _ in params.layers],
            routing=[[] for _ in range(config.n_moe_layers)],
        )

    def check_against(self, params: ModelParams) -> None:
        if len(self.caches) != len(params.layers):
            raise ContractError(
                f"State holds {len(self.caches)} layer caches, model has {len(params.layers)} layers"
            )
        if len(self.routing) != params.config.n_moe_layers:
            raise ContractError("State routing history does not match the model's MoE layers")
        for cache in self.caches:
            if cache.n_frames != self.frames_consumed or cache.keys.shape[1] != params.config.d_model:
                raise ContractError("Layer cache does not match the frames consumed")

    def routing_ids(self, moe_layer: int = 0) -> NDArray[np.int64]:
        parts = self.routing[moe_layer]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


@dataclass
class StepResult:
    state: ChunkState
    h_final: Tensor
    routing: list[RoutingTable]
    partial_hyp: list[int]
    attention_scores: int
