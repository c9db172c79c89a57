"""
Chunked streaming inference.

A chunk's frames attend to every cached frame plus each other, which is the
chunk-causal mask of the full forward restricted to that chunk's rows. The
depthwise convolution continues from the cached K-1 frames, so streamed
outputs match ``encoder_forward(..., chunk_size=c)`` frame for frame.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from typing import BinaryIO

import numpy as np

from dlgmoe.core.exceptions import ContractError
from dlgmoe.ctc.ctc_service import collapse_path
from dlgmoe.model.encoder_service import encode_chunk
from dlgmoe.model.loss_service import ctc_log_probs
from dlgmoe.model.model_params import ModelParams
from dlgmoe.streaming.streaming_model import ChunkState, StepResult
from dlgmoe.streaming.streaming_schema import StreamRecord
from dlgmoe.tensor.tensor_model import FloatArray, Tensor, no_grad
from dlgmoe.tensor.tensor_ops import concat_frames

logger = logging.getLogger(__name__)


def stream_step(
    state: ChunkState,
    chunk_feats: Tensor,
    params: ModelParams,
    k: int | None = None,
    override: int | None = None,
) -> StepResult:
    """Consume one chunk; ``state`` is left untouched and a successor is returned."""
    state.check_against(params)
    if chunk_feats.ndim != 2 or chunk_feats.shape[0] < 1:
        raise ContractError(f"A chunk needs at least one frame, got shape {chunk_feats.shape}")

    with no_grad():
        enc, caches = encode_chunk(
            chunk_feats, params, state.caches, state.frames_consumed, k=k, override=override
        )
        log_probs = ctc_log_probs(enc.h_final, params)

    best_path = state.best_path + [int(c) for c in np.argmax(log_probs.data, axis=-1)]
    routing = [
        history + [table.lang_ids]
        for history, table in zip(state.routing, enc.routing_tables, strict=True)
    ]
    new_state = ChunkState(
        caches=caches,
        frames_consumed=state.frames_consumed + chunk_feats.shape[0],
        routing=routing,
        best_path=best_path,
        attention_scores=state.attention_scores + enc.attention_scores,
        n_chunks=state.n_chunks + 1,
    )
    return StepResult(
        state=new_state,
        h_final=enc.h_final,
        routing=enc.routing_tables,
        partial_hyp=collapse_path(best_path),
        attention_scores=enc.attention_scores,
    )


class StreamingSession:
    """Owns the state of one stream; feed chunks in order, then finalize."""

    def __init__(
        self,
        params: ModelParams,
        k: int | None = None,
        override: int | None = None,
    ) -> None:
        if not params.config.causal:
            raise ContractError("Streaming needs a model built with causal convolution")
        self.params = params
        self.k = k
        self.override = override
        self.state = ChunkState.initial(params)
        self._outputs: list[Tensor] = []

    def feed(self, chunk: FloatArray | Tensor) -> StreamRecord:
        feats = chunk if isinstance(chunk, Tensor) else Tensor(chunk)
        result = stream_step(self.state, feats, self.params, self.k, self.override)
        self.state = result.state
        self._outputs.append(result.h_final)
        record = StreamRecord(
            chunk_idx=self.state.n_chunks - 1,
            frames=feats.shape[0],
            partial_hyp=result.partial_hyp,
            lang_ids=result.routing[0].lang_ids.tolist() if result.routing else [],
            attention_scores=result.attention_scores,
        )
        logger.debug(f"Chunk {record.chunk_idx}: {record.frames} frames, hyp {record.partial_hyp}")
        return record

    def feed_all(self, feats: FloatArray, chunk_frames: int) -> list[StreamRecord]:
        if chunk_frames < 1:
            raise ContractError("chunk_frames must be at least 1")
        return [
            self.feed(feats[start : start + chunk_frames])
            for start in range(0, feats.shape[0], chunk_frames)
        ]

    def h_final(self) -> Tensor:
        if not self._outputs:
            raise ContractError("No chunk has been fed yet")
        return concat_frames(self._outputs)

    def finalize(self) -> list[int]:
        """The hypothesis over everything consumed so far."""
        return collapse_path(self.state.best_path)


def read_feature_chunks(
    stream: BinaryIO, d_in: int, chunk_frames: int
) -> Iterator[FloatArray]:
    """Yield chunk_frames x d_in blocks of little-endian float64 from a file or pipe."""
    if chunk_frames < 1 or d_in < 1:
        raise ContractError("chunk_frames and d_in must be positive")
    frame_bytes = d_in * 8
    want = chunk_frames * frame_bytes
    buffer = b""
    while True:
        data = stream.read(want - len(buffer))
        if not data:
            break
        buffer += data
        if len(buffer) == want:
            yield np.frombuffer(buffer, dtype="<f8").astype(np.float64).reshape(chunk_frames, d_in)
            buffer = b""
    if buffer:
        if len(buffer) % frame_bytes:
            raise ContractError(f"Input ends with a partial frame ({len(buffer)} trailing bytes)")
        yield np.frombuffer(buffer, dtype="<f8").astype(np.float64).reshape(-1, d_in)
