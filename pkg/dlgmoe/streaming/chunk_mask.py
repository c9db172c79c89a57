import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ContractError


def chunk_mask(t_total: int, chunk_size: int) -> NDArray[np.bool_]:
    """T x T mask: frame t sees every frame in its own chunk and all earlier chunks."""
    if chunk_size < 1:
        raise ContractError("chunk_size must be at least 1")
    if t_total < 0:
        raise ContractError("t_total must be non-negative")
    chunk_of = np.arange(t_total) // chunk_size
    return chunk_of[None, :] <= chunk_of[:, None]


def full_mask(t_query: int, t_key: int | None = None) -> NDArray[np.bool_]:
    return np.ones((t_query, t_query if t_key is None else t_key), dtype=bool)


def causal_mask(t_total: int) -> NDArray[np.bool_]:
    return np.tril(np.ones((t_total, t_total), dtype=bool))


def ms_to_chunk_frames(chunk_ms: int, frame_shift_ms: int = 10, subsampling: int = 4) -> int:
    """Convert a chunk duration in milliseconds into encoder frames."""
    frames = chunk_ms // frame_shift_ms // subsampling
    if frames < 1:
        raise ContractError(f"{chunk_ms} ms is shorter than one encoder frame")
    return frames
