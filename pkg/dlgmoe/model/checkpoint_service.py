"""
JSON checkpoint container.

    {"format": "dlgmoe-checkpoint", "version": 1, "config": {...}, "step": n,
     "params": {name: {"shape": [...], "data": base64(<f8 row-major)}}}

Parameters are written in registration order, so identical models produce
identical bytes.
"""

from __future__ import annotations

import base64
import logging
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ValidationError

from dlgmoe.core.exceptions import CheckpointError
from dlgmoe.model.model_params import ModelParams, init_params
from dlgmoe.model.model_schema import DlgMoeConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dlgmoe-checkpoint"
CHECKPOINT_VERSION = 1


class EncodedArray(BaseModel):
    shape: list[int]
    data: str

    @classmethod
    def encode(cls, array: np.ndarray) -> "EncodedArray":
        raw = np.ascontiguousarray(array, dtype="<f8").tobytes()
        return cls(shape=list(array.shape), data=base64.b64encode(raw).decode("ascii"))

    def decode(self) -> np.ndarray:
        raw = base64.b64decode(self.data)
        expected = int(np.prod(self.shape)) * 8
        if len(raw) != expected:
            raise CheckpointError(f"Encoded array holds {len(raw)} bytes, expected {expected}")
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(self.shape)


class CheckpointFile(BaseModel):
    format: Literal["dlgmoe-checkpoint"] = CHECKPOINT_FORMAT
    version: int = CHECKPOINT_VERSION
    config: DlgMoeConfig
    step: int = 0
    params: dict[str, EncodedArray]


def dump_checkpoint(params: ModelParams, step: int = 0) -> str:
    container = CheckpointFile(
        config=params.config,
        step=step,
        params={name: EncodedArray.encode(t.data) for name, t in params.named_parameters()},
    )
    return container.model_dump_json()


def save_checkpoint(params: ModelParams, path: Path, step: int = 0) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_checkpoint(params, step))
    logger.info(f"Saved checkpoint at step {step} to {path}")
    return path


def parse_checkpoint(payload: str) -> tuple[ModelParams, int]:
    try:
        container = CheckpointFile.model_validate_json(payload)
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint: {e}")
    if container.version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {container.version}")
    params = init_params(container.config)
    params.store.load_arrays({name: enc.decode() for name, enc in container.params.items()})
    return params, container.step


def load_checkpoint(path: Path) -> tuple[ModelParams, int]:
    """Rebuild the model from a checkpoint; returns the params and the saved step."""
    try:
        payload = path.read_text()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    params, step = parse_checkpoint(payload)
    logger.info(f"Loaded checkpoint {path} (step {step}, checksum {params.store.checksum()[:12]})")
    return params, step

