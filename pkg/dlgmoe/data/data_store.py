"""Directory-backed storage for synthetic corpora."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from dlgmoe.core.exceptions import CheckpointError
from dlgmoe.data.data_model import Dataset, Utterance
from dlgmoe.data.data_schema import SynthSpec, UtteranceRecord
from dlgmoe.tensor.tensor_model import FloatArray

logger = logging.getLogger(__name__)


class DatasetStore:
    """``dataset.json`` (the recipe), ``manifest.jsonl`` and ``feats/<utt_id>.bin``.

    Feature files are row-major little-endian float64 with ``d_in`` columns.
    """

    SPEC_FILE = "dataset.json"
    MANIFEST_FILE = "manifest.jsonl"
    FEATS_DIR = "feats"

    def __init__(self, root: Path) -> None:
        self.root = root

    def _feats_path(self, utt_id: str) -> Path:
        return self.root / self.FEATS_DIR / f"{utt_id}.bin"

    def save(self, dataset: Dataset) -> Path:
        (self.root / self.FEATS_DIR).mkdir(parents=True, exist_ok=True)
        (self.root / self.SPEC_FILE).write_text(dataset.spec.model_dump_json(indent=2))
        with (self.root / self.MANIFEST_FILE).open("w") as manifest:
            for utt in dataset.utterances:
                manifest.write(utt.to_record().model_dump_json() + "\n")
                self._feats_path(utt.utt_id).write_bytes(
                    np.ascontiguousarray(utt.feats, dtype="<f8").tobytes()
                )
        logger.info(f"Saved {len(dataset)} utterances to {self.root}")
        return self.root

    def load_spec(self) -> SynthSpec:
        try:
            return SynthSpec.model_validate_json((self.root / self.SPEC_FILE).read_text())
        except (OSError, ValidationError) as e:
            raise CheckpointError(f"Cannot read dataset recipe in {self.root}: {e}")

    def read_feats(self, utt_id: str, length: int, d_in: int) -> FloatArray:
        path = self._feats_path(utt_id)
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"Cannot read features {path}: {e}")
        if len(raw) != length * d_in * 8:
            raise CheckpointError(
                f"{path} holds {len(raw)} bytes, manifest expects {length} x {d_in} float64"
            )
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(length, d_in)

    def load(self) -> Dataset:
        spec = self.load_spec()
        utterances = []
        try:
            lines = (self.root / self.MANIFEST_FILE).read_text().splitlines()
        except OSError as e:
            raise CheckpointError(f"Cannot read manifest in {self.root}: {e}")
        for line in lines:
            if not line.strip():
                continue
            try:
                record = UtteranceRecord.model_validate_json(line)
            except ValidationError as e:
                raise CheckpointError(f"Bad manifest line in {self.root}: {e}")
            feats = self.read_feats(record.utt_id, record.length, spec.d_in)
            utterances.append(Utterance.from_record(record, feats))
        logger.info(f"Loaded {len(utterances)} utterances from {self.root}")
        return Dataset(spec=spec, utterances=utterances)


def save_dataset(dataset: Dataset, root: Path) -> Path:
    return DatasetStore(root).save(dataset)


def load_dataset(root: Path) -> Dataset:
    return DatasetStore(root).load()
