from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ContractError
from dlgmoe.ctc.ctc_model import CtcLabelSeq
from dlgmoe.data.data_schema import SynthSpec, UtteranceRecord
from dlgmoe.tensor.tensor_model import FloatArray

CS_CLASS = "cs"


def mono_class(language: str) -> str:
    return f"mono-{language}"


@dataclass
class Utterance:
    utt_id: str
    feats: FloatArray  # T x d_in
    y_asr: CtcLabelSeq
    y_lid: CtcLabelSeq  # LID head ids: language index + 1, blank = 0
    true_frame_lang: NDArray[np.int64]
    language_class: str

    def __post_init__(self) -> None:
        if self.feats.ndim != 2 or self.true_frame_lang.shape != (self.feats.shape[0],):
            raise ContractError(f"{self.utt_id}: frame languages do not cover the features")
        if len(self.y_lid) != len(self.y_asr):
            raise ContractError(f"{self.utt_id}: y_lid must map y_asr token by token")

    @property
    def n_frames(self) -> int:
        return int(self.feats.shape[0])

    @property
    def is_cs(self) -> bool:
        return self.language_class == CS_CLASS

    def to_record(self) -> UtteranceRecord:
        return UtteranceRecord(
            utt_id=self.utt_id,
            length=self.n_frames,
            language_class=self.language_class,
            y_asr=list(self.y_asr.labels),
            y_lid=list(self.y_lid.labels),
            true_frame_lang=self.true_frame_lang.tolist(),
        )

    @classmethod
    def from_record(cls, record: UtteranceRecord, feats: FloatArray) -> Utterance:
        return cls(
            utt_id=record.utt_id,
            feats=feats,
            y_asr=CtcLabelSeq.of(record.y_asr),
            y_lid=CtcLabelSeq.of(record.y_lid),
            true_frame_lang=np.asarray(record.true_frame_lang, dtype=np.int64),
            language_class=record.language_class,
        )


@dataclass
class Dataset:
    spec: SynthSpec
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def by_id(self, utt_id: str) -> Utterance:
        for utt in self.utterances:
            if utt.utt_id == utt_id:
                return utt
        raise ContractError(f"Utterance {utt_id} not in dataset")

    def subset(self, language_class: str) -> list[Utterance]:
        return [u for u in self.utterances if u.language_class == language_class]


@dataclass
class Batch:
    """Zero-padded features plus the unpadded labels of each utterance."""

    utt_ids: list[str]
    feats: FloatArray  # B x T_max x d_in
    lengths: NDArray[np.int64]
    y_asr: list[CtcLabelSeq]
    y_lid: list[CtcLabelSeq]
    true_frame_lang: list[NDArray[np.int64]]

    def __len__(self) -> int:
        return len(self.utt_ids)

    def frames(self, i: int) -> FloatArray:
        return self.feats[i, : self.lengths[i]]
