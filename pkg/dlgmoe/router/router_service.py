"""
Shared language router (SLR).

The LID head is trained with a CTC inter-loss on h_inter; at routing time the
blank column is dropped and each frame independently takes the argmax of the
remaining language logits. Logits are used directly since their argmax equals
the argmax of the probabilities.
"""

from __future__ import annotations

import logging

import numpy as np
from numpy.typing import ArrayLike

from dlgmoe.core.exceptions import ContractError, DimensionError
from dlgmoe.ctc.ctc_model import CtcLabelSeq
from dlgmoe.ctc.ctc_service import ctc_loss
from dlgmoe.router.router_model import RoutingSource, RoutingTable, SlrParams
from dlgmoe.tensor.tensor_model import Tensor
from dlgmoe.tensor.tensor_ops import add, log_softmax, matmul

logger = logging.getLogger(__name__)


def lid_logits(h: Tensor, params: SlrParams) -> Tensor:
    return add(matmul(h, params.w_lid), params.b_lid)


def asr_logits(h: Tensor, params: SlrParams) -> Tensor:
    return add(matmul(h, params.w_asr), params.b_asr)


def inter_loss(
    h_inter: Tensor, y_asr: CtcLabelSeq, y_lid: CtcLabelSeq, params: SlrParams
) -> Tensor:
    """CTC(LID head, y_lid) + CTC(ASR head, y_asr) on the same h_inter."""
    if len(y_lid) != len(y_asr):
        raise ContractError("y_lid must map y_asr token by token")
    y_lid.check_vocab(params.n_languages + 1)
    y_asr.check_vocab(params.vocab_size)
    lid_term = ctc_loss(log_softmax(lid_logits(h_inter, params)), y_lid)
    asr_term = ctc_loss(log_softmax(asr_logits(h_inter, params)), y_asr)
    return add(lid_term, asr_term)


def make_routing_table(h: Tensor, params: SlrParams) -> RoutingTable:
    """Frame-local greedy routing: drop blank, argmax over languages, lowest index on ties."""
    if h.ndim != 2 or h.shape[1] != params.d_model:
        raise DimensionError("make_routing_table", h.shape, params.w_lid.shape)
    if h.shape[0] < 1:
        raise ContractError("make_routing_table needs at least one frame")
    logits = h.data @ params.w_lid.data + params.b_lid.data
    lang_ids = np.argmax(logits[:, 1:], axis=1)
    return RoutingTable(lang_ids, RoutingSource.ROUTER, n_languages=params.n_languages)


def override_routing_table(n_frames: int, lang: int, n_languages: int) -> RoutingTable:
    if not 0 <= lang < n_languages:
        raise ContractError(f"Override language {lang} outside [0, {n_languages})")
    if n_frames < 0:
        raise ContractError("n_frames must be non-negative")
    return RoutingTable(
        np.full(n_frames, lang, dtype=np.int64),
        RoutingSource.OVERRIDE,
        override_lang=lang,
        n_languages=n_languages,
    )


def routing_accuracy(table: RoutingTable, true_frame_lang: ArrayLike) -> float:
    truth = np.asarray(true_frame_lang, dtype=np.int64).reshape(-1)
    if truth.size != len(table):
        raise DimensionError("routing_accuracy", (len(table),), truth.shape)
    if truth.size == 0:
        return 1.0
    return float(np.mean(table.lang_ids == truth))
