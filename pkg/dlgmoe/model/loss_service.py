"""
Joint objective: L = lambda_ctc * L_ctc + (1 - lambda_ctc) * L_att + lambda_inter * L_inter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from dlgmoe.core.exceptions import AlignmentInfeasibleError
from dlgmoe.ctc.ctc_model import CtcLabelSeq
from dlgmoe.ctc.ctc_service import ctc_feasible, ctc_loss
from dlgmoe.model.decoder_service import decoder_loss
from dlgmoe.model.encoder_service import EncoderOutput
from dlgmoe.model.model_params import ModelParams
from dlgmoe.router.router_service import inter_loss
from dlgmoe.tensor.tensor_model import Tensor
from dlgmoe.tensor.tensor_ops import add, add_n, log_softmax, matmul, scale

logger = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    total: Tensor
    ctc: Tensor
    att: Tensor
    inter: Tensor

    def values(self) -> dict[str, float]:
        return {
            "loss": self.total.item(),
            "ctc": self.ctc.item(),
            "att": self.att.item(),
            "inter": self.inter.item(),
        }


def ctc_log_probs(h_final: Tensor, params: ModelParams) -> Tensor:
    return log_softmax(add(matmul(h_final, params.ctc_w), params.ctc_b))


def check_alignable(n_frames: int, y_asr: CtcLabelSeq, y_lid: CtcLabelSeq) -> None:
    for labels in (y_asr, y_lid):
        if not ctc_feasible(n_frames, labels):
            raise AlignmentInfeasibleError(n_frames, labels.min_frames)


def total_loss(
    enc: EncoderOutput,
    y_asr: CtcLabelSeq,
    y_lid: CtcLabelSeq,
    params: ModelParams,
    lambda_ctc: float | None = None,
    lambda_inter: float | None = None,
) -> LossBreakdown:
    """Weighted sum of the three terms; lambdas default to the model config.

    Terms with weight 0 are left out of the sum so a degenerate weighting
    reproduces a single component exactly.
    """
    config = params.config
    w_ctc = config.lambda_ctc if lambda_ctc is None else lambda_ctc
    w_inter = config.lambda_inter if lambda_inter is None else lambda_inter
    check_alignable(enc.h_final.shape[0], y_asr, y_lid)

    l_ctc = ctc_loss(ctc_log_probs(enc.h_final, params), y_asr, strict=True)
    l_att = decoder_loss(enc.h_final, y_asr, params.decoder, config.n_heads, config.activation)
    l_inter = inter_loss(enc.h_inter, y_asr, y_lid, params.slr)

    terms = [
        scale(term, weight)
        for term, weight in ((l_ctc, w_ctc), (l_att, 1.0 - w_ctc), (l_inter, w_inter))
        if weight != 0.0
    ]
    return LossBreakdown(total=add_n(terms), ctc=l_ctc, att=l_att, inter=l_inter)
