"""
Attention decoder used only for the L_att training term.

Inputs are ``sos + y`` and targets ``y + eos`` over the
extended vocabulary of V + 2 symbols (sos = V, eos = V + 1).
"""

from __future__ import annotations

import logging

import numpy as np

from dlgmoe.core.exceptions import ContractError, DimensionError
from dlgmoe.ctc.ctc_model import CtcLabelSeq
from dlgmoe.model.encoder_service import feed_forward, multi_head_attention, norm
from dlgmoe.model.model_params import DecoderParams
from dlgmoe.streaming.chunk_mask import causal_mask, full_mask
from dlgmoe.tensor.tensor_model import FloatArray, Tensor
from dlgmoe.tensor.tensor_ops import (
    Activation,
    add,
    constant,
    log_softmax,
    matmul,
    mean_all,
    pick,
    scale,
    sinusoidal_positions,
    take_rows,
)

logger = logging.getLogger(__name__)


def sos_id(vocab_size: int) -> int:
    return vocab_size


def eos_id(vocab_size: int) -> int:
    return vocab_size + 1


def shifted_targets(y_asr: CtcLabelSeq, vocab_size: int) -> tuple[list[int], list[int]]:
    tokens = list(y_asr.labels)
    return [sos_id(vocab_size), *tokens], [*tokens, eos_id(vocab_size)]


def decoder_log_probs(
    inputs: list[int],
    h_final: Tensor,
    dec: DecoderParams,
    n_heads: int,
    activation: Activation = "swish",
) -> Tensor:
    """(U+1) x (V+2) log-distributions for each input position."""
    d = dec.embedding.shape[1]
    n_tokens = len(inputs)
    x = take_rows(dec.embedding, inputs)
    x = add(x, constant(sinusoidal_positions(n_tokens, d)))
    self_mask = causal_mask(n_tokens)
    cross_mask = full_mask(n_tokens, h_final.shape[0])
    for layer in dec.layers:
        q = norm(x, layer.self_attn.norm)
        attn, _, _, _ = multi_head_attention(q, q, layer.self_attn, self_mask, n_heads)
        x = add(x, attn)
        q = norm(x, layer.cross_attn.norm)
        attn, _, _, _ = multi_head_attention(q, h_final, layer.cross_attn, cross_mask, n_heads)
        x = add(x, attn)
        x = add(x, feed_forward(x, layer.ffn, activation))
    logits = add(matmul(norm(x, dec.final_norm), dec.out_w), dec.out_b)
    return log_softmax(logits)


def token_nll(log_probs: Tensor, targets: list[int]) -> FloatArray:
    """Per-position negative log-likelihood values, for inspection."""
    return -log_probs.data[np.arange(len(targets)), targets]


def decoder_loss(
    h_final: Tensor,
    y_asr: CtcLabelSeq,
    dec: DecoderParams,
    n_heads: int,
    activation: Activation = "swish",
) -> Tensor:
    """Mean token-level negative log-likelihood over the shifted targets."""
    if len(y_asr) == 0:
        raise ContractError("decoder_loss needs a non-empty label sequence")
    vocab_size = dec.embedding.shape[0] - 2
    y_asr.check_vocab(vocab_size)
    if h_final.ndim != 2 or h_final.shape[1] != dec.embedding.shape[1]:
        raise DimensionError("decoder_loss", h_final.shape, dec.embedding.shape)
    inputs, targets = shifted_targets(y_asr, vocab_size)
    log_probs = decoder_log_probs(inputs, h_final, dec, n_heads, activation)
    picked = pick(log_probs, np.arange(len(targets)), targets)
    return scale(mean_all(picked), -1.0)
