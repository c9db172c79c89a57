"""
CTC loss via the forward-backward recursions, in log space.

log(0) is represented by ``settings.CTC_NEG_INF`` so every value recorded on
the tape stays finite. The loss is -log P(labels | log_probs), summed over
time; batch callers divide by the batch size.
"""

from __future__ import annotations

import logging

import numpy as np

from dlgmoe.core.config import settings
from dlgmoe.core.exceptions import AlignmentInfeasibleError, ContractError, DimensionError
from dlgmoe.ctc.ctc_model import BLANK, CtcLabelSeq
from dlgmoe.tensor.tensor_model import FloatArray, Tensor
from dlgmoe.tensor.tensor_ops import IntArray, record_op

logger = logging.getLogger(__name__)

INFEASIBLE = "ctc_alignment_infeasible"


def ctc_feasible(n_frames: int, labels: CtcLabelSeq) -> bool:
    return n_frames >= labels.min_frames


def is_infeasible(loss: Tensor) -> bool:
    return loss.name == INFEASIBLE


def _extend_with_blanks(labels: CtcLabelSeq) -> tuple[IntArray, np.ndarray]:
    """Interleave blanks; ``skip[s]`` marks states reachable from s-2."""
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels.labels
    skip = np.zeros(ext.size, dtype=bool)
    for s in range(3, ext.size, 2):
        skip[s] = ext[s] != ext[s - 2]
    return ext, skip


def _log_add3(a: FloatArray, b: FloatArray, c: FloatArray) -> FloatArray:
    return np.logaddexp(np.logaddexp(a, b), c)


def _forward_backward(
    emissions: FloatArray, skip: np.ndarray
) -> tuple[FloatArray, FloatArray, float]:
    """Return log alpha (incl. emission at t), log beta (excl. emission at t), log P."""
    neg = settings.CTC_NEG_INF
    n_frames, n_states = emissions.shape

    alpha = np.full((n_frames, n_states), neg)
    alpha[0, 0] = emissions[0, 0]
    if n_states > 1:
        alpha[0, 1] = emissions[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        from_prev = np.concatenate([[neg], prev[:-1]])
        from_skip = np.where(skip, np.concatenate([[neg, neg], prev[:-2]])[:n_states], neg)
        alpha[t] = _log_add3(prev, from_prev, from_skip) + emissions[t]

    beta = np.full((n_frames, n_states), neg)
    beta[-1, -1] = 0.0
    if n_states > 1:
        beta[-1, -2] = 0.0
    skip_ahead = np.concatenate([skip[2:], [False, False]])[:n_states]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + emissions[t + 1]
        to_next = np.concatenate([nxt[1:], [neg]])
        to_skip = np.where(skip_ahead, np.concatenate([nxt[2:], [neg, neg]])[:n_states], neg)
        beta[t] = _log_add3(nxt, to_next, to_skip)

    log_p = alpha[-1, -1]
    if n_states > 1:
        log_p = np.logaddexp(log_p, alpha[-1, -2])
    return alpha, beta, float(log_p)


def ctc_loss(log_probs: Tensor, labels: CtcLabelSeq, strict: bool = False) -> Tensor:
    """-log P_CTC(labels | log_probs) for a T x C matrix of per-frame log-distributions.

    When the labels cannot fit in T frames the result is an infinite constant
    tagged as infeasible (see ``is_infeasible``), or ``AlignmentInfeasibleError``
    with ``strict``.
    """
    if log_probs.ndim != 2:
        raise DimensionError("ctc_loss", log_probs.shape, detail="expected T x C")
    n_frames, n_classes = log_probs.shape
    if n_frames == 0:
        raise DimensionError("ctc_loss", log_probs.shape, detail="no frames")
    if np.isnan(log_probs.data).any():
        raise ContractError("ctc_loss: log_probs contain NaN")
    labels.check_vocab(n_classes)

    if not ctc_feasible(n_frames, labels):
        if strict:
            raise AlignmentInfeasibleError(n_frames, labels.min_frames)
        logger.warning(
            f"CTC alignment infeasible: {len(labels)} labels need "
            f"{labels.min_frames} frames, got {n_frames}"
        )
        infeasible = Tensor(np.array(np.inf))
        infeasible.name = INFEASIBLE
        return infeasible

    ext, skip = _extend_with_blanks(labels)
    lp = log_probs.data
    emissions = lp[:, ext]
    alpha, beta, log_p = _forward_backward(emissions, skip)

    occupancy = np.exp(alpha + beta - log_p)  # T x S state posteriors
    grad_lp = np.zeros_like(lp)
    np.add.at(grad_lp.T, ext, -occupancy.T)

    def backward_fn(g: FloatArray) -> tuple[FloatArray]:
        return (grad_lp * float(g),)

    return record_op("ctc_loss", np.array(-log_p), (log_probs,), backward_fn)


def ctc_greedy_decode(log_probs: Tensor | FloatArray) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if data.shape[0] == 0:
        return []
    best = np.argmax(data, axis=-1)
    return collapse_path([int(c) for c in best])


def collapse_path(path: list[int]) -> list[int]:
    decoded: list[int] = []
    previous = None
    for symbol in path:
        if symbol != previous and symbol != BLANK:
            decoded.append(symbol)
        previous = symbol
    return decoded
