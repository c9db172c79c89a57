"""
Synthetic corpus generation.

Each token owns a fixed template vector: a per-language centre scaled by
``language_separation`` plus a token-specific offset. A frame is its
token's template plus ``noise_std`` Gaussian noise, so both language and
token identity are recoverable from single frames. Every token lasts at
least two frames and adjacent tokens differ, which keeps both the ASR and
the LID label sequences CTC-alignable.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ContractError
from dlgmoe.ctc.ctc_model import CtcLabelSeq
from dlgmoe.data.data_model import CS_CLASS, Batch, Dataset, Utterance, mono_class
from dlgmoe.data.data_schema import SynthSpec
from dlgmoe.tensor.tensor_model import FloatArray

logger = logging.getLogger(__name__)


def lid_labels_from_asr(
    y_asr: CtcLabelSeq, vocab_ranges: Sequence[tuple[int, int]]
) -> CtcLabelSeq:
    """Map every token to its language; LID ids are language index + 1 (0 is blank).

    Repeats are kept: ``[zh, zh, en]`` stays three labels.
    """
    lid: list[int] = []
    for token in y_asr.labels:
        matches = [i for i, (lo, hi) in enumerate(vocab_ranges) if lo <= token <= hi]
        if len(matches) != 1:
            raise ContractError(f"Token {token} belongs to {len(matches)} language ranges")
        lid.append(matches[0] + 1)
    return CtcLabelSeq.of(lid)


def _split(total: int, low: int, high: int, rng: np.random.Generator) -> list[int]:
    """Split ``total`` (at least ``low``) into parts in [low, high]; needs high >= 2 * low."""
    parts: list[int] = []
    remaining = total
    while remaining > 0:
        if remaining <= high or remaining < 2 * low:
            parts.append(remaining)
            break
        part = int(rng.integers(low, min(high, remaining - low) + 1))
        parts.append(part)
        remaining -= part
    return parts


def make_templates(spec: SynthSpec, rng: np.random.Generator) -> FloatArray:
    """V x d_in template bank; row 0 (blank) is unused and left at zero."""
    centres = rng.normal(size=(spec.n_languages, spec.d_in))
    templates = np.zeros((spec.vocab_size, spec.d_in))
    for lang, (lo, hi) in enumerate(spec.vocab_ranges()):
        for token in range(lo, hi + 1):
            templates[token] = spec.language_separation * centres[lang] + rng.normal(size=spec.d_in)
    return templates


def _segments(spec: SynthSpec, code_switch: bool, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(language, n_frames) runs making up one utterance."""
    first = int(rng.integers(spec.n_languages))
    if not code_switch:
        return [(first, int(rng.integers(spec.t_min, spec.t_max + 1)))]
    n_frames = int(rng.integers(max(spec.t_min, 2 * spec.seg_min), spec.t_max + 1))
    head = int(rng.integers(spec.seg_min, min(spec.seg_max, n_frames - spec.seg_min) + 1))
    lengths = [head, *_split(n_frames - head, spec.seg_min, spec.seg_max, rng)]
    segments = []
    lang = first
    for length in lengths:
        segments.append((lang, length))
        others = [other for other in range(spec.n_languages) if other != lang]
        lang = others[int(rng.integers(len(others)))]
    return segments


def _make_utterance(
    utt_id: str,
    spec: SynthSpec,
    templates: FloatArray,
    code_switch: bool,
    rng: np.random.Generator,
) -> Utterance:
    ranges = spec.vocab_ranges()
    tokens: list[int] = []
    frame_tokens: list[int] = []
    frame_langs: list[int] = []
    for lang, seg_frames in _segments(spec, code_switch, rng):
        lo, hi = ranges[lang]
        for duration in _split(seg_frames, spec.token_min_frames, spec.token_max_frames, rng):
            token = int(rng.integers(lo, hi + 1))
            while tokens and token == tokens[-1]:
                token = int(rng.integers(lo, hi + 1))
            tokens.append(token)
            frame_tokens.extend([token] * duration)
            frame_langs.extend([lang] * duration)

    n_frames = len(frame_tokens)
    feats = templates[frame_tokens] + spec.noise_std * rng.normal(size=(n_frames, spec.d_in))
    y_asr = CtcLabelSeq.of(tokens)
    true_frame_lang: NDArray[np.int64] = np.asarray(frame_langs, dtype=np.int64)
    language_class = (
        CS_CLASS
        if np.unique(true_frame_lang).size > 1
        else mono_class(spec.language_names[int(true_frame_lang[0])])
    )
    return Utterance(
        utt_id=utt_id,
        feats=feats,
        y_asr=y_asr,
        y_lid=lid_labels_from_asr(y_asr, ranges),
        true_frame_lang=true_frame_lang,
        language_class=language_class,
    )


def generate(spec: SynthSpec) -> Dataset:
    """Deterministic corpus for ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    templates = make_templates(spec, rng)
    utterances = [
        _make_utterance(f"utt{i:05d}", spec, templates, bool(rng.random() < spec.cs_ratio), rng)
        for i in range(spec.n_utts)
    ]
    n_cs = sum(u.is_cs for u in utterances)
    logger.info(f"Generated {len(utterances)} utterances ({n_cs} code-switched) with seed {spec.seed}")
    return Dataset(spec=spec, utterances=utterances)


def make_batches(
    utterances: Sequence[Utterance],
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> list[Batch]:
    """Group utterances into zero-padded batches; ``rng`` shuffles the order first."""
    if batch_size < 1:
        raise ContractError("batch_size must be at least 1")
    order = np.arange(len(utterances))
    if rng is not None:
        order = rng.permutation(order)
    batches = []
    for start in range(0, len(order), batch_size):
        chosen = [utterances[int(i)] for i in order[start : start + batch_size]]
        t_max = max(u.n_frames for u in chosen)
        d_in = chosen[0].feats.shape[1]
        feats = np.zeros((len(chosen), t_max, d_in))
        for row, utt in enumerate(chosen):
            feats[row, : utt.n_frames] = utt.feats
        batches.append(
            Batch(
                utt_ids=[u.utt_id for u in chosen],
                feats=feats,
                lengths=np.asarray([u.n_frames for u in chosen], dtype=np.int64),
                y_asr=[u.y_asr for u in chosen],
                y_lid=[u.y_lid for u in chosen],
                true_frame_lang=[u.true_frame_lang for u in chosen],
            )
        )
    return batches
