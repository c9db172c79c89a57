"""
Analytic parameter and FLOP accounting.

Nothing here allocates weights, so full-scale configurations are counted
instantly. Matmuls cost 2*m*k*n; normalisations, activations, bias adds and
the unsupervised router projections are not counted.
"""

from __future__ import annotations

import logging

from pydantic import BaseModel

from dlgmoe.core.exceptions import ConfigError, ContractError
from dlgmoe.model.model_schema import DlgMoeConfig

logger = logging.getLogger(__name__)


class ParamCount(BaseModel):
    """Parameter totals of one configuration.

    ``activated[k]`` is ``total`` minus every expert a frame does not run when
    each MoE layer runs k experts of the routed group. All routers stay counted.
    Moving from k to k + 1 adds ``per_expert * n_moe_layers``.
    """

    total: int
    per_expert: int
    activated: dict[int, int]

    def activated_at(self, k: int) -> int:
        """Activated parameters with k experts per MoE layer per frame."""
        if k not in self.activated:
            raise ConfigError(f"k={k} outside [1, {max(self.activated)}]")
        return self.activated[k]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _subsampled_width(d_in: int) -> int:
    return ((d_in - 1) // 2 - 1) // 2


def front_end_params(config: DlgMoeConfig) -> int:
    d = config.d_model
    if config.subsampling == "none":
        return config.d_in * d + d
    # two 3x3 stride-2 convolutions (1 -> d, d -> d) then a linear over d * F'
    conv1 = 9 * d + d
    conv2 = 9 * d * d + d
    linear = d * _subsampled_width(config.d_in) * d + d
    return conv1 + conv2 + linear


def _norm_params(d: int) -> int:
    return 2 * d


def _ffn_params(d: int, d_ffn: int) -> int:
    return _norm_params(d) + d * d_ffn + d_ffn + d_ffn * d + d


def _attention_params(d: int) -> int:
    return _norm_params(d) + 4 * (d * d + d)


def _conv_params(d: int, kernel: int) -> int:
    if not kernel:
        return 0
    return (
        _norm_params(d)
        + d * 2 * d + 2 * d  # pw1
        + kernel * d + d  # depthwise
        + _norm_params(d)
        + d * d + d  # pw2
    )


def expert_params(config: DlgMoeConfig) -> int:
    d, f = config.d_model, config.d_ffn
    return 2 * d * f + d + f


def _layer_shared_params(config: DlgMoeConfig) -> int:
    """Everything in an encoder layer except FFN2 / the MoE block."""
    d = config.d_model
    return (
        _ffn_params(d, config.d_ffn)
        + _attention_params(d)
        + _conv_params(d, config.conv_kernel)
        + _norm_params(d)
    )


def _moe_block_params(config: DlgMoeConfig) -> int:
    d = config.d_model
    experts = config.experts_in_routed_group
    per_group = d * experts + experts * expert_params(config)
    return _norm_params(d) + config.n_groups * per_group


def _decoder_params(config: DlgMoeConfig) -> int:
    d, v = config.d_model, config.vocab_size + 2
    layer = 2 * _attention_params(d) + _ffn_params(d, config.d_ffn)
    return v * d + config.decoder_layers * layer + _norm_params(d) + d * v + v


def count_params(config: DlgMoeConfig) -> ParamCount:
    """Total parameters, and parameters one frame activates for each k.

    A frame visits one group and k of its experts, so activated(k) keeps the
    routers and k experts per MoE layer.
    """
    d, v, n_lang = config.d_model, config.vocab_size, config.n_languages
    vanilla = config.n_vanilla_layers * (
        _layer_shared_params(config) + _ffn_params(d, config.d_ffn)
    )
    moe = config.n_moe_layers * (_layer_shared_params(config) + _moe_block_params(config))
    slr = d * (n_lang + 1) + (n_lang + 1) + d * v + v
    ctc = d * v + v
    total = front_end_params(config) + vanilla + moe + slr + ctc + _decoder_params(config)

    per_expert = expert_params(config)
    all_experts = config.n_groups * config.experts_in_routed_group
    activated = {
        k: total - config.n_moe_layers * (all_experts - k) * per_expert
        for k in range(1, config.experts_in_routed_group + 1)
    }
    return ParamCount(total=total, per_expert=per_expert, activated=activated)


# ---------------------------------------------------------------------------
# FLOPs
# ---------------------------------------------------------------------------


def encoder_frames(config: DlgMoeConfig, t_frames: int) -> int:
    """Encoder frame count for ``t_frames`` input frames."""
    if t_frames < 1:
        raise ContractError("t_frames must be at least 1")
    if config.subsampling == "none":
        return t_frames
    frames = ((t_frames - 1) // 2 - 1) // 2
    if frames < 1:
        raise ContractError(f"{t_frames} input frames vanish under 4x subsampling")
    return frames


def attended_keys(n_frames: int, chunk_size: int | None = None) -> int:
    """Number of (query, key) pairs under full or chunk-causal attention."""
    if chunk_size is None or chunk_size >= n_frames:
        return n_frames * n_frames
    if chunk_size < 1:
        raise ContractError("chunk_size must be at least 1")
    total = 0
    for start in range(0, n_frames, chunk_size):
        width = min(chunk_size, n_frames - start)
        total += width * (start + width)
    return total


def expert_flops_per_frame(config: DlgMoeConfig) -> int:
    return 2 * 2 * config.d_model * config.d_ffn


def front_end_flops(config: DlgMoeConfig, t_frames: int) -> int:
    d = config.d_model
    if config.subsampling == "none":
        return 2 * t_frames * config.d_in * d
    t1, f1 = (t_frames - 1) // 2, (config.d_in - 1) // 2
    t2, f2 = encoder_frames(config, t_frames), _subsampled_width(config.d_in)
    conv1 = 2 * 9 * t1 * f1 * d
    conv2 = 2 * 9 * d * t2 * f2 * d
    linear = 2 * t2 * (d * f2) * d
    return conv1 + conv2 + linear


def flops_breakdown(
    config: DlgMoeConfig, t_frames: int, k: int, chunk_size: int | None = None
) -> dict[str, int]:
    config.k_policy.check_against(config.experts_in_routed_group)
    if not 1 <= k <= config.experts_in_routed_group:
        raise ConfigError(f"k={k} outside [1, {config.experts_in_routed_group}]")
    t = encoder_frames(config, t_frames)
    d, f = config.d_model, config.d_ffn
    n_layers = config.n_vanilla_layers + config.n_moe_layers

    half_ffn = 2 * t * d * f * 2
    attention = 4 * 2 * t * d * d + 2 * 2 * attended_keys(t, chunk_size) * d
    conv = 0
    if config.conv_kernel:
        conv = 2 * t * d * 2 * d + 2 * t * config.conv_kernel * d + 2 * t * d * d
    return {
        "front_end": front_end_flops(config, t_frames),
        "ffn": n_layers * half_ffn + config.n_vanilla_layers * half_ffn,
        "attention": n_layers * attention,
        "conv": n_layers * conv,
        "experts": config.n_moe_layers * t * k * expert_flops_per_frame(config),
        "language_router": config.n_moe_layers * 2 * t * d * (config.n_languages + 1),
        "ctc_head": 2 * t * d * config.vocab_size,
    }


def estimate_flops(
    config: DlgMoeConfig, t_frames: int, k: int, chunk_size: int | None = None
) -> int:
    """Encoder plus CTC head for ``t_frames`` input frames with k experts per frame."""
    return sum(flops_breakdown(config, t_frames, k, chunk_size).values())
