"""
Conformer-lite encoder.

Each layer follows the macaron layout: x + 1/2 FFN1, + MHSA, + depthwise
convolution, + 1/2 FFN2, then a final layer norm. In DLG-MoE layers FFN2 is
replaced by the dynamic language group. Every residual branch is pre-normed.

``run_layer`` is shared by the full forward and by streaming: with a
``LayerCache`` it attends over cached keys/values and continues the
convolution from the cached left context.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ConfigError, ContractError, DimensionError
from dlgmoe.group.group_schema import ExpertStats
from dlgmoe.group.group_service import (
    combine,
    dispatch,
    group_forward,
    group_forward_uniform,
)
from dlgmoe.model.model_params import (
    AttentionParams,
    ConvParams,
    EncoderLayerParams,
    FfnParams,
    ModelParams,
    MoeParams,
    NormParams,
)
from dlgmoe.model.model_schema import DlgMoeConfig
from dlgmoe.router.router_model import RoutingTable, SlrParams
from dlgmoe.router.router_service import make_routing_table, override_routing_table
from dlgmoe.streaming.chunk_mask import chunk_mask, full_mask
from dlgmoe.tensor.tensor_model import FloatArray, Tensor
from dlgmoe.tensor.tensor_ops import (
    Activation,
    add,
    concat_cols,
    concat_frames,
    constant,
    depthwise_causal_conv1d,
    ffn_activation,
    glu,
    layer_norm,
    masked_softmax,
    matmul,
    scale,
    sinusoidal_positions,
    slice_cols,
    slice_frames,
    swish,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass
class LayerCache:
    """Streaming state of one encoder layer."""

    keys: FloatArray  # T_past x d, already projected
    values: FloatArray
    conv_context: FloatArray  # (K-1) x d, input frames of the depthwise convolution

    @classmethod
    def empty(cls, config: DlgMoeConfig) -> LayerCache:
        d = config.d_model
        pad = max(config.conv_kernel - 1, 0)
        return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros((pad, d)))

    @property
    def n_frames(self) -> int:
        return int(self.keys.shape[0])


@dataclass
class LayerStep:
    output: Tensor
    cache: LayerCache | None = None
    routing: RoutingTable | None = None
    stats: list[ExpertStats] = field(default_factory=list)
    attention_scores: int = 0


@dataclass
class EncoderOutput:
    h_inter: Tensor
    h_final: Tensor
    routing_tables: list[RoutingTable]
    expert_stats: list[ExpertStats] = field(default_factory=list)
    attention_scores: int = 0
    k: int = 1


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def norm(x: Tensor, p: NormParams) -> Tensor:
    return layer_norm(x, p.gamma, p.beta)


def feed_forward(x: Tensor, p: FfnParams, activation: Activation = "swish") -> Tensor:
    hidden = ffn_activation(add(matmul(norm(x, p.norm), p.w1), p.b1), activation)
    return add(matmul(hidden, p.w2), p.b2)


def multi_head_attention(
    query: Tensor,
    memory: Tensor,
    p: AttentionParams,
    mask: NDArray[np.bool_],
    n_heads: int,
    past: LayerCache | None = None,
) -> tuple[Tensor, FloatArray, FloatArray, int]:
    """Scaled dot-product attention; ``query`` and ``memory`` are already normed.

    Returns the output, the full key/value matrices (cache included) and the
    number of attention scores computed.
    """
    d = query.shape[1]
    head_dim = d // n_heads
    q = add(matmul(query, p.wq), p.bq)
    k = add(matmul(memory, p.wk), p.bk)
    v = add(matmul(memory, p.wv), p.bv)
    if past is not None and past.n_frames:
        k = concat_frames([constant(past.keys), k])
        v = concat_frames([constant(past.values), v])
    if mask.shape != (q.shape[0], k.shape[0]):
        raise DimensionError("multi_head_attention", mask.shape, (q.shape[0], k.shape[0]))

    inv_sqrt = 1.0 / math.sqrt(head_dim)
    heads = []
    for h in range(n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi))), inv_sqrt)
        heads.append(matmul(masked_softmax(scores, mask), slice_cols(v, lo, hi)))
    out = add(matmul(concat_cols(heads), p.wo), p.bo)
    n_scores = n_heads * q.shape[0] * k.shape[0]
    return out, k.data, v.data, n_scores


def conv_module(
    x: Tensor,
    p: ConvParams,
    causal: bool = True,
    left_context: FloatArray | None = None,
) -> tuple[Tensor, FloatArray]:
    """LN -> pointwise + GLU -> depthwise conv -> LN -> swish -> pointwise.

    Returns the output and the last K-1 depthwise inputs for the next chunk.
    """
    kernel, d = p.depthwise.shape
    pad = kernel - 1
    h = glu(add(matmul(norm(x, p.norm), p.pw1), p.pw1_b))
    if causal:
        y = depthwise_causal_conv1d(h, p.depthwise, left_context)
        context = left_context if left_context is not None else np.zeros((pad, d))
        history = np.concatenate([context, h.data], axis=0)
        next_context = history[history.shape[0] - pad :] if pad else np.zeros((0, d))
    else:
        half = pad // 2
        padded = concat_frames([h, constant(np.zeros((half, d)))]) if half else h
        y = slice_frames(depthwise_causal_conv1d(padded, p.depthwise), half, half + h.shape[0])
        next_context = np.zeros((pad, d))
    y = swish(norm(add(y, p.depthwise_b), p.inner_norm))
    return add(matmul(y, p.pw2), p.pw2_b), next_context


def moe_block(
    h_pre: Tensor,
    route_source: Tensor,
    moe: MoeParams,
    slr: SlrParams,
    k: int,
    config: DlgMoeConfig,
    layer_index: int = 0,
    override: int | None = None,
) -> tuple[Tensor, RoutingTable, list[ExpertStats]]:
    """The FFN2 replacement: route, dispatch to language groups, gate experts, combine."""
    n_frames = h_pre.shape[0]
    if override is not None:
        table = override_routing_table(n_frames, override, config.n_languages)
    else:
        table = make_routing_table(route_source, slr)

    if not config.language_routed:
        result = group_forward(h_pre, moe.groups[0], k, config.activation)
        stats = [ExpertStats(layer=layer_index, language=None, expert_counts=result.expert_counts.tolist(), k=k)]
        return result.output, table, stats

    if len(moe.groups) != config.n_languages:
        raise ContractError(f"Expected {config.n_languages} groups, got {len(moe.groups)}")
    forward = group_forward_uniform if config.moe_type == "dlg_uniform" else group_forward
    plan, subs = dispatch(h_pre, table)
    results = [forward(sub, grp, k, config.activation) for sub, grp in zip(subs, moe.groups, strict=True)]
    stats = [
        ExpertStats(layer=layer_index, language=grp.language, expert_counts=r.expert_counts.tolist(), k=k)
        for grp, r in zip(moe.groups, results, strict=True)
    ]
    return combine([r.output for r in results], plan), table, stats


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def run_layer(
    x: Tensor,
    p: EncoderLayerParams,
    mask: NDArray[np.bool_],
    config: DlgMoeConfig,
    *,
    slr: SlrParams | None = None,
    k: int = 1,
    override: int | None = None,
    route_source: Tensor | None = None,
    cache: LayerCache | None = None,
    layer_index: int = 0,
) -> LayerStep:
    layer_input = x
    x = add(x, scale(feed_forward(x, p.ffn1, config.activation), 0.5))
    normed = norm(x, p.mhsa.norm)
    attn, keys, values, n_scores = multi_head_attention(
        normed, normed, p.mhsa, mask, config.n_heads, cache
    )
    x = add(x, attn)

    conv_context = cache.conv_context if cache is not None else None
    next_context = np.zeros((0, config.d_model))
    if p.conv is not None:
        conv_out, next_context = conv_module(x, p.conv, config.causal, conv_context)
        x = add(x, conv_out)

    routing: RoutingTable | None = None
    stats: list[ExpertStats] = []
    if p.moe is not None:
        if slr is None:
            raise ContractError("A DLG-MoE layer needs the shared language router")
        source = layer_input if route_source is None else route_source
        moe_out, routing, stats = moe_block(
            norm(x, p.moe.norm), source, p.moe, slr, k, config, layer_index, override
        )
        x = add(x, scale(moe_out, 0.5))
    elif p.ffn2 is not None:
        x = add(x, scale(feed_forward(x, p.ffn2, config.activation), 0.5))

    out = norm(x, p.final_norm)
    new_cache = LayerCache(keys, values, next_context) if cache is not None else None
    return LayerStep(out, new_cache, routing, stats, n_scores)


def conformer_lite_layer(
    x: Tensor, params: EncoderLayerParams, mask: NDArray[np.bool_], config: DlgMoeConfig
) -> Tensor:
    if params.is_moe:
        raise ContractError("conformer_lite_layer got DLG-MoE layer parameters")
    return run_layer(x, params, mask, config).output


def dlg_moe_layer(
    x: Tensor,
    params: EncoderLayerParams,
    slr: SlrParams,
    k: int,
    mask: NDArray[np.bool_],
    config: DlgMoeConfig,
    override: int | None = None,
    route_source: Tensor | None = None,
) -> tuple[Tensor, RoutingTable]:
    if not params.is_moe:
        raise ContractError("dlg_moe_layer got vanilla layer parameters")
    step = run_layer(
        x, params, mask, config, slr=slr, k=k, override=override, route_source=route_source
    )
    if step.routing is None:
        raise ContractError("DLG-MoE layer produced no routing table")
    return step.output, step.routing


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def _check_inputs(feats: Tensor, config: DlgMoeConfig) -> None:
    if not config.trainable:
        raise ConfigError(
            f"subsampling={config.subsampling} is accounting-only; build the model with 'none'"
        )
    if feats.ndim != 2 or feats.shape[1] != config.d_in:
        raise DimensionError("encoder_forward", feats.shape, (-1, config.d_in))
    if feats.shape[0] < 1:
        raise ContractError("encoder_forward needs at least one frame")


def embed_input(feats: Tensor, params: ModelParams, offset: int = 0) -> Tensor:
    x = add(matmul(feats, params.input_w), params.input_b)
    return add(x, constant(sinusoidal_positions(feats.shape[0], params.config.d_model, offset)))


def encoder_forward(
    feats: Tensor,
    params: ModelParams,
    chunk_size: int | None = None,
    k: int | None = None,
    override: int | None = None,
) -> EncoderOutput:
    """Full-utterance forward; ``chunk_size`` switches from full to chunk-causal attention."""
    config = params.config
    _check_inputs(feats, config)
    k = config.default_k() if k is None else k
    n_frames = feats.shape[0]
    mask = full_mask(n_frames) if chunk_size is None else chunk_mask(n_frames, chunk_size)

    x = embed_input(feats, params)
    total_scores = 0
    for i, layer in enumerate(params.vanilla_layers):
        step = run_layer(x, layer, mask, config, layer_index=i)
        x, total_scores = step.output, total_scores + step.attention_scores
    h_inter = x

    tables: list[RoutingTable] = []
    stats: list[ExpertStats] = []
    for i, layer in enumerate(params.moe_layers):
        step = run_layer(
            x,
            layer,
            mask,
            config,
            slr=params.slr,
            k=k,
            override=override,
            route_source=h_inter if config.route_from == "h_inter" else None,
            layer_index=config.n_vanilla_layers + i,
        )
        x, total_scores = step.output, total_scores + step.attention_scores
        if step.routing is not None:
            tables.append(step.routing)
        stats.extend(step.stats)
    return EncoderOutput(h_inter, x, tables, stats, total_scores, k)


def encode_chunk(
    feats: Tensor,
    params: ModelParams,
    caches: list[LayerCache],
    offset: int,
    k: int | None = None,
    override: int | None = None,
) -> tuple[EncoderOutput, list[LayerCache]]:
    """Run new frames through every layer against cached left context."""
    config = params.config
    _check_inputs(feats, config)
    if not config.causal:
        raise ContractError("Streaming needs a model built with causal convolution")
    if len(caches) != len(params.layers):
        raise ContractError(f"Expected {len(params.layers)} layer caches, got {len(caches)}")
    k = config.default_k() if k is None else k
    n_new = feats.shape[0]

    x = embed_input(feats, params, offset)
    new_caches: list[LayerCache] = []
    tables: list[RoutingTable] = []
    stats: list[ExpertStats] = []
    total_scores = 0
    h_inter = x
    for i, (layer, cache) in enumerate(zip(params.layers, caches, strict=True)):
        if cache.n_frames != offset:
            raise ContractError(f"Layer {i} cache holds {cache.n_frames} frames, offset is {offset}")
        mask = full_mask(n_new, offset + n_new)
        step = run_layer(
            x,
            layer,
            mask,
            config,
            slr=params.slr if layer.is_moe else None,
            k=k,
            override=override,
            route_source=h_inter if layer.is_moe and config.route_from == "h_inter" else None,
            cache=cache,
            layer_index=i,
        )
        x, total_scores = step.output, total_scores + step.attention_scores
        if step.cache is not None:
            new_caches.append(step.cache)
        if step.routing is not None:
            tables.append(step.routing)
        stats.extend(step.stats)
        if i == config.n_vanilla_layers - 1:
            h_inter = x
    return EncoderOutput(h_inter, x, tables, stats, total_scores, k), new_caches
