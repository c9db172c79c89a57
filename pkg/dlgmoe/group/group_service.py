"""
Dynamic language group forward pass.

Frames are dispatched by routing table, each group gates k of its n experts
per frame through its unsupervised router (softmax over the k selected logits only),
and outputs are scattered back into frame order. Selection indices are
constants; gradients reach the router through the gate values.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
from numpy.typing import NDArray

from dlgmoe.core.exceptions import ConfigError, ContractError, DimensionError
from dlgmoe.group.group_model import DispatchPlan, ExpertGroup, ExpertParams, GroupOutput
from dlgmoe.group.group_schema import KPolicy
from dlgmoe.router.router_model import RoutingTable
from dlgmoe.tensor.tensor_model import Tensor
from dlgmoe.tensor.tensor_ops import (
    Activation,
    add,
    add_n,
    ffn_activation,
    masked_softmax,
    matmul,
    mul_rows,
    pick,
    scale,
    scatter_rows,
    take_rows,
)

logger = logging.getLogger(__name__)

# Smallest weight a selected expert can get; keeps exactly k gates positive
GATE_FLOOR = 1e-300


def expert_forward(x: Tensor, expert: ExpertParams, activation: Activation = "swish") -> Tensor:
    hidden = ffn_activation(add(matmul(x, expert.w1), expert.b1), activation)
    return add(matmul(hidden, expert.w2), expert.b2)


def dispatch(h_pre: Tensor, table: RoutingTable) -> tuple[DispatchPlan, list[Tensor]]:
    if h_pre.ndim != 2 or h_pre.shape[0] != len(table):
        raise ContractError(
            f"Routing table covers {len(table)} frames, h_pre has shape {h_pre.shape}"
        )
    index_lists = tuple(table.frames_for(lang) for lang in range(table.n_languages))
    plan = DispatchPlan(index_lists, h_pre.shape[0])
    return plan, [take_rows(h_pre, idx) for idx in index_lists]


def combine(outputs: Sequence[Tensor], plan: DispatchPlan) -> Tensor:
    if len(outputs) != len(plan.index_lists):
        raise ContractError(
            f"combine got {len(outputs)} outputs for {len(plan.index_lists)} groups"
        )
    for out, idx in zip(outputs, plan.index_lists, strict=True):
        if out.shape[0] != idx.size:
            raise ContractError(
                f"Group output has {out.shape[0]} rows, plan expects {idx.size}"
            )
    return scatter_rows(list(outputs), list(plan.index_lists), plan.n_frames)


def top_k_mask(logits: NDArray[np.float64], k: int) -> NDArray[np.bool_]:
    """Mark the k largest logits per row; ties go to the lowest expert index."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def _check_k(k: int, grp: ExpertGroup) -> None:
    if not 1 <= k <= grp.n_experts:
        raise ConfigError(f"k={k} is invalid for a group of {grp.n_experts} experts")


def _empty_output(h_sub: Tensor, grp: ExpertGroup) -> GroupOutput:
    if h_sub.ndim != 2 or h_sub.shape[1] != grp.d_model:
        raise DimensionError("group_forward", h_sub.shape, grp.unsup_router.shape)
    return GroupOutput(
        output=Tensor.zeros(0, grp.d_model),
        gates=np.zeros((0, grp.n_experts)),
        expert_counts=np.zeros(grp.n_experts, dtype=np.int64),
    )


def group_forward(
    h_sub: Tensor, grp: ExpertGroup, k: int, activation: Activation = "swish"
) -> GroupOutput:
    """h_out = sum over the k selected experts of gate_i * E_i(frame)."""
    _check_k(k, grp)
    if h_sub.shape[0] == 0:
        return _empty_output(h_sub, grp)

    logits = matmul(h_sub, grp.unsup_router)
    mask = top_k_mask(logits.data, k)
    gates = masked_softmax(logits, mask, floor=GATE_FLOOR)

    parts: list[Tensor] = []
    rows: list[NDArray[np.int64]] = []
    for i, expert in enumerate(grp.experts):
        selected = np.flatnonzero(mask[:, i])
        if selected.size == 0:
            continue
        expert_out = expert_forward(take_rows(h_sub, selected), expert, activation)
        weight = pick(gates, selected, np.full(selected.size, i))
        parts.append(mul_rows(expert_out, weight))
        rows.append(selected)

    output = scatter_rows(parts, rows, h_sub.shape[0], accumulate=True)
    return GroupOutput(output, gates.data.copy(), mask.sum(axis=0).astype(np.int64))


def group_forward_uniform(
    h_sub: Tensor, grp: ExpertGroup, k: int, activation: Activation = "swish"
) -> GroupOutput:
    """Router-free ablation: the first k experts, each weighted 1/k."""
    _check_k(k, grp)
    if h_sub.shape[0] == 0:
        return _empty_output(h_sub, grp)

    weight = 1.0 / k
    outputs = [
        scale(expert_forward(h_sub, expert, activation), weight) for expert in grp.experts[:k]
    ]
    gates = np.zeros((h_sub.shape[0], grp.n_experts))
    gates[:, :k] = weight
    counts = np.zeros(grp.n_experts, dtype=np.int64)
    counts[:k] = h_sub.shape[0]
    return GroupOutput(add_n(outputs), gates, counts)


def sample_k(policy: KPolicy, rng: np.random.Generator) -> int:
    """Fixed k, or a uniform draw from [k_min, k_max] (once per training step)."""
    if policy.mode == "fixed":
        return policy.k
    return int(rng.integers(policy.k_min, policy.k_max + 1))


def make_k_rng(policy: KPolicy) -> np.random.Generator:
    return np.random.default_rng(policy.rng_seed)
