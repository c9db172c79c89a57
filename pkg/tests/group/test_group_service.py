from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from dlgmoe.core.exceptions import ConfigError, ContractError, DimensionError
from dlgmoe.group import group_service
from dlgmoe.group.group_model import DispatchPlan, ExpertGroup, ExpertParams
from dlgmoe.group.group_schema import KPolicy
from dlgmoe.group.group_service import (
    combine,
    dispatch,
    expert_forward,
    group_forward,
    group_forward_uniform,
    make_k_rng,
    sample_k,
    top_k_mask,
)
from dlgmoe.router.router_model import RoutingTable
from dlgmoe.router.router_service import override_routing_table
from dlgmoe.tensor import tensor_ops as ops
from dlgmoe.tensor.tensor_model import Tape, Tensor
from tests.utils.gradcheck import assert_gradients_match


def _group(rng: np.random.Generator, d: int = 4, d_ffn: int = 6, n: int = 3) -> ExpertGroup:
    experts = [
        ExpertParams(
            w1=Tensor(rng.normal(scale=0.5, size=(d, d_ffn)), requires_grad=True, name=f"e{i}.w1"),
            b1=Tensor(rng.normal(scale=0.1, size=d_ffn), requires_grad=True, name=f"e{i}.b1"),
            w2=Tensor(rng.normal(scale=0.5, size=(d_ffn, d)), requires_grad=True, name=f"e{i}.w2"),
            b2=Tensor(rng.normal(scale=0.1, size=d), requires_grad=True, name=f"e{i}.b2"),
        )
        for i in range(n)
    ]
    router = Tensor(rng.normal(size=(d, n)), requires_grad=True, name="unsup_router")
    return ExpertGroup(experts, router, language=0)


def _identity(x: Tensor, expert: ExpertParams, activation: str = "swish") -> Tensor:
    return x


def _leaves(grp: ExpertGroup) -> list[Tensor]:
    return list(grp.tensors().values())


# ===================================================================
# 1. Dispatch and combine
# ===================================================================


class TestDispatchCombine:
    def test_round_trip_is_bit_exact(self) -> None:
        rng = np.random.default_rng(3)
        for _ in range(500):
            n_frames = int(rng.integers(1, 12))
            n_languages = int(rng.integers(1, 4))
            table = RoutingTable(rng.integers(0, n_languages, size=n_frames), n_languages=n_languages)
            h = Tensor(rng.normal(size=(n_frames, 3)))
            plan, parts = dispatch(h, table)
            np.testing.assert_array_equal(combine(parts, plan).data, h.data)

    def test_plan_partitions_frames(self) -> None:
        table = RoutingTable(np.array([1, 0, 1, 1, 0]), n_languages=2)
        plan, parts = dispatch(Tensor(np.zeros((5, 2))), table)
        assert [idx.tolist() for idx in plan.index_lists] == [[1, 4], [0, 2, 3]]
        assert plan.counts() == [2, 3]
        assert [p.shape for p in parts] == [(2, 2), (3, 2)]

    def test_empty_group_is_allowed(self) -> None:
        table = override_routing_table(4, 1, 2)
        h = Tensor(np.arange(8.0).reshape(4, 2))
        plan, parts = dispatch(h, table)
        assert parts[0].shape == (0, 2)
        np.testing.assert_array_equal(combine(parts, plan).data, h.data)

    def test_table_length_must_match(self) -> None:
        with pytest.raises(ContractError):
            dispatch(Tensor(np.zeros((3, 2))), RoutingTable(np.array([0, 1]), n_languages=2))

    def test_plan_rejects_overlap(self) -> None:
        with pytest.raises(ContractError):
            DispatchPlan((np.array([0, 1]), np.array([1, 2])), 3)

    def test_combine_rejects_wrong_rows(self) -> None:
        table = RoutingTable(np.array([0, 1, 1]), n_languages=2)
        plan, _ = dispatch(Tensor(np.zeros((3, 2))), table)
        with pytest.raises(ContractError):
            combine([Tensor(np.zeros((2, 2))), Tensor(np.zeros((1, 2)))], plan)


# ===================================================================
# 2. Gating
# ===================================================================


class TestTopK:
    def test_selects_largest(self) -> None:
        mask = top_k_mask(np.array([[0.1, 0.9, 0.5], [2.0, -1.0, 0.0]]), 2)
        assert mask.tolist() == [[False, True, True], [True, False, True]]

    def test_ties_go_to_lowest_index(self) -> None:
        mask = top_k_mask(np.zeros((1, 4)), 2)
        assert mask.tolist() == [[True, True, False, False]]


class TestGroupForward:
    def test_distant_logits_keep_k_positive_gates(self, rng: np.random.Generator) -> None:
        grp = _group(rng)
        grp.unsup_router.data[...] = 0.0
        grp.unsup_router.data[0] = [1000.0, 0.0, -1000.0]
        result = group_forward(Tensor([[1.0, 0.0, 0.0, 0.0]]), grp, k=2)
        assert ((result.gates > 0).sum(axis=1) == 2).all()
        assert result.gates[0, 2] == 0.0
        np.testing.assert_allclose(result.gates.sum(axis=1), 1.0, atol=1e-12)

    def test_identity_experts_k1_exact(self, rng: np.random.Generator) -> None:
        h = Tensor(rng.normal(size=(7, 4)))
        with patch.object(group_service, "expert_forward", _identity):
            result = group_forward(h, _group(rng), k=1)
        np.testing.assert_array_equal(result.output.data, h.data)

    @pytest.mark.parametrize("k", [2, 3])
    def test_identity_experts_gates_sum_to_one(self, rng: np.random.Generator, k: int) -> None:
        h = Tensor(rng.normal(size=(7, 4)))
        with patch.object(group_service, "expert_forward", _identity):
            result = group_forward(h, _group(rng), k=k)
        np.testing.assert_allclose(result.output.data, h.data, rtol=0, atol=1e-12)
        np.testing.assert_allclose(result.gates.sum(axis=1), 1.0, atol=1e-12)
        assert ((result.gates > 0).sum(axis=1) == k).all()

    def test_matches_explicit_mixture(self, rng: np.random.Generator) -> None:
        grp = _group(rng)
        h = Tensor(rng.normal(size=(5, 4)))
        result = group_forward(h, grp, k=2)

        logits = h.data @ grp.unsup_router.data
        expected = np.zeros((5, 4))
        for t in range(5):
            top = np.argsort(-logits[t], kind="stable")[:2]
            weights = np.exp(logits[t, top] - logits[t, top].max())
            weights /= weights.sum()
            for w, i in zip(weights, top, strict=True):
                expected[t] += w * expert_forward(Tensor(h.data[t : t + 1]), grp.experts[i]).data[0]
        np.testing.assert_allclose(result.output.data, expected, rtol=1e-12, atol=1e-12)

    def test_expert_counts(self, rng: np.random.Generator) -> None:
        result = group_forward(Tensor(rng.normal(size=(9, 4))), _group(rng), k=2)
        assert result.expert_counts.sum() == 18
        np.testing.assert_array_equal(result.expert_counts, (result.gates > 0).sum(axis=0))

    def test_empty_input(self, rng: np.random.Generator) -> None:
        result = group_forward(Tensor(np.zeros((0, 4))), _group(rng), k=2)
        assert result.output.shape == (0, 4)
        assert result.expert_counts.tolist() == [0, 0, 0]

    @pytest.mark.parametrize("k", [0, 4])
    def test_invalid_k(self, rng: np.random.Generator, k: int) -> None:
        with pytest.raises(ConfigError):
            group_forward(Tensor(rng.normal(size=(2, 4))), _group(rng), k=k)

    def test_gradients_k2(self) -> None:
        # Finite differences need every frame's 2nd and 3rd logits well apart.
        for seed in range(50):
            rng = np.random.default_rng(seed)
            grp = _group(rng)
            h = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="h")
            ordered = np.sort(h.data @ grp.unsup_router.data, axis=1)
            if np.min(ordered[:, 1] - ordered[:, 0]) > 1e-3:
                break
        weights = np.random.default_rng(99).normal(size=(5, 4))

        def loss() -> Tensor:
            out = group_forward(h, grp, k=2).output
            return ops.sum_all(ops.mul(out, Tensor(weights)))

        assert_gradients_match(loss, [h, *_leaves(grp)], rtol=1e-4, atol=1e-8)

    def test_k1_router_gets_no_gradient(self, rng: np.random.Generator) -> None:
        grp = _group(rng)
        h = Tensor(rng.normal(size=(5, 4)))
        with Tape() as tape:
            tape.backward(ops.sum_all(group_forward(h, grp, k=1).output), _leaves(grp))
        np.testing.assert_array_equal(grp.unsup_router.grad, np.zeros((4, 3)))

    def test_unselected_expert_gets_zero_gradient(self, rng: np.random.Generator) -> None:
        grp = _group(rng)
        # Make expert 2 lose on every frame.
        grp.unsup_router.data[:, 2] = 0.0
        h = Tensor(np.abs(rng.normal(size=(4, 4))))
        grp.unsup_router.data[:, :2] = np.abs(grp.unsup_router.data[:, :2]) + 0.1
        with Tape() as tape:
            tape.backward(ops.sum_all(group_forward(h, grp, k=2).output), _leaves(grp))
        for tensor in grp.experts[2].tensors().values():
            assert not np.any(tensor.grad)


class TestUniformGroup:
    def test_mean_of_first_k(self, rng: np.random.Generator) -> None:
        grp = _group(rng)
        h = Tensor(rng.normal(size=(3, 4)))
        result = group_forward_uniform(h, grp, k=2)
        expected = (expert_forward(h, grp.experts[0]).data + expert_forward(h, grp.experts[1]).data) / 2
        np.testing.assert_allclose(result.output.data, expected, rtol=1e-12)
        assert result.expert_counts.tolist() == [3, 3, 0]


# ===================================================================
# 3. k policy
# ===================================================================


class TestKPolicy:
    def test_fixed(self) -> None:
        policy = KPolicy.fixed(2)
        assert policy.bounds == (2, 2)
        assert sample_k(policy, make_k_rng(policy)) == 2

    def test_dynamic_draws_cover_range(self) -> None:
        policy = KPolicy.dynamic(1, 3, rng_seed=4)
        rng = make_k_rng(policy)
        draws = [sample_k(policy, rng) for _ in range(200)]
        assert set(draws) == {1, 2, 3}

    def test_dynamic_draws_are_uniform(self) -> None:
        policy = KPolicy.dynamic(1, 2, rng_seed=0)
        rng = make_k_rng(policy)
        draws = np.array([sample_k(policy, rng) for _ in range(10_000)])
        for k in (1, 2):
            assert 0.47 <= float(np.mean(draws == k)) <= 0.53

    def test_degenerate_dynamic_range(self) -> None:
        policy = KPolicy.dynamic(1, 1, rng_seed=3)
        rng = make_k_rng(policy)
        assert {sample_k(policy, rng) for _ in range(100)} == {1}

    def test_dynamic_is_reproducible(self) -> None:
        policy = KPolicy.dynamic(1, 4, rng_seed=7)
        first, second = make_k_rng(policy), make_k_rng(policy)
        assert [sample_k(policy, first) for _ in range(20)] == [
            sample_k(policy, second) for _ in range(20)
        ]

    def test_inverted_bounds(self) -> None:
        with pytest.raises(ValidationError):
            KPolicy(mode="dynamic", k_min=3, k_max=1)

    def test_bounds_checked_against_group_size(self) -> None:
        KPolicy.dynamic(1, 2).check_against(2)
        with pytest.raises(ConfigError):
            KPolicy.dynamic(1, 3).check_against(2)


class TestExpertGroup:
    def test_router_width_must_match(self, rng: np.random.Generator) -> None:
        grp = _group(rng)
        with pytest.raises(DimensionError):
            ExpertGroup(grp.experts, Tensor(np.zeros((4, 2))))
