import itertools
import math

import numpy as np
import pytest

from dlgmoe.core.exceptions import AlignmentInfeasibleError, ContractError
from dlgmoe.ctc.ctc_model import CtcLabelSeq
from dlgmoe.ctc.ctc_service import (
    collapse_path,
    ctc_feasible,
    ctc_greedy_decode,
    ctc_loss,
    is_infeasible,
)
from dlgmoe.tensor import tensor_ops as ops
from dlgmoe.tensor.tensor_model import Tape, Tensor
from tests.utils.gradcheck import assert_gradients_match


def _log_probs(rng: np.random.Generator, n_frames: int, n_classes: int) -> np.ndarray:
    logits = rng.normal(scale=2.0, size=(n_frames, n_classes))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def _brute_force_nll(lp: np.ndarray, labels: tuple[int, ...]) -> float:
    """Sum every length-T path whose collapse equals ``labels``."""
    n_frames, n_classes = lp.shape
    total = 0.0
    for path in itertools.product(range(n_classes), repeat=n_frames):
        merged = [symbol for symbol, _ in itertools.groupby(path)]
        if tuple(s for s in merged if s != 0) == labels:
            total += float(np.exp(lp[np.arange(n_frames), list(path)].sum()))
    return -float(np.log(total))


class TestLabelSeq:
    def test_blank_rejected(self) -> None:
        with pytest.raises(ContractError):
            CtcLabelSeq.of([1, 0, 2])

    def test_min_frames_counts_repeats(self) -> None:
        assert CtcLabelSeq.of([1, 2, 3]).min_frames == 3
        assert CtcLabelSeq.of([1, 1, 2, 2]).min_frames == 6
        assert CtcLabelSeq().min_frames == 0

    def test_feasibility(self) -> None:
        assert ctc_feasible(3, CtcLabelSeq.of([1, 1]))
        assert not ctc_feasible(2, CtcLabelSeq.of([1, 1]))


class TestCtcLoss:
    def test_matches_brute_force(self) -> None:
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 200:
            n_frames = int(rng.integers(1, 7))
            n_classes = int(rng.integers(2, 5))
            n_labels = int(rng.integers(0, 4))
            labels = tuple(int(v) for v in rng.integers(1, n_classes, size=n_labels))
            seq = CtcLabelSeq(labels)
            if not ctc_feasible(n_frames, seq):
                continue
            lp = _log_probs(rng, n_frames, n_classes)
            loss = ctc_loss(Tensor(lp), seq)
            assert abs(loss.item() - _brute_force_nll(lp, labels)) < 1e-9
            checked += 1

    def test_single_frame_uniform(self) -> None:
        lp = np.full((1, 3), -math.log(3))
        loss = ctc_loss(Tensor(lp), CtcLabelSeq.of([1]))
        assert loss.item() == pytest.approx(math.log(3), abs=1e-12)

    def test_tight_alignment_has_single_path(self, rng: np.random.Generator) -> None:
        lp = _log_probs(rng, 3, 3)
        loss = ctc_loss(Tensor(lp), CtcLabelSeq.of([1, 1]))
        assert loss.item() == pytest.approx(-(lp[0, 1] + lp[1, 0] + lp[2, 1]), rel=1e-12)

    def test_empty_labels_is_all_blank(self, rng: np.random.Generator) -> None:
        lp = _log_probs(rng, 4, 3)
        loss = ctc_loss(Tensor(lp), CtcLabelSeq())
        assert loss.item() == pytest.approx(-lp[:, 0].sum(), rel=1e-12)

    def test_infeasible_is_tagged_inf(self, rng: np.random.Generator) -> None:
        loss = ctc_loss(Tensor(_log_probs(rng, 2, 3)), CtcLabelSeq.of([1, 1]))
        assert np.isinf(loss.item())
        assert is_infeasible(loss)

    def test_infeasible_strict_raises(self, rng: np.random.Generator) -> None:
        with pytest.raises(AlignmentInfeasibleError):
            ctc_loss(Tensor(_log_probs(rng, 2, 3)), CtcLabelSeq.of([1, 1]), strict=True)

    def test_label_outside_vocab(self, rng: np.random.Generator) -> None:
        with pytest.raises(ContractError):
            ctc_loss(Tensor(_log_probs(rng, 4, 3)), CtcLabelSeq.of([3]))

    def test_nan_input_rejected(self) -> None:
        lp = np.full((3, 3), -1.0)
        lp[1, 2] = np.nan
        with pytest.raises(ContractError):
            ctc_loss(Tensor(lp), CtcLabelSeq.of([1]))

    def test_gradient_matches_finite_differences(self, rng: np.random.Generator) -> None:
        logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True, name="logits")
        labels = CtcLabelSeq.of([2, 2, 3])

        def loss() -> Tensor:
            return ctc_loss(ops.log_softmax(logits), labels)

        assert_gradients_match(loss, [logits], rtol=1e-5)

    def test_gradient_is_negative_occupancy(self, rng: np.random.Generator) -> None:
        # Every frame's state posteriors sum to one.
        lp = Tensor(_log_probs(rng, 5, 3), requires_grad=True)
        with Tape() as tape:
            tape.backward(ctc_loss(lp, CtcLabelSeq.of([1, 2])), [lp])
        assert lp.grad is not None
        np.testing.assert_allclose(lp.grad.sum(axis=1), -np.ones(5), atol=1e-12)


class TestAgainstTorch:
    def test_value_and_logit_gradient(self) -> None:
        torch = pytest.importorskip("torch")
        rng = np.random.default_rng(5)
        for n_frames, n_classes, labels in [(8, 5, [1, 2, 2, 4]), (5, 3, [1]), (6, 4, [3, 1, 3])]:
            raw = rng.normal(size=(n_frames, n_classes))

            logits = Tensor(raw, requires_grad=True)
            with Tape() as tape:
                ours = ctc_loss(ops.log_softmax(logits), CtcLabelSeq.of(labels))
                tape.backward(ours, [logits])

            t_logits = torch.tensor(raw, dtype=torch.float64, requires_grad=True)
            t_lp = torch.log_softmax(t_logits, dim=-1).unsqueeze(1)
            theirs = torch.nn.functional.ctc_loss(
                t_lp,
                torch.tensor([labels], dtype=torch.long),
                torch.tensor([n_frames], dtype=torch.long),
                torch.tensor([len(labels)], dtype=torch.long),
                blank=0,
                reduction="sum",
            )
            theirs.backward()

            assert ours.item() == pytest.approx(float(theirs.item()), rel=1e-9)
            np.testing.assert_allclose(logits.grad, t_logits.grad.numpy(), rtol=1e-6, atol=1e-10)


class TestGreedyDecode:
    def test_collapse_and_drop_blanks(self) -> None:
        assert collapse_path([0, 1, 1, 0, 1, 2, 2, 0]) == [1, 1, 2]

    def test_argmax_path(self) -> None:
        path = [0, 3, 3, 0, 2]
        lp = np.full((5, 4), -5.0)
        lp[np.arange(5), path] = -0.1
        assert ctc_greedy_decode(Tensor(lp)) == [3, 2]
        assert ctc_greedy_decode(lp) == [3, 2]

    def test_empty_input(self) -> None:
        assert ctc_greedy_decode(np.zeros((0, 3))) == []
