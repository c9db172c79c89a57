import threading

import numpy as np
import pytest

from dlgmoe.core.exceptions import ContractError
from dlgmoe.tensor import tensor_ops as ops
from dlgmoe.tensor.tensor_model import Tape, Tensor, backward, current_tape, no_grad
from tests.utils.gradcheck import assert_gradients_match


class TestTape:
    def test_sum_gives_ones(self) -> None:
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            tape.backward(ops.sum_all(x), [x])
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_twice_input(self) -> None:
        data = np.array([[1.0, -2.0], [0.5, 3.0]])
        x = Tensor(data, requires_grad=True)
        with Tape() as tape:
            tape.backward(ops.sum_all(ops.mul(x, x)), [x])
        np.testing.assert_array_equal(x.grad, 2 * data)

    def test_shared_subexpression_accumulates(self) -> None:
        data = np.array([1.0, 2.0, -1.0])
        x = Tensor(data, requires_grad=True)
        with Tape() as tape:
            y = ops.add(ops.mul(x, x), ops.scale(x, 3.0))
            tape.backward(ops.sum_all(y), [x])
        np.testing.assert_allclose(x.grad, 2 * data + 3.0)

    def test_non_participating_leaf_gets_zeros(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            tape.backward(ops.sum_all(x), [x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_non_scalar_loss_rejected(self) -> None:
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = ops.scale(x, 2.0)
            with pytest.raises(ContractError):
                tape.backward(y, [x])

    def test_entries_are_topologically_ordered(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            ops.sum_all(ops.mul(ops.scale(x, 2.0), x))
        seen = {id(x)}
        for entry in tape.entries:
            assert all(id(t) in seen or not t.requires_grad for t in entry.inputs)
            seen.add(id(entry.output))

    def test_two_layer_ffn(self, rng: np.random.Generator) -> None:
        x = Tensor(rng.normal(size=(3, 4)))
        w1, b1 = Tensor(rng.normal(size=(4, 6)), requires_grad=True), Tensor(
            rng.normal(size=6), requires_grad=True
        )
        w2, b2 = Tensor(rng.normal(size=(6, 2)), requires_grad=True), Tensor(
            rng.normal(size=2), requires_grad=True
        )

        def loss() -> Tensor:
            hidden = ops.swish(ops.add(ops.matmul(x, w1), b1))
            out = ops.add(ops.matmul(hidden, w2), b2)
            return ops.mean_all(ops.mul(out, out))

        assert_gradients_match(loss, [w1, b1, w2, b2])


class TestInferenceMode:
    def test_nothing_recorded_without_tape(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ops.scale(x, 2.0)
        assert current_tape() is None
        assert not y.requires_grad
        assert y.is_leaf

    def test_no_grad_suspends_active_tape(self) -> None:
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                ops.scale(x, 2.0)
            assert len(tape) == 0
            ops.scale(x, 2.0)
            assert len(tape) == 1

    def test_backward_without_tape_zero_fills(self) -> None:
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(ops.sum_all(x), [x])
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_tape_is_not_shared_across_threads(self) -> None:
        seen: list[object] = []
        with Tape():
            thread = threading.Thread(target=lambda: seen.append(current_tape()))
            thread.start()
            thread.join()
        assert seen == [None]


class TestTensor:
    def test_item_needs_single_value(self) -> None:
        assert Tensor(3.5).item() == 3.5
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_data_is_copied_to_float64(self) -> None:
        source = np.array([1, 2, 3])
        t = Tensor(source)
        source[0] = 99
        assert t.data.dtype == np.float64
        assert t.data[0] == 1.0
