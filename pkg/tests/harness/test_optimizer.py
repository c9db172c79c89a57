import numpy as np
import pytest

from dlgmoe.core.exceptions import ContractError
from dlgmoe.harness.optimizer import Adam, clip_grads, global_grad_norm, warmup_lr
from dlgmoe.tensor.tensor_model import Tensor


def _param(data: list[float], grad: list[float]) -> Tensor:
    p = Tensor(data, requires_grad=True)
    p.grad = np.array(grad)
    return p


class TestWarmupLr:
    def test_peaks_at_base_rate(self) -> None:
        assert warmup_lr(100, 2e-3, 100) == pytest.approx(2e-3)

    def test_linear_ramp(self) -> None:
        assert warmup_lr(1, 2e-3, 100) == pytest.approx(2e-5)
        assert warmup_lr(50, 2e-3, 100) == pytest.approx(1e-3)

    def test_inverse_sqrt_decay(self) -> None:
        assert warmup_lr(400, 2e-3, 100) == pytest.approx(1e-3)

    def test_no_warmup_is_constant(self) -> None:
        assert warmup_lr(1, 2e-3, 0) == 2e-3
        assert warmup_lr(10_000, 2e-3, 0) == 2e-3

    def test_steps_start_at_one(self) -> None:
        with pytest.raises(ContractError):
            warmup_lr(0, 1e-3, 10)


class TestClipping:
    def test_global_norm(self) -> None:
        params = [_param([0.0], [3.0]), _param([0.0, 0.0], [0.0, 4.0]), Tensor([1.0])]
        assert global_grad_norm(params) == 5.0

    def test_clip_scales_down(self) -> None:
        params = [_param([0.0, 0.0], [3.0, 4.0])]
        assert clip_grads(params, 1.0) == 5.0
        np.testing.assert_allclose(params[0].grad, [0.6, 0.8])

    def test_small_gradients_untouched(self) -> None:
        params = [_param([0.0, 0.0], [0.3, 0.4])]
        clip_grads(params, 1.0)
        np.testing.assert_array_equal(params[0].grad, [0.3, 0.4])


class TestAdam:
    def test_zero_lr_leaves_parameters_untouched(self) -> None:
        p = _param([1.0, -2.0], [0.5, 0.5])
        before = p.data.copy()
        optimizer = Adam([p])
        optimizer.step(0.0)
        np.testing.assert_array_equal(p.data, before)
        assert optimizer.t == 1
        assert optimizer.m[0].any()

    def test_first_step_moves_by_lr_against_gradient(self) -> None:
        p = _param([1.0, -2.0, 0.5], [0.3, -4.0, 0.0])
        Adam([p]).step(0.1)
        np.testing.assert_allclose(p.data, [0.9, -1.9, 0.5], rtol=1e-7)

    def test_parameters_without_gradient_are_skipped(self) -> None:
        p = Tensor([1.0], requires_grad=True)
        Adam([p]).step(0.1)
        assert p.data.tolist() == [1.0]
