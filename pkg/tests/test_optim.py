import numpy as np
import pytest

from msfin.core.exceptions import ShapeError
from msfin.models.training import TrainConfig
from msfin.tensor import DType, Parameter
from msfin.utils.optim import Adam, adam_step, cosine_lr


@pytest.fixture
def schedule() -> TrainConfig:
    return TrainConfig(total_steps=100)


def test_cosine_endpoints_are_exact(schedule):
    assert cosine_lr(0, schedule) == schedule.lr_init
    assert cosine_lr(100, schedule) == schedule.lr_final
    assert cosine_lr(50, schedule) == pytest.approx(5.3125e-5, rel=1e-12)


def test_cosine_is_monotone(schedule):
    rates = [cosine_lr(t, schedule) for t in range(101)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("step", [-1, 101])
def test_cosine_rejects_steps_outside_schedule(schedule, step):
    with pytest.raises(ValueError):
        cosine_lr(step, schedule)


def _scalar(value: float) -> Parameter:
    return Parameter(np.full((1, 1, 1, 1), value), name="w", dtype=DType.FLOAT64)


def test_first_adam_step_moves_by_lr(schedule):
    p = _scalar(1.0)
    p.grad = np.full((1, 1, 1, 1), 0.5)
    opt = Adam([p], schedule)
    opt.step(1e-3)
    assert opt.step_count == 1
    assert p.data.item() == pytest.approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8), rel=1e-14)
    assert p.exp_avg.item() == pytest.approx(0.05)
    assert p.exp_avg_sq.item() == pytest.approx(0.00025)


def test_zero_gradient_keeps_parameters(schedule):
    p = _scalar(2.0)
    p.grad = np.zeros((1, 1, 1, 1))
    Adam([p], schedule).step(1e-2)
    assert p.data.item() == 2.0


def test_parameters_without_gradient_are_skipped(schedule):
    p = _scalar(3.0)
    opt = Adam([p], schedule)
    opt.step(1e-2)
    assert p.data.item() == 3.0
    assert p.exp_avg is None


def test_resumed_counter_drives_bias_correction(schedule):
    fresh, resumed = _scalar(1.0), _scalar(1.0)
    for p in (fresh, resumed):
        p.grad = np.full((1, 1, 1, 1), 0.5)
    Adam([fresh], schedule).step(1e-3)
    Adam([resumed], schedule, step_count=10).step(1e-3)
    assert resumed.data.item() != fresh.data.item()


def test_zero_grad_clears(schedule):
    p = _scalar(1.0)
    p.grad = np.ones((1, 1, 1, 1))
    Adam([p], schedule).zero_grad()
    assert p.grad is None


def test_adam_step_errors():
    one = np.ones((2, 2))
    with pytest.raises(ValueError):
        adam_step(one, one, one, one, 1e-3, 0.9, 0.999, 1e-8, t=0)
    with pytest.raises(ShapeError):
        adam_step(one, np.ones(3), one, one, 1e-3, 0.9, 0.999, 1e-8, t=1)


def test_float32_parameters_stay_float32(schedule):
    p = Parameter(np.ones((1, 2, 1, 1), dtype=np.float32), name="w")
    p.grad = np.full((1, 2, 1, 1), 0.25, dtype=np.float32)
    Adam([p], schedule).step(1e-3)
    assert p.data.dtype == np.float32
    assert p.exp_avg.dtype == np.float32
