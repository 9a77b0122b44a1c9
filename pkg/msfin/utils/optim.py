import math
from typing import List, Sequence, Tuple

import numpy as np

from msfin.core.exceptions import ShapeError
from msfin.models.training import TrainConfig
from msfin.tensor import Parameter


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_init at step 0 to lr_final at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = 0.5 * (1.0 + math.cos(math.pi * step / cfg.total_steps))
    # convex combination keeps both endpoints exact
    return cfg.lr_init * w + cfg.lr_final * (1.0 - w)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    exp_avg: np.ndarray,
    exp_avg_sq: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    t: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; returns (param, exp_avg, exp_avg_sq)."""
    if t < 1:
        raise ValueError(f"Adam step counter must be >= 1, got {t}")
    if not (param.shape == grad.shape == exp_avg.shape == exp_avg_sq.shape):
        raise ShapeError(f"Adam shape mismatch: param {param.shape}, grad {grad.shape}, "
                         f"moments {exp_avg.shape}/{exp_avg_sq.shape}")
    dtype = param.dtype.type
    exp_avg = dtype(beta1) * exp_avg + dtype(1 - beta1) * grad
    exp_avg_sq = dtype(beta2) * exp_avg_sq + dtype(1 - beta2) * grad * grad
    m_hat = exp_avg / dtype(1 - beta1 ** t)
    v_hat = exp_avg_sq / dtype(1 - beta2 ** t)
    param = param - dtype(lr) * m_hat / (np.sqrt(v_hat) + dtype(eps))
    return param, exp_avg, exp_avg_sq


class Adam:
    """Adam over named parameters; moments live on the Parameter slots."""

    def __init__(self, params: Sequence[Parameter], cfg: TrainConfig, step_count: int = 0):
        self.params: List[Parameter] = list(params)
        self.cfg = cfg
        self.step_count = step_count

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.step_count += 1
        for p in self.params:
            if p.grad is None:
                continue
            if p.exp_avg is None:
                p.exp_avg = np.zeros_like(p.data)
                p.exp_avg_sq = np.zeros_like(p.data)
            value, p.exp_avg, p.exp_avg_sq = adam_step(
                p.data, p.grad, p.exp_avg, p.exp_avg_sq,
                lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.step_count,
            )
            p.assign(value)
