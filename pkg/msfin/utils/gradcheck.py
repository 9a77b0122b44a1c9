"""Central finite-difference checks of tape gradients."""
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from msfin.tensor import Tape, Tensor, mul, no_grad, sum_all

DEFAULT_STEP = 1e-4
REL_FLOOR = 1e-5
DEFAULT_TOLERANCE = 1e-4
# Times the step is divided by 10 when the two one-sided differences disagree.
KINK_RETRIES = 2


class GradCheckResult(BaseModel):
    name: str = ""
    checked: int = 0
    max_rel_error: float = 0.0
    worst: Dict[str, float] = {}

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def projection_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """sum(out * weights): a scalar whose gradient is `weights` itself."""
    return sum_all(mul(out, Tensor(weights)))


def numeric_derivative(
    fn: Callable[[], Tensor],
    flat: np.ndarray,
    pos: int,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    retries: int = KINK_RETRIES,
) -> float:
    """Central difference of fn() along flat[pos].

    When the forward and backward one-sided differences disagree, a ReLU kink lies inside
    [x - step, x + step]; the step is then shrunk and the difference retaken.
    """
    original = flat[pos]
    with no_grad():
        center = fn().item()
        for attempt in range(retries + 1):
            flat[pos] = original + step
            plus = fn().item()
            flat[pos] = original - step
            minus = fn().item()
            flat[pos] = original
            forward = (plus - center) / step
            backward = (center - minus) / step
            if attempt == retries or relative_error(forward, backward) < tolerance:
                break
            step /= 10.0
    flat[pos] = original
    return (plus - minus) / (2 * step)


def gradcheck(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    rng: Optional[np.random.Generator] = None,
    samples: int = 8,
    step: float = DEFAULT_STEP,
    name: str = "",
) -> GradCheckResult:
    """Compare analytic gradients of the scalar fn() with central differences.

    `wrt` are leaf tensors fn reads (with requires_grad set); `samples` coordinates of each are
    drawn with `rng`. Tensors should be float64.
    """
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
    for t in wrt:
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    result = GradCheckResult(name=name)
    for index, (tensor, grad) in enumerate(zip(wrt, analytic)):
        flat = tensor.data.reshape(-1)
        count = min(samples, flat.size)
        for pos in rng.choice(flat.size, size=count, replace=False):
            numeric = numeric_derivative(fn, flat, int(pos), step)
            a = float(grad.reshape(-1)[pos])
            err = relative_error(a, numeric)
            result.checked += 1
            if err >= result.max_rel_error:
                result.max_rel_error = err
                result.worst = {"tensor": float(index), "position": float(pos), "analytic": a, "numeric": numeric}
    for t in wrt:
        t.zero_grad()
    return result
