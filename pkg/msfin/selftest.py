"""Built-in verification suites run by `msfin selftest`; the fast ones run in float64."""
import tempfile
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel

from msfin.core.exceptions import ConfigurationError
from msfin.core.logging import app_logger as logger
from msfin.models.common import ColorSpace, Recipe, Subcommand
from msfin.models.manifest import RunManifest
from msfin.models.network import NetworkConfig
from msfin.nn.blocks import RRCAB, ChannelAttention
from msfin.nn.module import Initializer
from msfin.nn.network import MSFIN
from msfin.services.evaluation_service import evaluation_service
from msfin.services.training_service import training_service
from msfin.tensor import (
    DType,
    Tensor,
    channel_shuffle,
    concat_channels,
    conv2d,
    conv_transpose2d,
    crop,
    global_avg_pool,
    kernels,
    l1_loss,
    leaky_relu,
    mul,
    no_grad,
    pixel_shuffle,
    reflect_pad,
    relu,
    sigmoid,
)
from msfin.utils.gradcheck import DEFAULT_TOLERANCE, gradcheck, projection_loss
from msfin.utils.image import PlanarImage, degrade, load_png, save_png
from msfin.utils.metrics import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, psnr_y, ssim_y

F64 = DType.FLOAT64
TINY_CONFIG = NetworkConfig(channels=6, groups=3, ns=True)
ADJOINT_TOLERANCE = 1e-10
ORACLE_TOLERANCE = 1e-6


class CheckOutcome(BaseModel):
    suite: str
    name: str
    passed: bool
    value: float = 0.0
    detail: str = ""


class SelfTestReport(BaseModel):
    checks: List[CheckOutcome] = []

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> List[CheckOutcome]:
        return [c for c in self.checks if not c.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.model_dump() for c in self.checks],
                            columns=["suite", "name", "passed", "value", "detail"])

    def format_table(self) -> str:
        df = self.to_frame()
        df["passed"] = df["passed"].map({True: "ok", False: "FAIL"})
        body = df.to_string(index=False, formatters={"value": "{:.3e}".format})
        return f"{body}\n{len(self.checks) - len(self.failures)}/{len(self.checks)} checks passed"


def _leaf(rng: np.random.Generator, *shape: int, away_from_zero: float = 0.0) -> Tensor:
    data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.sign(data) * (np.abs(data) + away_from_zero)
    return Tensor(data, requires_grad=True, dtype=F64)


# ----------------------------------------------------------------------------------------
# Gradient checks
# ----------------------------------------------------------------------------------------

GradCase = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor], int]]


def _projected(rng: np.random.Generator, forward: Callable[[], Tensor]) -> Callable[[], Tensor]:
    with no_grad():
        shape = forward().shape
    weights = rng.standard_normal(shape)
    return lambda: projection_loss(forward(), weights)


def _case_conv2d(rng):
    x, w, b = _leaf(rng, 2, 4, 6, 6), _leaf(rng, 6, 4, 3, 3), _leaf(rng, 1, 6, 1, 1)
    return _projected(rng, lambda: conv2d(x, w, b, padding=1)), [x, w, b], 8


def _case_grouped_conv2d(rng):
    x, w, b = _leaf(rng, 1, 6, 7, 7), _leaf(rng, 6, 2, 3, 3), _leaf(rng, 1, 6, 1, 1)
    return _projected(rng, lambda: conv2d(x, w, b, stride=2, padding=1, groups=3)), [x, w, b], 8


def _case_conv_transpose2d(rng):
    x, w, b = _leaf(rng, 1, 3, 4, 4), _leaf(rng, 3, 2, 4, 4), _leaf(rng, 1, 2, 1, 1)
    return _projected(rng, lambda: conv_transpose2d(x, w, b)), [x, w, b], 8


def _case_shuffles(rng):
    x = _leaf(rng, 1, 12, 3, 3)
    return _projected(rng, lambda: pixel_shuffle(channel_shuffle(x, 3), 2)), [x], 8


def _case_concat_pad_crop(rng):
    a, b = _leaf(rng, 1, 2, 5, 6), _leaf(rng, 1, 3, 5, 6)
    return _projected(rng, lambda: crop(reflect_pad(concat_channels([a, b]), 3, 2), 6, 7)), [a, b], 8


def _case_gate(rng):
    x = _leaf(rng, 2, 4, 5, 5)
    return _projected(rng, lambda: mul(x, sigmoid(global_avg_pool(x)))), [x], 8


def _case_rectifiers(rng):
    x = _leaf(rng, 1, 3, 4, 4, away_from_zero=0.1)
    return _projected(rng, lambda: leaky_relu(relu(x) - x * 1.5, 0.2)), [x], 8


def _case_l1(rng):
    pred = _leaf(rng, 2, 3, 4, 4)
    offset = np.sign(rng.standard_normal(pred.shape)) * (0.1 + rng.random(pred.shape))
    target = Tensor(pred.data + offset, dtype=F64)
    return (lambda: l1_loss(pred, target)), [pred], 8


def _case_channel_attention(rng):
    ca = ChannelAttention(6, 4, Initializer(int(rng.integers(1 << 31)), F64))
    x = _leaf(rng, 1, 6, 5, 5)
    wrt = [x, ca.down.weight, ca.up.weight, ca.up.bias]
    return _projected(rng, lambda: ca(x)), wrt, 6


def _case_rrcab(rng):
    block = RRCAB(TINY_CONFIG, Initializer(int(rng.integers(1 << 31)), F64))
    x = _leaf(rng, 1, 6, 8, 8)
    return _projected(rng, lambda: block(x)), [x, block.gc2.weight, block.fuse.weight], 6


def _case_msfin(rng):
    net = MSFIN(TINY_CONFIG, seed=int(rng.integers(1 << 31)), dtype=F64)
    params = dict(net.named_parameters())
    x = Tensor(rng.random((1, 3, 16, 16)), requires_grad=True, dtype=F64)
    wrt = [x, params["head.weight"], params["msfim.level3.blocks.0.gc2.weight"], params["tail.weight"]]
    return _projected(rng, lambda: net(x)), wrt, 4


GRADIENT_CASES: Dict[str, GradCase] = {
    "conv2d": _case_conv2d,
    "grouped_conv2d_stride2": _case_grouped_conv2d,
    "conv_transpose2d": _case_conv_transpose2d,
    "pixel_and_channel_shuffle": _case_shuffles,
    "concat_pad_crop": _case_concat_pad_crop,
    "pool_sigmoid_mul": _case_gate,
    "relu_leaky_relu": _case_rectifiers,
    "l1_loss": _case_l1,
    "channel_attention": _case_channel_attention,
    "rrcab": _case_rrcab,
    "msfin_tiny": _case_msfin,
}


def gradient_suite(seed: int = 0) -> List[CheckOutcome]:
    outcomes = []
    for name, case in GRADIENT_CASES.items():
        rng = np.random.Generator(np.random.PCG64([seed, len(outcomes)]))
        fn, wrt, samples = case(rng)
        result = gradcheck(fn, wrt, rng, samples=samples, name=name)
        outcomes.append(CheckOutcome(
            suite="gradient", name=name, passed=result.passed(DEFAULT_TOLERANCE),
            value=result.max_rel_error, detail=f"{result.checked} coordinates",
        ))
    return outcomes


# ----------------------------------------------------------------------------------------
# Adjoint identities <A x, y> = <x, A^T y>
# ----------------------------------------------------------------------------------------

def _adjoint_outcome(name: str, lhs: float, rhs: float) -> CheckOutcome:
    err = abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0)
    return CheckOutcome(suite="adjoint", name=name, passed=err < ADJOINT_TOLERANCE, value=err)


def adjoint_suite(seed: int = 0) -> List[CheckOutcome]:
    rng = np.random.Generator(np.random.PCG64(seed))
    outcomes = []

    x = rng.standard_normal((2, 6, 9, 9))
    w = rng.standard_normal((6, 2, 3, 3))
    y = rng.standard_normal((2, 6, 5, 5))
    ax = kernels.conv2d_forward(x, w, 2, 1, 3)
    aty = kernels.conv2d_input_grad(y, w, (9, 9), 2, 1, 3)
    outcomes.append(_adjoint_outcome("conv2d_input", float(np.vdot(ax, y)), float(np.vdot(x, aty))))

    wy = kernels.conv2d_weight_grad(x, y, w.shape, 2, 1, 3)
    outcomes.append(_adjoint_outcome("conv2d_weight", float(np.vdot(ax, y)), float(np.vdot(w, wy))))

    xt = rng.standard_normal((1, 4, 5, 5))
    wt = rng.standard_normal((4, 3, 4, 4))
    yt = rng.standard_normal((1, 3, 10, 10))
    lhs = float(np.vdot(kernels.conv_transpose2d_forward(xt, wt, 2, 1), yt))
    rhs = float(np.vdot(xt, kernels.conv2d_forward(yt, wt, 2, 1, 1)))
    outcomes.append(_adjoint_outcome("conv_transpose2d", lhs, rhs))

    xs = rng.standard_normal((1, 8, 3, 4))
    ys = rng.standard_normal((1, 2, 6, 8))
    lhs = float(np.vdot(kernels.pixel_shuffle(xs, 2), ys))
    rhs = float(np.vdot(xs, kernels.pixel_unshuffle(ys, 2)))
    outcomes.append(_adjoint_outcome("pixel_shuffle", lhs, rhs))

    xc = rng.standard_normal((1, 12, 2, 2))
    yc = rng.standard_normal((1, 12, 2, 2))
    lhs = float(np.vdot(kernels.channel_shuffle(xc, 3), yc))
    rhs = float(np.vdot(xc, kernels.channel_shuffle(yc, 4)))
    outcomes.append(_adjoint_outcome("channel_shuffle", lhs, rhs))
    return outcomes


# ----------------------------------------------------------------------------------------
# Shape ladder
# ----------------------------------------------------------------------------------------

def expected_ladder(cfg: NetworkConfig, height: int, width: int) -> Dict[str, Tuple[int, int, int, int]]:
    c = cfg.channels
    full, half, quarter = (1, c, height, width), (1, c, height // 2, width // 2), (1, c, height // 4, width // 4)
    shapes = {"sf": full, "df": full, "L1.out": full, "L2.out": full, "L3.out": full}
    for k in range(1, 6):
        shapes[f"L1.{k}"] = full
        shapes[f"L2.{k}"] = half
        shapes[f"L3.{k}"] = quarter
        shapes[f"L3.{k + 5}"] = half
    return shapes


def shape_ladder_suite(seed: int = 0, size: int = 48) -> List[CheckOutcome]:
    rng = np.random.Generator(np.random.PCG64(seed))
    outcomes = []
    for cfg in (TINY_CONFIG, TINY_CONFIG.model_copy(update={"cic": True, "ns": False})):
        net = MSFIN(cfg, seed=seed, dtype=F64)
        trace: Dict[str, Tensor] = {}
        with no_grad():
            out = net(Tensor(rng.random((1, 3, size, size)), dtype=F64), trace)
        label = "cic" if cfg.cic else "ic-ns"
        for key, shape in expected_ladder(cfg, size, size).items():
            got = trace[key].shape if key in trace else None
            outcomes.append(CheckOutcome(suite="shape_ladder", name=f"{label}:{key}", passed=got == shape,
                                         detail=f"{got} vs {shape}"))
        outcomes.append(CheckOutcome(suite="shape_ladder", name=f"{label}:output",
                                     passed=out.shape == (1, 3, size, size), detail=str(out.shape)))
    return outcomes


# ----------------------------------------------------------------------------------------
# Metric oracles
# ----------------------------------------------------------------------------------------

def brute_force_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM by explicit weighted sums over every window position."""
    coords = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2 * SSIM_SIGMA ** 2))
    g /= g.sum()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    values = []
    for i in range(a.shape[0] - SSIM_WINDOW + 1):
        for j in range(a.shape[1] - SSIM_WINDOW + 1):
            pa = a[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW]
            pb = b[i:i + SSIM_WINDOW, j:j + SSIM_WINDOW]
            mu_a, mu_b = (g * pa).sum(), (g * pb).sum()
            var_a = (g * (pa - mu_a) ** 2).sum()
            var_b = (g * (pb - mu_b) ** 2).sum()
            cov = (g * (pa - mu_a) * (pb - mu_b)).sum()
            values.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


def metric_oracle_suite(seed: int = 0) -> List[CheckOutcome]:
    rng = np.random.Generator(np.random.PCG64(seed))
    hr = rng.random((3, 24, 20))
    sr = np.clip(hr + 0.05 * rng.standard_normal(hr.shape), 0.0, 1.0)
    sr_img, hr_img = PlanarImage(data=sr), PlanarImage(data=hr)

    def y(rgb: np.ndarray) -> np.ndarray:
        return (16.0 + 65.481 * rgb[0] + 128.553 * rgb[1] + 24.966 * rgb[2]) / 255.0

    shave = 2
    ys = y(sr)[shave:-shave, shave:-shave]
    yh = y(hr)[shave:-shave, shave:-shave]
    direct_psnr = 10.0 * np.log10(1.0 / np.mean((ys - yh) ** 2))
    psnr_err = abs(psnr_y(sr_img, hr_img, shave) - direct_psnr)

    ssim_err = abs(ssim_y(sr_img, hr_img, shave) - brute_force_ssim(ys, yh))

    flat = PlanarImage(data=np.full((1, 16, 16), 0.5), space=ColorSpace.Y)
    shifted = PlanarImage(data=np.full((1, 16, 16), 0.6), space=ColorSpace.Y)
    uniform_err = abs(psnr_y(shifted, flat) - 20.0)

    return [
        CheckOutcome(suite="metric_oracle", name="psnr_vs_direct_mse", passed=psnr_err < ORACLE_TOLERANCE,
                     value=psnr_err),
        CheckOutcome(suite="metric_oracle", name="ssim_vs_brute_force", passed=ssim_err < ORACLE_TOLERANCE,
                     value=ssim_err),
        CheckOutcome(suite="metric_oracle", name="psnr_uniform_0.1", passed=uniform_err < ORACLE_TOLERANCE,
                     value=uniform_err),
        CheckOutcome(suite="metric_oracle", name="psnr_identical_is_inf",
                     passed=psnr_y(hr_img, hr_img) == float("inf")),
        CheckOutcome(suite="metric_oracle", name="ssim_identical_is_one",
                     passed=abs(ssim_y(hr_img, hr_img) - 1.0) < 1e-12),
    ]


# ----------------------------------------------------------------------------------------
# One-image overfit (opt-in: runs a full 200-step training)
# ----------------------------------------------------------------------------------------

OVERFIT_MIN_GAIN_DB = 0.3
ENSEMBLE_SLACK_DB = 0.05


def block_card(rng: np.random.Generator, size: int = 64, block: int = 16) -> PlanarImage:
    """Noise-free piecewise-constant RGB image; its sharp edges are what bicubic upsampling loses."""
    cells = rng.random((3, size // block, size // block))
    return PlanarImage(data=np.kron(cells, np.ones((1, block, block))))


def _image_l1(net: MSFIN, lr_up: PlanarImage, hr: PlanarImage) -> float:
    dtype = net.dtype.numpy
    with no_grad():
        return l1_loss(net(Tensor(lr_up.as_batch(dtype))), Tensor(hr.as_batch(dtype))).item()


def overfit_suite(seed: int = 0) -> List[CheckOutcome]:
    """Train the overfit recipe on one image and score it against the bicubic baseline."""
    manifest = RunManifest.resolve(
        Subcommand.TRAIN, overrides={"recipe": Recipe.OVERFIT.value, "seed": str(seed)}
    )
    scale = manifest.network.scale
    rng = np.random.Generator(np.random.PCG64(seed))
    with tempfile.TemporaryDirectory(prefix="msfin-overfit-") as tmp:
        data_dir = Path(tmp) / "hr"
        save_png(block_card(rng), data_dir / "card.png")
        hr = load_png(data_dir / "card.png").mod_crop(scale)
        _, lr_up = degrade(hr, scale)

        baseline = MSFIN(manifest.network.model_copy(update={"zero_tail": True}), seed=seed)
        bicubic = evaluation_service.evaluate_image(baseline, hr, "bicubic", scale, scale)[0].psnr

        net = MSFIN(manifest.network, seed=seed)
        before = _image_l1(net, lr_up, hr)
        training_service.train_loop(net, data_dir, manifest, Path(tmp) / "run")
        after = _image_l1(net, lr_up, hr)
        single = evaluation_service.evaluate_image(net, hr, "single", scale, scale)[0].psnr
        ensemble = evaluation_service.evaluate_image(net, hr, "ensemble", scale, scale, ensemble=True)[0].psnr

    gain, ensemble_delta = single - bicubic, ensemble - single
    return [
        CheckOutcome(suite="overfit", name="loss_halved", passed=after < 0.5 * before, value=after / before,
                     detail=f"L1 {before:.4f} -> {after:.4f}"),
        CheckOutcome(suite="overfit", name="beats_bicubic", passed=gain >= OVERFIT_MIN_GAIN_DB, value=gain,
                     detail=f"PSNR {single:.2f} dB vs bicubic {bicubic:.2f} dB"),
        CheckOutcome(suite="overfit", name="ensemble_not_worse", passed=ensemble_delta >= -ENSEMBLE_SLACK_DB,
                     value=ensemble_delta, detail=f"x8 ensemble {ensemble:.2f} dB"),
    ]


SUITES = {
    "gradient": gradient_suite,
    "adjoint": adjoint_suite,
    "shape_ladder": shape_ladder_suite,
    "metric_oracle": metric_oracle_suite,
}
# Only run when asked for by name.
SLOW_SUITES = {
    "overfit": overfit_suite,
}


def run_selftest(seed: int = 0, suites: Optional[Sequence[str]] = None) -> SelfTestReport:
    """Run the named suites (default: every fast suite) and collect their outcomes."""
    available = {**SUITES, **SLOW_SUITES}
    names = list(suites) if suites else list(SUITES)
    unknown = [name for name in names if name not in available]
    if unknown:
        raise ConfigurationError(f"Unknown self-test suites: {', '.join(unknown)}")
    report = SelfTestReport()
    for name in names:
        outcomes = available[name](seed)
        report.checks.extend(outcomes)
        logger.info("Self-test suite finished", extra={"extra": {
            "suite": name, "checks": len(outcomes), "failures": sum(not o.passed for o in outcomes),
        }})
    for failure in report.failures:
        logger.error(f"Self-test check failed: {failure.suite}/{failure.name} {failure.detail}".strip())
    return report
