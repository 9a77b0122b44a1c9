from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from msfin.core.config import settings
from msfin.core.logging import app_logger as logger, log_execution_time, metrics_logger
from msfin.models.report import ImageMetrics, MetricReport
from msfin.nn.network import MSFIN
from msfin.services.dataset_service import list_images
from msfin.tensor import Tensor, no_grad
from msfin.utils.image import (
    DIHEDRAL_CODES,
    PlanarImage,
    bicubic_resize,
    degrade,
    dihedral,
    inverse_dihedral,
    load_png,
    save_png,
)
from msfin.utils.metrics import psnr_y, ssim_y


def self_ensemble_forward(net: MSFIN, x: Tensor) -> Tensor:
    """Average of the network over the 8 dihedral transforms of x, each mapped back."""
    acc: Optional[np.ndarray] = None
    with no_grad():
        for code in DIHEDRAL_CODES:
            out = net(Tensor(dihedral(x.data, code))).data
            restored = inverse_dihedral(out, code)
            acc = restored if acc is None else acc + restored
    return Tensor(acc / len(DIHEDRAL_CODES))


def forward_image(net: MSFIN, lr_up: PlanarImage, ensemble: bool = False) -> PlanarImage:
    """Run the network on a pre-upsampled image and clamp the result to [0, 1]."""
    x = Tensor(lr_up.as_batch(net.dtype.numpy))
    if ensemble:
        y = self_ensemble_forward(net, x)
    else:
        with no_grad():
            y = net(x)
    return PlanarImage.from_array(y.data[0])


def super_resolve(net: MSFIN, lr: PlanarImage, scale: int, ensemble: bool = False) -> PlanarImage:
    """Bicubic pre-upsampling by `scale`, then the network."""
    lr_up = bicubic_resize(lr, lr.height * scale, lr.width * scale)
    return forward_image(net, lr_up, ensemble)


class EvaluationService:
    def __init__(self, workers: Optional[int] = None):
        self.workers = workers or settings.worker_count

    def evaluate_image(
        self,
        net: MSFIN,
        hr: PlanarImage,
        name: str,
        scale: int,
        shave: int,
        ensemble: bool = False,
        lr: Optional[PlanarImage] = None,
    ) -> Tuple[ImageMetrics, PlanarImage]:
        """Degrade (unless an LR image is given), super-resolve and score one HR image."""
        hr = hr.mod_crop(scale)
        if lr is None:
            lr, lr_up = degrade(hr, scale)
        else:
            lr_up = bicubic_resize(lr, hr.height, hr.width)
        sr = forward_image(net, lr_up, ensemble)
        metrics = ImageMetrics(name=name, psnr=psnr_y(sr, hr, shave), ssim=ssim_y(sr, hr, shave))
        logger.info("Image evaluated", extra={"extra": metrics.model_dump()})
        return metrics, sr

    def mean_psnr(self, net: MSFIN, images: List[PlanarImage], scale: int, shave: int) -> float:
        """Mean Y-PSNR over in-memory HR images (used for validation during training)."""
        scores = [self.evaluate_image(net, hr, str(i), scale, shave)[0].psnr for i, hr in enumerate(images)]
        return float(np.mean(scores)) if scores else float("nan")

    @log_execution_time(logger)
    def evaluate_dir(
        self,
        net: MSFIN,
        hr_dir: Union[str, Path],
        scale: int,
        shave: Optional[int] = None,
        ensemble: bool = False,
        save_sr: Optional[Union[str, Path]] = None,
        lr_dir: Optional[Union[str, Path]] = None,
        config: Optional[Dict[str, str]] = None,
    ) -> MetricReport:
        """Per-image PSNR/SSIM over a directory of HR images, in name order."""
        files = list_images(hr_dir)
        shave = scale if shave is None else shave

        def run(path: Path) -> ImageMetrics:
            lr = load_png(Path(lr_dir) / path.name) if lr_dir else None
            metrics, sr = self.evaluate_image(net, load_png(path), path.stem, scale, shave, ensemble, lr)
            if save_sr:
                save_png(sr, Path(save_sr) / f"{path.stem}.png")
            return metrics

        try:
            with ThreadPoolExecutor(max_workers=min(self.workers, len(files)),
                                    thread_name_prefix="msfin-eval") as executor:
                images = list(executor.map(run, files))
        except Exception as e:
            logger.error(f"Evaluation of {hr_dir} failed: {str(e)}")
            raise

        report = MetricReport(images=images, scale=scale, shave=shave, ensemble=ensemble, config=config or {})
        metrics_logger.log_metric("eval_mean_psnr", report.mean_psnr, {"hr_dir": str(hr_dir), "ensemble": ensemble})
        metrics_logger.log_metric("eval_mean_ssim", report.mean_ssim, {"hr_dir": str(hr_dir), "ensemble": ensemble})
        return report

    def infer(self, net: MSFIN, in_path: Union[str, Path], out_path: Union[str, Path],
              scale: int, ensemble: bool = False) -> PlanarImage:
        """Super-resolve one LR PNG into an SR PNG `scale` times larger."""
        sr = super_resolve(net, load_png(in_path), scale, ensemble)
        save_png(sr, out_path)
        logger.info("Image super-resolved", extra={"extra": {
            "input": str(in_path), "output": str(out_path), "height": sr.height, "width": sr.width,
            "ensemble": ensemble,
        }})
        return sr


evaluation_service = EvaluationService()
