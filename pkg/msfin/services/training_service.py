import math
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from prometheus_client import CollectorRegistry, Gauge, write_to_textfile

from msfin.core.exceptions import CheckpointError, TrainingDivergedError
from msfin.core.logging import app_logger as logger, metrics_logger
from msfin.models.manifest import RunManifest
from msfin.models.training import TrainingSummary
from msfin.nn.network import MSFIN
from msfin.services.checkpoint_service import checkpoint_service
from msfin.services.dataset_service import ImageDataset, PatchSampler, list_images
from msfin.services.evaluation_service import evaluation_service
from msfin.tensor import Tape, Tensor, l1_loss
from msfin.utils.image import PlanarImage, load_png
from msfin.utils.optim import Adam, cosine_lr
from msfin.utils.visualizations import TrainingVisualizer

LOG_COLUMNS = ["step", "loss", "lr", "val_psnr"]
LOG_FILE = "train_log.csv"
CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.prom"
CURVES_FILE = "training_curves.html"
LAST_CHECKPOINT = "last.msfn"


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.msfn"


class TrainingMetrics:
    """Prometheus gauges for one run, exported as a text file."""

    def __init__(self):
        self.registry = CollectorRegistry()
        self.step = Gauge("msfin_train_step", "Optimizer steps completed", registry=self.registry)
        self.loss = Gauge("msfin_train_loss", "L1 loss of the last batch", registry=self.registry)
        self.lr = Gauge("msfin_learning_rate", "Learning rate of the last step", registry=self.registry)
        self.val_psnr = Gauge("msfin_val_psnr_db", "Mean Y-PSNR on the validation images",
                              registry=self.registry)

    def write(self, path: Path) -> None:
        write_to_textfile(str(path), self.registry)


class TrainingService:
    def load_validation_images(self, val_dir: Optional[str]) -> List[PlanarImage]:
        if not val_dir:
            return []
        return [load_png(p) for p in list_images(val_dir)]

    def read_log(self, path: Path, start_step: int) -> pd.DataFrame:
        """Existing metrics log cut back to the resumed step."""
        if start_step == 0 or not path.is_file():
            return pd.DataFrame(columns=LOG_COLUMNS)
        log = pd.read_csv(path)
        return log[log["step"] <= start_step].reset_index(drop=True)

    def write_log(self, log: pd.DataFrame, rows: List[Dict[str, float]], path: Path) -> pd.DataFrame:
        frame = pd.DataFrame(rows, columns=LOG_COLUMNS)
        combined = frame if log.empty else pd.concat([log, frame], ignore_index=True)
        combined.to_csv(path, index=False)
        return combined

    def train_loop(
        self,
        net: MSFIN,
        dataset_dir: Union[str, Path],
        manifest: RunManifest,
        out_dir: Union[str, Path],
        resume: Optional[Union[str, Path]] = None,
    ) -> TrainingSummary:
        """Adam on L1 loss with a cosine learning rate, checkpointing into `out_dir`.

        A resumed run restores parameters, Adam moments, the step counter and the run generator,
        so it continues exactly where the uninterrupted run would be.
        """
        cfg = manifest.train
        scale = manifest.network.scale
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        start = 0
        if resume is not None:
            checkpoint = checkpoint_service.load(resume)
            if checkpoint.rng_state is None:
                raise CheckpointError("Missing generator state", path=str(resume), field="rng_state")
            if checkpoint.step > cfg.total_steps:
                raise CheckpointError(
                    f"Checkpoint step {checkpoint.step} beyond total_steps={cfg.total_steps}",
                    path=str(resume), field="step",
                )
            checkpoint_service.restore(net, checkpoint, str(resume), with_moments=True)
            try:
                rng.bit_generator.state = checkpoint.rng_state
            except (TypeError, ValueError, KeyError) as e:
                raise CheckpointError(f"Invalid generator state: {str(e)}", path=str(resume),
                                      field="rng_state") from e
            start = checkpoint.step
            logger.info("Resuming training", extra={"extra": {"checkpoint": str(resume), "step": start}})

        (out_dir / CONFIG_FILE).write_text(manifest.config_text(), encoding="utf-8")
        log_path = out_dir / LOG_FILE
        log = self.read_log(log_path, start)
        optimizer = Adam(net.parameters(), cfg, step_count=start)
        gauges = TrainingMetrics()
        val_images = self.load_validation_images(cfg.val_dir)
        shave = scale if cfg.shave is None else cfg.shave
        dtype = net.dtype.numpy

        summary = TrainingSummary(start_step=start, final_step=start, log_path=str(log_path))
        pending: List[Dict[str, float]] = []
        dataset = ImageDataset(dataset_dir, cfg.lr_dir)
        logger.info("Training started", extra={"extra": {
            "data": str(dataset_dir), "out": str(out_dir), "start_step": start,
            "total_steps": cfg.total_steps, "parameters": net.num_parameters(),
        }})

        with PatchSampler(dataset, scale, cfg.lr_patch, cfg.augment) as sampler:
            for step in range(start, cfg.total_steps):
                done = step + 1
                lr = cosine_lr(step, cfg)
                lr_up, hr = sampler.sample_batch(cfg.batch, rng, dtype)

                optimizer.zero_grad()
                with Tape() as tape:
                    loss = l1_loss(net(Tensor(lr_up)), Tensor(hr))
                    value = loss.item()
                    if not math.isfinite(value):
                        logger.error(f"Training diverged at step {done}: loss={value}")
                        raise TrainingDivergedError(done, value)
                    tape.backward(loss)
                optimizer.step(lr)

                if summary.initial_loss is None:
                    summary.initial_loss = value
                summary.final_loss, summary.final_lr, summary.final_step = value, lr, done
                gauges.step.set(done)
                gauges.loss.set(value)
                gauges.lr.set(lr)

                last = done == cfg.total_steps
                val_psnr = float("nan")
                if val_images and cfg.val_every and (done % cfg.val_every == 0 or last):
                    val_psnr = evaluation_service.mean_psnr(net, val_images, scale, shave)
                    summary.val_psnr = val_psnr
                    gauges.val_psnr.set(val_psnr)
                    metrics_logger.log_metric("val_psnr", val_psnr, {"step": done})

                if done % cfg.log_every == 0 or last or not math.isnan(val_psnr):
                    pending.append({"step": done, "loss": value, "lr": lr, "val_psnr": val_psnr})
                    logger.info("Training step", extra={"extra": pending[-1]})

                if done % cfg.checkpoint_every == 0 or last:
                    checkpoint = checkpoint_service.capture(net, manifest, done, rng)
                    path = checkpoint_service.save(checkpoint, out_dir / checkpoint_name(done))
                    checkpoint_service.save(checkpoint, out_dir / LAST_CHECKPOINT)
                    summary.checkpoints.append(str(path))
                    log = self.write_log(log, pending, log_path)
                    pending = []
                    gauges.write(out_dir / METRICS_FILE)

        if pending:
            log = self.write_log(log, pending, log_path)
        if not log.empty:
            TrainingVisualizer.write_html(
                TrainingVisualizer.create_training_curves(log), out_dir / CURVES_FILE
            )
        logger.info("Training finished", extra={"extra": summary.model_dump()})
        return summary


training_service = TrainingService()
