from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class TrainConfig(BaseModel):
    """Optimization recipe: Adam with cosine-annealed learning rate on L1 loss."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    batch: int = Field(16, ge=1)
    lr_patch: int = Field(48, ge=1)
    lr_init: float = Field(1e-4, gt=0.0)
    lr_final: float = Field(6.25e-6, ge=0.0)
    total_steps: int = Field(1000, ge=1)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = Field(100, ge=1)
    val_every: int = Field(100, ge=0)  # 0 disables validation
    log_every: int = Field(1, ge=1)
    shave: Optional[int] = Field(None, ge=0)  # None: shave `scale` pixels
    val_dir: Optional[str] = None
    lr_dir: Optional[str] = None

    @model_validator(mode="after")
    def check_schedule(self) -> "TrainConfig":
        if self.lr_final > self.lr_init:
            raise ValueError(f"lr_final={self.lr_final} exceeds lr_init={self.lr_init}")
        return self


class TrainingSummary(BaseModel):
    """Outcome of a train_loop call."""

    start_step: int = 0
    final_step: int = 0
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    final_lr: Optional[float] = None
    val_psnr: Optional[float] = None
    checkpoints: List[str] = []
    log_path: Optional[str] = None

    @property
    def steps_run(self) -> int:
        return self.final_step - self.start_step
