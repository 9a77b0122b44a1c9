import numpy as np

from msfin.core.exceptions import ShapeError
from msfin.models.network import NetworkConfig
from msfin.nn.blocks import RRCAB
from msfin.nn.layers import Conv2d
from msfin.nn.module import Initializer, Module, ModuleList, sync_parameter_names
from msfin.nn.msfim import MSFIM, Trace
from msfin.tensor import DType, Tensor, add, add_all, crop, pad_to_multiple

# Spatial extents reaching the MSFIM must be multiples of this.
SPATIAL_MULTIPLE = 4


class MSFIN(Module):
    """Pre-upsampling SR network: head conv, MSFIM, four deep RRCABs, reconstruction conv."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype: DType = DType.FLOAT32):
        super().__init__()
        self.cfg = cfg
        init = Initializer(seed, dtype)
        c = cfg.channels
        self.head = Conv2d(3, c, 3, init, padding=1)
        self.msfim = MSFIM(cfg, init)
        self.deep = ModuleList([RRCAB(cfg, init) for _ in range(4)])
        self.tail = Conv2d(c, 3, 3, init, padding=1)
        if cfg.zero_tail:
            self.tail.weight.assign(np.zeros(self.tail.weight.shape))
        elif cfg.tail_scale != 1.0:
            self.tail.weight.assign(self.tail.weight.data * cfg.tail_scale)
        sync_parameter_names(self)

    def forward(self, x: Tensor, trace: Trace = None) -> Tensor:
        return msfin_forward(x, self, trace)


def msfin_forward(x: Tensor, net: MSFIN, trace: Trace = None) -> Tensor:
    """Super-resolve a bicubic-upsampled (N, 3, H, W) batch; the output has the input's shape.

    Inputs whose extents are not multiples of 4 are padded on the bottom/right (mirrored, or
    edge-replicated when shorter than the pad) and the output cropped back.
    """
    cfg = net.cfg
    n, c, h, w = x.shape
    if c != 3:
        raise ShapeError(f"MSFIN expects 3 input channels, got {c}")
    xp = pad_to_multiple(x, SPATIAL_MULTIPLE)

    f_sf = net.head(xp)
    f_l1, f_l2, f_l3 = net.msfim(f_sf, trace)
    f = add_all([f_l1, f_l2, f_l3])
    for block in net.deep:
        f = block(f)
    out = net.tail(f)
    if cfg.global_skip:
        out = add(out, xp)
    if trace is not None:
        trace["sf"] = f_sf
        trace["df"] = f
    return crop(out, h, w)
