"""Multi-scale feature interaction module.

Level 1 runs at full resolution, level 2 at half, level 3 at a quarter for its first half and at
half for its second. Level 3 is evaluated first because its stage outputs feed level 2, whose
stage outputs in turn feed level 1.
"""
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from msfin.core.exceptions import ShapeError
from msfin.models.network import NetworkConfig
from msfin.nn.blocks import (
    RRCAB,
    DownsampleBlock,
    InteractiveAdapter,
    LocalFeatureFusion,
    UpsampleBlock,
    interactive_adapter,
)
from msfin.nn.module import Initializer, Module, ModuleList
from msfin.tensor import Tensor, add

Trace = Optional[Dict[str, Tensor]]


class LevelOutput(NamedTuple):
    output: Tensor
    stages: List[Tensor]  # stages[k - 1] is the k-th RRCAB output of the level


def _record(trace: Trace, prefix: str, stages: Sequence[Tensor], output: Tensor) -> None:
    if trace is None:
        return
    for k, stage in enumerate(stages, start=1):
        trace[f"{prefix}.{k}"] = stage
    trace[f"{prefix}.out"] = output


class Level1(Module):
    def __init__(self, cfg: NetworkConfig, init: Initializer):
        super().__init__()
        self.blocks = ModuleList([RRCAB(cfg, init) for _ in range(5)])


class Level2(Module):
    def __init__(self, cfg: NetworkConfig, init: Initializer):
        super().__init__()
        self.down = DownsampleBlock(cfg.channels, cfg.leaky_slope, init)
        self.blocks = ModuleList([RRCAB(cfg, init) for _ in range(5)])
        self.up = UpsampleBlock(cfg.channels, init)


class Level3(Module):
    def __init__(self, cfg: NetworkConfig, init: Initializer):
        super().__init__()
        self.down1 = DownsampleBlock(cfg.channels, cfg.leaky_slope, init)
        self.down2 = DownsampleBlock(cfg.channels, cfg.leaky_slope, init)
        self.blocks = ModuleList([RRCAB(cfg, init) for _ in range(10)])
        self.lff1 = LocalFeatureFusion(cfg.channels, init)
        self.lff2 = LocalFeatureFusion(cfg.channels, init)
        self.up1 = UpsampleBlock(cfg.channels, init)
        self.up2 = UpsampleBlock(cfg.channels, init)


class InteractionAdapters(Module):
    """Cross-level connections.

    With ns each connection owns its adapter; otherwise connections between the same pair of
    levels at the same resolution ratio share a single adapter.
    """

    def __init__(self, cfg: NetworkConfig, init: Initializer):
        super().__init__()
        c = cfg.channels

        def bank(count: int, ratio: int) -> ModuleList:
            return ModuleList([InteractiveAdapter(c, ratio, init) for _ in range(count if cfg.ns else 1)])

        self.l2_to_l1 = bank(4, 2)        # F_L2^1..4 -> L1
        self.l3_to_l2 = bank(2, 2)        # F_L3^2, F_L3^4 -> L2
        self.l3_to_l2_same = bank(2, 1)   # F_L3^7, F_L3^9 -> L2
        self.l3_to_l1 = bank(2, 4) if cfg.cic else None  # F_L3^2, F_L3^4 -> L1

    @staticmethod
    def pick(bank: ModuleList, index: int) -> InteractiveAdapter:
        return bank[index if len(bank) > 1 else 0]


def _inject(x: Tensor, taps: Sequence[Tuple[Tensor, InteractiveAdapter]]) -> Tensor:
    out = x
    for source, adapter in taps:
        out = add(out, interactive_adapter(source, adapter, x.shape[2:]))
    return out


def level1_forward(
    level: Level1,
    f_sf: Tensor,
    l2_taps: Sequence[Tensor],
    cfg: NetworkConfig,
    adapters: Optional[InteractionAdapters] = None,
    l3_taps: Optional[Sequence[Tensor]] = None,
) -> LevelOutput:
    """Full-resolution chain; before block j+1 (j = 0..3) the j-th level-2 stage is injected.

    l2_taps are F_L2^1..4; l3_taps (used only with cic) are F_L3^2 and F_L3^4.
    """
    use_ic = cfg.ic and adapters is not None
    if use_ic and len(l2_taps) < 4:
        raise ShapeError(f"level 1 needs 4 level-2 taps, got {len(l2_taps)}")
    use_cic = use_ic and cfg.cic and adapters.l3_to_l1 is not None
    if use_cic and (l3_taps is None or len(l3_taps) < 2):
        raise ShapeError("cic needs the F_L3^2 and F_L3^4 taps")

    stages: List[Tensor] = []
    h = f_sf
    for j in range(4):
        taps = []
        if use_ic:
            taps.append((l2_taps[j], adapters.pick(adapters.l2_to_l1, j)))
            if use_cic and j in (1, 3):
                taps.append((l3_taps[j // 2], adapters.pick(adapters.l3_to_l1, j // 2)))
        h = level.blocks[j](_inject(h, taps))
        stages.append(h)
    h = level.blocks[4](h)
    stages.append(h)
    return LevelOutput(h, stages)


def level2_forward(
    level: Level2,
    f_sf: Tensor,
    l3_taps: Sequence[Tensor],
    cfg: NetworkConfig,
    adapters: Optional[InteractionAdapters] = None,
) -> LevelOutput:
    """Half-resolution chain fed by F_L3^2, F_L3^4 (quarter) and F_L3^7, F_L3^9 (half).

    l3_taps are given in that order; the returned output is upsampled back to full resolution.
    """
    use_ic = cfg.ic and adapters is not None
    if use_ic and len(l3_taps) < 4:
        raise ShapeError(f"level 2 needs 4 level-3 taps, got {len(l3_taps)}")
    f_d = level.down(f_sf)
    stages: List[Tensor] = []
    h = f_d
    for j in range(4):
        taps = []
        if use_ic:
            if j < 2:
                taps.append((l3_taps[j], adapters.pick(adapters.l3_to_l2, j)))
            else:
                taps.append((l3_taps[j], adapters.pick(adapters.l3_to_l2_same, j - 2)))
        h = level.blocks[j](_inject(h, taps))
        stages.append(h)
    h = level.blocks[4](h)
    stages.append(h)
    return LevelOutput(level.up(h), stages)


def level3_forward(level: Level3, f_sf: Tensor) -> LevelOutput:
    """Progressive upsampling path: quarter resolution for blocks 1-5, half for 6-10."""
    h, w = f_sf.shape[2:]
    if h % 4 or w % 4:
        raise ShapeError(f"level 3 needs H and W divisible by 4, got {h}x{w}")
    q0 = level.down2(level.down1(f_sf))
    stages: List[Tensor] = []
    x = q0
    for k in range(4):
        x = level.blocks[k](x)
        stages.append(x)
    stages.append(level.blocks[4](level.lff1(q0, stages[1], stages[3])))
    u = level.up1(stages[4])
    x = u
    for k in range(5, 9):
        x = level.blocks[k](x)
        stages.append(x)
    stages.append(level.blocks[9](level.lff2(u, stages[6], stages[7])))
    return LevelOutput(level.up2(stages[9]), stages)


class MSFIM(Module):
    def __init__(self, cfg: NetworkConfig, init: Initializer):
        super().__init__()
        self.cfg = cfg
        self.level1 = Level1(cfg, init)
        self.level2 = Level2(cfg, init)
        self.level3 = Level3(cfg, init)
        self.adapters = InteractionAdapters(cfg, init) if cfg.ic else None

    def forward(self, f_sf: Tensor, trace: Trace = None) -> Tuple[Tensor, Tensor, Tensor]:
        cfg = self.cfg
        l3 = level3_forward(self.level3, f_sf)
        s3 = l3.stages
        l2 = level2_forward(self.level2, f_sf, [s3[1], s3[3], s3[6], s3[8]], cfg, self.adapters)
        l1 = level1_forward(self.level1, f_sf, l2.stages[:4], cfg, self.adapters, [s3[1], s3[3]])
        _record(trace, "L3", l3.stages, l3.output)
        _record(trace, "L2", l2.stages, l2.output)
        _record(trace, "L1", l1.stages, l1.output)
        return l1.output, l2.output, l3.output
