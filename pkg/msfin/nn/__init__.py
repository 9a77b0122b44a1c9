from msfin.nn.blocks import (
    RRCAB,
    ChannelAttention,
    DownsampleBlock,
    InteractiveAdapter,
    LocalFeatureFusion,
    UpsampleBlock,
    channel_attention,
    interactive_adapter,
    rrcab_forward,
)
from msfin.nn.layers import Conv2d, ConvTranspose2d
from msfin.nn.module import Initializer, Module, ModuleList
from msfin.nn.msfim import MSFIM, level1_forward, level2_forward, level3_forward
from msfin.nn.network import MSFIN, msfin_forward
from msfin.nn.params import ablation_totals, count_parameters
