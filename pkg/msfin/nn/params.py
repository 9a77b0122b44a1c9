from typing import Dict, List, Optional

from msfin.models.common import Ablation
from msfin.models.network import NetworkConfig
from msfin.models.report import LayerCount, ParameterReport
from msfin.nn.layers import Conv2d, ConvTranspose2d
from msfin.nn.network import MSFIN

# Reference totals (thousands of parameters) of the two published variants.
PUBLISHED_TOTALS_K = {"msfin": 682.0, "msfin-s": 352.0}


def layer_counts(net: MSFIN) -> List[LayerCount]:
    """One entry per convolution layer, counted by the closed-form formula of its type."""
    counts: List[LayerCount] = []
    for name, module in net.named_modules():
        if isinstance(module, (Conv2d, ConvTranspose2d)):
            counts.append(LayerCount(
                name=name,
                kind=module.kind,
                shape=list(module.weight.shape),
                count=module.param_count(),
            ))
    return counts


def count_parameters(cfg: NetworkConfig, net: Optional[MSFIN] = None) -> ParameterReport:
    """Per-layer parameter report for `cfg` (builds the network unless one is given)."""
    net = net if net is not None else MSFIN(cfg)
    layers = layer_counts(net)
    return ParameterReport(
        layers=layers,
        total=sum(layer.count for layer in layers),
        config={k: str(getattr(v, "value", v)) for k, v in cfg.model_dump().items()},
    )


def ablation_totals(cfg: NetworkConfig) -> Dict[str, int]:
    """Parameter total of every ablation overlay applied to `cfg`."""
    return {ablation.value: count_parameters(cfg.with_overlay(ablation)).total for ablation in Ablation}
