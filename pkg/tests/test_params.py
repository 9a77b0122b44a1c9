import pytest

from msfin.models.common import Ablation, Variant
from msfin.models.network import NetworkConfig
from msfin.nn.layers import conv_param_count, conv_transpose_param_count
from msfin.nn.params import PUBLISHED_TOTALS_K, ablation_totals, count_parameters


def closed_form_total(c: int, r: int, ns: bool) -> int:
    total = 305 * c * c + 174 * c + 48 * r * c + 24 * r + 3
    return total + (73 * c * c + 5 * c if ns else 0)


def test_conv_formula_examples():
    assert conv_param_count(6, 6, 3) == 330
    assert conv_param_count(6, 6, 3, groups=6) == 60
    assert conv_transpose_param_count(6, 6, 4) == 6 * 6 * 16 + 6


@pytest.mark.parametrize("channels,loops,ns", [(48, 1, False), (24, 0, False), (42, 1, True), (30, 0, True), (12, 1, True)])
def test_total_matches_closed_form(channels, loops, ns):
    cfg = NetworkConfig(channels=channels, rrcab_loops=loops, ns=ns)
    report = count_parameters(cfg)
    assert report.total == closed_form_total(channels, cfg.ca_bottleneck, ns)


def test_calibration_table():
    assert count_parameters(NetworkConfig(channels=48, ns=False)).total == 720387
    assert count_parameters(NetworkConfig(channels=24, rrcab_loops=0, ns=False)).total == 184563


@pytest.mark.parametrize("variant,expected", [(Variant.MSFIN, 682473), (Variant.MSFIN_S, 351429)])
def test_presets_hit_published_totals(variant, expected):
    report = count_parameters(NetworkConfig.preset(variant))
    assert report.total == expected
    assert report.within(PUBLISHED_TOTALS_K[variant.value])


def test_report_is_per_layer_audit():
    report = count_parameters(NetworkConfig.preset(Variant.MSFIN_S))
    assert report.total == sum(layer.count for layer in report.layers)
    head = next(layer for layer in report.layers if layer.name == "head")
    assert head.count == conv_param_count(3, 30, 3)
    gc = next(layer for layer in report.layers if layer.name.endswith("blocks.0.gc2"))
    assert gc.count == conv_param_count(30, 30, 3, groups=6)
    frame = report.to_frame()
    assert list(frame.columns) == ["layer", "kind", "shape", "params"]
    assert frame["params"].sum() == report.total
    assert "total: 351429" in report.format_table()


def test_interaction_ordering_follows_sharing():
    totals = ablation_totals(NetworkConfig(channels=24))
    assert totals[Ablation.NO_IC.value] < totals[Ablation.IC.value] < totals[Ablation.IC_NS.value]
    assert totals[Ablation.IC.value] < totals[Ablation.CIC.value]


def test_module_toggles_ordering():
    totals = ablation_totals(NetworkConfig(channels=24))
    assert totals[Ablation.BASE.value] < totals[Ablation.CA.value]
    assert totals[Ablation.CA.value] == totals[Ablation.CA_CS.value]
    assert totals[Ablation.CA.value] < totals[Ablation.CA_FF.value]


def test_ns_changes_count_not_loops():
    base = NetworkConfig(channels=12)
    assert count_parameters(base).total == count_parameters(base.model_copy(update={"rrcab_loops": 3})).total
    assert count_parameters(base).total > count_parameters(base.model_copy(update={"ns": False})).total


def test_within_tolerance():
    report = count_parameters(NetworkConfig.preset(Variant.MSFIN))
    assert report.within(682)
    assert not report.within(600)
