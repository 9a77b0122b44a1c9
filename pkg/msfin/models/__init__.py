from msfin.models.common import Ablation, ColorSpace, Subcommand, Variant
from msfin.models.manifest import RunManifest
from msfin.models.network import NetworkConfig
from msfin.models.report import ImageMetrics, LayerCount, MetricReport, ParameterReport
from msfin.models.training import TrainConfig, TrainingSummary
