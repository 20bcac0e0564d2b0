"""Network assembly, usage statistics, compaction and checkpoints."""

from .checkpoint import CheckpointError, deserialize, load, save, serialize
from .compact import CompactionReport, compact
from .network import (
    ForwardResult,
    LinearLayer,
    Network,
    PoolLayer,
    ResidualBlock,
    residual_merge,
)
from .spec import LayerSpec, NetworkSpec, ShapeInfo, SpecError, build_mcifarnet
from .usage import LayerUsage, UsageStats, collect_usage
