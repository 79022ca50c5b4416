from .channel import (
    ChannelError,
    ChannelState,
    LargeScaleFading,
    Topology,
    ap_grid,
    build_correlation,
    draw_channels,
    generate_topology,
    large_scale_fading,
    mmse_estimate,
    simulate,
)
from .se import (
    ClusterMask,
    LinkStatistics,
    MaskError,
    PowerAllocation,
    SeReport,
    apply_mask,
    dl_se,
    dl_statistics,
    mmse_combiner,
    mmse_combiners,
    se_report,
    ul_se,
    ul_statistics,
)

__all__ = [
    "ChannelError",
    "ChannelState",
    "ClusterMask",
    "LargeScaleFading",
    "LinkStatistics",
    "MaskError",
    "PowerAllocation",
    "SeReport",
    "Topology",
    "ap_grid",
    "apply_mask",
    "build_correlation",
    "dl_se",
    "dl_statistics",
    "draw_channels",
    "generate_topology",
    "large_scale_fading",
    "mmse_combiner",
    "mmse_combiners",
    "mmse_estimate",
    "se_report",
    "simulate",
    "ul_se",
    "ul_statistics",
]
