"""Poll-and-pool feature abstraction: sampling, cost model, density maps and
dataset subsampling, backed by the C++ library."""

from ._core import (
    PollRatioSchedule,
    TransformerConfig,
    abstract,
    class_incremental_sample,
    density_map,
    generate_scene,
    pnp_cost,
    poll_count,
    rank_locations,
    resolve_config,
    tradeoff_curve,
    train,
    transformer_cost,
)

__all__ = [
    "PollRatioSchedule",
    "TransformerConfig",
    "abstract",
    "class_incremental_sample",
    "density_map",
    "generate_scene",
    "pnp_cost",
    "poll_count",
    "rank_locations",
    "resolve_config",
    "tradeoff_curve",
    "train",
    "transformer_cost",
]
