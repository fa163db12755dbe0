"""meshscale: scalability techniques for large 2-D accelerator meshes.

Topology-aware hierarchical collectives, an alpha-beta cost simulator,
weight-update sharding, SPMD partitioning rewrites, distributed
evaluation metrics, and input-shuffle studies — all deterministic and
oracle-checked at desk scale.
"""

from .collectives import (
    CollectiveSchedule,
    Direction,
    Payload,
    Phase,
    PhaseKind,
    ReplicaSet,
    all_reduce,
    bf16_round,
    bf16_round_array,
    hierarchical_allreduce_2d,
    hierarchical_schedule,
    model_parallel_allreduce,
    ring_all_gather,
    ring_reduce_scatter,
)
from .infeed import ShufflePolicy, StreamTrace, coverage, dispersion, shard_files, stream_with_policy
from .metrics import (
    AccuracyAccumulator,
    AucAccumulator,
    EvalBatch,
    auc_roc,
    distributed_accuracy,
    multi_step_eval,
    pad_eval_dataset,
    round_robin_assign,
)
from .netsim import (
    ComputeModel,
    LinkCostModel,
    ModelScenario,
    StepBreakdown,
    analytic_ring_time,
    epochs_to_train,
    mesh_for_chips,
    simulate_schedule,
    sweep_scaling,
)
from .partitioner import (
    HaloSpec,
    ShardSpec,
    conv2d,
    distributed_batch_norm,
    distributed_top_k,
    gather_as_onehot_matmul,
    reshard,
    scalar_reassociate,
    sharded_matmul_feature,
    spatial_partition_conv,
)
from .scenario import ConfigError, Scenario, load_scenario, parse_scenario
from .sharding import (
    OptimizerSpec,
    TablePlacement,
    WeightUpdateShardingPlan,
    optimizer_cost_fraction,
    place_tables,
    replicated_update,
    sharded_update,
)
from .topology import DeviceMesh, LinkClass, Tile, build_multipod, neighbors, visible_set

__version__ = "0.1.0"

__all__ = [
    "AccuracyAccumulator",
    "AucAccumulator",
    "CollectiveSchedule",
    "ComputeModel",
    "ConfigError",
    "DeviceMesh",
    "Direction",
    "EvalBatch",
    "HaloSpec",
    "LinkClass",
    "LinkCostModel",
    "ModelScenario",
    "OptimizerSpec",
    "Payload",
    "Phase",
    "PhaseKind",
    "ReplicaSet",
    "Scenario",
    "ShardSpec",
    "ShufflePolicy",
    "StepBreakdown",
    "StreamTrace",
    "TablePlacement",
    "Tile",
    "WeightUpdateShardingPlan",
    "all_reduce",
    "analytic_ring_time",
    "auc_roc",
    "bf16_round",
    "bf16_round_array",
    "build_multipod",
    "conv2d",
    "coverage",
    "dispersion",
    "distributed_accuracy",
    "distributed_batch_norm",
    "distributed_top_k",
    "epochs_to_train",
    "gather_as_onehot_matmul",
    "hierarchical_allreduce_2d",
    "hierarchical_schedule",
    "load_scenario",
    "mesh_for_chips",
    "model_parallel_allreduce",
    "multi_step_eval",
    "neighbors",
    "optimizer_cost_fraction",
    "pad_eval_dataset",
    "parse_scenario",
    "place_tables",
    "replicated_update",
    "reshard",
    "ring_all_gather",
    "ring_reduce_scatter",
    "round_robin_assign",
    "scalar_reassociate",
    "shard_files",
    "sharded_matmul_feature",
    "sharded_update",
    "simulate_schedule",
    "spatial_partition_conv",
    "stream_with_policy",
    "sweep_scaling",
    "visible_set",
]
