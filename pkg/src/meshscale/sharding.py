"""Weight-update sharding: distributed optimizer planning and execution.

The replicated path (every device sums all gradients, then applies the
optimizer to the whole weight vector) is the reference. The sharded
path reduce-scatters gradients so each device updates only its shard,
then broadcasts updated weights; with a shard-local optimizer and the
same summation order both paths produce bit-identical f32 weights.

Also hosts the embedding-table placement planner (replicate small
tables, partition large ones under per-device memory ledgers) and the
optimizer-cost model used to report weight-update time as a fraction of
the training step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .collectives import Payload, fold_sum, hierarchical_allreduce_2d
from .netsim import ComputeModel, ModelScenario, allreduce_time, mesh_for_chips
from .topology import Coord, DeviceMesh

_OPT_KINDS = ("sgd", "momentum", "lamb_like")

# Rough per-element update flops used by the cost model when a spec
# does not override them (multiply-adds counted as 2).
DEFAULT_OPT_FLOPS = {"sgd": 2.0, "momentum": 4.0, "lamb_like": 16.0}


@dataclass(frozen=True)
class OptimizerSpec:
    """Deterministic f32 optimizer. All kinds are elementwise except
    the LambLike trust ratio, whose norms are taken over the slice the
    update is applied to (the plan shard), keeping it shard-local;
    norm_scope="global" models a non-shard-local variant and is
    rejected by sharded_update."""

    kind: str
    learning_rate: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    norm_scope: str = "shard"
    flops_per_element: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _OPT_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}; expected one of {_OPT_KINDS}")
        if self.norm_scope not in ("shard", "global"):
            raise ValueError("norm_scope must be 'shard' or 'global'")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1/beta2 must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    @property
    def shard_local(self) -> bool:
        return self.kind != "lamb_like" or self.norm_scope == "shard"

    @property
    def state_names(self) -> tuple[str, ...]:
        return {"sgd": (), "momentum": ("v",), "lamb_like": ("m", "v")}[self.kind]

    @property
    def update_flops_per_element(self) -> float:
        return DEFAULT_OPT_FLOPS[self.kind] if self.flops_per_element is None else self.flops_per_element

    def init_state(self, n: int) -> dict[str, np.ndarray]:
        return {name: np.zeros(n, dtype=np.float32) for name in self.state_names}

    def apply_slice(
        self, w: np.ndarray, g: np.ndarray, state: dict[str, np.ndarray]
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """One update on a weight slice; returns (new_w, new_state)."""
        w = np.asarray(w, dtype=np.float32)
        g = np.asarray(g, dtype=np.float32)
        if w.shape != g.shape:
            raise ValueError("weight/gradient slice shape mismatch")
        lr = np.float32(self.learning_rate)
        if self.kind == "sgd":
            return w - lr * g, {}
        if self.kind == "momentum":
            v = np.float32(self.momentum) * state["v"] + g
            return w - lr * v, {"v": v}
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        one = np.float32(1.0)
        m = b1 * state["m"] + (one - b1) * g
        v = b2 * state["v"] + (one - b2) * (g * g)
        update = m / (np.sqrt(v) + np.float32(self.eps)) + np.float32(self.weight_decay) * w
        w_norm = np.sqrt(np.sum(w * w))
        u_norm = np.sqrt(np.sum(update * update))
        trust = w_norm / u_norm if w_norm > 0 and u_norm > 0 else np.float32(1.0)
        return w - lr * np.float32(trust) * update, {"m": m, "v": v}


# ---------------------------------------------------------------------------
# Sharding plan


@dataclass(frozen=True)
class WeightUpdateShardingPlan:
    """Balanced contiguous shards of [0, n), one per group member, and
    their embedding into the padded reduce-scatter layout.

    Shard k (sizes differ by at most one element) lives at the head of
    padded slot k; slot tails are zero so they stay inert through the
    gradient sum and the optimizer broadcast.
    """

    n: int
    p_y: int
    p_x: int
    bounds: tuple[tuple[int, int], ...]
    slot_len: int

    @property
    def parts(self) -> int:
        return self.p_y * self.p_x

    @property
    def m(self) -> int:
        return self.slot_len * self.parts

    @classmethod
    def build(cls, mesh: DeviceMesh, stride: int, n: int) -> "WeightUpdateShardingPlan":
        if n < 1:
            raise ValueError("weight vector must be non-empty")
        if stride < 1 or mesh.x_size % stride != 0:
            raise ValueError(f"stride {stride} does not divide x_size {mesh.x_size}")
        p_y, p_x = mesh.y_size, mesh.x_size // stride
        parts = p_y * p_x
        q, r = divmod(n, parts)
        bounds = []
        start = 0
        for k in range(parts):
            size = q + 1 if k < r else q
            bounds.append((start, start + size))
            start += size
        return cls(n=n, p_y=p_y, p_x=p_x, bounds=tuple(bounds), slot_len=math.ceil(n / parts))

    def slot_of(self, yi: int, xj: int) -> int:
        return yi * self.p_x + xj

    def embed(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.n,):
            raise ValueError(f"expected length-{self.n} vector")
        out = np.zeros(self.m, dtype=np.float32)
        for k, (s, e) in enumerate(self.bounds):
            out[k * self.slot_len : k * self.slot_len + (e - s)] = vec[s:e]
        return out

    def unembed(self, padded: np.ndarray) -> np.ndarray:
        if padded.shape != (self.m,):
            raise ValueError(f"expected length-{self.m} padded vector")
        out = np.empty(self.n, dtype=np.float32)
        for k, (s, e) in enumerate(self.bounds):
            out[s:e] = padded[k * self.slot_len : k * self.slot_len + (e - s)]
        return out


# ---------------------------------------------------------------------------
# Updates


def _check_grads(weights: np.ndarray, grads: list[np.ndarray]) -> list[np.ndarray]:
    if not grads:
        raise ValueError("need at least one gradient")
    out = []
    for g in grads:
        g = np.asarray(g, dtype=np.float32)
        if g.shape != weights.shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {weights.shape}")
        out.append(g)
    return out


def replicated_update(
    weights: np.ndarray,
    grads_per_replica: list[np.ndarray],
    opt: OptimizerSpec,
    state: dict[str, np.ndarray] | None = None,
    shard_bounds: tuple[tuple[int, int], ...] | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Reference path: left-fold gradient sum in replica order, then the
    optimizer over the full vector (or per shard slice when bounds are
    given, matching a sharded run's norm scoping)."""
    weights = np.asarray(weights, dtype=np.float32)
    if weights.ndim != 1:
        raise ValueError("weights must be a 1-D vector")
    grads = _check_grads(weights, grads_per_replica)
    total = fold_sum(grads, "f32")
    if state is None:
        state = opt.init_state(len(weights))
    if shard_bounds is None or opt.norm_scope == "global":
        shard_bounds = ((0, len(weights)),)
    new_w = weights.copy()
    new_state = {k: v.copy() for k, v in state.items()}
    for s, e in shard_bounds:
        w2, st2 = opt.apply_slice(weights[s:e], total[s:e], {k: v[s:e] for k, v in state.items()})
        new_w[s:e] = w2
        for k in st2:
            new_state[k][s:e] = st2[k]
    return new_w, new_state


def sharded_update(
    mesh: DeviceMesh,
    stride: int,
    weights: np.ndarray,
    grads_per_replica: dict[Coord, np.ndarray],
    opt: OptimizerSpec,
    state: dict[int, dict[str, np.ndarray]] | None = None,
    direction="bidirectional",
):
    """Distributed optimizer step via hierarchical reduce-scatter.

    Each stride group runs its own weight-update-sharding step over its
    peer set: gradients are embedded into the plan layout, summed in the
    canonical nested order, each slot's shard updated locally, and the
    updated weights broadcast back. Returns (weights per device, state
    per group offset, schedule).
    """
    if not opt.shard_local:
        raise ValueError("optimizer is not shard-local; weight-update sharding requires a shard-local update")
    weights = np.asarray(weights, dtype=np.float32)
    if weights.ndim != 1:
        raise ValueError("weights must be a 1-D vector")
    plan = WeightUpdateShardingPlan.build(mesh, stride, len(weights))
    if state is None:
        state = {o: opt.init_state(plan.n) for o in range(stride)}
    new_state = {o: {k: v.copy() for k, v in st.items()} for o, st in state.items()}
    new_weights = {o: weights.copy() for o in range(stride)}

    payloads = {}
    for d in mesh.devices():
        if d not in grads_per_replica:
            raise ValueError(f"missing gradient for device {d}")
        g = np.asarray(grads_per_replica[d], dtype=np.float32)
        if g.shape != weights.shape:
            raise ValueError(f"gradient shape {g.shape} != weight shape {weights.shape}")
        payloads[d] = Payload(plan.embed(g), "f32")

    def update(shard: np.ndarray, start: int, offset: int) -> np.ndarray:
        k = start // plan.slot_len
        s, e = plan.bounds[k]
        size = e - s
        w2, st2 = opt.apply_slice(
            weights[s:e], shard[:size], {name: state[offset][name][s:e] for name in state[offset]}
        )
        for name in st2:
            new_state[offset][name][s:e] = st2[name]
        new_weights[offset][s:e] = w2
        out = np.zeros_like(shard)
        out[:size] = w2
        return out

    results, sched = hierarchical_allreduce_2d(mesh, stride, payloads, update_fn=update, direction=direction)
    per_device = {d: plan.unembed(p.values) for d, p in results.items()}
    # The broadcast of each group's updated shards must reassemble to
    # exactly the weights its update produced.
    for d, w in per_device.items():
        if not np.array_equal(w, new_weights[d[0] % stride], equal_nan=True):
            raise AssertionError("broadcast weights diverged from locally updated weights")
    return per_device, new_state, sched


# ---------------------------------------------------------------------------
# Optimizer cost model


@dataclass(frozen=True)
class OptimizerCostReport:
    chips: int
    shard_count: int
    base_step_s: float
    optimizer_s_unsharded: float

    @property
    def optimizer_s_sharded(self) -> float:
        return self.optimizer_s_unsharded / self.shard_count

    @property
    def unsharded_fraction(self) -> float:
        return self.optimizer_s_unsharded / (self.base_step_s + self.optimizer_s_unsharded)

    @property
    def sharded_fraction(self) -> float:
        return self.optimizer_s_sharded / (self.base_step_s + self.optimizer_s_sharded)


def optimizer_cost_fraction(
    scenario: ModelScenario,
    chips: int,
    flops_per_element: float,
    weight_elements: int | None = None,
) -> OptimizerCostReport:
    """Weight-update time as a fraction of the step, with and without
    sharding. Unsharded, every device updates all weights; sharded, the
    update divides across the weight-update group (y_size * x_size /
    stride devices), while compute and all-reduce are unchanged."""
    if flops_per_element < 0:
        raise ValueError("flops_per_element must be >= 0")
    mesh = mesh_for_chips(chips, scenario.pod_x, scenario.pod_y, scenario.y_torus)
    shard_count = mesh.y_size * (mesh.x_size // scenario.stride)
    elements = scenario.payload_elements if weight_elements is None else weight_elements
    compute = ComputeModel(
        step_flops=scenario.total_work_flops / chips,
        flops_rate=scenario.flops_rate,
        fixed_overhead=scenario.fixed_overhead_s,
    )
    base = compute.step_time() + allreduce_time(scenario, chips)
    opt_s = elements * flops_per_element / scenario.flops_rate
    return OptimizerCostReport(
        chips=chips, shard_count=shard_count, base_step_s=base, optimizer_s_unsharded=opt_s
    )


# ---------------------------------------------------------------------------
# Embedding-table placement


@dataclass(frozen=True)
class PlacementDecision:
    table_id: int
    rows: int
    row_bytes: int
    decision: str  # "replicate" | "partition"
    parts: int

    def part_rows(self, device: int) -> int:
        if self.decision == "replicate":
            return self.rows
        q, r = divmod(self.rows, self.parts)
        return q + 1 if device < r else q

    def bytes_on(self, device: int) -> int:
        return self.part_rows(device) * self.row_bytes


@dataclass(frozen=True)
class TablePlacement:
    n_devices: int
    capacity_bytes: int
    decisions: tuple[PlacementDecision, ...]
    ledger: tuple[int, ...]

    def records(self) -> list[dict]:
        return [
            {
                "table_id": d.table_id,
                "decision": d.decision,
                "parts": d.parts,
                "max_bytes_per_device": max(d.bytes_on(i) for i in range(self.n_devices)),
            }
            for d in sorted(self.decisions, key=lambda d: d.table_id)
        ]

    def csv(self) -> str:
        out = ["table_id,decision,parts,max_bytes_per_device"]
        for r in self.records():
            out.append(f"{r['table_id']},{r['decision']},{r['parts']},{r['max_bytes_per_device']}")
        return "\n".join(out) + "\n"


def place_tables(
    tables: list[tuple[int, int]],
    n_devices: int,
    capacity_bytes: int,
    threshold: int | None = None,
) -> TablePlacement:
    """Replicate small tables, partition large ones, under a per-device
    memory ledger.

    Tables at most `threshold` bytes (default capacity/16) replicate
    when they fit; everything else partitions row-wise across all
    devices. If a partition no longer fits, earlier replication choices
    are demoted (smallest table first) until it does, so the planner
    succeeds whenever the all-partitioned assignment is feasible.
    """
    if n_devices < 1:
        raise ValueError("need at least one device")
    if capacity_bytes < 0:
        raise ValueError("capacity must be >= 0")
    if threshold is None:
        threshold = capacity_bytes // 16
    specs = []
    for i, (rows, row_bytes) in enumerate(tables):
        if rows < 0 or row_bytes < 1:
            raise ValueError(f"table {i}: rows must be >= 0 and row_bytes >= 1")
        specs.append((i, rows, row_bytes))

    ledger = np.zeros(n_devices, dtype=np.int64)
    chosen: dict[int, PlacementDecision] = {}

    def footprint(dec: PlacementDecision) -> np.ndarray:
        return np.array([dec.bytes_on(i) for i in range(n_devices)], dtype=np.int64)

    def demote_until_fits(extra: np.ndarray) -> bool:
        """Turn replicated tables into partitioned ones until ledger+extra fits."""
        nonlocal ledger
        while np.any(ledger + extra > capacity_bytes):
            reps = [d for d in chosen.values() if d.decision == "replicate"]
            if not reps:
                return False
            victim = min(reps, key=lambda d: (d.rows * d.row_bytes, d.table_id))
            part = PlacementDecision(victim.table_id, victim.rows, victim.row_bytes, "partition", n_devices)
            ledger = ledger - footprint(victim) + footprint(part)
            chosen[victim.table_id] = part
        return True

    # Descending total size, ties by index.
    for i, rows, row_bytes in sorted(specs, key=lambda t: (-t[1] * t[2], t[0])):
        total = rows * row_bytes
        replicate = PlacementDecision(i, rows, row_bytes, "replicate", 1)
        partition = PlacementDecision(i, rows, row_bytes, "partition", n_devices)
        if total <= threshold and np.all(ledger + footprint(replicate) <= capacity_bytes):
            dec = replicate
        else:
            dec = partition
            if not demote_until_fits(footprint(partition)):
                raise ValueError(
                    f"table {i} does not fit even partitioned across {n_devices} devices "
                    f"(capacity {capacity_bytes} bytes)"
                )
        ledger = ledger + footprint(dec)
        chosen[i] = dec

    order = tuple(chosen[i] for i, _, _ in specs)
    placement = TablePlacement(
        n_devices=n_devices,
        capacity_bytes=capacity_bytes,
        decisions=order,
        ledger=tuple(int(b) for b in ledger),
    )
    if any(b > capacity_bytes for b in placement.ledger):
        raise AssertionError("ledger exceeded capacity after planning")
    return placement
