"""Deterministic alpha-beta cost model for collective schedules.

Time for a ring phase is steps * (alpha_eff + bytes_per_step * beta_eff)
with synchronous steps and sequential phases. A hop between ring
neighbors may traverse several physical links (model-parallel strides):
it pays the sum of their betas and one alpha, the worst class on the
hop. alpha_eff/beta_eff for the phase are the worst over its hops.
Bidirectional rings run as two simultaneous half-payload rings, halving
bytes_per_step. Closing (wrap) hops are priced only for genuine cycles;
a ring laid on an open line exchanges with neighbors only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .collectives import CollectiveSchedule, Direction, PhaseKind, hierarchical_schedule
from .topology import Coord, DeviceMesh, LinkClass, build_multipod, x_link_class


@dataclass(frozen=True)
class LinkCostModel:
    """Per-link-class latency (seconds/message) and inverse bandwidth
    (seconds/byte)."""

    alpha: dict[LinkClass, float]
    beta: dict[LinkClass, float]

    def __post_init__(self) -> None:
        for table, name in ((self.alpha, "alpha"), (self.beta, "beta")):
            for cls in LinkClass:
                if cls not in table:
                    raise ValueError(f"{name} missing entry for {cls.name}")
                if table[cls] < 0:
                    raise ValueError(f"{name}[{cls.name}] must be >= 0")
        if self.alpha[LinkClass.CrossPod] < self.alpha[LinkClass.WithinPod]:
            raise ValueError("cross-pod links are longer: CrossPod alpha >= WithinPod alpha")

    @classmethod
    def build(
        cls,
        alpha_within: float,
        beta_within: float,
        alpha_cross: float | None = None,
        beta_cross: float | None = None,
        alpha_wrap: float | None = None,
        beta_wrap: float | None = None,
    ) -> "LinkCostModel":
        return cls(
            alpha={
                LinkClass.WithinPod: alpha_within,
                LinkClass.CrossPod: alpha_within if alpha_cross is None else alpha_cross,
                LinkClass.TorusWrap: alpha_within if alpha_wrap is None else alpha_wrap,
            },
            beta={
                LinkClass.WithinPod: beta_within,
                LinkClass.CrossPod: beta_within if beta_cross is None else beta_cross,
                LinkClass.TorusWrap: beta_within if beta_wrap is None else beta_wrap,
            },
        )


@dataclass(frozen=True)
class ComputeModel:
    """step_flops is per-device work per training step (total work over
    replicas); fixed_overhead is the per-step constant."""

    step_flops: float
    flops_rate: float
    fixed_overhead: float = 0.0

    def __post_init__(self) -> None:
        if self.step_flops < 0 or self.flops_rate < 0 or self.fixed_overhead < 0:
            raise ValueError("compute model fields must be >= 0")

    def step_time(self) -> float:
        if self.step_flops == 0:
            return self.fixed_overhead
        if self.flops_rate == 0:
            raise ValueError("flops_rate is 0 but step_flops > 0")
        return self.step_flops / self.flops_rate + self.fixed_overhead


@dataclass(frozen=True)
class StepBreakdown:
    compute_time: float
    allreduce_time: float

    def __post_init__(self) -> None:
        if self.compute_time < 0 or self.allreduce_time < 0:
            raise ValueError("times must be >= 0")

    @property
    def step_time(self) -> float:
        return self.compute_time + self.allreduce_time

    @property
    def allreduce_fraction(self) -> float:
        total = self.step_time
        return self.allreduce_time / total if total > 0 else 0.0


@dataclass(frozen=True)
class PhaseTiming:
    index: int
    kind: str
    steps: int
    alpha_eff: float
    beta_eff: float
    bytes_per_step: float
    start: float
    end: float


# ---------------------------------------------------------------------------
# Hop pricing


def _hop_links(mesh: DeviceMesh, a: Coord, b: Coord) -> list[LinkClass] | None:
    """Physical links of the shortest axis-aligned traversal a -> b.

    None when no traversal exists (missing wrap link). Raises on
    non-axis-aligned pairs.
    """
    ax, ay = a
    bx, by = b
    if a == b:
        raise ValueError(f"degenerate hop at {a}")
    if ay == by:
        size, torus, fixed = mesh.x_size, mesh.x_torus, None
        start, end = ax, bx
    elif ax == bx:
        size, torus, fixed = mesh.y_size, mesh.y_torus, ax
        start, end = ay, by
    else:
        raise ValueError(f"hop {a} -> {b} is not axis-aligned")

    def links_from(s: int, dist: int) -> list[LinkClass] | None:
        out = []
        for i in range(dist):
            pos = (s + i) % size
            if pos == size - 1:  # the wrap link of this axis
                if not torus:
                    return None
                out.append(LinkClass.TorusWrap)
            elif fixed is None:
                out.append(x_link_class(mesh, pos))
            else:
                out.append(LinkClass.WithinPod)
        return out

    d_fwd = (end - start) % size
    d_bwd = (start - end) % size
    first, second = ((start, d_fwd), (end, d_bwd)) if d_fwd <= d_bwd else ((end, d_bwd), (start, d_fwd))
    links = links_from(*first)
    if links is None:
        links = links_from(*second)
    return links


def _hop_distance(mesh: DeviceMesh, a: Coord, b: Coord) -> int | None:
    links = _hop_links(mesh, a, b)
    return None if links is None else len(links)


def _phase_hops(mesh: DeviceMesh, ring: tuple[Coord, ...]) -> list[list[LinkClass]]:
    hops: list[list[LinkClass]] = []
    for a, b in zip(ring, ring[1:]):
        links = _hop_links(mesh, a, b)
        if links is None:
            raise ValueError(f"ring neighbors {a} -> {b} are not connected on this mesh")
        hops.append(links)
    if len(ring) >= 2:
        # The closing hop is priced only when the ring is a true cycle:
        # its shortest traversal must match the per-step hop length.
        step_len = len(hops[0])
        closing = _hop_links(mesh, ring[-1], ring[0])
        if closing is not None and len(closing) == step_len:
            hops.append(closing)
    return hops


def simulate_schedule(
    mesh: DeviceMesh,
    schedule: CollectiveSchedule,
    cost: LinkCostModel,
) -> tuple[float, list[PhaseTiming]]:
    """Makespan of a schedule plus its per-phase timeline."""
    now = 0.0
    timeline: list[PhaseTiming] = []
    for i, phase in enumerate(schedule.phases):
        for d in phase.ring:
            if not mesh.contains(d):
                raise ValueError(f"schedule references device {d} outside the mesh")
        steps = phase.steps
        if steps == 0:
            timeline.append(PhaseTiming(i, phase.kind.value, 0, 0.0, 0.0, 0.0, now, now))
            continue
        hops = _phase_hops(mesh, phase.ring)
        alpha_eff = max(max(cost.alpha[c] for c in hop) for hop in hops)
        beta_eff = max(sum(cost.beta[c] for c in hop) for hop in hops)
        bytes_per_step = phase.bytes_per_device / steps
        if phase.direction is Direction.Bidirectional:
            bytes_per_step = bytes_per_step / 2
        duration = steps * (alpha_eff + bytes_per_step * beta_eff)
        timeline.append(
            PhaseTiming(i, phase.kind.value, steps, alpha_eff, beta_eff, bytes_per_step, now, now + duration)
        )
        now += duration
    return now, timeline


def analytic_ring_time(p: int, n_bytes: float, alpha: float, beta: float, direction="bidirectional") -> float:
    """Closed-form all-reduce time on a uniform p-ring.

    Unidirectional: 2(p-1) alpha + 2(p-1)/p N beta. Bidirectional keeps
    the alpha term and halves the beta term. Written phase-by-phase so
    it is bit-identical to simulate_schedule on the matching schedule.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if p == 1:
        return 0.0
    direction = Direction(direction) if not isinstance(direction, Direction) else direction
    bytes_per_step = n_bytes / p
    if direction is Direction.Bidirectional:
        bytes_per_step = bytes_per_step / 2
    per_phase = (p - 1) * (alpha + bytes_per_step * beta)
    return per_phase + per_phase


# ---------------------------------------------------------------------------
# Scenario sweeps


def epochs_to_train(batch_size: int, table: dict[int, int]) -> int:
    """Configured epoch budget for a global batch size."""
    if batch_size not in table:
        known = ", ".join(str(k) for k in sorted(table))
        raise ValueError(f"no epoch budget for batch {batch_size}; known batches: {known}")
    return table[batch_size]


def mesh_for_chips(chips: int, pod_x: int = 32, pod_y: int = 32, y_torus: bool = True) -> DeviceMesh:
    """Mesh family used by scaling sweeps.

    Counts below one column become a 1-wide column; otherwise chips must
    factor as x * pod_y with x either fitting in one pod or splitting
    into whole pods.
    """
    if chips < 1:
        raise ValueError("chip count must be >= 1")
    if chips < pod_y:
        return build_multipod(1, 1, chips, y_torus)
    if chips % pod_y != 0:
        raise ValueError(f"chip count {chips} not expressible as x*{pod_y} mesh")
    x = chips // pod_y
    if x <= pod_x:
        return build_multipod(1, x, pod_y, y_torus)
    if x % pod_x != 0:
        raise ValueError(f"chip count {chips} not expressible with pod width {pod_x}")
    return build_multipod(x // pod_x, pod_x, pod_y, y_torus)


@dataclass(frozen=True)
class ModelScenario:
    """Inputs netsim needs for one scaling sweep."""

    payload_elements: int
    elem_type: str
    stride: int
    cost: LinkCostModel
    total_work_flops: float
    flops_rate: float
    fixed_overhead_s: float = 0.0
    direction: str = "bidirectional"
    pod_x: int = 32
    pod_y: int = 32
    y_torus: bool = True
    batch: int | None = None
    epoch_table: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class SweepRow:
    chips: int
    breakdown: StepBreakdown
    batch: int | None = None
    epochs: int | None = None


def allreduce_time(scenario: ModelScenario, chips: int) -> float:
    mesh = mesh_for_chips(chips, scenario.pod_x, scenario.pod_y, scenario.y_torus)
    stride = scenario.stride
    if mesh.x_size % stride != 0:
        raise ValueError(f"stride {stride} does not divide mesh x_size {mesh.x_size} at {chips} chips")
    sched = hierarchical_schedule(mesh, stride, scenario.payload_elements, scenario.elem_type, scenario.direction)
    seconds, _ = simulate_schedule(mesh, sched, scenario.cost)
    return seconds


def sweep_scaling(scenario: ModelScenario, chip_counts: list[int]) -> list[SweepRow]:
    """One StepBreakdown per chip count at fixed global work and payload."""
    rows = []
    for chips in chip_counts:
        compute = ComputeModel(
            step_flops=scenario.total_work_flops / chips,
            flops_rate=scenario.flops_rate,
            fixed_overhead=scenario.fixed_overhead_s,
        )
        breakdown = StepBreakdown(
            compute_time=compute.step_time(),
            allreduce_time=allreduce_time(scenario, chips),
        )
        epochs = None
        if scenario.batch is not None and scenario.epoch_table:
            epochs = epochs_to_train(scenario.batch, scenario.epoch_table)
        rows.append(SweepRow(chips=chips, breakdown=breakdown, batch=scenario.batch, epochs=epochs))
    return rows


def e2e_speedup(base: SweepRow, row: SweepRow) -> float:
    """End-to-end speedup of `row` over `base`.

    Throughput speedup (examples/s) scaled by the epoch-budget ratio;
    with equal batches and budgets it reduces to the step-time ratio.
    """
    step_ratio = base.breakdown.step_time / row.breakdown.step_time
    if base.batch is not None and row.batch is not None:
        thr = step_ratio * (row.batch / base.batch)
    else:
        thr = step_ratio
    if base.epochs is not None and row.epochs is not None:
        return thr * (base.epochs / row.epochs)
    return thr


SWEEP_CSV_HEADER = "chips,compute_s,allreduce_s,step_s,allreduce_fraction,e2e_speedup,batch,epochs"


def sweep_csv(rows: list[SweepRow]) -> str:
    """CSV breakdown; e2e_speedup is relative to the smallest chip count."""
    if not rows:
        return SWEEP_CSV_HEADER + "\n"
    base = min(rows, key=lambda r: r.chips)
    out = [SWEEP_CSV_HEADER]
    for r in rows:
        b = r.breakdown
        out.append(
            f"{r.chips},{b.compute_time!r},{b.allreduce_time!r},{b.step_time!r},"
            f"{b.allreduce_fraction!r},{e2e_speedup(base, r)!r},"
            f"{'' if r.batch is None else r.batch},{'' if r.epochs is None else r.epochs}"
        )
    return "\n".join(out) + "\n"
