"""Ring collectives executed numerically on in-memory payloads.

Every reduction uses a documented fixed order so runs are bit-identical:
a left fold over participants in ascending ring order. The hierarchical
2-D all-reduce composes a fold along Y (within each column) with a fold
of the column sums along X; that nested order is the canonical sum order
for a 2-D data-parallel group and is what the oracles in the test suite
reproduce. f32 payloads accumulate in f32 throughout. bf16 payloads
accumulate in f32 within a device and are rounded back to bf16 at every
inter-device transfer boundary, i.e. after each addition of the fold.

Each collective also emits the CollectiveSchedule that the cost
simulator prices. Schedules model the critical path: rings that run
concurrently and are cost-isomorphic (all Y columns, all strided X
groups) appear as one representative phase.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .topology import Coord, DeviceMesh, Tile, ring_x_with_stride, ring_y

ELEM_WIDTH = {"f32": 4, "bf16": 2}

UpdateFn = Callable[[np.ndarray, int, int], np.ndarray]


# ---------------------------------------------------------------------------
# bf16 emulation


def bf16_round_array(x: np.ndarray) -> np.ndarray:
    """Round f32 values to the nearest bf16, ties to even; NaN preserved."""
    a = np.ascontiguousarray(x, dtype=np.float32).copy()
    u = a.view(np.uint32)
    nan_mask = np.isnan(a)
    bias = np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1))
    u += bias
    u &= np.uint32(0xFFFF0000)
    if nan_mask.any():
        a[nan_mask] = np.float32(np.nan)
    return a


def bf16_round(x: float) -> float:
    """Nearest bf16-representable value of a single real, ties to even."""
    return float(bf16_round_array(np.array([x], dtype=np.float32))[0])


# ---------------------------------------------------------------------------
# Payload containers


@dataclass(frozen=True)
class Payload:
    """Flat f32 vector with an element-type tag.

    bf16 payloads keep f32 storage but every value must round-trip
    through bf16 unchanged; construct them via Payload.make, which
    rounds first.
    """

    values: np.ndarray
    elem_type: str = "f32"

    def __post_init__(self) -> None:
        if self.elem_type not in ELEM_WIDTH:
            raise ValueError(f"unknown elem_type {self.elem_type!r}")
        v = self.values
        if not isinstance(v, np.ndarray) or v.dtype != np.float32 or v.ndim != 1:
            raise ValueError("payload values must be a 1-D float32 array")
        if self.elem_type == "bf16":
            rounded = bf16_round_array(v)
            if not np.array_equal(rounded, v, equal_nan=True):
                raise ValueError("bf16 payload contains values not representable in bf16")

    @classmethod
    def make(cls, values, elem_type: str = "f32") -> "Payload":
        v = np.asarray(values, dtype=np.float32).ravel().copy()
        if elem_type == "bf16":
            v = bf16_round_array(v)
        return cls(values=v, elem_type=elem_type)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def nbytes(self) -> int:
        return len(self) * ELEM_WIDTH[self.elem_type]


@dataclass(frozen=True)
class ReplicaSet:
    """Devices holding same-length, same-type payloads (e.g. replicas)."""

    devices: tuple[Coord, ...]
    payloads: tuple[Payload, ...]

    def __post_init__(self) -> None:
        if len(self.devices) != len(self.payloads):
            raise ValueError("one payload per device required")
        if len(self.payloads) == 0:
            raise ValueError("empty replica set")
        n = len(self.payloads[0])
        et = self.payloads[0].elem_type
        for p in self.payloads[1:]:
            if len(p) != n:
                raise ValueError("mismatched payload lengths in replica set")
            if p.elem_type != et:
                raise ValueError("mixed elem_type in replica set")

    @property
    def elem_type(self) -> str:
        return self.payloads[0].elem_type


# ---------------------------------------------------------------------------
# Schedules


class PhaseKind(enum.Enum):
    ReduceScatter = "reduce_scatter"
    AllGather = "all_gather"
    Broadcast = "broadcast"
    LocalUpdate = "local_update"


class Direction(enum.Enum):
    Unidirectional = "unidirectional"
    Bidirectional = "bidirectional"


def _as_direction(direction) -> Direction:
    if isinstance(direction, Direction):
        return direction
    try:
        return Direction(direction)
    except ValueError:
        raise ValueError(f"unknown direction {direction!r}") from None


@dataclass(frozen=True)
class Phase:
    """One collective stage over one ring.

    payload_bytes is the per-device input payload of the stage (after
    padding); bytes_per_device is what each device actually sends, which
    for a p-device ring reduce-scatter or all-gather is (p-1)/p of the
    payload regardless of direction.
    """

    kind: PhaseKind
    ring: tuple[Coord, ...]
    direction: Direction
    bytes_per_device: int
    payload_bytes: int

    @property
    def steps(self) -> int:
        if self.kind is PhaseKind.LocalUpdate:
            return 0
        return max(0, len(self.ring) - 1)

    def record(self) -> dict:
        return {
            "kind": self.kind.value,
            "ring_len": len(self.ring),
            "steps": self.steps,
            "direction": self.direction.value,
            "bytes_per_device": self.bytes_per_device,
            "payload_bytes": self.payload_bytes,
        }


@dataclass(frozen=True)
class CollectiveSchedule:
    phases: tuple[Phase, ...] = field(default_factory=tuple)

    def records(self) -> list[dict]:
        return [p.record() for p in self.phases]

    def bytes_per_device(self) -> int:
        return sum(p.bytes_per_device for p in self.phases)

    def __add__(self, other: "CollectiveSchedule") -> "CollectiveSchedule":
        return CollectiveSchedule(self.phases + other.phases)


def schedule_csv(schedule: CollectiveSchedule) -> str:
    header = "kind,ring_len,steps,direction,bytes_per_device,payload_bytes"
    rows = [header]
    for p in schedule.phases:
        r = p.record()
        rows.append(
            f"{r['kind']},{r['ring_len']},{r['steps']},{r['direction']},"
            f"{r['bytes_per_device']},{r['payload_bytes']}"
        )
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Fixed-order folds


def fold_sum(arrays: list[np.ndarray], elem_type: str) -> np.ndarray:
    """Left fold in list order; bf16 rounds after every addition."""
    acc = arrays[0].astype(np.float32).copy()
    if elem_type == "bf16":
        for a in arrays[1:]:
            acc = bf16_round_array(acc + a)
    else:
        for a in arrays[1:]:
            acc += a
    return acc


def _pad_to(values: np.ndarray, m: int) -> np.ndarray:
    if len(values) == m:
        return values.astype(np.float32).copy()
    out = np.zeros(m, dtype=np.float32)
    out[: len(values)] = values
    return out


def _check_uniform(payloads: list[Payload]) -> tuple[int, str]:
    if not payloads:
        raise ValueError("no payloads")
    n = len(payloads[0])
    et = payloads[0].elem_type
    for p in payloads[1:]:
        if len(p) != n:
            raise ValueError("mismatched payload lengths")
        if p.elem_type != et:
            raise ValueError("mixed elem_type across payloads")
    return n, et


# ---------------------------------------------------------------------------
# Ring collectives


def ring_reduce_scatter(
    ring: list[Coord],
    payloads: list[Payload],
    direction="bidirectional",
) -> tuple[list[Payload], CollectiveSchedule]:
    """Device i ends with shard i of the ascending-ring-order sum.

    Payload length is zero-padded to a multiple of p; the pad travels
    with the tail shard and is stripped by the matching all-gather.
    """
    direction = _as_direction(direction)
    if len(ring) != len(payloads):
        raise ValueError("one payload per ring device required")
    n, et = _check_uniform(payloads)
    p = len(ring)
    m = p * math.ceil(n / p) if n else 0
    total = fold_sum([_pad_to(q.values, m) for q in payloads], et)
    shard_len = m // p if p else 0
    shards = [
        Payload(total[i * shard_len : (i + 1) * shard_len].copy(), et) for i in range(p)
    ]
    phases = []
    if p > 1:
        width = ELEM_WIDTH[et]
        phases.append(
            Phase(
                kind=PhaseKind.ReduceScatter,
                ring=tuple(ring),
                direction=direction,
                bytes_per_device=(p - 1) * shard_len * width,
                payload_bytes=m * width,
            )
        )
    return shards, CollectiveSchedule(tuple(phases))


def ring_all_gather(
    ring: list[Coord],
    shards: list[Payload],
    direction="bidirectional",
    final_len: int | None = None,
) -> tuple[list[Payload], CollectiveSchedule]:
    """Every device ends with the concatenation of all shards in ring order."""
    direction = _as_direction(direction)
    if len(ring) != len(shards):
        raise ValueError("one shard per ring device required")
    shard_len, et = _check_uniform(shards)
    p = len(ring)
    full = np.concatenate([s.values for s in shards]) if p else np.zeros(0, np.float32)
    if final_len is not None:
        full = full[:final_len].copy()
    out = [Payload(full.copy(), et) for _ in range(p)]
    phases = []
    if p > 1:
        width = ELEM_WIDTH[et]
        phases.append(
            Phase(
                kind=PhaseKind.AllGather,
                ring=tuple(ring),
                direction=direction,
                bytes_per_device=(p - 1) * shard_len * width,
                payload_bytes=shard_len * width,
            )
        )
    return out, CollectiveSchedule(tuple(phases))


def all_reduce(
    ring: list[Coord],
    payloads: list[Payload],
    elem_type: str | None = None,
    direction="bidirectional",
) -> tuple[list[Payload], CollectiveSchedule]:
    """Reduce-scatter then all-gather; all devices end with the sum.

    The sum is the ascending-ring-order fold; for bf16 every partial sum
    is bf16-rounded after each addition.
    """
    n, et = _check_uniform(payloads)
    if elem_type is not None and elem_type != et:
        raise ValueError(f"payloads are {et}, not {elem_type}")
    shards, sched_rs = ring_reduce_scatter(ring, payloads, direction)
    full, sched_ag = ring_all_gather(ring, shards, direction, final_len=n)
    return full, sched_rs + sched_ag


def model_parallel_allreduce(
    tile: Tile,
    activations: list[Payload],
    direction="bidirectional",
) -> tuple[list[Payload], CollectiveSchedule]:
    """All-reduce over one model-parallel tile's short X-line ring."""
    ring = tile.devices()
    if len(activations) != len(ring):
        raise ValueError("one activation payload per tile device required")
    return all_reduce(ring, activations, direction=direction)


# ---------------------------------------------------------------------------
# Hierarchical 2-D all-reduce


@dataclass(frozen=True)
class GroupLayout:
    """Padded shard layout of one data-parallel group (one peer offset).

    The payload is padded once to m = slot * p_y * p_x. The device at
    Y-position yi and X-group-position xj owns the slot starting at
    (yi * p_x + xj) * slot.
    """

    offset: int
    columns: tuple[int, ...]
    n: int
    p_y: int
    p_x: int

    @property
    def slot(self) -> int:
        parts = self.p_y * self.p_x
        return math.ceil(self.n / parts) if self.n else 0

    @property
    def m(self) -> int:
        return self.slot * self.p_y * self.p_x

    def slot_start(self, yi: int, xj: int) -> int:
        return (yi * self.p_x + xj) * self.slot


def group_layout(mesh: DeviceMesh, stride: int, offset: int, n: int) -> GroupLayout:
    if stride < 1 or mesh.x_size % stride != 0:
        raise ValueError(f"stride {stride} does not divide x_size {mesh.x_size}")
    if not 0 <= offset < stride:
        raise ValueError(f"offset {offset} not in [0, {stride})")
    return GroupLayout(
        offset=offset,
        columns=tuple(range(offset, mesh.x_size, stride)),
        n=n,
        p_y=mesh.y_size,
        p_x=mesh.x_size // stride,
    )


def hierarchical_allreduce_2d(
    mesh: DeviceMesh,
    stride: int,
    grads: dict[Coord, Payload],
    update_fn: UpdateFn | None = None,
    direction="bidirectional",
) -> tuple[dict[Coord, Payload], CollectiveSchedule]:
    """Y reduce-scatter, strided-X reduce-scatter, local update, then
    broadcast (all-gather) along X and along Y.

    Every device of a data-parallel group (the x = offset mod stride
    columns) ends with update_fn applied to that group's gradient sum,
    where the sum order is the canonical nested fold: ascending-y within
    each column, then ascending-x across column sums. update_fn takes
    (shard_values, start_index_in_padded_vector, group_offset) and must
    return a same-length array; identity when absent.

    The stride groups execute concurrently and so do the per-column /
    per-row rings within each phase; the returned schedule carries one
    representative phase per stage, sized by the largest group payload.
    """
    direction = _as_direction(direction)
    if stride < 1 or mesh.x_size % stride != 0:
        raise ValueError(f"stride {stride} does not divide x_size {mesh.x_size}")
    missing = [d for d in mesh.devices() if d not in grads]
    if missing:
        raise ValueError(f"missing gradient payload for device {missing[0]}")
    if mesh.y_size > 1 and not mesh.y_torus:
        raise ValueError("hierarchical allreduce needs y_torus for its Y rings")

    results: dict[Coord, Payload] = {}
    layouts: list[GroupLayout] = []
    for offset in range(stride):
        columns = list(range(offset, mesh.x_size, stride))
        group_payloads = [grads[(x, y)] for x in columns for y in range(mesh.y_size)]
        try:
            n, et = _check_uniform(group_payloads)
        except ValueError as e:
            raise ValueError(f"data-parallel group offset={offset}: {e}") from e
        lay = group_layout(mesh, stride, offset, n)
        layouts.append(lay)

        # Phase 1: Y reduce-scatter. Numerically each column folds to its
        # column sum; device (x, y) holds the y-th slice of it.
        col_sums = {
            x: fold_sum([_pad_to(grads[(x, y)].values, lay.m) for y in range(mesh.y_size)], et)
            for x in columns
        }
        # Phase 2: strided-X reduce-scatter of the column sums.
        group_total = fold_sum([col_sums[x] for x in columns], et)
        # Phase 3: local update on each owned slot.
        updated = group_total.copy()
        if lay.slot:
            for k in range(lay.p_y * lay.p_x):
                start = k * lay.slot
                shard = group_total[start : start + lay.slot]
                if update_fn is not None:
                    new = np.asarray(update_fn(shard.copy(), start, offset), dtype=np.float32)
                    if new.shape != shard.shape:
                        raise ValueError("update_fn changed shard length")
                else:
                    new = shard
                if et == "bf16":
                    new = bf16_round_array(new)
                updated[start : start + lay.slot] = new
        # Phases 4-5: all-gathers rebuild the full vector everywhere.
        final = updated[:n].copy()
        for x in columns:
            for y in range(mesh.y_size):
                results[(x, y)] = Payload(final.copy(), et)

    widths = [ELEM_WIDTH[grads[(l.columns[0], 0)].elem_type] for l in layouts]
    idx = max(range(len(layouts)), key=lambda i: layouts[i].m * widths[i])
    sched = _hierarchical_phases(
        mesh, stride, layouts[idx], grads[(layouts[idx].columns[0], 0)].elem_type, direction
    )
    return results, sched


def _hierarchical_phases(
    mesh: DeviceMesh,
    stride: int,
    lay: GroupLayout,
    elem_type: str,
    direction: Direction,
) -> CollectiveSchedule:
    width = ELEM_WIDTH[elem_type]
    yshard = lay.m // lay.p_y if lay.p_y else 0
    y_ring = tuple(ring_y(mesh, lay.columns[0])) if mesh.y_size > 1 else ()
    x_ring = (
        tuple(ring_x_with_stride(mesh, 0, stride, lay.offset)) if lay.p_x > 1 else ()
    )
    phases: list[Phase] = []
    if y_ring:
        phases.append(
            Phase(
                kind=PhaseKind.ReduceScatter,
                ring=y_ring,
                direction=direction,
                bytes_per_device=(lay.p_y - 1) * yshard * width,
                payload_bytes=lay.m * width,
            )
        )
    if x_ring:
        phases.append(
            Phase(
                kind=PhaseKind.ReduceScatter,
                ring=x_ring,
                direction=direction,
                bytes_per_device=(lay.p_x - 1) * lay.slot * width,
                payload_bytes=yshard * width,
            )
        )
    phases.append(
        Phase(
            kind=PhaseKind.LocalUpdate,
            ring=((lay.columns[0], 0),),
            direction=direction,
            bytes_per_device=0,
            payload_bytes=lay.slot * width,
        )
    )
    if x_ring:
        phases.append(
            Phase(
                kind=PhaseKind.AllGather,
                ring=x_ring,
                direction=direction,
                bytes_per_device=(lay.p_x - 1) * lay.slot * width,
                payload_bytes=lay.slot * width,
            )
        )
    if y_ring:
        phases.append(
            Phase(
                kind=PhaseKind.AllGather,
                ring=y_ring,
                direction=direction,
                bytes_per_device=(lay.p_y - 1) * yshard * width,
                payload_bytes=yshard * width,
            )
        )
    return CollectiveSchedule(tuple(phases))


def hierarchical_schedule(
    mesh: DeviceMesh,
    stride: int,
    n_elements: int,
    elem_type: str = "f32",
    direction="bidirectional",
) -> CollectiveSchedule:
    """The schedule hierarchical_allreduce_2d would emit, without payloads."""
    direction = _as_direction(direction)
    if mesh.y_size > 1 and not mesh.y_torus:
        raise ValueError("hierarchical allreduce needs y_torus for its Y rings")
    lay = group_layout(mesh, stride, 0, n_elements)
    return _hierarchical_phases(mesh, stride, lay, elem_type, direction)
