"""2-D mesh/torus device topologies with multi-pod structure.

A mesh is a grid of devices addressed by zero-based (x, y) coordinates.
Pods are concatenated along X; the links that stitch neighboring pods
together are a distinct class because they are physically longer. Torus
wrap links exist on Y (and optionally X) edges when the matching flag
is set. All values are immutable after construction and every query is
a pure function.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

Coord = tuple[int, int]


class LinkClass(enum.Enum):
    WithinPod = "within_pod"
    CrossPod = "cross_pod"
    TorusWrap = "torus_wrap"


@dataclass(frozen=True)
class DeviceMesh:
    """x_size * y_size devices; pods concatenated along X."""

    x_size: int
    y_size: int
    pods: int = 1
    y_torus: bool = False
    x_torus: bool = False

    def __post_init__(self) -> None:
        if self.x_size < 1 or self.y_size < 1 or self.pods < 1:
            raise ValueError("mesh dimensions and pod count must be >= 1")
        if self.x_size % self.pods != 0:
            raise ValueError(
                f"x_size {self.x_size} not divisible by pods {self.pods}"
            )

    @property
    def pod_x(self) -> int:
        return self.x_size // self.pods

    @property
    def n_devices(self) -> int:
        return self.x_size * self.y_size

    def devices(self) -> list[Coord]:
        return [(x, y) for x in range(self.x_size) for y in range(self.y_size)]

    def contains(self, d: Coord) -> bool:
        x, y = d
        return 0 <= x < self.x_size and 0 <= y < self.y_size

    def check_coord(self, d: Coord) -> None:
        if not self.contains(d):
            raise ValueError(f"coordinate {d} outside {self.x_size}x{self.y_size} mesh")


@dataclass(frozen=True)
class Tile:
    """Model-parallel group: `width` consecutive-x devices on one y."""

    anchor: Coord
    width: int

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError("tile width must be >= 1")

    def devices(self) -> list[Coord]:
        x0, y = self.anchor
        return [(x0 + i, y) for i in range(self.width)]


def build_multipod(pods: int, pod_x: int, pod_y: int, y_torus: bool) -> DeviceMesh:
    """Concatenate `pods` pods of pod_x * pod_y devices along X."""
    if pods < 1 or pod_x < 1 or pod_y < 1:
        raise ValueError("pods, pod_x, pod_y must all be >= 1")
    return DeviceMesh(x_size=pods * pod_x, y_size=pod_y, pods=pods, y_torus=y_torus)


def x_link_class(mesh: DeviceMesh, x: int) -> LinkClass:
    """Class of the link between (x, y) and (x+1, y)."""
    if not 0 <= x < mesh.x_size - 1:
        raise ValueError(f"no X link starting at x={x}")
    # Pod seams sit where the next column starts a new pod.
    if mesh.pods > 1 and (x + 1) % mesh.pod_x == 0:
        return LinkClass.CrossPod
    return LinkClass.WithinPod


def neighbors(mesh: DeviceMesh, d: Coord) -> set[tuple[Coord, LinkClass]]:
    """Mesh-adjacent devices of d, with the class of each link."""
    mesh.check_coord(d)
    x, y = d
    out: set[tuple[Coord, LinkClass]] = set()
    if x > 0:
        out.add(((x - 1, y), x_link_class(mesh, x - 1)))
    if x < mesh.x_size - 1:
        out.add(((x + 1, y), x_link_class(mesh, x)))
    if mesh.x_torus and mesh.x_size > 1:
        wrap = (mesh.x_size - 1, y) if x == 0 else (0, y) if x == mesh.x_size - 1 else None
        if wrap is not None:
            out.add((wrap, LinkClass.TorusWrap))
    if y > 0:
        out.add(((x, y - 1), LinkClass.WithinPod))
    if y < mesh.y_size - 1:
        out.add(((x, y + 1), LinkClass.WithinPod))
    if mesh.y_torus and mesh.y_size > 1:
        wrap = (x, mesh.y_size - 1) if y == 0 else (x, 0) if y == mesh.y_size - 1 else None
        if wrap is not None:
            out.add((wrap, LinkClass.TorusWrap))
    return out


def visible_set(mesh: DeviceMesh, d: Coord) -> set[Coord]:
    """Devices sharing d's row or column, excluding d.

    Models the sparse routing restriction: each device only needs table
    entries for its row and column peers, (x_size-1) + (y_size-1) total,
    which stays far under a 1024-entry table even at 128x32.
    """
    mesh.check_coord(d)
    x, y = d
    row = {(i, y) for i in range(mesh.x_size)}
    col = {(x, j) for j in range(mesh.y_size)}
    return (row | col) - {d}


def ring_y(mesh: DeviceMesh, x: int) -> list[Coord]:
    """The Y-column cycle at column x, usable for ring collectives."""
    if not 0 <= x < mesh.x_size:
        raise ValueError(f"x={x} outside mesh")
    if not mesh.y_torus:
        raise ValueError("ring_y requires y_torus (no wrap link, ring unavailable)")
    return [(x, y) for y in range(mesh.y_size)]


def ring_x_with_stride(mesh: DeviceMesh, y: int, stride: int, offset: int) -> list[Coord]:
    """X-dimension reduction group for model-parallel peer id `offset`.

    Devices (offset, y), (offset+stride, y), ...; stride 1 is pure data
    parallelism (the full row). A path unless x_torus is set.
    """
    if not 0 <= y < mesh.y_size:
        raise ValueError(f"y={y} outside mesh")
    if stride < 1 or mesh.x_size % stride != 0:
        raise ValueError(f"stride {stride} does not divide x_size {mesh.x_size}")
    if not 0 <= offset < stride:
        raise ValueError(f"offset {offset} not in [0, {stride})")
    return [(x, y) for x in range(offset, mesh.x_size, stride)]


def make_tiles(mesh: DeviceMesh, width: int, allow_cross_pod: bool = False) -> list[Tile]:
    """Partition the mesh into width-wide X-line tiles.

    Tiles never straddle a pod seam unless allow_cross_pod is set,
    because the seam links are slower and model-parallel groups are
    meant to sit on neighboring cores.
    """
    limit = mesh.x_size if allow_cross_pod else mesh.pod_x
    if width < 1 or limit % width != 0:
        raise ValueError(
            f"tile width {width} does not divide {'x_size' if allow_cross_pod else 'pod_x'} {limit}"
        )
    return [
        Tile(anchor=(x, y), width=width)
        for y in range(mesh.y_size)
        for x in range(0, mesh.x_size, width)
    ]


def tile_of(mesh: DeviceMesh, d: Coord, width: int, allow_cross_pod: bool = False) -> Tile:
    """The tile containing d under the make_tiles partition."""
    mesh.check_coord(d)
    limit = mesh.x_size if allow_cross_pod else mesh.pod_x
    if width < 1 or limit % width != 0:
        raise ValueError(f"tile width {width} invalid for this mesh")
    x, y = d
    return Tile(anchor=(x - x % width, y), width=width)
