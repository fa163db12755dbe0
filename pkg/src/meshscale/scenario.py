"""Scenario configuration: strict YAML schema shared by all CLI commands.

Every key is validated with its full dotted path in diagnostics, and
unknown keys are errors, so scenario files double as documentation of
the available knobs. Parsing is total: a parsed Scenario serializes
back to an equivalent document (round-trip identity).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .netsim import LinkCostModel, ModelScenario
from .sharding import OptimizerSpec
from .topology import DeviceMesh, LinkClass, build_multipod


class ConfigError(ValueError):
    """Malformed scenario configuration; CLI exit code 2."""


_MISSING = object()


class _Block:
    """One mapping node; tracks consumed keys so leftovers are errors."""

    def __init__(self, data: dict, path: str):
        self.data = dict(data)
        self.path = path

    def _full(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind: str, default=_MISSING):
        if key not in self.data:
            if default is _MISSING:
                raise ConfigError(f"missing required key: {self._full(key)}")
            return default
        value = self.data.pop(key)
        return _coerce(value, kind, self._full(key))

    def child(self, key: str, required: bool = False) -> "_Block | None":
        if key not in self.data:
            if required:
                raise ConfigError(f"missing required key: {self._full(key)}")
            return None
        value = self.data.pop(key)
        if not isinstance(value, dict):
            raise ConfigError(f"{self._full(key)}: expected a mapping")
        return _Block(value, self._full(key))

    def done(self) -> None:
        if self.data:
            key = sorted(self.data)[0]
            raise ConfigError(f"unknown key: {self._full(key)}")


def _coerce(value, kind: str, path: str):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if kind == "int_list":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{path}: expected a non-empty list of integers")
        return tuple(_coerce(v, "int", f"{path}[{i}]") for i, v in enumerate(value))
    raise AssertionError(f"unknown kind {kind}")


def _positive(value, path: str):
    if value <= 0:
        raise ConfigError(f"{path}: must be > 0")
    return value


# ---------------------------------------------------------------------------
# Config blocks


@dataclass(frozen=True)
class MeshConfig:
    pods: int = 1
    pod_x: int = 1
    pod_y: int = 1
    y_torus: bool = True
    devices_per_host: int = 8

    def build(self) -> DeviceMesh:
        return build_multipod(self.pods, self.pod_x, self.pod_y, self.y_torus)


@dataclass(frozen=True)
class PayloadConfig:
    elements: int = 1_048_576
    elem_type: str = "f32"


@dataclass(frozen=True)
class CostConfig:
    alpha_within_pod: float = 1.0e-6
    alpha_cross_pod: float = 2.0e-6
    alpha_torus_wrap: float = 1.0e-6
    beta_within_pod: float = 8.56e-12
    beta_cross_pod: float = 8.56e-12
    beta_torus_wrap: float = 8.56e-12
    direction: str = "bidirectional"

    def build(self) -> LinkCostModel:
        return LinkCostModel(
            alpha={
                LinkClass.WithinPod: self.alpha_within_pod,
                LinkClass.CrossPod: self.alpha_cross_pod,
                LinkClass.TorusWrap: self.alpha_torus_wrap,
            },
            beta={
                LinkClass.WithinPod: self.beta_within_pod,
                LinkClass.CrossPod: self.beta_cross_pod,
                LinkClass.TorusWrap: self.beta_torus_wrap,
            },
        )


@dataclass(frozen=True)
class ComputeConfig:
    total_work_flops: float = 1.0e15
    flops_rate: float = 1.0e14
    fixed_overhead_s: float = 0.0


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    flops_per_element: float | None = None
    anchor_chips: int = 512

    def build(self) -> OptimizerSpec:
        return OptimizerSpec(
            kind=self.kind,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            weight_decay=self.weight_decay,
            flops_per_element=self.flops_per_element,
        )


@dataclass(frozen=True)
class ShuffleConfig:
    files: int = 10
    examples_per_file: int = 100
    epochs: int = 2
    buffer_sizes: tuple[int, ...] = (2, 250, 1000)
    batch_size: int = 50
    n_seeds: int = 100


@dataclass(frozen=True)
class MetricsConfig:
    n_examples: int = 10_000
    n_devices: int = 8
    per_device_batch: int = 16
    auc_samples: int = 2_000


@dataclass(frozen=True)
class TableEntry:
    rows: int
    row_bytes: int


@dataclass(frozen=True)
class TablesConfig:
    capacity_bytes: int
    tables: tuple[TableEntry, ...]
    threshold_bytes: int | None = None


@dataclass(frozen=True)
class VerifyConfig:
    payload_elements: int = 257
    weight_elements: int = 130


@dataclass(frozen=True)
class Scenario:
    mesh: MeshConfig
    name: str = "scenario"
    stride: int = 1
    batch: int | None = None
    payload: PayloadConfig = PayloadConfig()
    cost: CostConfig = CostConfig()
    compute: ComputeConfig = ComputeConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    epoch_table: tuple[tuple[int, int], ...] = ()
    sweep_chip_counts: tuple[int, ...] | None = None
    shuffle: ShuffleConfig = ShuffleConfig()
    metrics: MetricsConfig = MetricsConfig()
    tables: TablesConfig | None = None
    verify: VerifyConfig = VerifyConfig()

    def device_mesh(self) -> DeviceMesh:
        return self.mesh.build()

    def epochs(self) -> dict[int, int]:
        return dict(self.epoch_table)

    def model_scenario(self) -> ModelScenario:
        return ModelScenario(
            payload_elements=self.payload.elements,
            elem_type=self.payload.elem_type,
            stride=self.stride,
            cost=self.cost.build(),
            total_work_flops=self.compute.total_work_flops,
            flops_rate=self.compute.flops_rate,
            fixed_overhead_s=self.compute.fixed_overhead_s,
            direction=self.cost.direction,
            pod_x=self.mesh.pod_x,
            pod_y=self.mesh.pod_y,
            y_torus=self.mesh.y_torus,
            batch=self.batch,
            epoch_table=self.epochs(),
        )


# ---------------------------------------------------------------------------
# Parsing


def parse_scenario(data) -> Scenario:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("scenario file must contain a mapping")
    top = _Block(data, "")

    mesh_block = top.child("mesh", required=True)
    mesh = MeshConfig(
        pods=_positive(mesh_block.take("pods", "int", 1), "mesh.pods"),
        pod_x=_positive(mesh_block.take("pod_x", "int", 1), "mesh.pod_x"),
        pod_y=_positive(mesh_block.take("pod_y", "int", 1), "mesh.pod_y"),
        y_torus=mesh_block.take("y_torus", "bool", True),
        devices_per_host=_positive(mesh_block.take("devices_per_host", "int", 8), "mesh.devices_per_host"),
    )
    mesh_block.done()

    name = top.take("name", "str", "scenario")
    stride = _positive(top.take("stride", "int", 1), "stride")
    x_size = mesh.pods * mesh.pod_x
    if x_size % stride != 0:
        raise ConfigError(f"stride: {stride} does not divide mesh x_size {x_size}")
    batch = top.take("batch", "int", None)
    if batch is not None:
        _positive(batch, "batch")

    payload = PayloadConfig()
    if (b := top.child("payload")) is not None:
        payload = PayloadConfig(
            elements=_positive(b.take("elements", "int", payload.elements), "payload.elements"),
            elem_type=b.take("elem_type", "str", payload.elem_type),
        )
        if payload.elem_type not in ("f32", "bf16"):
            raise ConfigError(f"payload.elem_type: expected f32 or bf16, got {payload.elem_type!r}")
        b.done()

    cost = CostConfig()
    if (b := top.child("cost")) is not None:
        kwargs = {}
        for group in ("alpha", "beta"):
            if (g := b.child(group)) is not None:
                for cls in ("within_pod", "cross_pod", "torus_wrap"):
                    default = getattr(cost, f"{group}_{cls}")
                    value = g.take(cls, "float", default)
                    if value < 0:
                        raise ConfigError(f"cost.{group}.{cls}: must be >= 0")
                    kwargs[f"{group}_{cls}"] = value
                g.done()
        direction = b.take("direction", "str", cost.direction)
        if direction not in ("unidirectional", "bidirectional"):
            raise ConfigError(
                f"cost.direction: expected unidirectional or bidirectional, got {direction!r}"
            )
        b.done()
        cost = CostConfig(direction=direction, **kwargs)
        try:
            cost.build()
        except ValueError as e:
            raise ConfigError(f"cost: {e}") from e

    compute = ComputeConfig()
    if (b := top.child("compute")) is not None:
        compute = ComputeConfig(
            total_work_flops=b.take("total_work_flops", "float", compute.total_work_flops),
            flops_rate=b.take("flops_rate", "float", compute.flops_rate),
            fixed_overhead_s=b.take("fixed_overhead_s", "float", compute.fixed_overhead_s),
        )
        b.done()
        for f in ("total_work_flops", "flops_rate", "fixed_overhead_s"):
            if getattr(compute, f) < 0:
                raise ConfigError(f"compute.{f}: must be >= 0")

    optimizer = OptimizerConfig()
    if (b := top.child("optimizer")) is not None:
        optimizer = OptimizerConfig(
            kind=b.take("kind", "str", optimizer.kind),
            learning_rate=b.take("learning_rate", "float", optimizer.learning_rate),
            momentum=b.take("momentum", "float", optimizer.momentum),
            beta1=b.take("beta1", "float", optimizer.beta1),
            beta2=b.take("beta2", "float", optimizer.beta2),
            eps=b.take("eps", "float", optimizer.eps),
            weight_decay=b.take("weight_decay", "float", optimizer.weight_decay),
            flops_per_element=b.take("flops_per_element", "float", None),
            anchor_chips=_positive(b.take("anchor_chips", "int", optimizer.anchor_chips), "optimizer.anchor_chips"),
        )
        b.done()
        try:
            optimizer.build()
        except ValueError as e:
            raise ConfigError(f"optimizer: {e}") from e

    epoch_table: tuple[tuple[int, int], ...] = ()
    if "epoch_table" in top.data:
        raw = top.data.pop("epoch_table")
        if not isinstance(raw, dict) or not raw:
            raise ConfigError("epoch_table: expected a non-empty mapping of batch -> epochs")
        entries = []
        for k, v in raw.items():
            kk = _coerce(k, "int", f"epoch_table.{k}")
            vv = _coerce(v, "int", f"epoch_table.{k}")
            entries.append((_positive(kk, f"epoch_table.{k}"), _positive(vv, f"epoch_table.{k}")))
        epoch_table = tuple(sorted(entries))

    sweep_chip_counts = None
    if (b := top.child("sweep")) is not None:
        sweep_chip_counts = b.take("chip_counts", "int_list")
        for i, c in enumerate(sweep_chip_counts):
            _positive(c, f"sweep.chip_counts[{i}]")
        b.done()

    shuffle = ShuffleConfig()
    if (b := top.child("shuffle")) is not None:
        buffer_sizes = b.take("buffer_sizes", "int_list", shuffle.buffer_sizes)
        shuffle = ShuffleConfig(
            files=_positive(b.take("files", "int", shuffle.files), "shuffle.files"),
            examples_per_file=_positive(
                b.take("examples_per_file", "int", shuffle.examples_per_file), "shuffle.examples_per_file"
            ),
            epochs=_positive(b.take("epochs", "int", shuffle.epochs), "shuffle.epochs"),
            buffer_sizes=tuple(
                _positive(v, f"shuffle.buffer_sizes[{i}]") for i, v in enumerate(buffer_sizes)
            ),
            batch_size=_positive(b.take("batch_size", "int", shuffle.batch_size), "shuffle.batch_size"),
            n_seeds=_positive(b.take("n_seeds", "int", shuffle.n_seeds), "shuffle.n_seeds"),
        )
        b.done()

    metrics = MetricsConfig()
    if (b := top.child("metrics")) is not None:
        metrics = MetricsConfig(
            n_examples=_positive(b.take("n_examples", "int", metrics.n_examples), "metrics.n_examples"),
            n_devices=_positive(b.take("n_devices", "int", metrics.n_devices), "metrics.n_devices"),
            per_device_batch=_positive(
                b.take("per_device_batch", "int", metrics.per_device_batch), "metrics.per_device_batch"
            ),
            auc_samples=_positive(b.take("auc_samples", "int", metrics.auc_samples), "metrics.auc_samples"),
        )
        b.done()

    tables = None
    if (b := top.child("tables")) is not None:
        capacity = _positive(b.take("capacity_bytes", "int"), "tables.capacity_bytes")
        threshold = b.take("threshold_bytes", "int", None)
        if threshold is not None and threshold < 0:
            raise ConfigError("tables.threshold_bytes: must be >= 0")
        raw = b.data.pop("tables", None)
        if not isinstance(raw, list) or not raw:
            raise ConfigError("tables.tables: expected a non-empty list")
        entries = []
        for i, item in enumerate(raw):
            if not isinstance(item, dict):
                raise ConfigError(f"tables.tables[{i}]: expected a mapping")
            tb = _Block(item, f"tables.tables[{i}]")
            entries.append(
                TableEntry(
                    rows=_positive(tb.take("rows", "int"), f"tables.tables[{i}].rows"),
                    row_bytes=_positive(tb.take("row_bytes", "int"), f"tables.tables[{i}].row_bytes"),
                )
            )
            tb.done()
        b.done()
        tables = TablesConfig(capacity_bytes=capacity, threshold_bytes=threshold, tables=tuple(entries))

    verify = VerifyConfig()
    if (b := top.child("verify")) is not None:
        verify = VerifyConfig(
            payload_elements=_positive(
                b.take("payload_elements", "int", verify.payload_elements), "verify.payload_elements"
            ),
            weight_elements=_positive(
                b.take("weight_elements", "int", verify.weight_elements), "verify.weight_elements"
            ),
        )
        b.done()

    top.done()
    scenario = Scenario(
        mesh=mesh,
        name=name,
        stride=stride,
        batch=batch,
        payload=payload,
        cost=cost,
        compute=compute,
        optimizer=optimizer,
        epoch_table=epoch_table,
        sweep_chip_counts=sweep_chip_counts,
        shuffle=shuffle,
        metrics=metrics,
        tables=tables,
        verify=verify,
    )
    try:
        scenario.device_mesh()
    except ValueError as e:
        raise ConfigError(f"mesh: {e}") from e
    return scenario


def scenario_to_dict(s: Scenario) -> dict:
    out: dict = {
        "name": s.name,
        "mesh": {
            "pods": s.mesh.pods,
            "pod_x": s.mesh.pod_x,
            "pod_y": s.mesh.pod_y,
            "y_torus": s.mesh.y_torus,
            "devices_per_host": s.mesh.devices_per_host,
        },
        "stride": s.stride,
        "payload": {"elements": s.payload.elements, "elem_type": s.payload.elem_type},
        "cost": {
            "alpha": {
                "within_pod": s.cost.alpha_within_pod,
                "cross_pod": s.cost.alpha_cross_pod,
                "torus_wrap": s.cost.alpha_torus_wrap,
            },
            "beta": {
                "within_pod": s.cost.beta_within_pod,
                "cross_pod": s.cost.beta_cross_pod,
                "torus_wrap": s.cost.beta_torus_wrap,
            },
            "direction": s.cost.direction,
        },
        "compute": {
            "total_work_flops": s.compute.total_work_flops,
            "flops_rate": s.compute.flops_rate,
            "fixed_overhead_s": s.compute.fixed_overhead_s,
        },
        "optimizer": {
            "kind": s.optimizer.kind,
            "learning_rate": s.optimizer.learning_rate,
            "momentum": s.optimizer.momentum,
            "beta1": s.optimizer.beta1,
            "beta2": s.optimizer.beta2,
            "eps": s.optimizer.eps,
            "weight_decay": s.optimizer.weight_decay,
            "anchor_chips": s.optimizer.anchor_chips,
        },
        "shuffle": {
            "files": s.shuffle.files,
            "examples_per_file": s.shuffle.examples_per_file,
            "epochs": s.shuffle.epochs,
            "buffer_sizes": list(s.shuffle.buffer_sizes),
            "batch_size": s.shuffle.batch_size,
            "n_seeds": s.shuffle.n_seeds,
        },
        "metrics": {
            "n_examples": s.metrics.n_examples,
            "n_devices": s.metrics.n_devices,
            "per_device_batch": s.metrics.per_device_batch,
            "auc_samples": s.metrics.auc_samples,
        },
        "verify": {
            "payload_elements": s.verify.payload_elements,
            "weight_elements": s.verify.weight_elements,
        },
    }
    if s.optimizer.flops_per_element is not None:
        out["optimizer"]["flops_per_element"] = s.optimizer.flops_per_element
    if s.batch is not None:
        out["batch"] = s.batch
    if s.epoch_table:
        out["epoch_table"] = {k: v for k, v in s.epoch_table}
    if s.sweep_chip_counts is not None:
        out["sweep"] = {"chip_counts": list(s.sweep_chip_counts)}
    if s.tables is not None:
        out["tables"] = {
            "capacity_bytes": s.tables.capacity_bytes,
            "tables": [{"rows": t.rows, "row_bytes": t.row_bytes} for t in s.tables.tables],
        }
        if s.tables.threshold_bytes is not None:
            out["tables"]["threshold_bytes"] = s.tables.threshold_bytes
    return out


def scenario_to_yaml(s: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False)


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e
    return parse_scenario(data)
