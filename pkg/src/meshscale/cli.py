"""meshscale command-line interface.

Subcommands: verify (oracle-equivalence suites), simulate (scaling
sweep), plan (weight-update sharding / table placement / optimizer
cost), metrics (distributed eval on synthetic data), shuffle-sim
(coverage & dispersion study), report (merge sweep CSVs into a speedup
table). Exit codes: 0 all checks pass, 1 verification failure, 2
config/input error.
"""

from __future__ import annotations

import argparse
import csv as csv_mod
import hashlib
import io
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import collectives, infeed, metrics as metrics_mod, netsim, partitioner, sharding
from .scenario import ConfigError, Scenario, load_scenario
from .topology import build_multipod

DEFAULT_SCENARIO = "resnet50_multipod.yaml"


class VerificationFailure(Exception):
    pass


def _default_scenario_path() -> Path:
    return Path(str(resources.files("meshscale").joinpath("scenarios", DEFAULT_SCENARIO)))


def _load(args) -> tuple[Scenario, Path]:
    path = Path(args.config) if args.config else _default_scenario_path()
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return load_scenario(path), path


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _csv_to_table(text: str, title: str | None = None) -> str:
    """Align a CSV's columns for terminal reading; comment lines pass through."""
    rows = []
    comments = []
    for line in text.strip().splitlines():
        if line.startswith("#"):
            comments.append(line)
        elif line:
            rows.append(line.split(","))
    if not rows:
        return (title + "\n") if title else ""
    widths = [max(len(r[i]) if i < len(r) else 0 for r in rows) for i in range(max(map(len, rows)))]
    lines = []
    if title:
        lines.append(title)
    for r in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip())
    lines.extend(comments)
    return "\n".join(lines) + "\n"


def _format(text_csv: str, fmt: str, title: str | None = None) -> str:
    return text_csv if fmt == "csv" else _csv_to_table(text_csv, title)


# ---------------------------------------------------------------------------
# verify


def _pairwise_auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float32)
    lab = np.asarray(labels)
    pos = s[lab == 1]
    neg = s[lab == 0]
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (2 * wins + ties) / (2 * pos.size * neg.size)


def _check_collectives(scenario: Scenario, rng: np.random.Generator) -> None:
    cases = [
        (build_multipod(1, 1, 1, True), 1),
        (build_multipod(1, 2, 2, True), 1),
        (build_multipod(1, 4, 4, True), 1),
        (build_multipod(1, 4, 4, True), 2),
    ]
    sizes = [1, 7, 64, scenario.verify.payload_elements]
    for mesh, stride in cases:
        for n in sizes:
            grads = {
                d: collectives.Payload(rng.integers(-1000, 1000, size=n).astype(np.float32), "f32")
                for d in mesh.devices()
            }
            results, _ = collectives.hierarchical_allreduce_2d(mesh, stride, grads)
            for offset in range(stride):
                cols = range(offset, mesh.x_size, stride)
                exact = np.zeros(n, dtype=np.int64)
                for x in cols:
                    for y in range(mesh.y_size):
                        exact += grads[(x, y)].values.astype(np.int64)
                expected = exact.astype(np.float32)
                for x in cols:
                    for y in range(mesh.y_size):
                        got = results[(x, y)].values
                        if not np.array_equal(got, expected):
                            raise VerificationFailure(
                                f"mesh {mesh.x_size}x{mesh.y_size} stride {stride} n={n}: "
                                f"device ({x},{y}) sum mismatch"
                            )


def _check_sharding(scenario: Scenario, rng: np.random.Generator) -> None:
    mesh = build_multipod(1, 4, 2, True)
    n = scenario.verify.weight_elements

    def one_step(stride, opt, plan, weights, state, ref_states):
        grads = {d: rng.integers(-50, 50, size=n).astype(np.float32) for d in mesh.devices()}
        new_w, state, _ = sharding.sharded_update(mesh, stride, weights, grads, opt, state)
        ref_w = {}
        for o in range(stride):
            members = [
                grads[(x, y)] for x in range(o, mesh.x_size, stride) for y in range(mesh.y_size)
            ]
            ref_w[o], ref_states[o] = sharding.replicated_update(
                weights, members, opt, ref_states[o], plan.bounds
            )
        for d, w in new_w.items():
            if not np.array_equal(w, ref_w[d[0] % stride]):
                raise VerificationFailure(f"{opt.kind} stride {stride}: mismatch on device {d}")
        return ref_w, state, ref_states

    for kind in ("sgd", "momentum", "lamb_like"):
        opt = sharding.OptimizerSpec(kind=kind, learning_rate=0.05, weight_decay=0.01)
        # stride 1: two consecutive steps carry optimizer state forward
        plan = sharding.WeightUpdateShardingPlan.build(mesh, 1, n)
        weights = rng.standard_normal(n).astype(np.float32)
        state, ref_states = None, {0: None}
        ref_w, state, ref_states = one_step(1, opt, plan, weights, state, ref_states)
        one_step(1, opt, plan, ref_w[0], state, ref_states)
        # stride 2: two concurrent groups, one step from shared weights
        plan = sharding.WeightUpdateShardingPlan.build(mesh, 2, n)
        weights = rng.standard_normal(n).astype(np.float32)
        one_step(2, opt, plan, weights, None, {0: None, 1: None})


def _check_partitioner(scenario: Scenario, rng: np.random.Generator) -> None:
    img = rng.standard_normal((8, 8)).astype(np.float32)
    kern = rng.standard_normal((3, 3)).astype(np.float32)
    whole = partitioner.conv2d(img, kern)
    for parts in (1, 2, 4):
        got, _ = partitioner.spatial_partition_conv(img, kern, parts)
        if not np.array_equal(got, whole):
            raise VerificationFailure(f"spatial conv parts={parts} mismatch")
    a = rng.standard_normal((4, 6)).astype(np.float32)
    w = rng.standard_normal((6, 8)).astype(np.float32)
    dense = partitioner.kernels.matmul_fixed(a, w)
    for parts in (2, 3):
        got, _ = partitioner.sharded_matmul_feature(a, w, parts, "f")
        if not np.array_equal(got, dense):
            raise VerificationFailure(f"f-sharded matmul parts={parts} mismatch")
        got, _ = partitioner.sharded_matmul_feature(a, w, parts, "d")
        # blocked fixed-order oracle
        ap = partitioner._pad_axis(a, 1, parts)
        wp = partitioner._pad_axis(w, 0, parts)
        blk = ap.shape[1] // parts
        expect = None
        for p in range(parts):
            part = partitioner.kernels.matmul_fixed(
                ap[:, p * blk : (p + 1) * blk], wp[p * blk : (p + 1) * blk, :]
            )
            expect = part if expect is None else expect + part
        if not np.array_equal(got, expect):
            raise VerificationFailure(f"d-sharded matmul parts={parts} mismatch")
    table = rng.standard_normal((12, 5)).astype(np.float32)
    idx = rng.integers(0, 12, size=9)
    if not np.array_equal(partitioner.gather_as_onehot_matmul(table, idx), table[idx]):
        raise VerificationFailure("gather-as-one-hot mismatch")
    shards = [rng.standard_normal(s).astype(np.float32) for s in (5, 0, 7, 3)]
    got_topk = partitioner.distributed_top_k(shards, 5)
    flat = [(float(v), o, i) for o, sh in enumerate(shards) for i, v in enumerate(sh)]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    if got_topk != flat[:5]:
        raise VerificationFailure("distributed top-k mismatch")
    bn_in = [rng.standard_normal((b, 4)).astype(np.float32) for b in (3, 5, 2, 6)]
    got_bn = partitioner.distributed_batch_norm(bn_in)
    cat = np.concatenate(bn_in)
    mean = cat.mean(axis=0)
    var = cat.var(axis=0)
    ref = [(x - mean) / np.sqrt(var + 1e-5) for x in bn_in]
    for gb, rb in zip(got_bn, ref):
        if not np.allclose(gb, rb, rtol=1e-5, atol=1e-6):
            raise VerificationFailure("distributed batch norm mismatch")


def _check_auc(scenario: Scenario, rng: np.random.Generator) -> None:
    n = min(scenario.metrics.auc_samples, 2000)
    scores = rng.choice(np.linspace(-1, 1, 17).astype(np.float32), size=n)
    labels = rng.integers(0, 2, size=n)
    if labels.sum() in (0, n):
        labels[0] = 1 - labels[0]
    got = metrics_mod.auc_roc(scores, labels)
    want = _pairwise_auc(scores, labels)
    if got != want:
        raise VerificationFailure(f"auc {got!r} != pairwise oracle {want!r}")


def cmd_verify(args) -> int:
    scenario, _ = _load(args)
    rng = np.random.default_rng(args.seed)
    checks = [
        ("collectives-vs-fixed-order-sum", _check_collectives),
        ("sharded-vs-replicated-update", _check_sharding),
        ("partitioned-vs-dense", _check_partitioner),
        ("auc-vs-pairwise", _check_auc),
    ]
    lines = [f"verify: scenario {scenario.name!r}, seed {args.seed}"]
    failures = 0
    for name, fn in checks:
        try:
            fn(scenario, rng)
        except VerificationFailure as e:
            lines.append(f"FAIL {name}: {e}")
            failures += 1
        else:
            lines.append(f"PASS {name}")
    lines.append("all verification suites passed" if not failures else f"{failures} suite(s) failed")
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    scenario, _ = _load(args)
    if scenario.sweep_chip_counts is None:
        raise ConfigError("missing required key: sweep (simulate needs sweep.chip_counts)")
    rows = netsim.sweep_scaling(scenario.model_scenario(), list(scenario.sweep_chip_counts))
    text = netsim.sweep_csv(rows)
    if args.format == "csv":
        text += "# simulated with the alpha-beta cost model; cost constants are calibration inputs\n"
        _emit(text, args.out)
    else:
        _emit(
            _csv_to_table(
                text,
                f"scaling sweep for {scenario.name!r} (simulated; cost constants are calibration inputs)",
            ),
            args.out,
        )
    return 0


# ---------------------------------------------------------------------------
# plan


def cmd_plan(args) -> int:
    scenario, _ = _load(args)
    mesh = scenario.device_mesh()
    plan = sharding.WeightUpdateShardingPlan.build(mesh, scenario.stride, scenario.payload.elements)
    sizes = [e - s for s, e in plan.bounds]
    out = [
        "section,field,value",
        f"shard_plan,weight_elements,{plan.n}",
        f"shard_plan,parts,{plan.parts}",
        f"shard_plan,slot_len,{plan.slot_len}",
        f"shard_plan,min_shard,{min(sizes)}",
        f"shard_plan,max_shard,{max(sizes)}",
    ]
    opt = scenario.optimizer.build()
    report = sharding.optimizer_cost_fraction(
        scenario.model_scenario(), scenario.optimizer.anchor_chips, opt.update_flops_per_element
    )
    out += [
        f"optimizer_cost,chips,{report.chips}",
        f"optimizer_cost,shard_count,{report.shard_count}",
        f"optimizer_cost,unsharded_fraction,{report.unsharded_fraction!r}",
        f"optimizer_cost,sharded_fraction,{report.sharded_fraction!r}",
    ]
    text = "\n".join(out) + "\n"
    if scenario.tables is not None:
        placement = sharding.place_tables(
            [(t.rows, t.row_bytes) for t in scenario.tables.tables],
            mesh.n_devices,
            scenario.tables.capacity_bytes,
            scenario.tables.threshold_bytes,
        )
        text += placement.csv()
    _emit(_format(text, args.format, f"plan for {scenario.name!r}"), args.out)
    return 0


# ---------------------------------------------------------------------------
# metrics


def cmd_metrics(args) -> int:
    scenario, _ = _load(args)
    rng = np.random.default_rng(args.seed)
    cfg = scenario.metrics
    skeletons = metrics_mod.pad_eval_dataset(cfg.n_examples, cfg.n_devices, cfg.per_device_batch)
    batches = []
    for b in skeletons:
        labels = rng.integers(0, 10, size=b.mask.size)
        predictions = np.where(rng.random(b.mask.size) < 0.8, labels, (labels + 1) % 10)
        batches.append(metrics_mod.EvalBatch(predictions, labels, b.mask))
    acc = metrics_mod.distributed_accuracy(batches)
    correct = sum(int(np.sum((b.predictions == b.labels) & b.mask)) for b in batches)
    count = sum(b.n_real for b in batches)
    if acc != correct / count:
        raise VerificationFailure("distributed accuracy != centralized oracle")
    n_real = sum(b.n_real for b in batches)
    n_dummy = sum(b.n_dummy for b in batches)
    records = [
        metrics_mod.timed_metric("accuracy", lambda: metrics_mod.distributed_accuracy(batches), n_real, n_dummy)
    ]
    n_auc = cfg.auc_samples
    scores = rng.choice(np.linspace(0, 1, 33).astype(np.float32), size=n_auc)
    labels = (rng.random(n_auc) < 0.3).astype(np.uint32)
    if labels.sum() in (0, n_auc):
        labels[0] = 1 - labels[0]
    records.append(
        metrics_mod.timed_metric("auc_roc", lambda: metrics_mod.auc_roc(scores, labels), n_auc, 0)
    )
    if n_auc <= 2000:
        want = _pairwise_auc(scores, labels)
        if records[-1].value != want:
            raise VerificationFailure("auc_roc != pairwise oracle")
    _emit(_format(metrics_mod.metrics_csv(records), args.format, f"metrics for {scenario.name!r}"), args.out)
    return 0


# ---------------------------------------------------------------------------
# shuffle-sim


def cmd_shuffle_sim(args) -> int:
    scenario, _ = _load(args)
    cfg = scenario.shuffle
    dataset = infeed.make_dataset(cfg.files, cfg.examples_per_file)
    seeds = [args.seed + i for i in range(cfg.n_seeds)]
    rows = []
    for policy in (infeed.SHUFFLE_THEN_REPEAT, infeed.REPEAT_THEN_SHUFFLE):
        for buffer_size in cfg.buffer_sizes:
            rows.append(
                {
                    "policy": policy,
                    "buffer_size": buffer_size,
                    "epochs": cfg.epochs,
                    "mean_coverage": infeed.mean_coverage(
                        dataset, policy, buffer_size, cfg.epochs, seeds
                    ),
                    "dispersion": infeed.dispersion(
                        dataset, policy, buffer_size, cfg.batch_size, seeds[: max(2, min(20, cfg.n_seeds))]
                    ),
                }
            )
    _emit(
        _format(infeed.shuffle_report_csv(rows), args.format, f"shuffle study for {scenario.name!r}"),
        args.out,
    )
    return 0


# ---------------------------------------------------------------------------
# report


def _read_sweep_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ConfigError(f"missing input: {path}")
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv_mod.DictReader(io.StringIO("".join(lines)))
    expected = set(netsim.SWEEP_CSV_HEADER.split(","))
    if reader.fieldnames is None or set(reader.fieldnames) != expected:
        raise ConfigError(f"{path}: not a sweep CSV (expected columns {netsim.SWEEP_CSV_HEADER})")
    for raw in reader:
        rows.append(
            {
                "chips": int(raw["chips"]),
                "compute_s": float(raw["compute_s"]),
                "allreduce_s": float(raw["allreduce_s"]),
                "step_s": float(raw["step_s"]),
                "allreduce_fraction": float(raw["allreduce_fraction"]),
                "batch": int(raw["batch"]) if raw["batch"] else None,
                "epochs": int(raw["epochs"]) if raw["epochs"] else None,
            }
        )
    return rows


def merge_sweep_rows(row_lists: list[list[dict]]) -> list[dict]:
    merged: dict[tuple, dict] = {}
    for rows in row_lists:
        for row in rows:
            key = (row["chips"], row["batch"])
            if key in merged and merged[key] != row:
                raise ConfigError(
                    f"conflicting rows for chips={row['chips']} batch={row['batch']}; "
                    "disambiguate the inputs"
                )
            merged[key] = row
    return [merged[k] for k in sorted(merged, key=lambda k: (k[0], k[1] if k[1] is not None else -1))]


def report_rows(rows: list[dict]) -> list[dict]:
    """Speedups vs the smallest-chip row; end-to-end speedup scales
    throughput by the epoch-budget ratio when both rows carry one."""
    base = min(rows, key=lambda r: (r["chips"], r["batch"] if r["batch"] is not None else -1))
    out = []
    for r in rows:
        speedup = base["step_s"] / r["step_s"]
        thr = speedup
        if base["batch"] is not None and r["batch"] is not None:
            thr = speedup * (r["batch"] / base["batch"])
        e2e = thr
        if base["epochs"] is not None and r["epochs"] is not None:
            e2e = thr * (base["epochs"] / r["epochs"])
        out.append({**r, "speedup_vs_base": speedup, "e2e_speedup": e2e})
    return out


REPORT_CSV_HEADER = (
    "chips,batch,epochs,compute_s,allreduce_s,step_s,allreduce_fraction,speedup_vs_base,e2e_speedup"
)


def cmd_report(args) -> int:
    if not args.inputs:
        raise ConfigError("missing inputs: report needs at least one sweep CSV")
    rows = merge_sweep_rows([_read_sweep_csv(Path(p)) for p in args.inputs])
    enriched = report_rows(rows)
    lines = [REPORT_CSV_HEADER]
    for r in enriched:
        lines.append(
            f"{r['chips']},{'' if r['batch'] is None else r['batch']},"
            f"{'' if r['epochs'] is None else r['epochs']},{r['compute_s']!r},{r['allreduce_s']!r},"
            f"{r['step_s']!r},{r['allreduce_fraction']!r},{r['speedup_vs_base']!r},{r['e2e_speedup']!r}"
        )
    config_hash = "-"
    if args.config:
        config_hash = hashlib.sha256(Path(args.config).read_bytes()).hexdigest()[:16]
    footer = [
        "# all values are simulated (alpha-beta cost model), not measurements",
        f"# config sha256: {config_hash}",
        f"# seed: {args.seed}",
    ]
    text = "\n".join(lines + footer) + "\n"
    _emit(_format(text, args.format, "merged scaling report (simulated)"), args.out)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshscale",
        description="Scalability toolkit: hierarchical collectives, cost simulation, "
        "partitioning rewrites, distributed eval, and shuffle studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="scenario YAML (default: bundled resnet50-like scenario)")
        p.add_argument("--seed", type=int, default=0, help="seed for randomized commands (default 0)")
        p.add_argument("--out", help="write output to this path instead of stdout")
        p.add_argument("--format", choices=("csv", "table"), default="table", help="output format")

    for name, fn, extra in (
        ("verify", cmd_verify, "run oracle-equivalence suites at scenario sizes"),
        ("simulate", cmd_simulate, "sweep chip counts and emit the step-time breakdown"),
        ("plan", cmd_plan, "weight-update sharding plan, optimizer cost, table placement"),
        ("metrics", cmd_metrics, "distributed eval metrics on synthetic data"),
        ("shuffle-sim", cmd_shuffle_sim, "coverage/dispersion study of shuffle policies"),
    ):
        p = sub.add_parser(name, help=extra)
        common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="merge sweep CSVs into one speedup table")
    p.add_argument("inputs", nargs="*", help="sweep CSV files from `simulate`")
    common(p)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except VerificationFailure as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
