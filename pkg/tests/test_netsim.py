"""Alpha-beta simulator: hop pricing, analytic equivalence, sweeps."""

import math

import numpy as np
import pytest

from meshscale import collectives as co
from meshscale import netsim
from meshscale.netsim import (
    ComputeModel,
    LinkCostModel,
    ModelScenario,
    StepBreakdown,
    analytic_ring_time,
    epochs_to_train,
    mesh_for_chips,
    simulate_schedule,
    sweep_csv,
    sweep_scaling,
)
from meshscale.topology import LinkClass, build_multipod, ring_x_with_stride, ring_y


def uniform_cost(alpha=1e-6, beta=1e-9, **overrides):
    alphas = {c: alpha for c in LinkClass}
    betas = {c: beta for c in LinkClass}
    for key, value in overrides.items():
        group, _, cls = key.partition("_")
        target = alphas if group == "alpha" else betas
        target[LinkClass[cls]] = value
    return LinkCostModel(alpha=alphas, beta=betas)


def ring_schedule(p, n, direction="bidirectional", elem_type="f32"):
    mesh = build_multipod(1, 1, p, True)
    payloads = [co.Payload.make(np.zeros(n, dtype=np.float32), elem_type) for _ in range(p)]
    _, sched = co.all_reduce(ring_y(mesh, 0) if p > 1 else [(0, 0)], payloads, direction=direction)
    return mesh, sched


class TestCostModels:
    def test_link_cost_validation(self):
        with pytest.raises(ValueError):
            uniform_cost(alpha_WithinPod=-1.0)
        with pytest.raises(ValueError):
            uniform_cost(beta_CrossPod=-1e-12)
        with pytest.raises(ValueError, match="CrossPod"):
            uniform_cost(alpha_WithinPod=2e-6, alpha_CrossPod=1e-6)

    def test_build_classmethod(self):
        cost = LinkCostModel.build(1e-6, 1e-12, alpha_cross=2e-6, beta_wrap=3e-12)
        assert cost.alpha[LinkClass.CrossPod] == 2e-6
        assert cost.alpha[LinkClass.TorusWrap] == 1e-6
        assert cost.beta[LinkClass.TorusWrap] == 3e-12
        assert cost.beta[LinkClass.CrossPod] == 1e-12

    def test_compute_model(self):
        m = ComputeModel(step_flops=1e12, flops_rate=1e14, fixed_overhead=0.5)
        assert m.step_time() == 1e12 / 1e14 + 0.5

    def test_step_breakdown(self):
        b = StepBreakdown(compute_time=3.0, allreduce_time=1.0)
        assert b.step_time == 4.0
        assert b.allreduce_fraction == 0.25
        with pytest.raises(ValueError):
            StepBreakdown(compute_time=-1.0, allreduce_time=0.0)


class TestHopPricing:
    def test_torus_wrap_is_priced(self):
        mesh = build_multipod(1, 1, 4, True)
        _, sched = ring_schedule(4, 64)[0], ring_schedule(4, 64)[1]
        cheap, _ = simulate_schedule(mesh, sched, uniform_cost(alpha=1e-6))
        dear, _ = simulate_schedule(mesh, sched, uniform_cost(alpha=1e-6, alpha_TorusWrap=9e-6))
        assert dear > cheap

    def test_pod_seam_alpha_dominates(self):
        mesh = build_multipod(2, 2, 1, True)  # row of 4 with a seam at x=1->2
        ring = ring_x_with_stride(mesh, 0, 1, 0)
        payloads = [co.Payload.make(np.zeros(16, dtype=np.float32)) for _ in ring]
        _, sched = co.all_reduce(ring, payloads)
        _, timeline = simulate_schedule(mesh, sched, uniform_cost(alpha=1e-6, alpha_CrossPod=2e-6))
        assert all(t.alpha_eff == 2e-6 for t in timeline)

        seamless = build_multipod(1, 4, 1, True)
        base, _ = simulate_schedule(seamless, sched, uniform_cost(alpha=1e-6, alpha_CrossPod=2e-6))
        seamed, _ = simulate_schedule(mesh, sched, uniform_cost(alpha=1e-6, alpha_CrossPod=2e-6))
        assert seamed > base

    def test_strided_hop_sums_beta_over_links(self):
        mesh = build_multipod(1, 8, 1, True)
        n = 128
        adjacent = ring_x_with_stride(mesh, 0, 4, 0)[:2]  # (0,0) -> (4,0): 4 links
        payloads = [co.Payload.make(np.zeros(n, dtype=np.float32)) for _ in adjacent]
        _, sched = co.all_reduce(adjacent, payloads)
        _, timeline = simulate_schedule(mesh, sched, uniform_cost(alpha=0.0, beta=1e-9))
        assert all(t.beta_eff == 4e-9 for t in timeline)

    def test_non_axis_hop_rejected(self):
        mesh = build_multipod(1, 2, 2, True)
        phase = co.Phase(
            kind=co.PhaseKind.ReduceScatter,
            ring=((0, 0), (1, 1)),
            direction=co.Direction.Bidirectional,
            bytes_per_device=8,
            payload_bytes=16,
        )
        with pytest.raises(ValueError, match="axis-aligned"):
            simulate_schedule(mesh, co.CollectiveSchedule((phase,)), uniform_cost())

    def test_device_outside_mesh_rejected(self):
        mesh = build_multipod(1, 2, 1, True)
        phase = co.Phase(
            kind=co.PhaseKind.AllGather,
            ring=((0, 0), (5, 0)),
            direction=co.Direction.Bidirectional,
            bytes_per_device=8,
            payload_bytes=16,
        )
        with pytest.raises(ValueError, match="outside"):
            simulate_schedule(mesh, co.CollectiveSchedule((phase,)), uniform_cost())

    def test_open_line_not_priced_as_cycle(self):
        # A 3-device X line has no wrap; its per-step alpha/beta must match
        # the same ring on a column where the closing wrap link exists.
        line_mesh = build_multipod(1, 3, 1, True)
        ring = [(x, 0) for x in range(3)]
        payloads = [co.Payload.make(np.zeros(30, dtype=np.float32)) for _ in ring]
        _, sched = co.all_reduce(ring, payloads)
        t_line, timeline = simulate_schedule(line_mesh, sched, uniform_cost())
        # Every consecutive hop is one within-pod link; the closing hop
        # (2,0)->(0,0) needs 2 links, so it must not raise beta_eff.
        assert all(t.beta_eff == 1e-9 for t in timeline)


class TestAnalyticEquivalence:
    @pytest.mark.parametrize("direction", ["unidirectional", "bidirectional"])
    def test_exact_over_grid(self, direction):
        alpha, beta = 1e-6, 1e-9
        for p in range(1, 65):
            for n in (1, 7, 64, 1000):
                mesh, sched = ring_schedule(p, n, direction)
                got, _ = simulate_schedule(mesh, sched, uniform_cost(alpha, beta))
                padded_bytes = 4 * p * math.ceil(n / p)
                want = analytic_ring_time(p, padded_bytes, alpha, beta, direction)
                assert got == want, (p, n, direction)

    def test_single_device_is_free(self):
        assert analytic_ring_time(1, 1e9, 1e-6, 1e-9) == 0.0
        with pytest.raises(ValueError):
            analytic_ring_time(0, 1.0, 1e-6, 1e-9)

    def test_bidirectional_halves_bandwidth_term(self):
        uni = analytic_ring_time(8, 1024, 0.0, 1e-9, "unidirectional")
        bi = analytic_ring_time(8, 1024, 0.0, 1e-9, "bidirectional")
        assert bi == uni / 2
        uni_a = analytic_ring_time(8, 1024, 1e-6, 0.0, "unidirectional")
        bi_a = analytic_ring_time(8, 1024, 1e-6, 0.0, "bidirectional")
        assert uni_a == bi_a

    def test_local_update_phase_costs_nothing(self):
        mesh = build_multipod(1, 2, 2, True)
        sched = co.hierarchical_schedule(mesh, 1, 100)
        _, timeline = simulate_schedule(mesh, sched, uniform_cost())
        updates = [t for t in timeline if t.kind == "local_update"]
        assert len(updates) == 1
        assert updates[0].start == updates[0].end

    def test_timeline_is_contiguous(self):
        mesh = build_multipod(1, 4, 4, True)
        sched = co.hierarchical_schedule(mesh, 2, 1000)
        total, timeline = simulate_schedule(mesh, sched, uniform_cost())
        assert timeline[0].start == 0.0
        for a, b in zip(timeline, timeline[1:]):
            assert a.end == b.start
        assert timeline[-1].end == total


class TestMeshForChips:
    @pytest.mark.parametrize(
        "chips,shape",
        [
            (1, (1, 1, 1)),
            (16, (1, 16, 1)),
            (32, (1, 32, 1)),
            (512, (16, 32, 1)),
            (1024, (32, 32, 1)),
            (2048, (64, 32, 2)),
            (4096, (128, 32, 4)),
        ],
    )
    def test_family(self, chips, shape):
        mesh = mesh_for_chips(chips)
        assert (mesh.x_size, mesh.y_size, mesh.pods) == shape
        assert mesh.n_devices == chips

    @pytest.mark.parametrize("chips", [48, 1056])
    def test_inexpressible_counts(self, chips):
        with pytest.raises(ValueError, match="not expressible"):
            mesh_for_chips(chips)

    def test_bad_count(self):
        with pytest.raises(ValueError):
            mesh_for_chips(0)


class TestEpochTable:
    def test_lookup(self):
        assert epochs_to_train(65536, {65536: 88, 4096: 44}) == 88

    def test_unknown_batch_lists_known(self):
        with pytest.raises(ValueError, match="known batches: 4096, 65536"):
            epochs_to_train(128, {65536: 88, 4096: 44})


def make_scenario(**overrides):
    defaults = dict(
        payload_elements=25_600_000,
        elem_type="f32",
        stride=1,
        cost=uniform_cost(alpha=0.0, beta=8.56e-12),
        total_work_flops=7.86e14,
        flops_rate=5.8e13,
    )
    defaults.update(overrides)
    return ModelScenario(**defaults)


class TestSweep:
    def test_compute_halves_allreduce_flat_at_zero_alpha(self):
        rows = sweep_scaling(make_scenario(), [512, 1024, 2048, 4096])
        for a, b in zip(rows, rows[1:]):
            ratio = a.breakdown.compute_time / b.breakdown.compute_time
            assert abs(ratio - 2.0) < 0.02
            drift = b.breakdown.allreduce_time / a.breakdown.allreduce_time
            assert abs(drift - 1.0) < 0.01

    def test_single_chip_has_no_allreduce(self):
        (row,) = sweep_scaling(make_scenario(), [1])
        assert row.breakdown.allreduce_time == 0.0
        assert row.breakdown.allreduce_fraction == 0.0

    def test_bf16_halves_payload_bytes(self):
        f32 = netsim.allreduce_time(make_scenario(), 1024)
        bf16 = netsim.allreduce_time(make_scenario(elem_type="bf16"), 1024)
        assert bf16 == pytest.approx(f32 / 2, rel=1e-12)

    def test_amdahl_bound(self):
        # Speedup can never exceed total step time over the non-scaling part.
        scenario = make_scenario(cost=uniform_cost(alpha=1e-7, beta=8.56e-12))
        rows = sweep_scaling(scenario, [16, 4096])
        base, big = rows
        speedup = base.breakdown.step_time / big.breakdown.step_time
        bound = base.breakdown.step_time / big.breakdown.allreduce_time
        assert speedup <= bound

    def test_stride_must_divide_sweep_meshes(self):
        with pytest.raises(ValueError, match="stride"):
            netsim.allreduce_time(make_scenario(stride=4, pod_y=1, pod_x=32), 2)

    def test_epoch_columns_flow_through(self):
        scenario = make_scenario(batch=65536, epoch_table={65536: 88, 4096: 44})
        rows = sweep_scaling(scenario, [512, 1024])
        assert all(r.batch == 65536 and r.epochs == 88 for r in rows)

    def test_e2e_speedup_scales_by_epoch_budget(self):
        small = netsim.SweepRow(
            chips=512, breakdown=StepBreakdown(1.0, 0.0), batch=4096, epochs=44
        )
        large = netsim.SweepRow(
            chips=4096, breakdown=StepBreakdown(0.5, 0.0), batch=65536, epochs=88
        )
        thr = (1.0 / 0.5) * (65536 / 4096)
        assert netsim.e2e_speedup(small, large) == thr * (44 / 88)

    def test_csv_round_trips_floats(self):
        rows = sweep_scaling(make_scenario(batch=65536, epoch_table={65536: 88}), [16, 64])
        text = sweep_csv(rows)
        lines = text.strip().splitlines()
        assert lines[0] == netsim.SWEEP_CSV_HEADER
        first = lines[1].split(",")
        assert int(first[0]) == 16
        assert float(first[1]) == rows[0].breakdown.compute_time
        assert float(first[5]) == 1.0  # base row's own speedup
        assert first[6] == "65536" and first[7] == "88"
