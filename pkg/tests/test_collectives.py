"""Ring and hierarchical collectives: exact sums, volume laws, bf16."""

import math

import ml_dtypes
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from meshscale import collectives as co
from meshscale.topology import Tile, build_multipod

F32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


def f32_arrays(min_size=1, max_size=40):
    return hnp.arrays(np.float32, st.integers(min_size, max_size), elements=F32)


def _mldtypes_round(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(ml_dtypes.bfloat16).astype(np.float32)


# ---------------------------------------------------------------------------
# bf16 rounding


class TestBf16Round:
    @settings(max_examples=200, deadline=None)
    @given(f32_arrays(max_size=64))
    def test_matches_ml_dtypes(self, x):
        ours = co.bf16_round_array(x)
        ref = _mldtypes_round(x)
        assert np.array_equal(ours, ref)
        assert np.array_equal(ours.view(np.uint32), ref.view(np.uint32))

    def test_special_values(self):
        x = np.array(
            [np.nan, np.inf, -np.inf, 0.0, -0.0, 3.4e38, -3.4e38, 1e-40, 2**-127],
            dtype=np.float32,
        )
        ours = co.bf16_round_array(x)
        ref = _mldtypes_round(x)
        assert np.array_equal(np.isnan(ours), np.isnan(ref))
        m = ~np.isnan(ref)
        assert np.array_equal(ours[m].view(np.uint32), ref[m].view(np.uint32))

    def test_ties_to_even(self):
        # bf16 spacing at 1.0 is 2^-7, so 1 + 2^-8 is an exact tie that
        # must go to the even mantissa (1.0); 1 + 3*2^-8 ties upward.
        assert co.bf16_round(1.0 + 2.0**-8) == 1.0
        assert co.bf16_round(1.0 + 3 * 2.0**-8) == 1.0 + 2.0**-6
        assert co.bf16_round(1.0 + 2.0**-9) == 1.0

    @settings(max_examples=100, deadline=None)
    @given(f32_arrays())
    def test_idempotent(self, x):
        once = co.bf16_round_array(x)
        assert np.array_equal(co.bf16_round_array(once), once)


class TestPayload:
    def test_make_rounds_bf16(self):
        p = co.Payload.make([1.0 + 2.0**-9], "bf16")
        assert p.values[0] == 1.0
        assert p.nbytes == 2

    def test_rejects_unrounded_bf16(self):
        with pytest.raises(ValueError, match="not representable"):
            co.Payload(np.array([1.0 + 2.0**-9], dtype=np.float32), "bf16")

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            co.Payload(np.zeros(3, dtype=np.float64))
        with pytest.raises(ValueError):
            co.Payload(np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="elem_type"):
            co.Payload(np.zeros(2, dtype=np.float32), "f16")

    def test_replica_set_checks(self):
        a = co.Payload.make([1.0, 2.0])
        with pytest.raises(ValueError):
            co.ReplicaSet(devices=((0, 0),), payloads=(a, a))
        with pytest.raises(ValueError):
            co.ReplicaSet(
                devices=((0, 0), (0, 1)), payloads=(a, co.Payload.make([1.0]))
            )
        with pytest.raises(ValueError):
            co.ReplicaSet(
                devices=((0, 0), (0, 1)),
                payloads=(a, co.Payload.make([1.0, 2.0], "bf16")),
            )


class TestFoldSum:
    def test_left_fold_order(self):
        # (1e8 + -1e8) + 1 = 1 in f32, while 1e8 + (-1e8 + 1) = 0.
        arrays = [
            np.array([1e8], dtype=np.float32),
            np.array([-1e8], dtype=np.float32),
            np.array([1.0], dtype=np.float32),
        ]
        assert co.fold_sum(arrays, "f32")[0] == 1.0

    def test_bf16_rounds_each_step(self):
        arrays = [np.array([v], dtype=np.float32) for v in (1.0, 2.0**-9, 2.0**-9)]
        assert co.fold_sum(arrays, "bf16")[0] == 1.0
        assert co.fold_sum(arrays, "f32")[0] == np.float32(1.0 + 2.0**-8)


# ---------------------------------------------------------------------------
# Ring collectives


def _ring(p):
    return [(0, y) for y in range(p)]


class TestRingCollectives:
    @pytest.mark.parametrize("p,n", [(1, 5), (2, 6), (3, 7), (4, 1), (5, 25)])
    def test_reduce_scatter_shards_reassemble(self, p, n):
        rng = np.random.default_rng(p * 100 + n)
        payloads = [co.Payload.make(rng.standard_normal(n)) for _ in range(p)]
        shards, sched = co.ring_reduce_scatter(_ring(p), payloads)
        m = p * math.ceil(n / p)
        expected = co.fold_sum([co._pad_to(q.values, m) for q in payloads], "f32")
        assert np.array_equal(np.concatenate([s.values for s in shards]), expected)
        assert all(len(s) == m // p for s in shards)
        if p > 1:
            (phase,) = sched.phases
            assert phase.bytes_per_device == (p - 1) * (m // p) * 4
            assert phase.payload_bytes == m * 4
        else:
            assert sched.phases == ()

    def test_all_gather_restores_length(self):
        shards = [co.Payload.make([1.0, 2.0]), co.Payload.make([3.0, 0.0])]
        full, _ = co.ring_all_gather(_ring(2), shards, final_len=3)
        for f in full:
            assert np.array_equal(f.values, np.array([1.0, 2.0, 3.0], dtype=np.float32))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 7), f32_arrays(), st.data())
    def test_all_reduce_is_left_fold_everywhere(self, p, base, data):
        arrays = [base] + [
            data.draw(hnp.arrays(np.float32, base.shape, elements=F32))
            for _ in range(p - 1)
        ]
        payloads = [co.Payload(a.copy()) for a in arrays]
        results, sched = co.all_reduce(_ring(p), payloads)
        expected = co.fold_sum(arrays, "f32")
        for r in results:
            assert np.array_equal(r.values, expected, equal_nan=True)
        assert sched.bytes_per_device() == 2 * (p - 1) * math.ceil(len(base) / p) * 4

    def test_direction_never_changes_values(self):
        rng = np.random.default_rng(7)
        payloads = [co.Payload.make(rng.standard_normal(13)) for _ in range(4)]
        uni, _ = co.all_reduce(_ring(4), payloads, direction="unidirectional")
        bi, _ = co.all_reduce(_ring(4), payloads, direction="bidirectional")
        for a, b in zip(uni, bi):
            assert np.array_equal(a.values, b.values)
        with pytest.raises(ValueError, match="direction"):
            co.all_reduce(_ring(2), payloads[:2], direction="sideways")

    def test_validation_errors(self):
        payloads = [co.Payload.make([1.0]), co.Payload.make([2.0])]
        with pytest.raises(ValueError):
            co.ring_reduce_scatter(_ring(3), payloads)
        with pytest.raises(ValueError, match="mismatched"):
            co.all_reduce(_ring(2), [co.Payload.make([1.0]), co.Payload.make([1.0, 2.0])])
        with pytest.raises(ValueError):
            co.all_reduce(_ring(2), payloads, elem_type="bf16")

    def test_bf16_all_reduce_rounds_stepwise(self):
        payloads = [
            co.Payload.make([1.0], "bf16"),
            co.Payload.make([2.0**-8], "bf16"),
            co.Payload.make([2.0**-8], "bf16"),
        ]
        results, _ = co.all_reduce(_ring(3), payloads)
        # Each add ties back down to 1.0; an unrounded f32 fold would
        # reach the representable 1 + 2^-7 instead.
        assert results[0].values[0] == np.float32(1.0)
        assert results[0].elem_type == "bf16"
        f32_fold = co.fold_sum([p.values for p in payloads], "f32")
        assert f32_fold[0] == np.float32(1.0 + 2.0**-7)

    def test_model_parallel_allreduce_matches_all_reduce(self):
        tile = Tile(anchor=(2, 1), width=3)
        rng = np.random.default_rng(3)
        payloads = [co.Payload.make(rng.standard_normal(5)) for _ in range(3)]
        got, _ = co.model_parallel_allreduce(tile, payloads)
        want, _ = co.all_reduce(tile.devices(), payloads)
        for g, w in zip(got, want):
            assert np.array_equal(g.values, w.values)


# ---------------------------------------------------------------------------
# Volume laws


class TestVolumeLaws:
    def test_ring_volumes_over_p(self):
        n = 1000
        for p in range(1, 65):
            payloads = [co.Payload.make(np.ones(n)) for _ in range(p)]
            _, sched = co.all_reduce(_ring(p), payloads)
            m = p * math.ceil(n / p)
            rs = [ph for ph in sched.phases if ph.kind is co.PhaseKind.ReduceScatter]
            ag = [ph for ph in sched.phases if ph.kind is co.PhaseKind.AllGather]
            if p == 1:
                assert sched.phases == ()
                continue
            assert rs[0].bytes_per_device * p == (p - 1) * m * 4
            assert (rs[0].bytes_per_device + ag[0].bytes_per_device) * p == 2 * (p - 1) * m * 4

    def test_hierarchical_phase_payload_ratio(self):
        mesh = build_multipod(1, 4, 32, True)
        sched = co.hierarchical_schedule(mesh, 1, 131072)
        y_rs, x_rs = sched.phases[0], sched.phases[1]
        assert y_rs.kind is co.PhaseKind.ReduceScatter
        assert x_rs.payload_bytes * mesh.y_size == y_rs.payload_bytes

    def test_hierarchical_total_bytes(self):
        # End to end a device moves 2(m - slot) elements: the classic
        # 2(p-1)/p volume with p = p_y * p_x on the padded length m.
        for mesh, stride, n in [
            (build_multipod(1, 4, 4, True), 1, 100),
            (build_multipod(2, 4, 4, True), 2, 257),
            (build_multipod(1, 1, 8, True), 1, 64),
        ]:
            lay = co.group_layout(mesh, stride, 0, n)
            sched = co.hierarchical_schedule(mesh, stride, n)
            assert sched.bytes_per_device() == 2 * (lay.m - lay.slot) * 4


# ---------------------------------------------------------------------------
# Hierarchical all-reduce semantics


def _nested_oracle(mesh, stride, offset, grads, elem_type="f32"):
    """Ascending-y fold per column, then ascending-x fold of column sums."""
    columns = range(offset, mesh.x_size, stride)
    col_sums = [
        co.fold_sum([grads[(x, y)].values for y in range(mesh.y_size)], elem_type)
        for x in columns
    ]
    return co.fold_sum(col_sums, elem_type)


HIER_MESHES = [
    (build_multipod(1, 1, 1, True), 1),
    (build_multipod(1, 1, 4, True), 1),
    (build_multipod(1, 4, 1, True), 1),
    (build_multipod(1, 3, 2, True), 1),
    (build_multipod(2, 2, 4, True), 2),
    (build_multipod(1, 8, 2, True), 4),
]


class TestHierarchicalAllreduce:
    @pytest.mark.parametrize("mesh,stride", HIER_MESHES)
    @pytest.mark.parametrize("n", [1, 7, 64])
    def test_matches_nested_fold_bitwise(self, mesh, stride, n):
        rng = np.random.default_rng(mesh.x_size * 1000 + mesh.y_size * 10 + n)
        grads = {
            d: co.Payload.make(rng.standard_normal(n) * rng.choice([1e-3, 1.0, 1e4]))
            for d in mesh.devices()
        }
        results, _ = co.hierarchical_allreduce_2d(mesh, stride, grads)
        for offset in range(stride):
            expected = _nested_oracle(mesh, stride, offset, grads)
            for x in range(offset, mesh.x_size, stride):
                for y in range(mesh.y_size):
                    got = results[(x, y)].values
                    assert np.array_equal(got, expected), (x, y)

    @pytest.mark.parametrize("mesh,stride", HIER_MESHES)
    def test_integer_payloads_sum_exactly(self, mesh, stride):
        rng = np.random.default_rng(99)
        n = 23
        grads = {
            d: co.Payload.make(rng.integers(-1000, 1000, n).astype(np.float32))
            for d in mesh.devices()
        }
        results, _ = co.hierarchical_allreduce_2d(mesh, stride, grads)
        for offset in range(stride):
            exact = np.zeros(n, dtype=np.int64)
            for x in range(offset, mesh.x_size, stride):
                for y in range(mesh.y_size):
                    exact += grads[(x, y)].values.astype(np.int64)
            for x in range(offset, mesh.x_size, stride):
                assert np.array_equal(results[(x, 0)].values, exact.astype(np.float32))

    def test_one_dimensional_mesh_equals_flat_fold(self):
        # With a single column the nested order degenerates to the flat
        # fold, so equality holds bitwise for arbitrary floats.
        mesh = build_multipod(1, 1, 5, True)
        rng = np.random.default_rng(5)
        grads = {d: co.Payload.make(rng.standard_normal(11)) for d in mesh.devices()}
        results, _ = co.hierarchical_allreduce_2d(mesh, 1, grads)
        flat = co.fold_sum([grads[(0, y)].values for y in range(5)], "f32")
        assert np.array_equal(results[(0, 0)].values, flat)

    def test_update_receives_padded_start(self):
        mesh = build_multipod(1, 2, 2, True)
        n = 7
        grads = {d: co.Payload.make(np.zeros(n)) for d in mesh.devices()}
        results, _ = co.hierarchical_allreduce_2d(
            mesh, 1, grads, update_fn=lambda s, start, off: s + start
        )
        lay = co.group_layout(mesh, 1, 0, n)
        expected = np.array(
            [(i // lay.slot) * lay.slot for i in range(n)], dtype=np.float32
        )
        assert np.array_equal(results[(1, 1)].values, expected)

    def test_update_receives_group_offset(self):
        mesh = build_multipod(1, 4, 2, True)
        grads = {d: co.Payload.make(np.zeros(4)) for d in mesh.devices()}
        results, _ = co.hierarchical_allreduce_2d(
            mesh, 2, grads, update_fn=lambda s, start, off: s * 0 + off
        )
        for (x, y), payload in results.items():
            assert np.all(payload.values == x % 2), (x, y)

    def test_update_length_change_rejected(self):
        mesh = build_multipod(1, 2, 1, True)
        grads = {d: co.Payload.make([1.0, 2.0]) for d in mesh.devices()}
        with pytest.raises(ValueError, match="length"):
            co.hierarchical_allreduce_2d(
                mesh, 1, grads, update_fn=lambda s, start, off: s[:0]
            )

    def test_bf16_matches_ml_dtypes_nested_fold(self):
        mesh = build_multipod(1, 3, 3, True)
        rng = np.random.default_rng(17)
        grads = {
            d: co.Payload.make(rng.standard_normal(9), "bf16") for d in mesh.devices()
        }
        results, _ = co.hierarchical_allreduce_2d(mesh, 1, grads)

        def fold_ml(arrays):
            acc = arrays[0].copy()
            for a in arrays[1:]:
                acc = _mldtypes_round(acc + a)
            return acc

        col_sums = [
            fold_ml([grads[(x, y)].values for y in range(3)]) for x in range(3)
        ]
        expected = fold_ml(col_sums)
        assert np.array_equal(results[(2, 2)].values, expected)
        assert results[(2, 2)].elem_type == "bf16"

    def test_validation(self):
        mesh = build_multipod(1, 2, 2, True)
        grads = {d: co.Payload.make([1.0]) for d in mesh.devices()}
        incomplete = dict(list(grads.items())[:-1])
        with pytest.raises(ValueError, match="missing gradient"):
            co.hierarchical_allreduce_2d(mesh, 1, incomplete)
        with pytest.raises(ValueError, match="stride"):
            co.hierarchical_allreduce_2d(mesh, 3, grads)
        flat = build_multipod(1, 2, 2, False)
        with pytest.raises(ValueError, match="y_torus"):
            co.hierarchical_allreduce_2d(flat, 1, grads)
        mixed = dict(grads)
        mixed[(0, 1)] = co.Payload.make([1.0, 2.0])
        with pytest.raises(ValueError, match="offset=0"):
            co.hierarchical_allreduce_2d(mesh, 1, mixed)

    def test_groups_may_carry_different_lengths(self):
        mesh = build_multipod(1, 2, 2, True)
        grads = {}
        for x, y in mesh.devices():
            n = 3 if x == 0 else 5
            grads[(x, y)] = co.Payload.make(np.full(n, x + y, dtype=np.float32))
        results, _ = co.hierarchical_allreduce_2d(mesh, 2, grads)
        assert len(results[(0, 0)]) == 3
        assert len(results[(1, 0)]) == 5


class TestSchedules:
    def test_phase_sequence_on_2d_mesh(self):
        mesh = build_multipod(1, 4, 4, True)
        sched = co.hierarchical_schedule(mesh, 1, 100)
        kinds = [p.kind for p in sched.phases]
        assert kinds == [
            co.PhaseKind.ReduceScatter,
            co.PhaseKind.ReduceScatter,
            co.PhaseKind.LocalUpdate,
            co.PhaseKind.AllGather,
            co.PhaseKind.AllGather,
        ]
        assert [p.steps for p in sched.phases] == [3, 3, 0, 3, 3]

    def test_single_device_schedule(self):
        mesh = build_multipod(1, 1, 1, True)
        sched = co.hierarchical_schedule(mesh, 1, 10)
        assert [p.kind for p in sched.phases] == [co.PhaseKind.LocalUpdate]
        assert sched.bytes_per_device() == 0

    def test_matches_executed_schedule(self):
        mesh = build_multipod(2, 2, 3, True)
        rng = np.random.default_rng(1)
        grads = {d: co.Payload.make(rng.standard_normal(29)) for d in mesh.devices()}
        _, executed = co.hierarchical_allreduce_2d(mesh, 2, grads)
        assert executed == co.hierarchical_schedule(mesh, 2, 29)

    def test_schedule_csv_shape(self):
        mesh = build_multipod(1, 2, 2, True)
        text = co.schedule_csv(co.hierarchical_schedule(mesh, 1, 8))
        lines = text.strip().splitlines()
        assert lines[0] == "kind,ring_len,steps,direction,bytes_per_device,payload_bytes"
        assert len(lines) == 6

    def test_schedule_concatenation(self):
        mesh = build_multipod(1, 2, 2, True)
        s = co.hierarchical_schedule(mesh, 1, 8)
        assert (s + s).bytes_per_device() == 2 * s.bytes_per_device()
