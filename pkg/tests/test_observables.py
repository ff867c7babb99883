import math

import numpy as np
import pytest

from rclab import stats
from rclab.lattice import Region, build_block, build_box, build_rectangle, rectangle_face, rectangle_inner
from rclab.observables import (BlockEvents, Disconnection, block_events, box_percolation, compile_event,
                               count_X, count_Y, disconnection, estimate_event, eval_event,
                               face_crossing, ladder_levels, mixing_gap, mixing_setup, occupied_block,
                               seed_present, side_seed_event, surface_tension_estimate,
                               top_seed_event, two_point)
from rclab.rcmodel import BondConfig, BoundaryCondition, RCParams, fk_graph
from rclab.sampler import SamplerConfig, enumerate_exact

from conftest import restricted_connected

FREE, WIRED = BoundaryCondition.free(), BoundaryCondition.wired()


def column_witness(ell=2, h=3, seed_center=(1, 1)):
    """Open column from the source plaque to a fully open top plaque."""
    r = build_block(ell, h, 3)
    bits = np.zeros(r.n_bonds, np.uint8)
    x, y = seed_center
    bits[r.bond_index([[x, y, z] for z in range(h)], 2)] = 1
    for a in (0, 1):
        lows = [[x + i, y + j, h] for i in range(-1, 1 + (a != 0)) for j in range(-1, 1 + (a != 1))]
        lows = [l for l in lows if l[a] < (x if a == 0 else y) + 1]
        bits[r.bond_index(lows, a)] = 1
    return r, bits


class TestBlockEvents:
    def test_constructed_top_seed(self):
        r, bits = column_witness()
        cfg = BondConfig(r, bits)
        assert eval_event(cfg, None, seed_present((1, 1, 3), 2, 1))
        assert eval_event(cfg, None, top_seed_event(1, 2, 3, 1))
        assert not eval_event(cfg, None, top_seed_event(1, 2, 3, 2))
        assert eval_event(cfg, None, top_seed_event(1, 2, 3))
        assert not eval_event(cfg, None, occupied_block(1, 2, 3))
        # restricted-BFS oracle over the bonds meeting the interior
        inner = Region.product([-1, -1, 1], [1, 1, 2]).vertices
        within = r.bonds_intersecting(inner)
        plaque = [[i, j, 0] for i in (-1, 0, 1) for j in (-1, 0, 1)]
        assert restricted_connected(r, bits, within, plaque, [[1, 1, 3]])
        assert not restricted_connected(r, bits, within, plaque, [[1, -1, 3]])

    def test_all_closed(self):
        r = build_block(2, 3, 3)
        cfg = BondConfig.all_closed(r)
        assert not eval_event(cfg, None, top_seed_event(1, 2, 3))
        assert count_Y(cfg, 2, 3) == 0 and count_X(cfg, 2, 3) == 0

    @pytest.mark.parametrize("ell,h,K", [(2, 3, 1), (3, 4, 2), (2, 2, 1)])
    def test_all_open(self, ell, h, K):
        r = build_block(ell, h, 3)
        cfg = BondConfig.all_open(r)
        assert eval_event(cfg, None, occupied_block(K, ell, h))
        assert eval_event(cfg, None, side_seed_event(K, ell, h))
        # top and side sites with a neighbour inside B*(ell, h)
        assert count_Y(cfg, ell, h, K) == (2 * ell - 1) ** 2
        assert count_X(cfg, ell, h, K) == 4 * (2 * ell - 1) * (h - 1)

    def test_single_column_gives_Y_one(self):
        r = build_block(2, 3, 3)
        bits = np.zeros(r.n_bonds, np.uint8)
        bits[r.bond_index([[1, 0, z] for z in range(3)], 2)] = 1
        assert count_Y(BondConfig(r, bits), 2, 3) == 1

    def test_side_subfacet_witness(self):
        # horizontal path from the source to a fully open plaque on the face x = +ell
        r = build_block(2, 4, 3)
        bits = np.zeros(r.n_bonds, np.uint8)
        bits[r.bond_index([[1, 0, 0]], 2)] = 1
        bits[r.bond_index([[1, 0, 1]], 0)] = 1
        for z in range(0, 3):
            for y in range(-1, 2):
                bits[r.bond_index([[2, y, z]], 2)] = 1
        for z in range(0, 4):
            for y in range(-1, 1):
                bits[r.bond_index([[2, y, z]], 1)] = 1
        ev = block_events(r, 1, 2, 4)
        out = ev.evaluate(bits)
        assert out["side"].sum() >= 1 and not out["top"].any()
        j = int(np.flatnonzero(out["side"])[0]) + 1
        assert eval_event(BondConfig(r, bits), None, side_seed_event(1, 2, 4, j))

    def test_index_range(self):
        r = build_block(2, 3, 3)
        with pytest.raises(ValueError):
            eval_event(BondConfig.all_open(r), None, top_seed_event(1, 2, 3, 9))

    def test_block_must_fit(self):
        with pytest.raises(ValueError):
            BlockEvents(build_block(1, 2, 3), 1, 2, 3)


def small_block_specs(ell=2, h=3, K=1):
    specs = [top_seed_event(K, ell, h), side_seed_event(K, ell, h), occupied_block(K, ell, h)]
    specs += [top_seed_event(K, ell, h, i) for i in range(1, 5)]
    specs += [side_seed_event(K, ell, h, j) for j in range(1, 9)]
    return specs


class TestInvariants:
    def test_monotone_increasing_events(self):
        rng = np.random.default_rng(0)
        r = build_block(2, 3, 3)
        fs = [compile_event(s, r, WIRED) for s in small_block_specs()]
        fs.append(compile_event(seed_present((0, 0, 3), 2, 1), r, FREE))
        fs.append(compile_event(two_point((1, 1, 2)), r, WIRED))
        for _ in range(60):
            bits = (rng.random(r.n_bonds) < 0.75).astype(np.uint8)
            before = [f(bits) for f in fs]
            for b in rng.choice(np.flatnonzero(bits == 0), size=5, replace=False):
                up = bits.copy()
                up[b] = 1
                for f, v in zip(fs, before):
                    assert f(up) >= v

    def test_box_percolation_monotone(self):
        rng = np.random.default_rng(1)
        r = build_box(2, 3)
        f = compile_event(box_percolation(2), r, WIRED)
        for _ in range(100):
            bits = (rng.random(r.n_bonds) < 0.3).astype(np.uint8)
            v = f(bits)
            up = bits.copy()
            up[rng.integers(r.n_bonds)] = 1
            assert f(up) >= v

    def test_disconnection_is_decreasing_and_negated_crossing(self):
        rng = np.random.default_rng(2)
        r = build_rectangle(2, 0.5, 1, 3)
        J = compile_event(disconnection(2, 0.5), r)
        inner = r.bonds_within(rectangle_inner(r))
        cross = compile_event(face_crossing(rectangle_face(r, "bottom"), rectangle_face(r, "top"),
                                            inner), r)
        assert not disconnection(2, 0.5).increasing
        for _ in range(200):
            bits = (rng.random(r.n_bonds) < 0.4).astype(np.uint8)
            assert J(bits) == (not cross(bits))
            up = bits.copy()
            up[rng.integers(r.n_bonds)] = 1
            assert J(up) <= J(bits)

    def test_occupied_implies_both_seed_events(self):
        rng = np.random.default_rng(3)
        r = build_block(2, 3, 3)
        ev = block_events(r, 1, 2, 3)
        hits = 0
        for _ in range(300):
            bits = (rng.random(r.n_bonds) < 0.9).astype(np.uint8)
            out = ev.evaluate(bits)
            if ev.occupied(bits):
                hits += 1
                assert out["top"].any() and out["side"].any()
        assert hits > 0

    def test_Y_positive_iff_top_connection(self):
        rng = np.random.default_rng(4)
        r = build_block(2, 3, 3)
        inner = Region.product([-1, -1, 1], [1, 1, 2]).vertices
        within = r.bonds_intersecting(inner)
        plaque = [[i, j, 0] for i in (-1, 0, 1) for j in (-1, 0, 1)]
        top = [[i, j, 3] for i in range(-2, 3) for j in range(-2, 3)]
        for _ in range(200):
            bits = (rng.random(r.n_bonds) < 0.45).astype(np.uint8)
            y = count_Y(BondConfig(r, bits), 2, 3)
            assert (y >= 1) == restricted_connected(r, bits, within, plaque, top)

    def test_all_open_and_closed_disconnection(self):
        r = build_rectangle(2, 0.5, 0, 3)
        assert not eval_event(BondConfig.all_open(r), None, disconnection(2, 0.5))
        assert eval_event(BondConfig.all_closed(r), None, disconnection(2, 0.5))

    def test_disconnection_needs_its_rectangle(self):
        with pytest.raises(ValueError):
            Disconnection(build_box(2, 3), 2, 0.5)


class TestEstimators:
    def test_p1_crossing_is_exact(self):
        r = build_box(2, 2)
        e = estimate_event(r, RCParams(1, 1.0), FREE, face_crossing([[0, -2]], [[0, 2]]),
                           SamplerConfig(100, 10), 0)
        assert e.value == 1.0 and e.half_width == 0.0 and e.ok

    def test_q1_small_graph_matches_enumeration(self):
        r = Region.product([0, 0], [1, 1])
        spec = face_crossing([[0, 0], [1, 0]], [[0, 1], [1, 1]])
        t = enumerate_exact(r, RCParams(1, 0.4), FREE)
        g = fk_graph(r, FREE)
        exact = t.connection_probability(g.nodes([[0, 0], [1, 0]]), g.nodes([[0, 1], [1, 1]]))
        e = estimate_event(r, RCParams(1, 0.4), FREE, spec, SamplerConfig(20_000, 0), 3)
        assert e.contains(exact)

    def test_wired_dominates_free(self):
        r = build_box(2, 2)
        spec = face_crossing([[-2, -2]], [[2, 2]])
        cfg = SamplerConfig(6400, 200)
        ew = estimate_event(r, RCParams(2, 0.4), WIRED, spec, cfg, 1)
        ef = estimate_event(r, RCParams(2, 0.4), FREE, spec, cfg, 2)
        assert ew.value >= ef.value - 3 * math.hypot(ew.se, ef.se)

    def test_ci_withheld_with_few_batches(self):
        r = build_box(1, 2)
        e = estimate_event(r, RCParams(1, 0.5), FREE, two_point((1, 0)), SamplerConfig(12, 0), 0)
        assert e.status == "ci_withheld" and math.isnan(e.half_width)

    def test_replicas_pool(self):
        r = build_box(1, 2)
        e = estimate_event(r, RCParams(2, 0.5), FREE, two_point((1, 0)), SamplerConfig(200, 8), 4,
                           replicas=3)
        assert e.n_batches == 96 and e.n == 3 * 192

    def test_calibration_of_intervals(self):
        # 95% intervals cover the exact value in at least 90 of 100 repetitions
        r = Region.product([0, 0], [1, 1])
        params = RCParams(1, 0.55)
        spec = face_crossing([[0, 0]], [[1, 1]])
        g = fk_graph(r, FREE)
        exact = enumerate_exact(r, params, FREE).connection_probability(g.nodes([[0, 0]]),
                                                                        g.nodes([[1, 1]]))
        covered = sum(estimate_event(r, params, FREE, spec, SamplerConfig(640, 0), k).contains(exact)
                      for k in range(100))
        assert covered >= 90


class TestSurfaceTension:
    def test_p0(self):
        e = surface_tension_estimate(4, 0.5, 1, RCParams(1, 0.0), FREE, SamplerConfig(64, 0))
        assert e.value == 0.0 and e.ok

    def test_p1(self):
        e = surface_tension_estimate(4, 0.5, 1, RCParams(1, 1.0), FREE, SamplerConfig(64, 0))
        assert e.value == math.inf

    def test_zero_success_direct_is_a_failure(self):
        e = surface_tension_estimate(4, 0.5, 0, RCParams(1, 0.9), FREE, SamplerConfig(64, 0),
                                     mode="direct")
        assert e.status == "zero_success" and math.isnan(e.value)

    def test_ladder_agrees_with_direct(self):
        params = RCParams(1, 0.3)
        cfg = SamplerConfig(3200, 0)
        d = surface_tension_estimate(2, 1, 0, params, FREE, cfg, 5, d=3, mode="direct")
        l = surface_tension_estimate(2, 1, 0, params, FREE, cfg, 6, d=3, mode="ladder")
        assert l.method == "ladder" and d.method == "direct"
        assert abs(d.value - l.value) < 3 * math.hypot(d.se, l.half_width / 1.96)

    def test_ladder_levels_nest(self):
        r = build_rectangle(3, 1, 0, 3)
        lv = ladder_levels(r, 3)
        assert len(lv) == 7
        for a, b in zip(lv, lv[1:]):
            assert set(a.tolist()) < set(b.tolist())
        assert set(lv[-1].tolist()) == set(r.bonds_within(rectangle_inner(r)).tolist())


class TestMixing:
    def test_s0(self):
        assert mixing_gap(2, 0.0, 0.5, 2, SamplerConfig(64, 0)).value == 0.0

    def test_q1(self):
        assert mixing_gap(2, 0.5, 0.5, 1, SamplerConfig(64, 0)).value == 0.0

    def test_setup(self):
        region, bw, bf, params, b0 = mixing_setup(2, 0.3, 0.5, 2)
        lo = region.node_coords(region.bonds[b0])
        assert lo.tolist() == [[0, 0, -1], [0, 0, 0]]
        assert params.intensities(region.n_bonds)[b0] == 0.3
        assert bf.descriptor == "mixed:bottom"

    def test_small_gap_is_positive(self):
        e = mixing_gap(1, 0.5, 0.5, 2, SamplerConfig(3400, 200), 3)
        assert e.ok and e.value > 0
