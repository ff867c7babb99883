import io
import math

import numpy as np
import pytest

from rclab.lattice import Region, build_block, build_box
from rclab.rcmodel import (BondConfig, BoundaryCondition, ClusterIndex, RCParams, cluster_count,
                           connected, connected_within, fk_graph, log_weight, read_snapshot,
                           write_snapshot)

from conftest import bfs_cluster_count, restricted_connected

FREE, WIRED = BoundaryCondition.free(), BoundaryCondition.wired()


def square2():
    return Region.product([0, 0], [1, 1])


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            RCParams(0.5, 0.3)
        with pytest.raises(ValueError):
            RCParams(2, 1.2)
        with pytest.raises(ValueError):
            RCParams(2, 0.5, {0: 2.0})

    def test_overrides(self):
        p = RCParams(2, 0.4).with_overrides([1, 3], 0.9)
        assert p.intensities(4).tolist() == [0.4, 0.9, 0.4, 0.9]
        assert p.integer_q == 2 and RCParams(1.5, 0.1).integer_q is None


class TestBoundary:
    def test_kinds(self):
        assert BoundaryCondition("Wired").kind == "wired"
        with pytest.raises(ValueError):
            BoundaryCondition("sticky")

    def test_mixed_faces(self):
        r = build_box(1, 2)
        cls = BoundaryCondition("mixed:0+|1-").classes(r)
        faces = r.ext_vertices
        assert np.all(cls[faces[:, 0] == 2] == 0)
        assert np.all(cls[faces[:, 1] == -2] == 1)
        assert np.all(cls[(faces[:, 0] == -2) | (faces[:, 1] == 2)] == -1)

    def test_explicit_partition(self):
        r = build_box(1, 2)
        bc = BoundaryCondition.from_partition([[(2, 0), (-2, 0)]])
        cls = bc.classes(r)
        assert (cls == 0).sum() == 2

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            BoundaryCondition("mixed:top|all").classes(build_box(1, 2))


class TestClusterCount:
    def test_all_closed_free(self):
        r = build_box(1, 3)
        assert cluster_count(BondConfig.all_closed(r)) == r.n_vertices

    @pytest.mark.parametrize("bc", ["free", "wired", "mixed:top|bottom"])
    def test_all_open(self, bc):
        r = build_block(1, 2, 3)
        assert cluster_count(BondConfig.all_open(r), BoundaryCondition(bc)) == 1

    def test_two_horizontal_bonds(self):
        r = square2()
        bits = np.zeros(r.n_bonds, np.uint8)
        bits[r.bond_index([[0, 0], [0, 1]], 0)] = 1
        assert cluster_count(BondConfig(r, bits), FREE) == 2

    def test_closed_minus_open(self):
        r = build_block(2, 2, 3)
        c0 = cluster_count(BondConfig.all_closed(r))
        c1 = cluster_count(BondConfig.all_open(r))
        assert c0 - c1 == r.n_vertices - 1

    def test_matches_bfs(self):
        rng = np.random.default_rng(3)
        bcs = ["free", "wired", "mixed:top", "mixed:0+,0-|1+", "mixed:sides|bottom"]
        regions = [Region.product([0, 0], [2, 1]), Region.product([0, 0, 0], [1, 1, 1]),
                   Region.from_vertices([[0, 0], [1, 0], [1, 1]], 2),
                   Region.product([0, 0], [3, 0], include_exterior=False)]
        pairs = []
        for r in regions:
            for b in bcs:
                bc = BoundaryCondition(b)
                try:
                    bc.classes(r)
                except ValueError:
                    continue  # a concave corner reached from two faces
                pairs.append((r, bc))
        assert len(pairs) >= 15
        for t in range(1000):
            r, bc = pairs[t % len(pairs)]
            bits = (rng.random(r.n_bonds) < rng.random()).astype(np.uint8)
            assert cluster_count(BondConfig(r, bits), bc) == bfs_cluster_count(r, bits, bc)

    def test_opening_a_bond_drops_count_by_at_most_one(self):
        rng = np.random.default_rng(4)
        r = build_block(1, 2, 3)
        for bc in (FREE, WIRED, BoundaryCondition("mixed:top|bottom")):
            for _ in range(50):
                bits = (rng.random(r.n_bonds) < 0.5).astype(np.uint8)
                c = cluster_count(BondConfig(r, bits), bc)
                for b in np.flatnonzero(bits == 0)[:10]:
                    bits2 = bits.copy()
                    bits2[b] = 1
                    assert c - cluster_count(BondConfig(r, bits2), bc) in (0, 1)

    def test_wired_versus_free(self):
        # wired never has more clusters once an isolated ghost is discounted
        rng = np.random.default_rng(5)
        r = build_box(1, 2)
        g = fk_graph(r, WIRED)
        ghost = int(np.flatnonzero(g.is_ghost)[0])
        for _ in range(300):
            bits = (rng.random(r.n_bonds) < rng.random()).astype(np.uint8)
            cw = cluster_count(BondConfig(r, bits), WIRED)
            cf = cluster_count(BondConfig(r, bits), FREE)
            touching = bits[(g.bu == ghost) | (g.bv == ghost)].any()
            assert cw - (0 if touching else 1) <= cf


class TestConnectivity:
    def test_all_open_connected(self):
        r = build_box(1, 2)
        assert connected(BondConfig.all_open(r), FREE, [[-1, -1]], [[1, 1]])

    def test_all_closed_free(self):
        r = build_box(1, 2)
        assert not connected(BondConfig.all_closed(r), FREE, [[-1, -1]], [[1, 1]])

    def test_all_closed_wired_via_ghost(self):
        r = build_box(1, 2)
        cfg = BondConfig.all_closed(r)
        assert not connected(cfg, WIRED, [[-1, -1]], [[1, 1]])
        cfg = cfg.with_bond(r.bond_index([[-2, -1]], 0)[0], 1)
        cfg = cfg.with_bond(r.bond_index([[1, 1]], 0)[0], 1)
        assert connected(cfg, WIRED, [[-1, -1]], [[1, 1]])
        assert not connected(cfg, FREE, [[-1, -1]], [[1, 1]])

    def test_within_reflexive(self):
        r = build_box(1, 2)
        assert connected_within(BondConfig.all_closed(r), [], [[0, 0]], [[0, 0]])

    def test_within_path_leaving_subset(self):
        # 2x3 grid; the only open path from (0,0) to (0,2) runs through column x=1
        r = Region.product([0, 0], [1, 2], include_exterior=False)
        bits = np.zeros(r.n_bonds, np.uint8)
        for lo, a in [((0, 0), 0), ((1, 0), 1), ((1, 1), 1), ((0, 2), 0)]:
            bits[r.bond_index([lo], a)[0]] = 1
        cfg = BondConfig(r, bits)
        column0 = r.bonds_within([[0, 0], [0, 1], [0, 2]])
        assert not connected_within(cfg, column0, [[0, 0]], [[0, 2]])
        assert connected_within(cfg, np.arange(r.n_bonds), [[0, 0]], [[0, 2]])
        for sub in (column0, np.arange(r.n_bonds)):
            assert (connected_within(cfg, sub, [[0, 0]], [[0, 2]])
                    == restricted_connected(r, bits, sub, [[0, 0]], [[0, 2]]))

    def test_vertical_straight_path(self):
        r = build_block(1, 4, 3)
        ids = r.bond_index([[0, 0, z] for z in range(4)], 2)
        bits = np.zeros(r.n_bonds, np.uint8)
        bits[ids] = 1
        assert connected_within(BondConfig(r, bits), ids, [[0, 0, 0]], [[0, 0, 4]])

    def test_cluster_index_queries(self):
        r = build_box(1, 2)
        ci = ClusterIndex(BondConfig.all_open(r), FREE)
        a, b = ci.graph.nodes([[0, 0], [1, 1]])
        assert ci.same(a, b) and ci.find(a) == ci.find(b)


class TestLogWeight:
    def test_single_bond(self):
        r = Region.product([0], [1], include_exterior=False)
        lw = log_weight(BondConfig.all_open(r), RCParams(2, 0.5))
        assert lw == pytest.approx(math.log(0.5) + math.log(2))

    def test_q1_differences_are_bond_terms(self):
        r = build_box(1, 2)
        rng = np.random.default_rng(0)
        p = 0.3
        for _ in range(20):
            a = (rng.random(r.n_bonds) < 0.5).astype(np.uint8)
            b = (rng.random(r.n_bonds) < 0.5).astype(np.uint8)
            d = log_weight(BondConfig(r, a), RCParams(1, p)) - log_weight(BondConfig(r, b), RCParams(1, p))
            expect = (int(a.sum()) - int(b.sum())) * (math.log(p) - math.log(1 - p))
            assert d == pytest.approx(expect, abs=1e-12)

    def test_tree_ratio(self):
        # path with 3 bonds: all open = 1 cluster, all closed = 4 clusters
        r = Region.product([0], [3], include_exterior=False)
        p, q = 0.6, 3.0
        ratio = (log_weight(BondConfig.all_open(r), RCParams(q, p))
                 - log_weight(BondConfig.all_closed(r), RCParams(q, p)))
        assert ratio == pytest.approx(3 * math.log(p / (1 - p)) + (1 - 4) * math.log(q))

    def test_zero_weight(self):
        r = Region.product([0], [1], include_exterior=False)
        assert log_weight(BondConfig.all_open(r), RCParams(2, 0.0)) == -math.inf


class TestSnapshot:
    @pytest.mark.parametrize("region", [build_box(2, 3), build_block(1, 2, 2),
                                        Region.from_vertices([[0, 0], [1, 1], [2, 1]], 2, False)])
    def test_roundtrip(self, region):
        rng = np.random.default_rng(9)
        bits = (rng.random(region.n_bonds) < 0.5).astype(np.uint8)
        cfg = BondConfig(region, bits, BoundaryCondition("mixed:top|0-"))
        params = RCParams(2.5, 0.3, {0: 0.9})
        buf = io.BytesIO()
        data = write_snapshot(buf, cfg, params)
        assert buf.getvalue() == data
        back, p2 = read_snapshot(data)
        assert back == cfg and p2 == params
        assert np.array_equal(back.region.vertices, region.vertices)

    def test_file_and_errors(self, tmp_path):
        r = build_box(1, 2)
        path = tmp_path / "c.rcsnap"
        write_snapshot(path, BondConfig.all_open(r), RCParams(1, 0.5))
        cfg, _ = read_snapshot(path)
        assert cfg.n_open == r.n_bonds
        with pytest.raises(ValueError):
            read_snapshot(b"garbage")

    def test_bad_bits(self):
        r = build_box(1, 2)
        with pytest.raises(ValueError):
            BondConfig(r, np.zeros(3, np.uint8))
