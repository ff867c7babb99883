"""Shared fixtures and independent reference implementations used as oracles."""

from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np
import pytest

from rclab.lattice import Region
from rclab.rcmodel import BoundaryCondition


def neighbour_bonds(vertices, include_exterior: bool = True) -> set:
    """Bonds {x, x+e_a} found by scanning every vertex and direction."""
    verts = {tuple(int(c) for c in v) for v in vertices}
    d = len(next(iter(verts)))
    out = set()
    for v in verts:
        for a in range(d):
            for s in (1, -1):
                w = list(v)
                w[a] += s
                w = tuple(w)
                if w in verts or include_exterior:
                    lo = v if s > 0 else w
                    out.add((lo, a))
    return out


def region_bond_set(region: Region) -> set:
    lows = region.node_coords(region.bonds[:, 0])
    return {(tuple(int(c) for c in lo), int(a)) for lo, a in zip(lows, region.bond_axis)}


def bfs_cluster_count(region: Region, bits, bc: BoundaryCondition) -> int:
    """Clusters of omega plus wiring, by breadth-first search over coordinates.

    Exterior points of the same wired class are glued; a cluster counts
    when it holds a region vertex or a wired exterior point.
    """
    cls = bc.classes(region)
    nv = region.n_vertices
    ext = {tuple(map(int, c)): int(k) for c, k in zip(region.ext_vertices, cls)}
    adj: dict = {}

    def key(node):
        c = tuple(map(int, region.node_coords([node])[0]))
        if node >= nv and ext[c] >= 0:
            return ("ghost", ext[c])
        return c

    for b, (u, v) in enumerate(region.bonds):
        ku, kv = key(u), key(v)
        adj.setdefault(ku, set())
        adj.setdefault(kv, set())
        if bits[b]:
            adj[ku].add(kv)
            adj[kv].add(ku)
    for c in map(tuple, region.vertices.tolist()):
        adj.setdefault(c, set())
    seen = set()
    count = 0
    for start in adj:
        if start in seen:
            continue
        comp = []
        dq = deque([start])
        seen.add(start)
        while dq:
            x = dq.popleft()
            comp.append(x)
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    dq.append(y)
        if any(x[0] == "ghost" or region.contains(np.array([x]))[0] for x in comp):
            count += 1
    return count


def restricted_connected(region: Region, bits, allowed_bonds, A, B) -> bool:
    """BFS through open bonds of ``allowed_bonds`` only."""
    allowed = set(int(b) for b in allowed_bonds)
    adj: dict = {}
    for b in allowed:
        if bits[b]:
            u, v = (int(x) for x in region.bonds[b])
            adj.setdefault(u, []).append(v)
            adj.setdefault(v, []).append(u)
    src = set(int(x) for x in region.node_index(np.atleast_2d(A)))
    dst = set(int(x) for x in region.node_index(np.atleast_2d(B)))
    seen = set(src)
    dq = deque(src)
    while dq:
        x = dq.popleft()
        if x in dst:
            return True
        for y in adj.get(x, ()):
            if y not in seen:
                seen.add(y)
                dq.append(y)
    return False


def brute_force_table(region: Region, q: float, p: float, bc: BoundaryCondition):
    """Normalised weights of all configurations from the BFS cluster count."""
    m = region.n_bonds
    w = np.empty(1 << m)
    for idx in range(1 << m):
        bits = [(idx >> b) & 1 for b in range(m)]
        k = sum(bits)
        w[idx] = p ** k * (1 - p) ** (m - k) * q ** bfs_cluster_count(region, bits, bc)
    return w / w.sum()


def small_graph_corpus() -> list:
    """(name, region, q, p, bc) cases with at most 12 bonds."""
    R = Region.product
    shapes = {
        "path3": R([0], [2], include_exterior=False),
        "square": R([0, 0], [1, 1], include_exterior=False),
        "ladder": R([0, 0], [2, 1], include_exterior=False),
        "grid3x2_ext": R([0, 0], [1, 0]),
        "line2_ext": R([0], [1]),
        "cube": R([0, 0, 0], [1, 1, 1], include_exterior=False),
        "L_shape": Region.from_vertices([[0, 0], [1, 0], [2, 0], [0, 1], [0, 2]], 2,
                                        include_exterior=False),
        "site_ext2d": R([0, 0], [0, 0]),
        "pair_ext2d": R([0, 0], [0, 1]),
    }
    cases = [
        ("path3", "free", 1.0, 0.3), ("square", "free", 2.0, 0.5), ("square", "free", 1.5, 0.7),
        ("square", "free", 3.0, 0.3), ("ladder", "free", 2.0, 0.7), ("ladder", "free", 1.5, 0.5),
        ("cube", "free", 2.0, 0.85), ("cube", "free", 3.0, 0.3), ("L_shape", "free", 1.5, 0.3),
        ("grid3x2_ext", "wired", 2.0, 0.5), ("grid3x2_ext", "wired", 3.0, 0.7),
        ("grid3x2_ext", "free", 1.5, 0.5), ("grid3x2_ext", "mixed:0+|0-", 2.0, 0.3),
        ("grid3x2_ext", "mixed:top,bottom", 3.0, 0.5), ("line2_ext", "wired", 1.5, 0.7),
        ("line2_ext", "mixed:0-", 2.0, 0.3), ("site_ext2d", "wired", 3.0, 0.5),
        ("site_ext2d", "mixed:sides", 1.5, 0.3), ("pair_ext2d", "mixed:0+,0-|1-", 2.0, 0.7),
        ("pair_ext2d", "wired", 1.0, 0.5), ("pair_ext2d", "mixed:top", 3.0, 0.7),
        ("ladder", "free", 1.0, 0.7),
    ]
    out = []
    for name, bc, q, p in cases:
        r = shapes[name]
        assert r.n_bonds <= 12, name
        out.append((f"{name}-{bc}-q{q}-p{p}", r, q, p, BoundaryCondition(bc)))
    return out


def total_variation(a, b) -> float:
    return 0.5 * float(np.abs(np.asarray(a) - np.asarray(b)).sum())


def three_sigma_ok(est_value, exact, n, var=None) -> bool:
    var = exact * (1 - exact) if var is None else var
    return abs(est_value - exact) <= 3 * math.sqrt(max(var, 1e-12) / n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def all_bit_vectors(m: int):
    for t in itertools.product((0, 1), repeat=m):
        yield np.array(t, dtype=np.uint8)


ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
