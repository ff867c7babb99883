"""Event detectors and Monte Carlo estimators.

Events are described by :class:`EventSpec` and compiled against a region
into a vectorised evaluator ``bits -> bool``; compilation caches every
geometric lookup so that evaluating a sample costs one labelling pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels, stats
from .lattice import (Kind, Orientation, PlacedBlock, Region, build_block, build_rectangle,
                      place_block, plaque_coords, rectangle_face, rectangle_inner,
                      side_subfacets, top_subfacets)
from .rcmodel import BondConfig, BoundaryCondition, RCParams, fk_graph
from .rng import RNGStream, as_generator
from .sampler import ChainState, Constraint, SamplerConfig, iter_chain
from .stats import Estimate

DECREASING = frozenset({"disconnection"})

# ---------------------------------------------------------------------------
# specifications


@dataclass(frozen=True)
class EventSpec:
    """An event and its geometric parameters.

    kinds: ``disconnection`` (N, delta), ``face_crossing`` (a, b, within),
    ``seed_present`` (center, axis, K), ``C_K`` / ``C_K_i`` (K, ell, h[, i]),
    ``Chat_K`` / ``Chat_K_j`` (K, ell, h[, j]), ``occupied`` (K, ell, h),
    ``box_percolation`` (N), ``two_point`` (x).  Block events take an
    optional ``block`` placement; by default B(ell, h) itself.
    """

    kind: str
    params: tuple = ()

    def get(self, key, default=None):
        return dict(self.params).get(key, default)

    @property
    def increasing(self) -> bool:
        return self.kind not in DECREASING

    @staticmethod
    def make(kind: str, **params) -> "EventSpec":
        if kind not in _COMPILERS:
            raise ValueError(f"unknown event kind {kind!r}")
        return EventSpec(kind, tuple(sorted(params.items(), key=lambda kv: kv[0])))

    def label(self) -> str:
        inner = ",".join(f"{k}={_fmt(v)}" for k, v in self.params if k != "block")
        return f"{self.kind}({inner})"


def _fmt(v):
    if isinstance(v, (tuple, list, np.ndarray)):
        return "(" + " ".join(str(int(x)) for x in np.ravel(v)) + ")"
    return str(v)


def disconnection(N: int, delta) -> EventSpec:
    return EventSpec.make("disconnection", N=N, delta=delta)


def face_crossing(a, b, within=None) -> EventSpec:
    a = tuple(map(tuple, np.asarray(a, dtype=np.int64).reshape(-1, np.shape(a)[-1])))
    b = tuple(map(tuple, np.asarray(b, dtype=np.int64).reshape(-1, np.shape(b)[-1])))
    w = None if within is None else tuple(int(x) for x in np.ravel(within))
    return EventSpec.make("face_crossing", a=a, b=b, within=w)


def seed_present(center, axis: int, K: int) -> EventSpec:
    return EventSpec.make("seed_present", center=tuple(int(c) for c in center), axis=axis, K=K)


def top_seed_event(K: int, ell: int, h: int, i: int | None = None, block=None) -> EventSpec:
    if i is None:
        return EventSpec.make("C_K", K=K, ell=ell, h=h, block=block)
    return EventSpec.make("C_K_i", K=K, ell=ell, h=h, i=i, block=block)


def side_seed_event(K: int, ell: int, h: int, j: int | None = None, block=None) -> EventSpec:
    if j is None:
        return EventSpec.make("Chat_K", K=K, ell=ell, h=h, block=block)
    return EventSpec.make("Chat_K_j", K=K, ell=ell, h=h, j=j, block=block)


def occupied_block(K: int, ell: int, h: int, block=None) -> EventSpec:
    return EventSpec.make("occupied", K=K, ell=ell, h=h, block=block)


def box_percolation(N: int) -> EventSpec:
    return EventSpec.make("box_percolation", N=N)


def two_point(x) -> EventSpec:
    return EventSpec.make("two_point", x=tuple(int(c) for c in x))


# ---------------------------------------------------------------------------
# compiled evaluators


class _RegionGraph:
    """Plain bond graph of a region (exterior endpoints as separate nodes)."""

    def __init__(self, region: Region):
        self.region = region
        self.n = region.n_nodes
        self.bu = np.ascontiguousarray(region.bonds[:, 0])
        self.bv = np.ascontiguousarray(region.bonds[:, 1])

    def labels(self, active: np.ndarray) -> np.ndarray:
        return kernels.labels(self.n, self.bu, self.bv, active)


def _bond_ids(region: Region, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bond ids for endpoint pairs that differ by one unit vector."""
    diff = b - a
    axis = np.argmax(np.abs(diff), axis=-1)
    sign = np.take_along_axis(diff, axis[..., None], axis=-1)[..., 0]
    lower = np.where((sign > 0)[..., None], a, b)
    shape = lower.shape[:-1]
    ids = region.bond_index(lower.reshape(-1, region.dim), axis.reshape(-1))
    return ids.reshape(shape)


def _plaque_bond_pairs(K: int, axis: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    pts = plaque_coords(np.zeros(d, dtype=np.int64), axis, K)
    a_list, b_list = [], []
    for a in range(d):
        if a == axis:
            continue
        e = np.zeros(d, dtype=np.int64)
        e[a] = 1
        keep = pts[:, a] < K
        a_list.append(pts[keep])
        b_list.append(pts[keep] + e)
    return np.concatenate(a_list), np.concatenate(b_list)


class BlockEvents:
    """All seed events of one placed block inside ``region``.

    ``evaluate(bits)`` returns the boolean vector of the top events
    ``C_K^i`` and of the side events ``Chat_K^j``, together with Y and X.
    """

    def __init__(self, region: Region, K: int, ell: int, h: int, block: PlacedBlock | None = None):
        d = region.dim
        self.region = region
        self.K, self.ell, self.h = K, ell, h
        self.block = block or place_block(Orientation.NORTH, np.zeros(d, dtype=np.int64), ell, h, d)
        if (self.block.ell, self.block.h) != (ell, h):
            raise ValueError("block placement has different dimensions")
        blk = self.block
        canon = build_block(ell, h, d).vertices
        world = blk.to_world(canon)
        if not region.contains(world).all():
            raise ValueError("block does not fit inside the region")
        self.graph = _RegionGraph(region)
        interior = canon[np.all(np.abs(canon[:, :-1]) <= ell - 1, axis=1)
                         & (canon[:, -1] >= 1) & (canon[:, -1] <= h - 1)]
        self.within = np.zeros(region.n_bonds, dtype=np.uint8)
        if interior.size:
            self.within[region.bonds_intersecting(blk.to_world(interior))] = 1
        self.src = region.node_index(blk.to_world(plaque_coords(np.zeros(d, np.int64), d - 1, K)))
        # top candidates
        tops = top_subfacets(ell, h, d)
        sides = side_subfacets(ell, h, d)
        self.n_top, self.n_side = len(tops), len(sides)
        self.top_centers = self._top_centers()
        self.top_nodes, self.top_bonds, self.top_member = self._candidates(
            self.top_centers, d - 1, tops)
        side_nodes, side_bonds, side_member = [], [], []
        self.side_keys, self.side_centers = [], []
        for a in range(d - 1):
            for s in (1, -1):
                c = self._side_centers(a, s)
                self.side_keys.append((a, s))
                self.side_centers.append(c)
                nodes, bonds, mem = self._candidates(c, a, sides)
                side_nodes.append(nodes)
                side_bonds.append(bonds)
                side_member.append(mem)
        self.side_nodes = side_nodes
        self.side_bonds = side_bonds
        self.side_member = side_member
        top_face = canon[canon[:, -1] == h]
        side_face = canon[np.any(np.abs(canon[:, :-1]) == ell, axis=1)]
        self.top_face_nodes = region.node_index(blk.to_world(top_face))
        self.side_face_nodes = region.node_index(blk.to_world(side_face))

    def _top_centers(self) -> np.ndarray:
        d, K, ell, h = self.region.dim, self.K, self.ell, self.h
        r = ell - K
        if r < 0:
            return np.zeros((0, d), dtype=np.int64)
        g = np.meshgrid(*[np.arange(-r, r + 1)] * (d - 1), indexing="ij")
        c = np.stack([x.ravel() for x in g] + [np.full(g[0].size, h)], axis=1)
        return c.astype(np.int64)

    def _side_centers(self, a: int, s: int) -> np.ndarray:
        d, K, ell, h = self.region.dim, self.K, self.ell, self.h
        r = ell - K
        if r < 0 or h - 2 * K < 0:
            return np.zeros((0, d), dtype=np.int64)
        ranges = []
        for b in range(d - 1):
            ranges.append(np.array([s * ell]) if b == a else np.arange(-r, r + 1))
        ranges.append(np.arange(K, h - K + 1))
        g = np.meshgrid(*ranges, indexing="ij")
        return np.stack([x.ravel() for x in g], axis=1).astype(np.int64)

    def _candidates(self, centers, axis, subfacets):
        d, K = self.region.dim, self.K
        pl = plaque_coords(np.zeros(d, np.int64), axis, K)
        pa, pb = _plaque_bond_pairs(K, axis, d)
        blk = self.block
        if centers.size == 0:
            return (np.zeros((0, len(pl)), np.int64), np.zeros((0, len(pa)), np.int64),
                    np.zeros((0, len(subfacets)), bool))
        nodes = np.stack([self.region.node_index(blk.to_world(c + pl)) for c in centers])
        bonds = np.stack([_bond_ids(self.region, blk.to_world(c + pa), blk.to_world(c + pb))
                          for c in centers])
        if np.any(bonds < 0) or np.any(nodes < 0):
            raise ValueError("seed plaque outside the region")
        member = np.stack([sf.contains(centers) for sf in subfacets], axis=1)
        return nodes, bonds, member

    def labels(self, bits: np.ndarray) -> np.ndarray:
        return self.graph.labels((bits & self.within).astype(np.uint8))

    def evaluate(self, bits: np.ndarray) -> dict:
        lab = self.labels(bits)
        src = np.unique(lab[self.src])
        out = {}
        top = np.zeros(self.n_top, dtype=bool)
        if len(self.top_nodes):
            good = (np.isin(lab[self.top_nodes], src).any(axis=1)
                    & bits[self.top_bonds].astype(bool).all(axis=1))
            top = (self.top_member & good[:, None]).any(axis=0)
        side = np.zeros(self.n_side, dtype=bool)
        for nodes, bonds, mem in zip(self.side_nodes, self.side_bonds, self.side_member):
            if len(nodes):
                good = (np.isin(lab[nodes], src).any(axis=1)
                        & bits[bonds].astype(bool).all(axis=1))
                side |= (mem & good[:, None]).any(axis=0)
        out["top"] = top
        out["side"] = side
        out["Y"] = int(np.isin(lab[self.top_face_nodes], src).sum())
        out["X"] = int(np.isin(lab[self.side_face_nodes], src).sum())
        return out

    def seeds(self, bits: np.ndarray, lab: np.ndarray | None = None) -> list[dict]:
        """Every candidate seed with its canonical center and a ``good`` flag.

        Good means fully open and connected to the source inside the block.
        One entry per face: ``("top", None, None)`` then ``("side", axis, sign)``.
        """
        lab = self.labels(bits) if lab is None else lab
        src = np.unique(lab[self.src])
        faces = [("top", None, None, self.top_centers, self.top_nodes, self.top_bonds)]
        faces += [("side", a, s, c, n, b) for (a, s), c, n, b in
                  zip(self.side_keys, self.side_centers, self.side_nodes, self.side_bonds)]
        out = []
        for face, a, s, centers, nodes, bonds in faces:
            if len(nodes):
                good = (np.isin(lab[nodes], src).any(axis=1)
                        & bits[bonds].astype(bool).all(axis=1))
            else:
                good = np.zeros(0, dtype=bool)
            out.append({"face": face, "axis": a, "sign": s, "centers": centers,
                        "nodes": nodes, "bonds": bonds, "good": good})
        return out

    def C_K(self, bits) -> bool:
        return bool(self.evaluate(bits)["top"].any())

    def occupied(self, bits) -> bool:
        r = self.evaluate(bits)
        return bool(r["top"].all() and r["side"].all())


_BLOCK_CACHE: dict = {}


def block_events(region: Region, K: int, ell: int, h: int, block=None) -> BlockEvents:
    key = (id(region), K, ell, h, None if block is None else
           (block.orientation, block.anchor, block.ell, block.h))
    hit = _BLOCK_CACHE.get(key)
    if hit is not None and hit.region is region:
        return hit
    ev = BlockEvents(region, K, ell, h, block)
    if len(_BLOCK_CACHE) > 256:
        _BLOCK_CACHE.clear()
    _BLOCK_CACHE[key] = ev
    return ev


def _compile_block(kind):
    def comp(spec: EventSpec, region: Region, bc: BoundaryCondition):
        ev = block_events(region, spec.get("K"), spec.get("ell"), spec.get("h"), spec.get("block"))
        if kind == "C_K":
            return lambda bits: bool(ev.evaluate(bits)["top"].any())
        if kind == "C_K_i":
            i = spec.get("i")
            if not 1 <= i <= ev.n_top:
                raise ValueError(f"top subfacet index {i} out of range")
            return lambda bits: bool(ev.evaluate(bits)["top"][i - 1])
        if kind == "Chat_K":
            return lambda bits: bool(ev.evaluate(bits)["side"].any())
        if kind == "Chat_K_j":
            j = spec.get("j")
            if not 1 <= j <= ev.n_side:
                raise ValueError(f"side subfacet index {j} out of range")
            return lambda bits: bool(ev.evaluate(bits)["side"][j - 1])
        return ev.occupied
    return comp


class Disconnection:
    """No open path inside R(N, delta) from its bottom face to its top face."""

    def __init__(self, region: Region, N: int, delta):
        if region.kind is not Kind.RECTANGLE or region.meta["N"] != N:
            region_ok = False
        else:
            region_ok = True
        if not region_ok:
            raise ValueError("disconnection needs the rectangle R^L(N, delta) it was defined on")
        self.region = region
        self.graph = _RegionGraph(region)
        self.bonds = region.bonds_within(rectangle_inner(region))
        self.mask = np.zeros(region.n_bonds, dtype=np.uint8)
        self.mask[self.bonds] = 1
        self.bottom = region.node_index(rectangle_face(region, "bottom"))
        self.top = region.node_index(rectangle_face(region, "top"))

    def crossing(self, bits, mask=None) -> bool:
        m = self.mask if mask is None else mask
        lab = self.graph.labels((bits & m).astype(np.uint8))
        return bool(np.isin(lab[self.top], lab[self.bottom]).any())

    def __call__(self, bits) -> bool:
        return not self.crossing(bits)


def _compile_disconnection(spec, region, bc):
    return Disconnection(region, spec.get("N"), spec.get("delta"))


def _compile_face_crossing(spec, region, bc):
    a = region.node_index(np.array(spec.get("a")))
    b = region.node_index(np.array(spec.get("b")))
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("face crossing endpoints outside the region")
    within = spec.get("within")
    if within is None:
        g = fk_graph(region, bc)
        ga, gb = g.node_of[a], g.node_of[b]

        def f_bc(bits):
            lab = g.labels(bits)
            return bool(np.isin(lab[gb], lab[ga]).any())
        return f_bc
    rg = _RegionGraph(region)
    mask = np.zeros(region.n_bonds, dtype=np.uint8)
    mask[np.asarray(within, dtype=np.int64)] = 1

    def f(bits):
        lab = rg.labels((bits & mask).astype(np.uint8))
        return bool(np.isin(lab[b], lab[a]).any())
    return f


def _compile_seed(spec, region, bc):
    center = np.array(spec.get("center"), dtype=np.int64)
    K, axis = spec.get("K"), spec.get("axis") % region.dim
    pa, pb = _plaque_bond_pairs(K, axis, region.dim)
    ids = _bond_ids(region, center + pa, center + pb)
    if np.any(ids < 0):
        raise ValueError("seed plaque outside the region")
    return lambda bits: bool(bits[ids].all())


def _compile_box(spec, region, bc):
    g = fk_graph(region, bc)
    o = g.nodes(np.zeros((1, region.dim), dtype=np.int64))[0]
    targets = np.unique(g.node_of[region.n_vertices:])
    if targets.size == 0:
        raise ValueError("region has no exterior")

    def f(bits):
        lab = g.labels(bits)
        return bool(np.isin(lab[o], lab[targets]))
    return f


def _compile_two_point(spec, region, bc):
    g = fk_graph(region, bc)
    o = g.nodes(np.zeros((1, region.dim), dtype=np.int64))[0]
    x = g.nodes(np.array([spec.get("x")]))[0]

    def f(bits):
        lab = g.labels(bits)
        return bool(lab[o] == lab[x])
    return f


_COMPILERS = {
    "disconnection": _compile_disconnection,
    "face_crossing": _compile_face_crossing,
    "seed_present": _compile_seed,
    "C_K": _compile_block("C_K"),
    "C_K_i": _compile_block("C_K_i"),
    "Chat_K": _compile_block("Chat_K"),
    "Chat_K_j": _compile_block("Chat_K_j"),
    "occupied": _compile_block("occupied"),
    "box_percolation": _compile_box,
    "two_point": _compile_two_point,
}


def compile_event(spec: EventSpec, region: Region, bc: BoundaryCondition | None = None
                  ) -> Callable[[np.ndarray], bool]:
    return _COMPILERS[spec.kind](spec, region, bc or BoundaryCondition.free())


def eval_event(config: BondConfig, bc: BoundaryCondition | None, spec: EventSpec) -> bool:
    """Indicator of ``spec`` on ``config`` (exact)."""
    return bool(compile_event(spec, config.region, bc or config.bc)(config.bits))


def count_Y(config: BondConfig, ell: int, h: int, K: int = 1, block=None) -> int:
    """Top-face sites joined to b^d_K(0) by open bonds strictly within B(ell, h)."""
    return block_events(config.region, K, ell, h, block).evaluate(config.bits)["Y"]


def count_X(config: BondConfig, ell: int, h: int, K: int = 1, block=None) -> int:
    """Side-face sites joined to b^d_K(0) by open bonds strictly within B(ell, h)."""
    return block_events(config.region, K, ell, h, block).evaluate(config.bits)["X"]


# ---------------------------------------------------------------------------
# estimators


def _replica_streams(rng, replicas: int) -> list:
    if isinstance(rng, RNGStream):
        return [rng.child(r) for r in range(replicas)]
    if isinstance(rng, (int, np.integer)):
        return [RNGStream(int(rng), r) for r in range(replicas)]
    if replicas != 1:
        raise ValueError("several replicas need a seed or an RNGStream")
    return [rng]


def sample_series(region, params, bc, f, cfg: SamplerConfig, rng, init=None) -> np.ndarray:
    """``f`` evaluated on every retained sample of one chain."""
    st = ChainState(region, params, bc, rng, cfg.method, init)
    return np.array([f(s) for s in iter_chain(st, cfg)], dtype=float)


def estimate_event(region: Region, params: RCParams, bc: BoundaryCondition, spec: EventSpec,
                   cfg: SamplerConfig, rng=0, replicas: int = 1, n_batches: int = 32) -> Estimate:
    """Batch-means estimate of P(spec); replicas are pooled in stream order."""
    f = compile_event(spec, region, bc)
    parts = []
    for stream in _replica_streams(rng, replicas):
        x = sample_series(region, params, bc, f, cfg, stream)
        parts.append(stats.batch_means(x, n_batches))
    est = stats.pool(parts) if len(parts) > 1 else parts[0]
    if est.n_batches < stats.MIN_BATCHES:
        est = stats.Estimate(est.value, math.nan, est.n, est.n_batches, est.method,
                             "ci_withheld", est.batches, est.weights)
    return est


# -- surface tension --------------------------------------------------------


def ladder_levels(region: Region, N: int, group: int | None = None) -> list[np.ndarray]:
    """Nested bond sets M_1 < M_2 < ... ending at all bonds inside R(N, delta).

    Level k keeps the bonds of R(N, delta) whose endpoints lie in the first
    k groups of vertical columns (row-major over the horizontal axes, one
    row of 2N+1 columns per group by default).
    """
    inner = rectangle_inner(region)
    bonds = region.bonds_within(inner)
    d = region.dim
    ends = region.node_coords(region.bonds[bonds])  # (m, 2, d)
    horiz = ends[:, :, :-1] + N
    width = 2 * N + 1
    col = np.zeros(ends.shape[:2], dtype=np.int64)
    for a in range(d - 1):
        col = col * width + horiz[:, :, a]
    colmax = col.max(axis=1)
    n_cols = width ** (d - 1)
    group = group or width
    levels = []
    for k in range(group, n_cols + group, group):
        levels.append(bonds[colmax < min(k, n_cols)])
    return levels


@dataclass
class LadderResult:
    estimate: Estimate  # of log P(J)
    ratios: list = field(default_factory=list)
    status: str = "ok"


def disconnection_ladder(region: Region, N: int, params: RCParams, bc: BoundaryCondition,
                         cfg: SamplerConfig, rng=0, group: int | None = None,
                         n_batches: int = 32) -> LadderResult:
    """log P(J(N, delta)) as a sum of log conditional ratios along nested events."""
    det = Disconnection(region, N, None)
    levels = ladder_levels(region, N, group)
    g = fk_graph(region, bc)
    bot = g.node_of[det.bottom]
    top = g.node_of[det.top]
    gen = as_generator(rng)
    init = np.zeros(region.n_bonds, dtype=np.uint8)
    ratios = []
    log_p = 0.0
    var = 0.0
    n_tot = 0
    prev = np.zeros(0, dtype=np.int64)
    for k, cur in enumerate(levels):
        mask = np.zeros(region.n_bonds, dtype=np.uint8)
        mask[cur] = 1
        if k == 0:
            # first level is unconditioned
            st = ChainState(region, params, bc, gen, cfg.method if cfg.method != "auto" else "auto",
                            init)
        else:
            st = ChainState(region, params, bc, gen, "heatbath", init,
                            Constraint(prev, bot, top))
        xs = []
        last_good = None
        for s in iter_chain(st, cfg):
            ok = not det.crossing(s, mask)
            xs.append(ok)
            if ok:
                last_good = s.copy()
        x = np.array(xs, dtype=float)
        e = stats.batch_means(x, n_batches)
        ratios.append(e)
        n_tot += e.n
        if last_good is None:
            return LadderResult(stats.failure("zero_success_level", "ladder", n_tot), ratios,
                                f"zero_success_level_{k}")
        log_p += math.log(e.value)
        se = e.se if e.n_batches > 1 else math.nan
        var += (se / e.value) ** 2 if math.isfinite(se) else 0.0
        init = last_good
        prev = cur
    half = float(stats._tcrit(n_batches)) * math.sqrt(var)
    return LadderResult(stats.Estimate(log_p, half, n_tot, n_batches, "ladder"), ratios)


def surface_tension_estimate(N: int, delta, L: int, params: RCParams, bc: BoundaryCondition,
                             cfg: SamplerConfig, rng=0, d: int = 3, mode: str = "auto",
                             min_events: int = 50, group: int | None = None) -> Estimate:
    """tau = -log P(J(N, delta)) / N^(d-1) on R^L(N, delta).

    ``mode`` is ``direct``, ``ladder`` or ``auto`` (direct first, ladder
    when fewer than ``min_events`` disconnections were seen).
    """
    area = float(N) ** (d - 1)
    if params.p == 0.0 and not params.overrides:
        return stats.exact(0.0, method="exact")
    if params.p == 1.0 and not params.overrides:
        return stats.Estimate(math.inf, 0.0, 0, 0, "exact", "ok")
    region = build_rectangle(N, delta, L, d)
    det = Disconnection(region, N, delta)
    if mode in ("direct", "auto"):
        x = sample_series(region, params, bc, det, cfg, rng)
        e = stats.batch_means(x, 32)
        hits = int(round(x.sum()))
        if mode == "direct" or hits >= min_events:
            if hits == 0:
                return stats.failure("zero_success", "direct", e.n)
            tau = -math.log(e.value) / area + 0.0
            half = e.half_width / (e.value * area)
            return stats.Estimate(tau, half, e.n, e.n_batches, "direct", e.status)
    res = disconnection_ladder(region, N, params, bc, cfg, rng if not isinstance(rng, int)
                               else RNGStream(rng, 1), group)
    if res.status != "ok":
        return stats.failure(res.status, "ladder", res.estimate.n)
    lp = res.estimate
    return stats.Estimate(-lp.value / area, lp.half_width / area, lp.n, lp.n_batches, "ladder")


# -- mixing -----------------------------------------------------------------


def mixing_setup(K: int, s: float, p: float, q: float, d: int = 3):
    """Region B_K, both boundary conditions, parameters and the bond b0 = (0, -e_d)."""
    region = build_block(K, K, d)
    n = region.n_vertices
    bottom = np.flatnonzero((region.bond_axis == d - 1) & (region.bonds[:, 0] >= n))
    params = RCParams(q, p).with_overrides(bottom, s)
    o = np.zeros(d, dtype=np.int64)
    g = o.copy()
    g[-1] = -1
    b0 = int(region.bond_index(g[None, :], d - 1)[0])
    return region, BoundaryCondition.wired(), BoundaryCondition.mixed("bottom"), params, b0


def conditional_open(graph, state: np.ndarray, b: int, p: float, q: float) -> float:
    """P(omega_b = 1 | rest) on a single configuration."""
    old = state[b]
    state[b] = 0
    lab = graph.labels(state)
    state[b] = old
    x, y = graph.bu[b], graph.bv[b]
    if lab[x] == lab[y]:
        return p
    if graph.anchor[lab == lab[x]].any() and graph.anchor[lab == lab[y]].any():
        return p / (p + (1 - p) * q)
    return p


def marginal_estimate(region, params, bc, b: int, cfg: SamplerConfig, rng, n_batches=32):
    """Rao-Blackwellised estimate of P(omega_b = 1)."""
    g = fk_graph(region, bc)
    pb = params.intensities(g.m)[b]
    x = sample_series(region, params, bc,
                      lambda s: conditional_open(g, s, b, pb, params.q), cfg, rng)
    return stats.batch_means(x, n_batches, "rao_blackwell")


def mixing_gap(K: int, s: float, p: float, q: float, cfg: SamplerConfig, rng=0, d: int = 3,
               n_batches: int = 32) -> Estimate:
    """Wired minus free marginal of b0 on B_K with bottom intensity ``s``.

    The two chains are independent; paired batch differences carry the CI.
    """
    if s == 0.0:
        return stats.exact(0.0)
    if q == 1.0:
        return stats.exact(0.0)
    region, bw, bf, params, b0 = mixing_setup(K, s, p, q, d)
    base = rng if isinstance(rng, RNGStream) else RNGStream(int(rng), 0)
    ew = marginal_estimate(region, params, bw, b0, cfg, base.child(0), n_batches)
    ef = marginal_estimate(region, params, bf, b0, cfg, base.child(1), n_batches)
    diff = np.asarray(ew.batches) - np.asarray(ef.batches)
    return stats.from_batches(diff, ew.weights, "paired_difference")
