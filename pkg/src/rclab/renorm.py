"""Two-level renormalization: occupied-block calibration and good-square growth.

Level one is the occupied block.  Level two glues occupied blocks into
brick sequences that run between coarse squares of side 2N.  A square is
good when its sequences reach every required target region.

Blocks are evaluated on their own small region, so the growth only needs
bond states near the bricks.  A :class:`ConfigSource` supplies them,
either from a sampled slab configuration or from a lazily hashed
Bernoulli field (exact for ``q = 1`` on any domain).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import stats
from .lattice import (Kind, Orientation, PlacedBlock, Region, build_block, place_block,
                      plaque_coords)
from .observables import BlockEvents, _plaque_bond_pairs
from .rcmodel import BondConfig, BoundaryCondition, RCParams
from .rng import RNGStream, as_generator
from .sampler import ChainState, SamplerConfig
from .stats import Estimate

BRICK_BUDGET = 100
N_, E_, S_, W_ = Orientation.NORTH, Orientation.EAST, Orientation.SOUTH, Orientation.WEST


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class RenormSpec:
    """Seed half-width K, inner block (ell, h), sampling block (L, H), budget eta."""

    K: int
    ell: int
    h: int
    L: int
    H: int
    eta: float = 0.1
    d: int = 3

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("need d >= 2")
        if not 1 <= self.K <= self.ell:
            raise ValueError("need 1 <= K <= ell")
        if self.ell > self.L:
            raise ValueError("need ell <= L")
        if self.H < 3 * self.L:
            raise ValueError("need H >= 3L")
        if not 0 <= self.H - self.h <= self.H / 100:
            raise ValueError("need 0 <= H - h <= H/100")
        if self.h < 2 * self.K:
            raise ValueError("side seeds need h >= 2K")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError("eta must lie in [0, 1)")

    @property
    def N(self) -> int:
        return 10 * self.L + 10 * self.H

    @property
    def slab_half_width(self) -> int:
        return self.L + self.ell

    @property
    def alpha_bound(self) -> float:
        return (1.0 - self.eta) ** BRICK_BUDGET

    def as_dict(self) -> dict:
        return {"K": self.K, "ell": self.ell, "h": self.h, "L": self.L, "H": self.H,
                "eta": self.eta, "d": self.d, "N": self.N}


def target_segment(N: int, H: int, direction: Orientation) -> tuple[tuple, tuple]:
    """Target region of the square centred at the origin facing ``direction``.

    Returned as closed (x, y) bounds; North is {-N/2..N/2} x {N-2H}.
    """
    half = N // 2
    pts = direction.rotate(np.array([[-half, N - 2 * H], [half, N - 2 * H]]))
    lo = tuple(int(v) for v in pts.min(axis=0))
    hi = tuple(int(v) for v in pts.max(axis=0))
    return lo, hi


# ---------------------------------------------------------------------------
# configuration sources


class ConfigSource:
    """Bond states addressed by (lower endpoint, axis)."""

    dim: int

    def bits_at(self, lower: np.ndarray, axis: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bits(self, region: Region) -> np.ndarray:
        lower = region.node_coords(region.bonds[:, 0])
        return self.bits_at(lower, region.bond_axis)


class SampledSource(ConfigSource):
    """Wraps a configuration sampled on a fixed region."""

    def __init__(self, config: BondConfig):
        self.config = config
        self.dim = config.region.dim

    def bits_at(self, lower, axis):
        ids = self.config.region.bond_index(np.asarray(lower, np.int64), np.asarray(axis, np.int64))
        if np.any(ids < 0):
            raise ValueError("bond outside the sampled region")
        return self.config.bits[ids]


_GOLD = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_OFF = np.int64(1 << 30)


def _mix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLD
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class IIDSource(ConfigSource):
    """Independent bonds, open with probability ``p``; a pure function of the bond.

    This is the random-cluster measure at ``q = 1`` on any region, so the
    growth never has to materialise the whole slab.
    """

    def __init__(self, p: float, seed: int, dim: int = 3):
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        self.p, self.seed, self.dim = float(p), int(seed), dim
        self.flips: dict = {}

    def bits_at(self, lower, axis):
        lower = np.asarray(lower, np.int64).reshape(-1, self.dim)
        axis = np.asarray(axis, np.int64).reshape(-1)
        h = _mix(np.full(len(axis), self.seed, dtype=np.uint64))
        for a in range(self.dim):
            h = _mix(h ^ (lower[:, a] + _OFF).astype(np.uint64))
        h = _mix(h ^ axis.astype(np.uint64))
        u = (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        out = (u < self.p).astype(np.uint8)
        if self.flips:
            for i, (c, a) in enumerate(zip(map(tuple, lower.tolist()), axis.tolist())):
                v = self.flips.get((c, a))
                if v is not None:
                    out[i] = v
        return out

    def set_bond(self, lower, axis: int, value: int) -> None:
        """Override one bond (used by mutation tests)."""
        self.flips[(tuple(int(v) for v in lower), int(axis))] = int(value)


def _as_source(src) -> ConfigSource:
    if isinstance(src, ConfigSource):
        return src
    if isinstance(src, BondConfig):
        return SampledSource(src)
    raise TypeError("expected a ConfigSource or a BondConfig")


def slab_region(spec: RenormSpec, m: int) -> Region:
    """S_{L+ell} cut to the squares with indices in {-m..m}^2."""
    N, w = spec.N, spec.slab_half_width
    lo = [-w] * (spec.d - 2) + [-2 * m * N - N + 1] * 2
    hi = [w] * (spec.d - 2) + [2 * m * N + N] * 2
    return Region.product(lo, hi, Kind.SLAB, include_exterior=False,
                          meta={"L": spec.L, "ell": spec.ell, "m": m})


def make_source(spec: RenormSpec, m: int, params: RCParams, rng=0,
                cfg: SamplerConfig | None = None) -> ConfigSource:
    """Draw one configuration of the free measure on the thick slab.

    ``q = 1`` uses the hashed field; other ``q`` run a chain on the whole slab.
    """
    if params.q == 1.0 and not params.overrides:
        seed = int(as_generator(rng).integers(0, 2 ** 62))
        return IIDSource(params.p, seed, spec.d)
    region = slab_region(spec, m)
    cfg = cfg or SamplerConfig(200, 199, 1)
    chain = ChainState(region, params, BoundaryCondition.free(), rng, cfg.method)
    for _ in range(cfg.sweeps):
        chain.step()
    return SampledSource(BondConfig(region, chain.state.copy()))


# ---------------------------------------------------------------------------
# bricks


@dataclass(frozen=True)
class Brick:
    """A placed occupied block and its four connection sites (world coordinates)."""

    orientation: Orientation
    anchor: tuple
    ell: int
    h: int
    sites: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        return len(self.anchor)

    @property
    def block(self) -> PlacedBlock:
        return place_block(self.orientation, self.anchor, self.ell, self.h, self.dim)

    def footprint(self) -> tuple[tuple, tuple]:
        lo, hi = self.block.bounds
        return (int(lo[-2]), int(lo[-1])), (int(hi[-2]), int(hi[-1]))

    def lateral_dirs(self) -> tuple[Orientation, Orientation]:
        """World directions of canonical East and West."""
        o = self.orientation
        return Orientation((o.value + 1) % 4), Orientation((o.value + 3) % 4)

    def as_dict(self) -> dict:
        return {"orientation": self.orientation.name, "anchor": list(self.anchor),
                "ell": self.ell, "h": self.h,
                "sites": {k: (None if v is None else list(v)) for k, v in sorted(self.sites.items())}}


def _site_key(face: str, d: Orientation) -> str:
    return f"{face}_{d.name}"


def _lex_first(world: np.ndarray) -> int:
    return int(np.lexsort(world.T[::-1])[0])


def _select(block: PlacedBlock, centers: np.ndarray, good: np.ndarray, signs: dict):
    """Lexicographically first good center satisfying the per-axis sign filters."""
    mask = good.copy()
    for a, s in signs.items():
        mask &= s * centers[:, a] >= 0
    if not mask.any():
        return None
    idx = np.flatnonzero(mask)
    world = block.to_world(centers[idx])
    j = _lex_first(world)
    return int(idx[j]), tuple(int(v) for v in world[j])


def top_candidates(ell: int, h: int, K: int, d: int) -> np.ndarray:
    r = ell - K
    g = np.meshgrid(*[np.arange(-r, r + 1)] * (d - 1), indexing="ij")
    return np.stack([x.ravel() for x in g] + [np.full(g[0].size, h)], axis=1).astype(np.int64)


def side_candidates(ell: int, h: int, K: int, d: int, sign: int) -> np.ndarray:
    """Seed centers on the lateral side ``x_{d-2} = sign * ell``."""
    r = ell - K
    ranges = [np.arange(-r, r + 1)] * (d - 2) + [np.array([sign * ell]), np.arange(K, h - K + 1)]
    g = np.meshgrid(*ranges, indexing="ij")
    return np.stack([x.ravel() for x in g], axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# geometric layout of a branching


def _lat_sign(o: Orientation, d: Orientation) -> int:
    if d.value == (o.value + 1) % 4:
        return 1
    if d.value == (o.value + 3) % 4:
        return -1
    raise ValueError(f"{d.name} is not lateral to {o.name}")


@dataclass(frozen=True)
class LayoutStep:
    name: str
    brick: Brick
    parent: str
    face: str
    attachment: np.ndarray = field(compare=False, repr=False)


def brick_layout_branch(start: Brick, K: int, mirror: bool | None = None,
                        chooser=None, slab_half_width: int | None = None) -> list[LayoutStep]:
    """Geometric placement of the bifurcation bricks B1..B7 above ``start``.

    ``start`` is a North brick.  Each step records the set of anchors its
    attachment face allows (``attachment``) and the anchor picked by
    ``chooser(candidates) -> row`` (default: lexicographically first).
    Without mirroring, B1..B3 stack North, a West branch leaves B2 on its
    west side, and B4..B7 run East with a North branch leaving B6.  The
    mirror image swaps East and West.
    """
    if start.orientation is not N_:
        raise ValueError("the layout starts from a North brick")
    d, ell, h = start.dim, start.ell, start.h
    pick = chooser or (lambda w: w[_lex_first(w)])
    steps: list[LayoutStep] = []
    blocks = {"B0": start}

    def add(name, parent, face, orient, lat=None):
        pb = blocks[parent].block
        o_parent = blocks[parent].orientation
        if face == "top":
            cands = top_candidates(ell, h, K, d)
            if lat is not None:
                s = _lat_sign(o_parent, lat)
                cands = cands[s * cands[:, d - 2] >= 0]
        else:
            cands = side_candidates(ell, h, K, d, _lat_sign(o_parent, lat))
        world = pb.to_world(cands)
        z = tuple(int(v) for v in pick(world))
        b = Brick(orient, z, ell, h)
        if slab_half_width is not None and d > 2:
            lo, hi = b.block.bounds
            if np.any(np.abs(lo[:d - 2]) > slab_half_width) or np.any(np.abs(hi[:d - 2]) > slab_half_width):
                raise ValueError(f"{name} leaves the slab")
        blocks[name] = b
        steps.append(LayoutStep(name, b, parent, face if lat is None else f"{face}_{lat.name}", world))
        return z

    z1 = add("B1", "B0", "top", N_)
    if mirror is None:
        mirror = z1[-2] > start.anchor[-2]
    west, east = (E_, W_) if mirror else (W_, E_)
    add("B2", "B1", "top", N_, west)
    add("B3", "B2", "top", N_, east)
    add("branch_" + west.name, "B2", "side", west, west)
    add("B4", "B3", "side", east, east)
    add("B5", "B4", "top", east, N_)
    add("B6", "B5", "top", east, N_)
    add("B7", "B6", "top", east, S_)
    add("branch_NORTH", "B6", "side", N_, N_)
    return steps


def interior_bonds(brick: Brick) -> set:
    """World bond descriptors (lower endpoint + axis) touching the block interior."""
    b = brick.block
    lo, hi = b.interior_bounds()
    out = set()
    d = brick.dim
    grids = np.meshgrid(*[np.arange(l, u + 1) for l, u in zip(lo, hi)], indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    for a in range(d):
        e = np.zeros(d, np.int64)
        e[a] = 1
        for p in pts.tolist():
            out.add((tuple(p), a))
            q = tuple(np.asarray(p) - e)
            out.add((q, a))
    return out


# ---------------------------------------------------------------------------
# cluster growth


def square_bounds(idx: tuple, N: int) -> tuple[tuple, tuple]:
    cx, cy = 2 * N * idx[0], 2 * N * idx[1]
    return (cx - N + 1, cy - N + 1), (cx + N, cy + N)


def spiral_order(m: int) -> list[tuple]:
    """Squares of {-m..m}^2 ring by ring from the origin, row-major within a ring."""
    sq = [(i, j) for i in range(-m, m + 1) for j in range(-m, m + 1)]
    return sorted(sq, key=lambda s: (max(abs(s[0]), abs(s[1])), -s[1], s[0]))


@dataclass
class SquareState:
    index: tuple
    z: int | None = None
    witness: list = field(default_factory=list)
    pred: tuple | None = None
    direction: Orientation | None = None
    targets: dict = field(default_factory=dict)
    n_bricks: int = 0
    reason: str = ""
    witness_bonds: np.ndarray | None = None
    reads: list = field(default_factory=list)

    @property
    def good(self) -> bool:
        return self.z == 1

    def as_dict(self) -> dict:
        return {"index": list(self.index), "z": self.z,
                "pred": None if self.pred is None else list(self.pred),
                "direction": None if self.direction is None else self.direction.name,
                "n_bricks": self.n_bricks, "reason": self.reason,
                "targets": {k.name: v.as_dict() for k, v in sorted(self.targets.items(),
                                                                    key=lambda kv: kv[0].value)},
                "bricks": [b.as_dict() for b in self.witness]}


class _Failure(Exception):
    pass


@dataclass
class _Frame:
    """Local coordinates with the predecessor square at the origin, entered toward North."""

    center: tuple
    rot: Orientation

    def orient(self, o_loc: Orientation) -> Orientation:
        return Orientation((o_loc.value + self.rot.value) % 4)

    def local_xy(self, xy) -> np.ndarray:
        return self.rot.unrotate(np.asarray(xy, np.int64) - np.asarray(self.center, np.int64))

    def local_dir(self, o: Orientation) -> Orientation:
        return Orientation((o.value - self.rot.value) % 4)

    def local_box(self, lo, hi) -> tuple[np.ndarray, np.ndarray]:
        c = np.array([[lo[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]], [hi[0], lo[1]]])
        loc = self.local_xy(c)
        return loc.min(axis=0), loc.max(axis=0)


def _hits(frame: _Frame, brick: Brick, seg) -> bool:
    lo, hi = frame.local_box(*brick.footprint())
    (sx0, sy0), (sx1, sy1) = seg
    return lo[0] <= sx1 and sx0 <= hi[0] and lo[1] <= sy1 and sy0 <= hi[1]


class _Grower:
    def __init__(self, source: ConfigSource, spec: RenormSpec, m: int, budget: int,
                 record_reads: bool):
        self.src = source
        self.spec = spec
        self.m = m
        self.budget = budget
        self.record_reads = record_reads
        self.interiors_lo: list = []
        self.interiors_hi: list = []
        self._ev_cache: dict = {}
        self._templates: dict = {}

    # -- per square bookkeeping
    def begin(self, state: SquareState, allowed: tuple):
        self.state = state
        self.allowed = allowed
        self.count = 0
        self.new_lo: list = []
        self.new_hi: list = []
        self.wbonds: list = []
        self.bricks: list = []

    def commit(self, good: bool):
        if good:
            self.interiors_lo.extend(self.new_lo)
            self.interiors_hi.extend(self.new_hi)

    # -- blocks
    def _template(self, o: Orientation):
        """Block events of an orientation at the origin; translated bricks reuse it."""
        tpl = self._templates.get(o)
        if tpl is None:
            blk = place_block(o, (0,) * self.spec.d, self.spec.ell, self.spec.h, self.spec.d)
            lo, hi = blk.bounds
            region = Region.product(lo, hi, Kind.BLOCK, include_exterior=False)
            ev = BlockEvents(region, self.spec.K, self.spec.ell, self.spec.h, blk)
            lower = region.node_coords(region.bonds[:, 0])
            tpl = self._templates[o] = (ev, lower, region.bond_axis.copy())
        return tpl

    def _events(self, brick: Brick):
        key = (brick.orientation, brick.anchor)
        hit = self._ev_cache.get(key)
        if hit is not None:
            return hit
        ev, lower, axis = self._template(brick.orientation)
        bits = self.src.bits_at(lower + np.asarray(brick.anchor, np.int64), axis)
        lab = ev.labels(bits)
        seeds = ev.seeds(bits, lab)
        if len(self._ev_cache) > 64:
            self._ev_cache.clear()
        self._ev_cache[key] = (ev, bits, lab, seeds)
        return self._ev_cache[key]

    def _check_geometry(self, brick: Brick):
        spec = self.spec
        blk = brick.block
        lo, hi = blk.bounds
        (ax0, ay0), (ax1, ay1) = self.allowed
        if lo[-2] < ax0 or lo[-1] < ay0 or hi[-2] > ax1 or hi[-1] > ay1:
            raise _Failure("brick_outside_squares")
        w = spec.slab_half_width
        if spec.d > 2 and (np.any(lo[:-2] < -w) or np.any(hi[:-2] > w)):
            raise _Failure("brick_outside_slab")
        ilo, ihi = blk.interior_bounds()
        for L_, H_ in ((self.interiors_lo, self.interiors_hi), (self.new_lo, self.new_hi)):
            if L_:
                a, b = np.asarray(L_), np.asarray(H_)
                if np.any(np.all((a <= ihi) & (ilo <= b), axis=1)):
                    raise _Failure("overlap")
        return ilo, ihi

    def new_brick(self, o_world: Orientation, anchor: tuple) -> Brick:
        self.count += 1
        if self.count > self.budget:
            raise _Failure("brick_budget")
        raw = Brick(o_world, anchor, self.spec.ell, self.spec.h)
        ilo, ihi = self._check_geometry(raw)
        if self.record_reads:
            lo, hi = raw.block.bounds
            self.state.reads.append((tuple(int(v) for v in lo), tuple(int(v) for v in hi)))
        ev, bits, lab, seeds = self._events(raw)
        top = seeds[0]
        if not top["good"].any():
            raise _Failure("unoccupied")
        r = ev.evaluate(bits)
        if not (r["top"].all() and r["side"].all()):
            raise _Failure("unoccupied")
        d = self.spec.d
        sites = {}
        for lat in raw.lateral_dirs():
            s = _lat_sign(o_world, lat)
            hit = _select(raw.block, top["centers"], top["good"], {d - 2: s})
            sites[_site_key("T", lat)] = None if hit is None else hit[1]
            entry = self._side_entry(seeds, s)
            hit = _select(raw.block, entry["centers"], entry["good"], {})
            sites[_site_key("S", lat)] = None if hit is None else hit[1]
        brick = Brick(o_world, anchor, self.spec.ell, self.spec.h, sites)
        self.new_lo.append(ilo)
        self.new_hi.append(ihi)
        self.bricks.append(brick)
        return brick

    def _side_entry(self, seeds, sign):
        d = self.spec.d
        for e in seeds[1:]:
            if e["axis"] == d - 2 and e["sign"] == sign:
                return e
        raise RuntimeError("missing lateral side")

    def _witness(self, brick: Brick, seeds_entry, idx: int):
        """Open path inside the block from its source plaque to the chosen seed."""
        ev, bits, lab, _ = self._events(brick)
        reg = ev.region
        active = (bits & ev.within).astype(bool)
        bu, bv = reg.bonds[active, 0], reg.bonds[active, 1]
        ids = np.flatnonzero(active)
        n = reg.n_nodes
        adj: dict = {}
        for k, (u, v) in enumerate(zip(bu.tolist(), bv.tolist())):
            adj.setdefault(u, []).append((v, k))
            adj.setdefault(v, []).append((u, k))
        goal = set(seeds_entry["nodes"][idx].tolist())
        src = ev.src.tolist()
        prev = {s: None for s in src}
        frontier = list(src)
        hit = next((s for s in src if s in goal), None)
        while frontier and hit is None:
            nxt = []
            for u in frontier:
                for v, k in adj.get(u, ()):
                    if v not in prev:
                        prev[v] = (u, k)
                        if v in goal:
                            hit = v
                            break
                        nxt.append(v)
                if hit is not None:
                    break
            frontier = nxt
        if hit is None:
            raise RuntimeError("seed marked good but no open path found")
        path = []
        v = hit
        while prev[v] is not None:
            u, k = prev[v]
            path.append(ids[k])
            v = u
        path.extend(seeds_entry["bonds"][idx].tolist())
        del n
        lower = reg.node_coords(reg.bonds[np.asarray(path, np.int64), 0]) + np.asarray(brick.anchor)
        axis = reg.bond_axis[np.asarray(path, np.int64)]
        self.wbonds.append(np.column_stack([lower, axis]))

    def source_plaque(self, brick: Brick):
        """Bonds of the brick's own source plaque; all must be open."""
        ev, bits, _, _ = self._events(brick)
        d = self.spec.d
        pa, pb = _plaque_bond_pairs(self.spec.K, d - 1, d)
        blk = brick.block
        a, b = blk.to_world(pa), blk.to_world(pb)
        diff = b - a
        axis = np.argmax(np.abs(diff), axis=1)
        sign = diff[np.arange(len(axis)), axis]
        lower = np.where((sign > 0)[:, None], a, b)
        if not self.src.bits_at(lower, axis).all():
            raise _Failure("source_seed_closed")
        self.wbonds.append(np.column_stack([lower, axis]))

    # -- seed choices
    def _offsets(self, frame: _Frame, brick: Brick, axis_value, o_loc: Orientation) -> dict:
        d = self.spec.d
        signs = {a: (-1 if brick.anchor[a] > 0 else 1) for a in range(d - 2)}
        if axis_value is not None:
            loc = frame.local_xy(brick.anchor[-2:])
            east = o_loc.rotate(np.array([1, 0]))
            if o_loc in (N_, S_):
                delta = np.array([loc[0] - axis_value, 0])
            else:
                delta = np.array([0, loc[1] - axis_value])
            off = int(delta @ east)
            signs[d - 2] = -1 if off > 0 else 1
        return signs

    def top_seed(self, frame, brick: Brick, axis_value=None, half: Orientation | None = None):
        """Seed on the top face: in the ``half`` toward a local direction, or steered."""
        _, _, _, seeds = self._events(brick)
        o_loc = frame.local_dir(brick.orientation)
        signs = self._offsets(frame, brick, axis_value, o_loc)
        if half is not None:
            signs[self.spec.d - 2] = _lat_sign(o_loc, half)
        elif axis_value is None:
            signs.pop(self.spec.d - 2, None)
        hit = _select(brick.block, seeds[0]["centers"], seeds[0]["good"], signs)
        if hit is None:
            raise _Failure("no_top_seed")
        self._witness(brick, seeds[0], hit[0])
        return hit[1]

    def side_seed(self, frame, brick: Brick, toward: Orientation):
        _, _, _, seeds = self._events(brick)
        o_loc = frame.local_dir(brick.orientation)
        entry = self._side_entry(seeds, _lat_sign(o_loc, toward))
        signs = self._offsets(frame, brick, None, o_loc)
        hit = _select(brick.block, entry["centers"], entry["good"], signs)
        if hit is None:
            raise _Failure("no_side_seed")
        self._witness(brick, entry, hit[0])
        return hit[1]

    def stack(self, frame, first: Brick, o_loc: Orientation, axis_value: int, stop) -> Brick:
        """Pile bricks on ``first`` with steering until ``stop(brick)``."""
        cur = first
        while not stop(cur):
            z = self.top_seed(frame, cur, axis_value)
            cur = self.new_brick(frame.orient(o_loc), z)
        return cur


def _allowed(a: tuple, b: tuple | None, N: int):
    lo1, hi1 = square_bounds(a, N)
    if b is None:
        return lo1, hi1
    lo2, hi2 = square_bounds(b, N)
    return (min(lo1[0], lo2[0]), min(lo1[1], lo2[1])), (max(hi1[0], hi2[0]), max(hi1[1], hi2[1]))


def _neighbor(idx, o: Orientation):
    v = o.vector
    return (idx[0] + v[0], idx[1] + v[1])


def _in_domain(idx, m):
    return abs(idx[0]) <= m and abs(idx[1]) <= m


def _shift(seg, dx, dy):
    (a, b), (c, e) = seg
    return (a + dx, b + dy), (c + dx, e + dy)


def _inspect_origin(g: _Grower, spec: RenormSpec, m: int) -> dict:
    N, H, d = spec.N, spec.H, spec.d
    frame = _Frame((0, 0), N_)
    need = [o for o in (N_, E_, S_, W_) if _in_domain(_neighbor((0, 0), o), m)]
    b0 = g.new_brick(N_, (0,) * d)
    g.source_plaque(b0)
    targets = {}
    tseg = {o: target_segment(N, H, o) for o in Orientation}
    if N_ in need:
        targets[N_] = g.stack(frame, b0, N_, 0, lambda b: _hits(frame, b, tseg[N_]))
    wseq = []
    for lat in (W_, E_):
        if lat in need or (lat is W_ and S_ in need):
            first = g.new_brick(lat, g.side_seed(frame, b0, lat))
            seq = [first]

            def stop(b, lat=lat, seq=seq):
                if b is not seq[-1]:
                    seq.append(b)
                return _hits(frame, b, tseg[lat])
            targets[lat] = g.stack(frame, first, lat, 0, stop)
            if lat is W_:
                wseq = seq
    if S_ in need:
        base = wseq[1] if len(wseq) > 1 else wseq[0]
        first = g.new_brick(S_, g.side_seed(frame, base, S_))
        targets[S_] = g.stack(frame, first, S_, 0, lambda b: _hits(frame, b, tseg[S_]))
    return {o: targets[o] for o in need}


def _inspect(g: _Grower, spec: RenormSpec, m: int, idx, pred, D: Orientation,
             start: Brick) -> dict:
    N, H = spec.N, spec.H
    pc = (2 * N * pred[0], 2 * N * pred[1])
    frame = _Frame(pc, D)
    # required local directions (local North is D)
    need = {}
    for o_loc in (N_, W_, E_):
        o_w = frame.orient(o_loc)
        if _in_domain(_neighbor(idx, o_w), m):
            need[o_loc] = o_w
    seg = {o: _shift(target_segment(N, H, o), 0, 2 * N) for o in (N_, W_, E_)}
    trigger = ((-10 * N, N + N // 2), (10 * N, N + N // 2))
    b0 = g.stack(frame, start, N_, 0, lambda b: b is not start and _hits(frame, b, trigger))
    z1 = g.top_seed(frame, b0, 0)
    b1 = g.new_brick(frame.orient(N_), z1)
    x1 = int(frame.local_xy(z1[-2:])[0])
    west, east = (E_, W_) if x1 > 0 else (W_, E_)
    out = {}
    if not need:
        return out
    b2 = g.new_brick(frame.orient(N_), g.top_seed(frame, b1, half=west))
    b3 = g.new_brick(frame.orient(N_), g.top_seed(frame, b2, half=east))
    if west in need:
        first = g.new_brick(frame.orient(west), g.side_seed(frame, b2, west))
        out[west] = g.stack(frame, first, west, 2 * N, lambda b: _hits(frame, b, seg[west]))
    if N_ in need or east in need:
        b4 = g.new_brick(frame.orient(east), g.side_seed(frame, b3, east))
        b5 = g.new_brick(frame.orient(east), g.top_seed(frame, b4, half=N_))
        b6 = g.new_brick(frame.orient(east), g.top_seed(frame, b5, half=N_))
        if N_ in need:
            first = g.new_brick(frame.orient(N_), g.side_seed(frame, b6, N_))
            out[N_] = g.stack(frame, first, N_, 0, lambda b: _hits(frame, b, seg[N_]))
        if east in need:
            b7 = g.new_brick(frame.orient(east), g.top_seed(frame, b6, half=S_))
            out[east] = g.stack(frame, b7, east, 2 * N, lambda b: _hits(frame, b, seg[east]))
    return {need[o]: b for o, b in out.items()}


@dataclass
class GrowthResult:
    spec: RenormSpec
    m: int
    states: dict
    order: list
    history: list

    def good_squares(self) -> list:
        return [i for i in self.order if self.states[i].good]

    def inspected(self) -> list:
        return [i for i in self.order if self.states[i].z is not None]

    def to_json(self) -> str:
        doc = {"spec": self.spec.as_dict(), "m": self.m, "history": self.history,
               "squares": [self.states[i].as_dict() for i in self.order
                           if self.states[i].z is not None]}
        return json.dumps(stats.strict(doc), indent=2, sort_keys=True, allow_nan=False)

    def to_svg(self, scale: float | None = None) -> str:
        return witness_svg(self, scale)


def _good_neighbors(states, idx) -> list:
    out = []
    for o in Orientation:
        j = _neighbor(idx, o)
        if j in states and states[j].good:
            out.append(j)
    return out


def grow_cluster(source, spec: RenormSpec, m: int = 1, budget: int = BRICK_BUDGET,
                 record_reads: bool = True) -> GrowthResult:
    """Sequential inspection of the squares {-m..m}^2, starting at the origin square."""
    src = _as_source(source)
    if src.dim != spec.d:
        raise ValueError("source dimension does not match the spec")
    order = spiral_order(m)
    rank = {s: k for k, s in enumerate(order)}
    states = {s: SquareState(s) for s in order}
    history = []
    g = _Grower(src, spec, m, budget, record_reads)
    idx, pred, D = (0, 0), None, None
    while idx is not None:
        st = states[idx]
        st.pred, st.direction = pred, D
        n_good = len(_good_neighbors(states, idx))
        g.begin(st, _allowed(idx, pred, spec.N))
        try:
            if pred is None:
                targets = _inspect_origin(g, spec, m)
            else:
                start = states[pred].targets[D]
                targets = _inspect(g, spec, m, idx, pred, D, start)
            st.z, st.targets = 1, targets
        except _Failure as exc:
            st.z, st.reason = 0, str(exc)
        st.n_bricks = g.count
        if st.good:
            st.witness = list(g.bricks)
            st.witness_bonds = (np.concatenate(g.wbonds) if g.wbonds
                                else np.zeros((0, spec.d + 1), np.int64))
        g.commit(st.good)
        history.append({"square": list(idx), "n_good_neighbors": n_good, "z": st.z})
        # earliest unexamined square sharing a face with a good square
        idx = pred = D = None
        for s in order:
            if states[s].z is not None:
                continue
            nbrs = sorted(_good_neighbors(states, s), key=rank.get)
            for j in nbrs:
                o = Orientation.from_vector((s[0] - j[0], s[1] - j[1]))
                if o in states[j].targets:
                    idx, pred, D = s, j, o
                    break
            if idx is not None:
                break
    return GrowthResult(spec, m, states, order, history)


# ---------------------------------------------------------------------------
# consistency check


def _tube_mask(nodes: np.ndarray, idx, spec: RenormSpec) -> np.ndarray:
    (x0, y0), (x1, y1) = square_bounds(idx, spec.N)
    w = spec.slab_half_width
    ok = (nodes[:, -2] >= x0) & (nodes[:, -2] <= x1) & (nodes[:, -1] >= y0) & (nodes[:, -1] <= y1)
    if spec.d > 2:
        ok &= np.all(np.abs(nodes[:, :-2]) <= w, axis=1)
    return ok


def witness_bonds(result: GrowthResult) -> np.ndarray:
    parts = [result.states[i].witness_bonds for i in result.good_squares()]
    parts = [p for p in parts if p is not None and len(p)]
    if not parts:
        return np.zeros((0, result.spec.d + 1), np.int64)
    return np.unique(np.concatenate(parts), axis=0)


def verify_renormalized_path(source, result: GrowthResult) -> bool:
    """Do the witness bonds form open paths from the origin seed to every good tube?

    All witness bonds must be open in ``source``, and inside the graph they
    span, the origin seed plaque must reach the tube of every good square.
    """
    good = result.good_squares()
    if not good:
        return True
    src = _as_source(source)
    spec = result.spec
    wb = witness_bonds(result)
    d = spec.d
    lower, axis = wb[:, :d], wb[:, d]
    if len(wb) == 0 or not src.bits_at(lower, axis).all():
        return False
    upper = lower + np.eye(d, dtype=np.int64)[axis]
    nodes, inv = np.unique(np.concatenate([lower, upper]), axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    k = len(wb)
    adj = coo_matrix((np.ones(k), (inv[:k], inv[k:])), shape=(len(nodes), len(nodes)))
    _, lab = connected_components(adj, directed=False)
    origin = plaque_coords(np.zeros(d, np.int64), d - 1, spec.K)
    pos = {tuple(r): i for i, r in enumerate(nodes.tolist())}
    o_nodes = [pos.get(tuple(r)) for r in origin.tolist()]
    if any(i is None for i in o_nodes):
        return False
    root = lab[o_nodes[0]]
    if np.any(lab[o_nodes] != root):
        return False
    for i in good:
        if not np.any(_tube_mask(nodes, i, spec) & (lab == root)):
            return False
    return True


# ---------------------------------------------------------------------------
# stochastic domination estimate


@dataclass
class AlphaReport:
    estimate: Estimate
    strata: dict
    worst_stratum: int | None
    n_events: int
    flags: list
    bound: float | None = None

    def as_dict(self) -> dict:
        return {"estimate": self.estimate.as_dict(), "worst_stratum": self.worst_stratum,
                "n_events": self.n_events, "flags": list(self.flags), "bound": self.bound,
                "strata": {str(k): v.as_dict() for k, v in sorted(self.strata.items())}}


def _events_of(histories) -> list:
    out = []
    for h in histories:
        if isinstance(h, GrowthResult):
            out.extend(h.history)
        elif isinstance(h, dict):
            out.append(h)
        else:
            out.extend(h)
    return out


def estimate_alpha(histories, eta_hat: float | None = None, min_events: int = 1000,
                   min_stratum: int = 64) -> AlphaReport:
    """Worst conditional success rate over strata of previously good neighbours.

    ``histories`` is a sequence of growth results or of event dicts with keys
    ``n_good_neighbors`` and ``z``; their order is kept, so merging replicas
    in a fixed order gives identical output.
    """
    ev = [e for e in _events_of(histories) if e.get("z") is not None]
    flags = []
    if len(ev) < min_events:
        flags.append("insufficient_events")
    by = {}
    for e in ev:
        by.setdefault(int(e["n_good_neighbors"]), []).append(float(e["z"]))
    strata = {}
    for k, xs in sorted(by.items()):
        x = np.asarray(xs)
        if len(x) >= stats.MIN_BATCHES:
            strata[k] = stats.batch_means(x, stats.MIN_BATCHES, "stratum_frequency")
        else:
            strata[k] = stats.Estimate(float(x.mean()), math.nan, len(x), 0, "stratum_frequency",
                                       "ci_withheld")
        if len(x) < min_stratum:
            flags.append(f"sparse_stratum_{k}")
    usable = {k: e for k, e in strata.items() if len(by[k]) >= min_stratum}
    if not usable:
        usable = strata
    if not usable:
        return AlphaReport(stats.failure("no_events", "stratified_worst_case"), {}, None, 0,
                           flags + ["no_events"])
    worst = min(usable, key=lambda k: (usable[k].value, k))
    est = stats.with_method(usable[worst], "stratified_worst_case")
    bound = None if eta_hat is None else (1.0 - eta_hat) ** BRICK_BUDGET
    return AlphaReport(est, strata, worst, len(ev), flags, bound)


def run_growth_replicas(spec: RenormSpec, params: RCParams, runs: int, m: int = 1,
                        rng=0, cfg: SamplerConfig | None = None) -> list:
    """Independent configurations, each grown once; results in replica order."""
    base = rng if isinstance(rng, RNGStream) else RNGStream(int(rng), 0)
    out = []
    for r in range(runs):
        src = make_source(spec, m, params, base.child(r), cfg)
        res = grow_cluster(src, spec, m, record_reads=False)
        out.append((src, res))
    return out


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    spec: RenormSpec | None
    estimate: Estimate
    best: dict
    table: list
    status: str

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def as_dict(self) -> dict:
        return {"status": self.status, "best": self.best,
                "spec": None if self.spec is None else self.spec.as_dict(),
                "estimate": self.estimate.as_dict(), "table": self.table}


def calibration_candidates(L: int, H: int, K_grid=(2, 3, 4)) -> list[tuple]:
    """(K, ell, h) triples: h scans down from H within H/100, ell scans up from K."""
    out = []
    for K in K_grid:
        for h in range(H, -1, -1):
            if H - h > H / 100:
                break
            if h < 2 * K:
                continue
            for ell in range(K, L + 1):
                out.append((K, ell, h))
    return out


def calibrate_block(params: RCParams, bc: BoundaryCondition, L: int, H: int, eta: float,
                    budget: int, d: int = 3, K_grid=(2, 3, 4), rng=0,
                    burn_in: int = 100) -> CalibrationResult:
    """Best (K, ell, h) by estimated occupied-block probability on B(L, H).

    Every candidate is scored on the same ``budget`` samples.  Success needs
    the CI lower bound of the best candidate to reach ``1 - eta``.
    """
    cands = calibration_candidates(L, H, K_grid)
    if not cands:
        raise ValueError("no admissible (K, ell, h) for these L, H")
    region = Region.product([-L] * (d - 1) + [0], [L] * (d - 1) + [H], Kind.BLOCK,
                            include_exterior=False, meta={"ell": L, "h": H})
    evs = [BlockEvents(region, K, ell, h) for K, ell, h in cands]
    if params.p in (0.0, 1.0) and not params.overrides:
        bits = np.full(region.n_bonds, int(params.p), np.uint8)
        vals = np.array([[float(ev.occupied(bits)) for ev in evs]] * max(budget, stats.MIN_BATCHES))
    else:
        chain = ChainState(region, params, bc if bc is not None else BoundaryCondition.free(), rng)
        for _ in range(burn_in if chain.method != "product" else 0):
            chain.step()
        vals = np.empty((budget, len(evs)))
        for t in range(budget):
            chain.step()
            bits = chain.state
            for j, ev in enumerate(evs):
                vals[t, j] = ev.occupied(bits)
    table = []
    ests = []
    for j, (K, ell, h) in enumerate(cands):
        e = stats.batch_means(vals[:, j], stats.MIN_BATCHES, "occupied_block")
        ests.append(e)
        table.append({"K": K, "ell": ell, "h": h, **e.as_dict()})
    j = max(range(len(cands)), key=lambda k: (ests[k].value, -k))
    K, ell, h = cands[j]
    best = {"K": K, "ell": ell, "h": h, "value": ests[j].value, "lo": ests[j].lo}
    e = ests[j]
    lower = e.lo if math.isfinite(e.half_width) else -math.inf
    if lower >= 1.0 - eta:
        spec = RenormSpec(K, ell, h, L, H, 1.0 - max(e.value, 0.0) if e.value < 1 else 0.0, d)
        return CalibrationResult(spec, e, best, table, "ok")
    return CalibrationResult(None, e, best, table, "no_candidate_reaches_target")


# ---------------------------------------------------------------------------
# export


_COLORS = {N_: "#1f77b4", E_: "#2ca02c", S_: "#d62728", W_: "#9467bd"}


def witness_svg(result: GrowthResult, scale: float | None = None) -> str:
    """(x, y)-plane picture: squares (good green, bad red), bricks by orientation."""
    N, m = result.spec.N, result.m
    lo = -2 * m * N - N + 1
    hi = 2 * m * N + N
    size = hi - lo + 1
    scale = scale or max(0.05, 800.0 / size)
    W = size * scale

    def X(x):
        return (x - lo) * scale

    def Y(y):
        return (hi - y) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.1f}" height="{W:.1f}" '
           f'viewBox="0 0 {W:.1f} {W:.1f}">']
    for i in result.order:
        st = result.states[i]
        (x0, y0), (x1, y1) = square_bounds(i, N)
        fill = {None: "none", 1: "#e6f5e6", 0: "#fbe3e3"}[st.z]
        out.append(f'<rect x="{X(x0):.2f}" y="{Y(y1):.2f}" width="{(x1 - x0 + 1) * scale:.2f}" '
                   f'height="{(y1 - y0 + 1) * scale:.2f}" fill="{fill}" stroke="#999" '
                   f'stroke-width="0.5"><title>{list(i)} z={st.z}</title></rect>')
    for i in result.order:
        for b in result.states[i].witness:
            (x0, y0), (x1, y1) = b.footprint()
            out.append(f'<rect x="{X(x0):.2f}" y="{Y(y1):.2f}" width="{(x1 - x0) * scale:.2f}" '
                       f'height="{(y1 - y0) * scale:.2f}" fill="none" '
                       f'stroke="{_COLORS[b.orientation]}" stroke-width="0.8"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
