"""Integer geometry on Z^d: regions, their bond sets, block faces and rotations.

Axes are 0-based; the last axis (``d - 1``) is the vertical direction of
blocks, rectangles and seeds.  The plane spanned by the last two axes is the
(x, y)-plane of the coarse-graining construction.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np


class Kind(str, enum.Enum):
    BOX = "box"
    SLAB = "slab"
    BLOCK = "block"
    RECTANGLE = "rectangle"
    SEED_PLAQUE = "seed_plaque"
    CUSTOM = "custom"


def _as_coords(coords, dim: int) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, dim)
    if arr.shape[-1] != dim:
        raise ValueError(f"coordinates must have {dim} components, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Region:
    """Finite vertex set of Z^d together with its bond list.

    ``bonds`` holds node pairs ``(lower, upper)`` with ``upper = lower + e_axis``.
    Nodes ``0 .. n_vertices-1`` are the region's vertices; nodes from
    ``n_vertices`` on are exterior endpoints of boundary bonds (present only
    when ``include_exterior`` is true, the convention for random-cluster
    domains).  Bonds are ordered by (lower endpoint, axis).
    """

    dim: int
    kind: Kind
    vertices: np.ndarray
    include_exterior: bool = True
    is_product: bool = False
    meta: Mapping = field(default_factory=dict)

    # derived, filled in __post_init__
    ext_vertices: np.ndarray = field(init=False, repr=False)
    bonds: np.ndarray = field(init=False, repr=False)
    bond_axis: np.ndarray = field(init=False, repr=False)
    lo: np.ndarray = field(init=False, repr=False)
    hi: np.ndarray = field(init=False, repr=False)
    _glo: np.ndarray = field(init=False, repr=False)
    _gshape: tuple = field(init=False, repr=False)
    _node_at: np.ndarray = field(init=False, repr=False)
    _bond_at: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = self.dim
        if d < 1:
            raise ValueError("dimension must be positive")
        verts = _as_coords(self.vertices, d)
        if len(verts) == 0:
            raise ValueError("empty region")
        glo = verts.min(axis=0) - 1
        ghi = verts.max(axis=0) + 1
        gshape = tuple(int(s) for s in ghi - glo + 1)
        flat = np.ravel_multi_index(tuple((verts - glo).T), gshape)
        order = np.argsort(flat, kind="stable")
        flat = flat[order]
        if np.any(np.diff(flat) == 0):
            raise ValueError("duplicate vertices")
        verts = verts[order]
        size = int(np.prod(gshape))
        inside = np.zeros(size, dtype=bool)
        inside[flat] = True
        strides = np.array([int(np.prod(gshape[a + 1:])) for a in range(d)], dtype=np.int64)

        lower_cells = []
        axes = []
        for a in range(d):
            cells = np.arange(size, dtype=np.int64)
            coord_a = (cells // strides[a]) % gshape[a]
            cells = cells[coord_a < gshape[a] - 1]
            here = inside[cells]
            there = inside[cells + strides[a]]
            keep = (here | there) if self.include_exterior else (here & there)
            lower_cells.append(cells[keep])
            axes.append(np.full(int(keep.sum()), a, dtype=np.int64))
        lower = np.concatenate(lower_cells)
        axis = np.concatenate(axes)
        key = lower * d + axis
        o = np.argsort(key, kind="stable")
        lower, axis = lower[o], axis[o]
        upper = lower + strides[axis]

        node_at = np.full(size, -1, dtype=np.int64)
        node_at[flat] = np.arange(len(flat), dtype=np.int64)
        if self.include_exterior:
            ends = np.concatenate([lower, upper])
            ext_flat = np.unique(ends[~inside[ends]])
        else:
            ext_flat = np.zeros(0, dtype=np.int64)
        node_at[ext_flat] = len(flat) + np.arange(len(ext_flat), dtype=np.int64)
        ext = np.stack(np.unravel_index(ext_flat, gshape), axis=1).astype(np.int64) + glo

        bonds = np.stack([node_at[lower], node_at[upper]], axis=1)
        bond_at = np.full(size * d, -1, dtype=np.int64)
        bond_at[lower * d + axis] = np.arange(len(lower), dtype=np.int64)

        s = object.__setattr__
        s(self, "vertices", verts)
        s(self, "ext_vertices", ext.reshape(-1, d))
        s(self, "bonds", bonds.reshape(-1, 2))
        s(self, "bond_axis", axis)
        s(self, "lo", verts.min(axis=0))
        s(self, "hi", verts.max(axis=0))
        s(self, "_glo", glo)
        s(self, "_gshape", gshape)
        s(self, "_node_at", node_at)
        s(self, "_bond_at", bond_at)
        s(self, "meta", MappingProxyType(dict(self.meta)))

    # -- constructors -----------------------------------------------------
    @classmethod
    def product(cls, lo: Sequence[int], hi: Sequence[int], kind: Kind = Kind.BOX,
                include_exterior: bool = True, meta: Mapping | None = None) -> "Region":
        lo = [int(v) for v in lo]
        hi = [int(v) for v in hi]
        if len(lo) != len(hi):
            raise ValueError("lo/hi length mismatch")
        if any(h < l for l, h in zip(lo, hi)):
            raise ValueError(f"empty bounds {lo}..{hi}")
        grids = np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij")
        verts = np.stack([g.ravel() for g in grids], axis=1)
        return cls(len(lo), kind, verts, include_exterior, True, meta or {})

    @classmethod
    def from_vertices(cls, coords, dim: int, include_exterior: bool = True,
                      kind: Kind = Kind.CUSTOM) -> "Region":
        return cls(dim, kind, _as_coords(coords, dim), include_exterior, False, {})

    # -- sizes --------------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_ext(self) -> int:
        return len(self.ext_vertices)

    @property
    def n_nodes(self) -> int:
        return self.n_vertices + self.n_ext

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    # -- lookups ------------------------------------------------------------
    def _flat(self, coords) -> tuple[np.ndarray, np.ndarray]:
        c = _as_coords(coords, self.dim) - self._glo
        ok = np.all((c >= 0) & (c < np.array(self._gshape)), axis=1)
        flat = np.zeros(len(c), dtype=np.int64)
        if ok.any():
            flat[ok] = np.ravel_multi_index(tuple(c[ok].T), self._gshape)
        return flat, ok

    def node_index(self, coords) -> np.ndarray:
        """Node ids (vertices and exterior endpoints) of ``coords``; -1 if absent."""
        flat, ok = self._flat(coords)
        out = np.full(len(flat), -1, dtype=np.int64)
        out[ok] = self._node_at[flat[ok]]
        return out

    def vertex_index(self, coords) -> np.ndarray:
        idx = self.node_index(coords)
        idx[idx >= self.n_vertices] = -1
        return idx

    def contains(self, coords) -> np.ndarray:
        return self.vertex_index(coords) >= 0

    def node_coords(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        allc = np.concatenate([self.vertices, self.ext_vertices])
        return allc[nodes]

    def bond_index(self, lower, axis) -> np.ndarray:
        """Id of the bond ``(lower, lower + e_axis)``; -1 if not in the bond list."""
        lower = _as_coords(lower, self.dim)
        axis = np.broadcast_to(np.asarray(axis, dtype=np.int64), (len(lower),))
        # the lower endpoint may sit one step outside the grid only if absent
        flat, ok = self._flat(lower)
        out = np.full(len(flat), -1, dtype=np.int64)
        out[ok] = self._bond_at[flat[ok] * self.dim + axis[ok]]
        return out

    def bonds_within(self, coords) -> np.ndarray:
        """Ids of bonds with both endpoints in the vertex set ``coords``."""
        mask = self._node_mask(coords)
        return np.flatnonzero(mask[self.bonds[:, 0]] & mask[self.bonds[:, 1]])

    def bonds_intersecting(self, coords) -> np.ndarray:
        """Ids of bonds with at least one endpoint in ``coords``."""
        mask = self._node_mask(coords)
        return np.flatnonzero(mask[self.bonds[:, 0]] | mask[self.bonds[:, 1]])

    def _node_mask(self, coords) -> np.ndarray:
        nodes = self.node_index(coords)
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[nodes[nodes >= 0]] = True
        return mask

    def interior(self) -> "Region":
        """Vertices whose 2d neighbours all lie in the region."""
        if self.is_product:
            lo, hi = self.lo + 1, self.hi - 1
            if np.any(hi < lo):
                raise ValueError("region has empty interior")
            return Region.product(lo, hi, Kind.CUSTOM, self.include_exterior)
        keep = np.ones(self.n_vertices, dtype=bool)
        for a in range(self.dim):
            e = np.zeros(self.dim, dtype=np.int64)
            e[a] = 1
            keep &= self.contains(self.vertices + e) & self.contains(self.vertices - e)
        if not keep.any():
            raise ValueError("region has empty interior")
        return Region.from_vertices(self.vertices[keep], self.dim, self.include_exterior)

    def translate(self, shift) -> "Region":
        shift = np.asarray(shift, dtype=np.int64)
        if self.is_product:
            return Region.product(self.lo + shift, self.hi + shift, self.kind,
                                  self.include_exterior, dict(self.meta))
        return Region(self.dim, self.kind, self.vertices + shift, self.include_exterior,
                      False, dict(self.meta))

    def __repr__(self) -> str:
        return (f"Region({self.kind.value}, d={self.dim}, |V|={self.n_vertices}, "
                f"|E|={self.n_bonds}, lo={self.lo.tolist()}, hi={self.hi.tolist()})")


# ---------------------------------------------------------------------------
# named regions

def build_box(N: int, d: int) -> Region:
    if N < 0 or d < 1:
        raise ValueError("need N >= 0 and d >= 1")
    return Region.product([-N] * d, [N] * d, Kind.BOX)


def build_block(ell: int, h: int, d: int) -> Region:
    """B(ell, h) = {-ell..ell}^(d-1) x {0..h}."""
    if ell < 1 or h < 1 or d < 2:
        raise ValueError("build_block needs ell >= 1, h >= 1, d >= 2")
    return Region.product([-ell] * (d - 1) + [0], [ell] * (d - 1) + [h], Kind.BLOCK,
                          meta={"ell": ell, "h": h})


def block_interior(ell: int, h: int, d: int) -> Region:
    """B*(ell, h) = {-ell+1..ell-1}^(d-1) x {1..h-1}."""
    if ell < 1 or h < 2:
        raise ValueError("interior of B(ell, h) is empty")
    return Region.product([-ell + 1] * (d - 1) + [1], [ell - 1] * (d - 1) + [h - 1], Kind.CUSTOM)


def build_slab(L: int, N: int, d: int) -> Region:
    """S_{L,N} = {-L..L}^(d-2) x {-N..N}^2."""
    if d < 3:
        raise ValueError("slabs need d >= 3")
    if L < 0 or N < 1:
        raise ValueError("need L >= 0 and N >= 1")
    return Region.product([-L] * (d - 2) + [-N, -N], [L] * (d - 2) + [N, N], Kind.SLAB,
                          meta={"L": L, "N": N})


def delta_times_n(N: int, delta) -> int:
    dn = Fraction(delta).limit_denominator(1 << 20) * N
    if dn.denominator != 1:
        raise ValueError(f"delta*N = {float(dn)} is not an integer")
    return int(dn)


def build_rectangle(N: int, delta, L: int, d: int) -> Region:
    """R^L(N, delta) = {-N..N}^(d-1) x {-delta N - L .. delta N + L}.

    ``meta`` carries the vertical extents: ``dn`` (= delta N), ``L`` and the
    face heights of both R(N, delta) and R^L(N, delta).
    """
    if L < 0 or N < 1 or d < 2:
        raise ValueError("need N >= 1, L >= 0, d >= 2")
    dn = delta_times_n(N, delta)
    top = dn + L
    meta = {"N": N, "dn": dn, "L": L, "inner_bottom": -dn, "inner_top": dn,
            "outer_bottom": -top, "outer_top": top}
    return Region.product([-N] * (d - 1) + [-top], [N] * (d - 1) + [top], Kind.RECTANGLE,
                          meta=meta)


def rectangle_face(region: Region, which: str, inner: bool = True) -> np.ndarray:
    """Coordinates of the top or bottom face of R(N, delta) (inner) or R^L."""
    if region.kind is not Kind.RECTANGLE:
        raise ValueError("not a rectangle")
    key = ("inner_" if inner else "outer_") + which
    z = region.meta[key]
    v = region.vertices
    return v[v[:, -1] == z]


def rectangle_inner(region: Region) -> np.ndarray:
    v = region.vertices
    dn = region.meta["dn"]
    return v[np.abs(v[:, -1]) <= dn]


def seed_plaque(center, axis: int, K: int, d: int | None = None) -> Region:
    """b^axis_K(center): the (d-1)-cube of half-width K orthogonal to e_axis."""
    center = np.asarray(center, dtype=np.int64).ravel()
    d = d or len(center)
    if len(center) == 1 and d > 1:
        center = np.full(d, center[0], dtype=np.int64)
    if K < 1:
        raise ValueError("K must be >= 1")
    axis = axis % d
    lo = center - K
    hi = center + K
    lo[axis] = hi[axis] = center[axis]
    return Region.product(lo, hi, Kind.SEED_PLAQUE, include_exterior=False,
                          meta={"axis": axis, "K": K, "center": tuple(center.tolist())})


def plaque_coords(center, axis: int, K: int) -> np.ndarray:
    center = np.asarray(center, dtype=np.int64)
    d = len(center)
    ranges = [range(c - K, c + K + 1) if a != axis else range(c, c + 1)
              for a, c in enumerate(center)]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(-1, d)


# ---------------------------------------------------------------------------
# subfacets of blocks

@dataclass(frozen=True)
class Subfacet:
    """Axis-aligned piece of a face of B(ell, h), inclusive bounds.

    ``index`` follows the 1-based numbering T_1..T_{2^(d-1)} (top) and
    S_1..S_{2(d-1)2^(d-2)} (sides).  Bit patterns are read over the
    horizontal axes in increasing order, last axis least significant; a set
    bit selects the nonpositive half.  Sides are grouped by (axis, sign),
    ``+ell`` before ``-ell``.  Neighbouring subfacets share the coordinate
    hyperplanes through 0 (they cover the face, they do not partition it).
    """

    face: str
    index: int
    axis: int
    sign: int
    lo: tuple
    hi: tuple

    def contains(self, coords) -> np.ndarray:
        c = np.atleast_2d(np.asarray(coords))
        return np.all((c >= np.array(self.lo)) & (c <= np.array(self.hi)), axis=1)

    def sites(self) -> np.ndarray:
        grids = np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(self.lo, self.hi)],
                            indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


def _half(bit: int, ell: int) -> tuple[int, int]:
    return (-ell, 0) if bit else (0, ell)


def top_subfacets(ell: int, h: int, d: int) -> list[Subfacet]:
    out = []
    nh = d - 1
    for i in range(2 ** nh):
        lo, hi = [], []
        for a in range(nh):
            bit = (i >> (nh - 1 - a)) & 1
            l, u = _half(bit, ell)
            lo.append(l)
            hi.append(u)
        out.append(Subfacet("top", i + 1, d - 1, 1, tuple(lo + [h]), tuple(hi + [h])))
    return out


def side_subfacets(ell: int, h: int, d: int) -> list[Subfacet]:
    out = []
    nh = d - 1
    idx = 1
    for a in range(nh):
        others = [b for b in range(nh) if b != a]
        for sign in (1, -1):
            for pat in range(2 ** len(others)):
                lo = [0] * d
                hi = [0] * d
                lo[a] = hi[a] = sign * ell
                for k, b in enumerate(others):
                    bit = (pat >> (len(others) - 1 - k)) & 1
                    lo[b], hi[b] = _half(bit, ell)
                lo[d - 1], hi[d - 1] = 0, h
                out.append(Subfacet("side", idx, a, sign, tuple(lo), tuple(hi)))
                idx += 1
    return out


def top_face(ell: int, h: int, d: int) -> np.ndarray:
    return Region.product([-ell] * (d - 1) + [h], [ell] * (d - 1) + [h]).vertices


def side_faces(ell: int, h: int, d: int) -> np.ndarray:
    v = build_block(ell, h, d).vertices
    return v[np.any(np.abs(v[:, :-1]) == ell, axis=1)]


def steering_choice(y, ell: int, h: int) -> int:
    """Index j of the top subfacet T_j(ell, h) containing (-y_1..-y_{d-1}, h).

    Only the horizontal components of ``y`` are read.  A zero coordinate
    belongs to both halves; the smaller index (nonnegative half) wins.
    """
    y = np.asarray(y, dtype=np.int64).ravel()
    nh = len(y) - 1 if len(y) > 1 else 1
    horiz = y[:nh]
    if np.any(np.abs(horiz) > ell):
        raise ValueError(f"attachment site {y.tolist()} outside the top face of extent {ell}")
    j = 0
    for a in range(nh):
        bit = 1 if horiz[a] > 0 else 0
        j |= bit << (nh - 1 - a)
    return j + 1


# ---------------------------------------------------------------------------
# orientations in the (x, y)-plane (the last two axes)

class Orientation(enum.Enum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def vector(self) -> tuple[int, int]:
        return _DIRS[self.value]

    def rotate(self, xy: np.ndarray) -> np.ndarray:
        """Image of canonical (x, y) pairs under this orientation's rotation."""
        x, y = xy[..., 0], xy[..., 1]
        k = self.value
        if k == 0:
            out = (x, y)
        elif k == 1:
            out = (y, -x)
        elif k == 2:
            out = (-x, -y)
        else:
            out = (-y, x)
        return np.stack(out, axis=-1)

    def unrotate(self, xy: np.ndarray) -> np.ndarray:
        return Orientation((4 - self.value) % 4).rotate(xy)

    def rotated90(self) -> "Orientation":
        return Orientation((self.value + 1) % 4)

    @classmethod
    def from_vector(cls, v) -> "Orientation":
        return cls(_DIRS.index(tuple(int(c) for c in v)))


_DIRS = [(0, 1), (1, 0), (0, -1), (-1, 0)]


def rotate_coords(coords: np.ndarray, orientation: Orientation) -> np.ndarray:
    c = np.array(coords, dtype=np.int64, copy=True)
    c[..., -2:] = orientation.rotate(c[..., -2:])
    return c


@dataclass(frozen=True, eq=False)
class PlacedBlock:
    """``anchor + R(B(ell, h))`` with R the rotation of ``orientation``."""

    orientation: Orientation
    anchor: tuple
    ell: int
    h: int
    dim: int

    def to_world(self, canonical) -> np.ndarray:
        c = _as_coords(canonical, self.dim)
        return rotate_coords(c, self.orientation) + np.asarray(self.anchor, dtype=np.int64)

    def to_canonical(self, world) -> np.ndarray:
        c = _as_coords(world, self.dim) - np.asarray(self.anchor, dtype=np.int64)
        c[..., -2:] = self.orientation.unrotate(c[..., -2:])
        return c

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.dim
        corners = np.array(list(itertools.product(*[(-self.ell, self.ell)] * (d - 1), (0, self.h))))
        w = self.to_world(corners)
        return w.min(axis=0), w.max(axis=0)

    def region(self) -> Region:
        lo, hi = self.bounds
        return Region.product(lo, hi, Kind.BLOCK,
                              meta={"ell": self.ell, "h": self.h,
                                    "orientation": self.orientation.name})

    def interior_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.dim
        corners = np.array(list(itertools.product(*[(-self.ell + 1, self.ell - 1)] * (d - 1),
                                                  (1, self.h - 1))))
        w = self.to_world(corners)
        return w.min(axis=0), w.max(axis=0)

    def lateral_canonical_sign(self, world_dir: Orientation) -> int:
        """+1 if ``world_dir`` is the image of canonical East, -1 for West."""
        east = Orientation.from_vector(self.orientation.rotate(np.array([1, 0])))
        west = Orientation.from_vector(self.orientation.rotate(np.array([-1, 0])))
        if world_dir is east:
            return 1
        if world_dir is west:
            return -1
        raise ValueError(f"{world_dir.name} is not lateral to a {self.orientation.name} block")

    def top_half(self, world_dir: Orientation) -> Subfacet:
        """T_{orientation, world_dir}: half of the top face toward ``world_dir`` (canonical frame)."""
        s = self.lateral_canonical_sign(world_dir)
        d, ell = self.dim, self.ell
        lo = [-ell] * (d - 2) + ([0, self.h] if s > 0 else [-ell, self.h])
        hi = [ell] * (d - 2) + ([ell, self.h] if s > 0 else [0, self.h])
        return Subfacet("top", 0, d - 1, 1, tuple(lo), tuple(hi))

    def side(self, world_dir: Orientation) -> Subfacet:
        """S_{orientation, world_dir}: the lateral side facing ``world_dir`` (canonical frame)."""
        s = self.lateral_canonical_sign(world_dir)
        d, ell = self.dim, self.ell
        lo = [-ell] * (d - 2) + [s * ell, 0]
        hi = [ell] * (d - 2) + [s * ell, self.h]
        return Subfacet("side", 0, d - 2, s, tuple(lo), tuple(hi))


def place_block(orientation: Orientation, anchor, ell: int, h: int, d: int | None = None) -> PlacedBlock:
    anchor = tuple(int(a) for a in np.asarray(anchor).ravel())
    d = d or len(anchor)
    if len(anchor) == 1 and d > 1:
        anchor = (anchor[0],) * d
    if ell < 1 or h < 1 or d < 2:
        raise ValueError("need ell >= 1, h >= 1, d >= 2")
    return PlacedBlock(Orientation(orientation), anchor, ell, h, d)
