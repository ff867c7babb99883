"""Random-cluster configurations, boundary conditions and exact cluster counting.

Counting rule
-------------
Exterior endpoints of boundary bonds are graph nodes.  Exterior vertices in
the same wired class are merged into one *ghost* node; exterior vertices left
free stay separate.  A cluster is counted when it contains a region vertex
or a ghost, so an isolated free exterior vertex never counts.  Each ghost
cluster counts once, which shifts ``c`` by a constant when no two classes
can merge and leaves the measure unchanged.  Under this rule the wired
count of a configuration exceeds the free count by at most the number of
wired classes that stay isolated.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .lattice import Kind, Region

# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class RCParams:
    """Cluster weight ``q``, base intensity ``p`` and per-bond overrides."""

    q: float
    p: float
    overrides: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.q >= 1.0) or not math.isfinite(self.q):
            raise ValueError(f"q must be a finite real >= 1, got {self.q}")
        if not (0.0 <= self.p <= 1.0):
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        for b, v in self.overrides.items():
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"override for bond {b} outside [0, 1]: {v}")
        object.__setattr__(self, "overrides", dict(sorted((int(k), float(v))
                                                          for k, v in self.overrides.items())))

    def intensities(self, n_bonds: int) -> np.ndarray:
        pb = np.full(n_bonds, float(self.p))
        for b, v in self.overrides.items():
            if not 0 <= b < n_bonds:
                raise ValueError(f"override bond {b} out of range")
            pb[b] = v
        return pb

    @property
    def integer_q(self) -> int | None:
        return int(self.q) if float(self.q).is_integer() else None

    def with_overrides(self, bonds: Iterable[int], value: float) -> "RCParams":
        ov = dict(self.overrides)
        for b in bonds:
            ov[int(b)] = float(value)
        return RCParams(self.q, self.p, ov)


# ---------------------------------------------------------------------------
# boundary conditions

_FACE_RE = re.compile(r"^(\d+)([+-])$")


def _face_tokens(part: str, d: int) -> list[tuple[int, int]]:
    """A face name as ``(axis, sign)`` pairs; ``top``/``bottom`` use the last axis."""
    if part == "top":
        return [(d - 1, 1)]
    if part == "bottom":
        return [(d - 1, -1)]
    if part == "sides":
        return [(a, s) for a in range(d - 1) for s in (1, -1)]
    if part == "all":
        return [(a, s) for a in range(d) for s in (1, -1)]
    m = _FACE_RE.match(part)
    if not m:
        raise ValueError(f"unknown face token {part!r}")
    a = int(m.group(1))
    if a >= d:
        raise ValueError(f"face axis {a} out of range for d={d}")
    return [(a, 1 if m.group(2) == "+" else -1)]


def _split_faces(cls: str) -> list[str]:
    return [t for t in cls.split(",") if t]


@dataclass(frozen=True)
class BoundaryCondition:
    """External wiring of the exterior endpoints of a region's boundary bonds.

    ``descriptor`` is one of ``free``, ``wired`` or ``mixed:<classes>``.
    Classes are separated by ``|``; each class lists faces separated by
    ``,`` (``top``, ``bottom``, ``sides``, ``all`` or ``<axis><sign>`` such
    as ``2-``) or explicit exterior coordinates after ``@`` written as
    ``x;y;z`` tuples joined by ``/``.  Exterior vertices not in any class
    are free.  Example: ``mixed:sides`` is wired on the lateral sides and
    free on top and bottom.
    """

    descriptor: str = "free"

    def __post_init__(self):
        d = self.descriptor.strip().lower()
        if d not in ("free", "wired") and not d.startswith("mixed:"):
            raise ValueError(f"unknown boundary condition {self.descriptor!r}")
        object.__setattr__(self, "descriptor", d)

    @classmethod
    def free(cls) -> "BoundaryCondition":
        return cls("free")

    @classmethod
    def wired(cls) -> "BoundaryCondition":
        return cls("wired")

    @classmethod
    def mixed(cls, *classes: str) -> "BoundaryCondition":
        return cls("mixed:" + "|".join(classes))

    @classmethod
    def from_partition(cls, classes: Sequence[Sequence[Sequence[int]]]) -> "BoundaryCondition":
        toks = []
        for c in classes:
            toks.append("@" + "/".join(";".join(str(int(v)) for v in pt) for pt in c))
        return cls("mixed:" + "|".join(toks))

    @property
    def kind(self) -> str:
        return self.descriptor.split(":")[0]

    def classes(self, region: Region) -> np.ndarray:
        """Wired-class id per exterior vertex of ``region`` (-1 means free)."""
        ne = region.n_ext
        if self.kind == "free":
            return np.full(ne, -1, dtype=np.int64)
        if self.kind == "wired":
            return np.zeros(ne, dtype=np.int64)
        out = np.full(ne, -1, dtype=np.int64)
        d = region.dim
        faces = _exterior_faces(region)
        spec = self.descriptor[len("mixed:"):]
        for cid, cls in enumerate(t for t in spec.split("|")):
            if cls.startswith("@"):
                pts = np.array([[int(v) for v in s.split(";")] for s in cls[1:].split("/") if s],
                               dtype=np.int64).reshape(-1, d)
                idx = region.node_index(pts) - region.n_vertices
                if np.any(idx < 0):
                    raise ValueError("partition lists a point that is not an exterior vertex")
                sel = np.zeros(ne, dtype=bool)
                sel[idx] = True
            else:
                sel = np.zeros(ne, dtype=bool)
                for tok in _split_faces(cls):
                    for a, s in _face_tokens(tok, d):
                        sel |= faces[:, a] == s
            if np.any(out[sel] >= 0):
                raise ValueError("wired classes overlap")
            out[sel] = cid
        return out

    def __str__(self) -> str:
        return self.descriptor


def _exterior_faces(region: Region) -> np.ndarray:
    """Per exterior vertex and axis: +1/-1 if it is reached by a bond along that axis."""
    n = region.n_vertices
    out = np.zeros((region.n_ext, region.dim), dtype=np.int64)
    bonds = region.bonds
    ax = region.bond_axis
    lo_ext = bonds[:, 0] >= n
    hi_ext = bonds[:, 1] >= n
    out[bonds[lo_ext, 0] - n, ax[lo_ext]] = -1
    out[bonds[hi_ext, 1] - n, ax[hi_ext]] = 1
    return out


# ---------------------------------------------------------------------------
# compiled graph


@dataclass(eq=False)
class FKGraph:
    """Region plus boundary condition flattened to the kernel graph layout."""

    region: Region
    bc: BoundaryCondition
    n: int
    node_of: np.ndarray  # region node -> graph node
    anchor: np.ndarray
    is_ghost: np.ndarray
    bu: np.ndarray
    bv: np.ndarray
    adj_ptr: np.ndarray
    adj_nbr: np.ndarray
    adj_bond: np.ndarray
    free_bonds: np.ndarray  # bonds ending at a free exterior node
    free_node: np.ndarray

    @classmethod
    def build(cls, region: Region, bc: BoundaryCondition) -> "FKGraph":
        nv, ne = region.n_vertices, region.n_ext
        cls_of = bc.classes(region)
        n_classes = int(cls_of.max()) + 1 if ne and cls_of.max() >= 0 else 0
        free_ext = np.flatnonzero(cls_of < 0)
        node_of = np.empty(nv + ne, dtype=np.int64)
        node_of[:nv] = np.arange(nv)
        node_of[nv + free_ext] = nv + np.arange(free_ext.size)
        wired = cls_of >= 0
        # ghosts are numbered by class id, skipping empty classes
        used = np.unique(cls_of[wired])
        ghost_id = np.full(max(n_classes, 1), -1, dtype=np.int64)
        ghost_id[used] = nv + free_ext.size + np.arange(used.size)
        node_of[nv + np.flatnonzero(wired)] = ghost_id[cls_of[wired]]
        n = nv + free_ext.size + used.size
        anchor = np.ones(n, dtype=np.int64)
        anchor[nv:nv + free_ext.size] = 0
        is_ghost = np.zeros(n, dtype=bool)
        is_ghost[nv + free_ext.size:] = True
        bu = node_of[region.bonds[:, 0]] if region.n_bonds else np.zeros(0, np.int64)
        bv = node_of[region.bonds[:, 1]] if region.n_bonds else np.zeros(0, np.int64)
        m = bu.size
        ends = np.concatenate([bu, bv])
        nbrs = np.concatenate([bv, bu])
        bids = np.concatenate([np.arange(m), np.arange(m)])
        o = np.lexsort((bids, ends))
        adj_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(ends, minlength=n), out=adj_ptr[1:])
        fmask = (anchor[bu] == 0) | (anchor[bv] == 0)
        fb = np.flatnonzero(fmask).astype(np.int64)
        fnode = np.where(anchor[bu[fb]] == 0, bu[fb], bv[fb]).astype(np.int64)
        return cls(region, bc, int(n), node_of, anchor, is_ghost, bu.astype(np.int64),
                   bv.astype(np.int64), adj_ptr, nbrs[o].astype(np.int64),
                   bids[o].astype(np.int64), fb, fnode)

    @property
    def m(self) -> int:
        return self.bu.size

    @property
    def n_ghosts(self) -> int:
        return int(self.is_ghost.sum())

    def nodes(self, coords) -> np.ndarray:
        """Graph nodes of the given lattice points (region vertices or exterior)."""
        idx = self.region.node_index(coords)
        if np.any(idx < 0):
            raise ValueError("point outside the region and its exterior boundary")
        return self.node_of[idx]

    def labels(self, state: np.ndarray) -> np.ndarray:
        return kernels.labels(self.n, self.bu, self.bv, np.asarray(state, dtype=np.uint8))


_GRAPH_CACHE: dict = {}


def fk_graph(region: Region, bc: BoundaryCondition) -> FKGraph:
    key = (id(region), bc.descriptor)
    hit = _GRAPH_CACHE.get(key)
    if hit is not None and hit.region is region:
        return hit
    g = FKGraph.build(region, bc)
    if len(_GRAPH_CACHE) > 64:
        _GRAPH_CACHE.clear()
    _GRAPH_CACHE[key] = g
    return g


# ---------------------------------------------------------------------------
# configurations


@dataclass(eq=False)
class BondConfig:
    """Open/closed state of every bond of ``region`` (1 = open)."""

    region: Region
    bits: np.ndarray
    bc: BoundaryCondition = field(default_factory=BoundaryCondition.free)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.shape != (self.region.n_bonds,):
            raise ValueError(f"expected {self.region.n_bonds} bond bits, got {self.bits.shape}")
        if np.any(self.bits > 1):
            raise ValueError("bond bits must be 0 or 1")

    @classmethod
    def all_closed(cls, region, bc=None) -> "BondConfig":
        return cls(region, np.zeros(region.n_bonds, np.uint8), bc or BoundaryCondition.free())

    @classmethod
    def all_open(cls, region, bc=None) -> "BondConfig":
        return cls(region, np.ones(region.n_bonds, np.uint8), bc or BoundaryCondition.free())

    def copy(self) -> "BondConfig":
        return BondConfig(self.region, self.bits.copy(), self.bc)

    def with_bond(self, b: int, value: int) -> "BondConfig":
        c = self.copy()
        c.bits[b] = value
        return c

    def __eq__(self, other) -> bool:
        return (isinstance(other, BondConfig) and other.region.n_bonds == self.region.n_bonds
                and np.array_equal(other.bits, self.bits) and other.bc == self.bc)

    @property
    def n_open(self) -> int:
        return int(self.bits.sum())


class UnionFind:
    """Disjoint sets over ``0..n-1`` with path halving and union by size."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)
        self.components = n

    def find(self, x: int) -> int:
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return int(x)

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        self.components -= 1
        return True


class ClusterIndex:
    """Connectivity of ``omega`` joined with the boundary wiring.

    Built once per configuration; queries are O(1) after construction.
    """

    def __init__(self, config: BondConfig, bc: BoundaryCondition | None = None):
        self.config = config
        self.bc = bc or config.bc
        self.graph = fk_graph(config.region, self.bc)
        self.lab = self.graph.labels(config.bits)

    @property
    def count(self) -> int:
        return kernels.count_anchored(self.lab, self.graph.anchor)

    def find(self, node: int) -> int:
        return int(self.lab[node])

    def same(self, a: int, b: int) -> bool:
        return self.lab[a] == self.lab[b]

    def labels_of(self, coords) -> np.ndarray:
        return self.lab[self.graph.nodes(coords)]

    def connected(self, A, B) -> bool:
        la = np.unique(self.labels_of(A))
        lb = self.labels_of(B)
        return bool(np.isin(lb, la).any())


# ---------------------------------------------------------------------------
# queries


def cluster_count(config: BondConfig, bc: BoundaryCondition | None = None) -> int:
    """Number of open clusters of omega joined with the wiring that meet the region or a ghost."""
    return ClusterIndex(config, bc).count


def connected(config: BondConfig, bc: BoundaryCondition | None, A, B) -> bool:
    """Whether some point of ``A`` and some point of ``B`` share a cluster."""
    A = np.atleast_2d(np.asarray(A, dtype=np.int64))
    B = np.atleast_2d(np.asarray(B, dtype=np.int64))
    if A.size == 0 or B.size == 0:
        return False
    return ClusterIndex(config, bc).connected(A, B)


def connected_within(config: BondConfig, bonds, A, B) -> bool:
    """Connectivity through open bonds of the subset ``bonds`` only; wiring ignored."""
    region = config.region
    A = np.atleast_2d(np.asarray(A, dtype=np.int64))
    B = np.atleast_2d(np.asarray(B, dtype=np.int64))
    if A.size == 0 or B.size == 0:
        return False
    bonds = np.asarray(bonds, dtype=np.int64)
    sel = np.zeros(region.n_bonds, dtype=np.uint8)
    sel[bonds] = 1
    active = sel & config.bits
    lab = kernels.labels(region.n_nodes, region.bonds[:, 0].copy(), region.bonds[:, 1].copy(), active)
    ia = region.node_index(A)
    ib = region.node_index(B)
    if np.any(ia < 0) or np.any(ib < 0):
        raise ValueError("query point outside the region")
    return bool(np.isin(lab[ib], lab[ia]).any())


def log_weight(config: BondConfig, params: RCParams, bc: BoundaryCondition | None = None) -> float:
    """Unnormalised log-weight; ``-inf`` marks a configuration of zero weight."""
    pb = params.intensities(config.region.n_bonds)
    o = config.bits.astype(bool)
    if np.any(pb[o] == 0.0) or np.any(pb[~o] == 1.0):
        return -math.inf
    lw = float(np.log(pb[o]).sum() + np.log1p(-pb[~o]).sum())
    return lw + cluster_count(config, bc) * math.log(params.q)


# ---------------------------------------------------------------------------
# binary snapshots

MAGIC = b"RCLBSNAP"
VERSION = 1
_KINDS = list(Kind)


def write_snapshot(path_or_file, config: BondConfig, params: RCParams) -> bytes:
    """Serialise ``config`` and its parameters; returns the bytes written.

    Layout (little endian): magic, u16 version, u16 d, u8 kind, u8 product
    flag, u8 exterior flag, d x i64 lower bounds, d x i64 upper bounds,
    [u64 vertex count + vertices when not a product region], u32 length +
    UTF-8 boundary descriptor, f64 q, f64 p, u32 override count + (u64,
    f64) pairs, u64 bond count, packed bond bits (LSB first).
    """
    r = config.region
    buf = bytearray(MAGIC)
    buf += struct.pack("<HHBBB", VERSION, r.dim, _KINDS.index(r.kind), int(r.is_product),
                       int(r.include_exterior))
    buf += np.asarray(r.lo, dtype="<i8").tobytes() + np.asarray(r.hi, dtype="<i8").tobytes()
    if not r.is_product:
        buf += struct.pack("<Q", r.n_vertices) + r.vertices.astype("<i8").tobytes()
    desc = config.bc.descriptor.encode()
    buf += struct.pack("<I", len(desc)) + desc
    buf += struct.pack("<ddI", params.q, params.p, len(params.overrides))
    for b, v in params.overrides.items():
        buf += struct.pack("<Qd", b, v)
    buf += struct.pack("<Q", r.n_bonds)
    buf += np.packbits(config.bits, bitorder="little").tobytes()
    data = bytes(buf)
    if path_or_file is not None:
        if hasattr(path_or_file, "write"):
            path_or_file.write(data)
        else:
            with open(path_or_file, "wb") as fh:
                fh.write(data)
    return data


def read_snapshot(src) -> tuple[BondConfig, RCParams]:
    if isinstance(src, (bytes, bytearray)):
        data = bytes(src)
    elif hasattr(src, "read"):
        data = src.read()
    else:
        with open(src, "rb") as fh:
            data = fh.read()
    if not data.startswith(MAGIC):
        raise ValueError("not a configuration snapshot")
    off = len(MAGIC)
    version, d, kind, product, ext = struct.unpack_from("<HHBBB", data, off)
    if version != VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    off += 7
    lo = np.frombuffer(data, "<i8", d, off).astype(np.int64)
    off += 8 * d
    hi = np.frombuffer(data, "<i8", d, off).astype(np.int64)
    off += 8 * d
    if product:
        region = Region.product(lo, hi, _KINDS[kind], bool(ext))
    else:
        (nv,) = struct.unpack_from("<Q", data, off)
        off += 8
        verts = np.frombuffer(data, "<i8", nv * d, off).reshape(nv, d).astype(np.int64)
        off += 8 * nv * d
        region = Region.from_vertices(verts, d, bool(ext), _KINDS[kind])
    (ln,) = struct.unpack_from("<I", data, off)
    off += 4
    desc = data[off:off + ln].decode()
    off += ln
    q, p, nov = struct.unpack_from("<ddI", data, off)
    off += 20
    ov = {}
    for _ in range(nov):
        b, v = struct.unpack_from("<Qd", data, off)
        ov[int(b)] = v
        off += 16
    (m,) = struct.unpack_from("<Q", data, off)
    off += 8
    if m != region.n_bonds:
        raise ValueError("snapshot bond count does not match its region")
    nbytes = (m + 7) // 8
    bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, off), count=m, bitorder="little")
    return BondConfig(region, bits, BoundaryCondition(desc)), RCParams(q, p, ov)
