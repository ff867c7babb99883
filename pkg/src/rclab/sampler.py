"""Samplers for the random-cluster measure and exact enumeration oracles.

Three dynamics share one chain object:

* ``heatbath``: sequential single-bond heat bath, any real ``q >= 1``,
  optionally conditioned on a decreasing "no crossing" event;
* ``cluster``: Edwards-Sokal (Swendsen-Wang) steps for integer ``q``;
* ``product``: independent resampling, exact for ``q = 1``.

Uniforms are drawn per sweep from a Philox stream and handed to the
kernels, so a chain is reproducible from ``(seed, stream id)`` alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .lattice import Region
from .rcmodel import BondConfig, BoundaryCondition, FKGraph, RCParams, fk_graph
from .rng import as_generator

ENUM_CAP = 22
ISING_CAP = 20


class OracleCapExceeded(ValueError):
    """Raised when an exhaustive oracle would exceed its size cap."""


@dataclass(frozen=True)
class SamplerConfig:
    sweeps: int = 2000
    burn_in: int = 200
    thin: int = 1
    method: str = "auto"

    def __post_init__(self):
        if self.sweeps <= self.burn_in or self.burn_in < 0:
            raise ValueError("need sweeps > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.method not in ("auto", "heatbath", "cluster", "product"):
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def n_samples(self) -> int:
        return (self.sweeps - self.burn_in) // self.thin


@dataclass(frozen=True)
class Constraint:
    """Decreasing event: no open path through ``bonds`` from ``bottom`` to ``top`` nodes."""

    bonds: np.ndarray
    bottom: np.ndarray
    top: np.ndarray


def choose_method(params: RCParams, method: str = "auto", constrained: bool = False) -> str:
    if method != "auto":
        if method == "cluster" and params.integer_q is None:
            raise ValueError("cluster steps need integer q")
        if method == "product" and params.q != 1.0:
            raise ValueError("the product sampler is exact only for q = 1")
        if constrained and method != "heatbath":
            raise ValueError("conditioned chains run only with heat-bath dynamics")
        return method
    if constrained:
        return "heatbath"
    if params.q == 1.0:
        return "product"
    if params.integer_q is not None:
        return "cluster"
    return "heatbath"


class ChainState:
    """Bond state, kernel work arrays and the cluster labels kept in sync with it."""

    def __init__(self, region: Region, params: RCParams, bc: BoundaryCondition, rng,
                 method: str = "auto", init=None, constraint: Constraint | None = None):
        self.region = region
        self.params = params
        self.bc = bc
        self.graph: FKGraph = fk_graph(region, bc)
        self.rng = as_generator(rng)
        self.method = choose_method(params, method, constraint is not None)
        g = self.graph
        self.pb = params.intensities(g.m)
        if init is None or (isinstance(init, str) and init == "closed"):
            self.state = np.zeros(g.m, dtype=np.uint8)
        elif isinstance(init, str) and init == "open":
            self.state = np.ones(g.m, dtype=np.uint8)
        else:
            bits = init.bits if isinstance(init, BondConfig) else init
            self.state = np.array(bits, dtype=np.uint8)
            if self.state.shape != (g.m,):
                raise ValueError("initial configuration has the wrong length")
        self.sweeps_done = 0
        self.refused = 0
        n = g.n
        self._visit = np.full(n, -1, dtype=np.int64)
        self._ep = np.zeros(1, dtype=np.int64)
        self._qa = np.zeros(n, dtype=np.int64)
        self._qb = np.zeros(n, dtype=np.int64)
        self._allmask = np.ones(g.m, dtype=np.uint8)
        self._zeros = np.zeros(n, dtype=np.int64)
        self._order = np.arange(g.m, dtype=np.int64)
        self._is_free_bond = np.zeros(g.m, dtype=np.uint8)
        self._is_free_bond[g.free_bonds] = 1
        self._full = None
        self.constraint = constraint
        if constraint is not None:
            self._cmask = np.zeros(g.m, dtype=np.uint8)
            self._cmask[np.asarray(constraint.bonds, dtype=np.int64)] = 1
            self._isbot = np.zeros(n, dtype=np.int64)
            self._istop = np.zeros(n, dtype=np.int64)
            self._isbot[np.asarray(constraint.bottom, dtype=np.int64)] = 1
            self._istop[np.asarray(constraint.top, dtype=np.int64)] = 1
            if np.any(self._isbot & self._istop):
                raise ValueError("constraint bottom and top sets intersect")
            self._clabels = kernels.init_label_state(n, g.bu, g.bv, self.state, self._cmask,
                                                     self._isbot, self._istop)
            lab, _, s0, s1, _, _ = self._clabels
            if np.any((s0 > 0) & (s1 > 0)):
                raise ValueError("initial configuration violates the constraint")
        else:
            self._cmask = np.zeros(1, dtype=np.uint8)
            self._isbot = np.zeros(1, dtype=np.int64)
            self._istop = np.zeros(1, dtype=np.int64)
            z = np.zeros(1, dtype=np.int64)
            self._clabels = (z, z.copy(), z.copy(), z.copy(), z.copy(), z.copy())

    # -- views ------------------------------------------------------------------
    @property
    def config(self) -> BondConfig:
        return BondConfig(self.region, self.state.copy(), self.bc)

    def _full_labels(self):
        if self._full is None:
            g = self.graph
            self._full = kernels.init_label_state(g.n, g.bu, g.bv, self.state, self._allmask,
                                                  g.anchor, self._zeros)
        return self._full

    # -- dynamics ---------------------------------------------------------------
    def _heat_bath(self, order: np.ndarray, u: np.ndarray) -> None:
        g = self.graph
        track = self.params.q != 1.0
        if track:
            lab, sz, s0, s1, free, ftop = self._full_labels()
        else:
            z = self._zeros[:1]
            lab = sz = s0 = s1 = free = z
            ftop = np.zeros(1, dtype=np.int64)
        clab, csz, cs0, cs1, cfree, cftop = self._clabels
        self.refused += kernels.hb_sweep(
            order, u, self.state, g.bu, g.bv, self.pb, float(self.params.q), track,
            g.adj_ptr, g.adj_nbr, g.adj_bond, self._allmask, g.anchor, self._zeros,
            lab, sz, s0, s1, free, ftop,
            self.constraint is not None, self._cmask, self._isbot, self._istop,
            clab, csz, cs0, cs1, cfree, cftop,
            self._visit, self._ep, self._qa, self._qb)

    def sweeps(self, count: int) -> "ChainState":
        """``count`` heat-bath sweeps in a single kernel call."""
        u = self.rng.random(self.graph.m * count)
        self._heat_bath(np.tile(self._order, count), u)
        self.sweeps_done += count
        return self

    def histogram(self, n_sweeps: int, thin: int = 1, chunk: int = 50_000) -> np.ndarray:
        """Counts of configuration indices (bit b = bond b) over heat-bath sweeps."""
        g = self.graph
        if g.m > 30:
            raise ValueError("histograms are limited to 30 bonds")
        if self.constraint is not None:
            raise ValueError("histograms do not support constrained chains")
        hist = np.zeros(1 << g.m, dtype=np.int64)
        track = self.params.q != 1.0
        lab, sz, s0, s1, free, ftop = self._full_labels()
        chunk = max(thin, chunk - chunk % thin)
        done = 0
        while done < n_sweeps:
            k = min(chunk, n_sweeps - done)
            u = self.rng.random(g.m * k)
            kernels.hb_histogram(k, thin, u, self._order, self.state, g.bu, g.bv, self.pb,
                                 float(self.params.q), track, g.adj_ptr, g.adj_nbr, g.adj_bond,
                                 self._allmask, g.anchor, self._zeros, lab, sz, s0, s1, free,
                                 ftop, self._visit, self._ep, self._qa, self._qb, hist)
            done += k
        self.sweeps_done += n_sweeps
        return hist

    def heat_bath_bond(self, bond: int, u: float | None = None) -> "ChainState":
        """Resample one bond from its exact conditional law."""
        if not 0 <= bond < self.graph.m:
            raise IndexError(f"bond {bond} not in the region")
        r = self.rng.random() if u is None else float(u)
        self._heat_bath(np.array([bond], dtype=np.int64), np.array([r]))
        return self

    def sweep(self) -> "ChainState":
        """One sequential heat-bath pass over all bonds in index order."""
        self._heat_bath(self._order, self.rng.random(self.graph.m))
        self.sweeps_done += 1
        return self

    def cluster_step(self) -> "ChainState":
        q = self.params.integer_q
        if q is None:
            raise ValueError("cluster steps need integer q")
        if self.constraint is not None:
            raise ValueError("cluster steps cannot respect a constraint")
        g = self.graph
        ucol = self.rng.random(g.n)
        ubond = self.rng.random(g.m)
        kernels.es_step(g.n, g.bu, g.bv, self.pb, self.state, q, self._is_free_bond,
                        g.free_bonds, g.free_node, ucol, ubond, g.adj_ptr, g.adj_nbr,
                        g.adj_bond, g.anchor, self._visit, self._ep, self._qa)
        self._full = None
        self.sweeps_done += 1
        return self

    def product_step(self) -> "ChainState":
        if self.params.q != 1.0:
            raise ValueError("the product sampler is exact only for q = 1")
        self.state[:] = self.rng.random(self.graph.m) < self.pb
        self._full = None
        self.sweeps_done += 1
        return self

    def step(self) -> "ChainState":
        if self.method == "product":
            return self.product_step()
        if self.method == "cluster":
            return self.cluster_step()
        return self.sweep()


def heat_bath_bond(state: ChainState, bond: int) -> ChainState:
    return state.heat_bath_bond(bond)


def sweep(state: ChainState) -> ChainState:
    return state.sweep()


def cluster_step(state: ChainState) -> ChainState:
    return state.cluster_step()


def iter_chain(state: ChainState, cfg: SamplerConfig) -> Iterator[np.ndarray]:
    """Yield the bond array (a live view; copy to keep) after each retained sweep."""
    for _ in range(cfg.burn_in):
        state.step()
    for k in range(cfg.sweeps - cfg.burn_in):
        state.step()
        if (k + 1) % cfg.thin == 0:
            yield state.state


def sample_chain(region: Region, params: RCParams, bc: BoundaryCondition, sweeps: int,
                 burn_in: int, thinning: int, rng, method: str = "heatbath",
                 init=None) -> list[BondConfig]:
    cfg = SamplerConfig(sweeps, burn_in, thinning, method)
    st = ChainState(region, params, bc, rng, method, init)
    return [BondConfig(region, s.copy(), bc) for s in iter_chain(st, cfg)]


def heat_bath_probability(config: BondConfig, params: RCParams, bond: int,
                          bc: BoundaryCondition | None = None) -> float:
    """Conditional probability that ``bond`` is open given all other bonds."""
    bc = bc or config.bc
    g = fk_graph(config.region, bc)
    p = params.intensities(g.m)[bond]
    off = config.bits.copy()
    off[bond] = 0
    lab = g.labels(off)
    x, y = g.bu[bond], g.bv[bond]
    if lab[x] == lab[y]:
        return float(p)
    ax = g.anchor[lab == lab[x]].any()
    ay = g.anchor[lab == lab[y]].any()
    if ax and ay:
        return float(p / (p + (1 - p) * params.q))
    return float(p)


# ---------------------------------------------------------------------------
# exhaustive oracle


class ExactTable:
    """Normalised probabilities of all ``2^m`` configurations (bit b of the index = bond b)."""

    def __init__(self, graph: FKGraph, params: RCParams, logw: np.ndarray):
        self.graph = graph
        self.params = params
        self.log_z = float(logsumexp(logw))
        self.probs = np.exp(logw - self.log_z)

    @property
    def m(self) -> int:
        return self.graph.m

    def prob(self, bits) -> float:
        idx = int(np.dot(np.asarray(bits, dtype=np.int64), 1 << np.arange(self.m)))
        return float(self.probs[idx])

    def bits(self, index) -> np.ndarray:
        return ((np.asarray(index)[..., None] >> np.arange(self.m)) & 1).astype(np.uint8)

    def marginal(self, bond: int) -> float:
        idx = np.arange(self.probs.size)
        return float(self.probs[((idx >> bond) & 1) == 1].sum())

    def marginals(self) -> np.ndarray:
        return np.array([self.marginal(b) for b in range(self.m)])

    def expectation(self, f) -> float:
        """``f`` maps an (k, m) bit matrix to k values; evaluated in chunks."""
        total = 0.0
        step = 1 << 14
        for s in range(0, self.probs.size, step):
            idx = np.arange(s, min(self.probs.size, s + step))
            total += float(np.dot(self.probs[idx], np.asarray(f(self.bits(idx)), dtype=float)))
        return total

    def connection_probability(self, A_nodes, B_nodes) -> float:
        g = self.graph
        am = np.zeros(g.n, np.uint8)
        bm = np.zeros(g.n, np.uint8)
        am[np.asarray(A_nodes, dtype=np.int64)] = 1
        bm[np.asarray(B_nodes, dtype=np.int64)] = 1
        hit = kernels.enumerate_connections(g.n, g.bu, g.bv, am, bm)
        return float(self.probs[hit.astype(bool)].sum())


def enumerate_exact(region: Region, params: RCParams, bc: BoundaryCondition) -> ExactTable:
    g = fk_graph(region, bc)
    if g.m > ENUM_CAP:
        raise OracleCapExceeded(f"{g.m} bonds exceed the enumeration cap of {ENUM_CAP}")
    pb = params.intensities(g.m)
    with np.errstate(divide="ignore"):
        logp = np.log(pb)
        log1mp = np.log1p(-pb)
    logw = kernels.enumerate_logweights(g.n, g.bu, g.bv, logp, log1mp, g.anchor,
                                        math.log(params.q))
    if not np.isfinite(logw).any():
        raise ValueError("every configuration has zero weight")
    return ExactTable(g, params, logw)


# ---------------------------------------------------------------------------
# Ising oracle


class IsingTable:
    """Exact Gibbs measure of a finite Ising system with fixed exterior spins."""

    def __init__(self, region: Region, log_probs: np.ndarray, spins_of):
        self.region = region
        self.log_probs = log_probs
        self._spins_of = spins_of

    def magnetization(self, vertex) -> float:
        i = int(self.region.vertex_index(vertex)[0])
        if i < 0:
            raise ValueError("vertex outside the region")
        total = 0.0
        n = self.region.n_vertices
        step = 1 << 14
        for s in range(0, self.log_probs.size, step):
            idx = np.arange(s, min(self.log_probs.size, s + step))
            total += float(np.dot(np.exp(self.log_probs[idx]), self._spins_of(idx, n)[:, i]))
        return total


def enumerate_ising(region: Region, beta: float, boundary: str = "plus", field_bonds=None,
                    h: float = 0.0, couplings=None) -> IsingTable:
    """Exact Ising measure on the vertices of ``region``.

    Every bond of the region carries coupling ``beta`` (or ``couplings[b]``).
    ``boundary`` fixes the exterior spins: ``plus``, ``minus`` or ``free``
    (exterior bonds dropped).  Bonds listed in ``field_bonds`` couple to a
    plus exterior spin with strength ``h`` whatever ``boundary`` says, which
    is a boundary magnetic field ``h`` on their inner endpoints.
    """
    n = region.n_vertices
    if n > ISING_CAP:
        raise OracleCapExceeded(f"{n} spins exceed the Ising cap of {ISING_CAP}")
    if boundary not in ("plus", "minus", "free"):
        raise ValueError(f"unknown Ising boundary {boundary!r}")
    J = np.full(region.n_bonds, float(beta)) if couplings is None else np.asarray(couplings, float)
    ext_sign = {"plus": 1.0, "minus": -1.0, "free": 0.0}[boundary]
    bonds = region.bonds
    inner = (bonds[:, 0] < n) & (bonds[:, 1] < n)
    fb = np.zeros(region.n_bonds, dtype=bool)
    if field_bonds is not None:
        fb[np.asarray(field_bonds, dtype=np.int64)] = True
    ext_b = np.flatnonzero(~inner)
    ext_inner_end = np.where(bonds[ext_b, 0] < n, bonds[ext_b, 0], bonds[ext_b, 1])
    ext_coef = np.where(fb[ext_b], h, J[ext_b] * ext_sign)
    in_b = np.flatnonzero(inner)
    # linear field on each vertex from its exterior bonds
    hv = np.zeros(n)
    np.add.at(hv, ext_inner_end, ext_coef)

    def spins_of(idx, n_):
        return 1.0 - 2.0 * ((idx[:, None] >> np.arange(n_)) & 1)

    total = 1 << n
    logw = np.empty(total)
    step = 1 << 14
    for s in range(0, total, step):
        idx = np.arange(s, min(total, s + step), dtype=np.int64)
        sp = spins_of(idx, n)
        e = (J[in_b] * sp[:, bonds[in_b, 0]] * sp[:, bonds[in_b, 1]]).sum(axis=1) + sp @ hv
        logw[idx] = e
    logw -= logsumexp(logw)
    return IsingTable(region, logw, spins_of)
