"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the
terminal summary.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import filecmp
import math
import os
import time

import numpy as np
import pytest

from rclab.cli import main as cli_main
from rclab.lattice import Region, build_block
from rclab.observables import (compile_event, face_crossing, mixing_gap, occupied_block,
                               seed_present, side_seed_event, surface_tension_estimate,
                               top_seed_event, two_point)
from rclab.rcmodel import BoundaryCondition, RCParams, fk_graph
from rclab.renorm import (RenormSpec, calibrate_block, estimate_alpha, run_growth_replicas,
                          verify_renormalized_path)
from rclab.rng import RNGStream
from rclab import stats
from rclab.sampler import ChainState, SamplerConfig, enumerate_exact, enumerate_ising, iter_chain
from rclab.threshold import (estimate_box_threshold, estimate_slab_threshold, fk_to_ising,
                             ising_to_fk, site_percolation_threshold)

from conftest import record_criterion, small_graph_corpus, total_variation

pytestmark = pytest.mark.acceptance
FREE, WIRED = BoundaryCondition.free(), BoundaryCondition.wired()


@pytest.fixture(scope="session")
def box_q2():
    """Wired-box bracket of p_c for q = 2, d = 3, shared by criteria 6 and 9."""
    return estimate_box_threshold(2.0, 3, (4, 8, 16), (0.26, 0.46), 11,
                                  SamplerConfig(4000, 200), RNGStream(2024, 9))


def test_criterion_01_sampler_exactness():
    corpus = small_graph_corpus()
    t0 = time.perf_counter()
    worst, rows = 0.0, []
    gen = np.random.default_rng(0)
    for k, (name, region, q, p, bc) in enumerate(corpus):
        exact = enumerate_exact(region, RCParams(q, p), bc).probs
        st = ChainState(region, RCParams(q, p), bc, RNGStream(1, k), "heatbath")
        st.sweeps(1000)
        hist = st.histogram(2_000_000, thin=2)
        assert hist.sum() == 1_000_000
        tv = total_variation(hist / hist.sum(), exact)
        floor = total_variation(gen.multinomial(1_000_000, exact) / 1e6, exact)
        rows.append((name, tv, floor))
        worst = max(worst, tv)
    elapsed = time.perf_counter() - t0
    for name, tv, floor in rows:
        print(f"  {name:42s} TV={tv:.4f} iid-floor={floor:.4f}")
    qs = {q for _, _, q, _, _ in corpus}
    kinds = {bc.kind for *_, bc in corpus}
    ok = (len(corpus) >= 20 and worst < 0.02 and elapsed < 600 and qs == {1.0, 1.5, 2.0, 3.0}
          and kinds == {"free", "wired", "mixed"})
    record_criterion(1, ok, f"{len(corpus)} graphs, worst TV {worst:.4f} < 0.02, {elapsed:.0f}s")
    assert ok


def test_criterion_02_single_bond():
    region = Region.product([0], [1], include_exterior=False)
    bad = []
    for k, (p, q) in enumerate((p, q) for p in (0.3, 0.5, 0.7) for q in (1.5, 2.0, 3.0)):
        st = ChainState(region, RCParams(q, p), FREE, RNGStream(2, k), "heatbath")
        x = np.array([s[0] for s in iter_chain(st, SamplerConfig(200_000, 0))], float)
        e = stats.batch_means(x)
        target = p / (p + (1 - p) * q)
        if abs(e.value - target) > 3 * e.se:
            bad.append((p, q, e.value, target))
    record_criterion(2, not bad, f"9 (p,q) pairs within 3 sigma; misses {bad}")
    assert not bad


def _es_pair(region, beta, s):
    d = region.dim
    n = region.n_vertices
    bottom = np.flatnonzero((region.bond_axis == d - 1) & (region.bonds[:, 0] >= n))
    h = -0.5 * math.log1p(-s)
    origin = [0] * d
    mu = enumerate_ising(region, beta, "plus", bottom, h).magnetization(origin)
    params = RCParams(2, ising_to_fk(beta)).with_overrides(bottom, s)
    g = fk_graph(region, WIRED)
    phi = enumerate_exact(region, params, WIRED).connection_probability(
        g.nodes([origin]), np.flatnonzero(g.is_ghost))
    return mu, phi


def test_criterion_03_edwards_sokal():
    t0 = time.perf_counter()
    cases = [(Region.product([0, 0, 0], [1, 1, 0]), 0.4, 0.5),
             (Region.product([0, 0, 0], [1, 1, 0]), 0.1, 0.9),
             (Region.product([0, 0], [2, 1]), 0.3, 0.2),
             (Region.product([0, 0], [2, 1]), 0.8, 0.5),
             (Region.product([0, 0], [3, 0]), 0.2216544, 0.7)]
    errs = []
    for region, beta, s in cases:
        assert region.n_vertices <= 20
        mu, phi = _es_pair(region, beta, s)
        errs.append(abs(mu - phi))
    elapsed = time.perf_counter() - t0
    ok = max(errs) <= 1e-10
    record_criterion(3, ok, f"5 (beta,s) pairs, max |Ising - FK| = {max(errs):.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_mixing_decay():
    t0 = time.perf_counter()
    gaps = {K: mixing_gap(K, 0.5, 0.5, 2, SamplerConfig(20_000, 500), RNGStream(4, K))
            for K in (2, 3, 4)}
    elapsed = time.perf_counter() - t0
    ok = all(gaps[K].ok for K in gaps)
    for a, b in ((2, 3), (3, 4)):
        ok &= gaps[b].value - gaps[a].value <= math.hypot(gaps[a].half_width, gaps[b].half_width)
    txt = ", ".join(f"K={K}: {e.value:.4f}+-{e.half_width:.4f}" for K, e in gaps.items())
    ok &= elapsed < 1800
    record_criterion(4, ok, f"gap {txt}; no significant increase; {elapsed:.0f}s")
    assert ok


def _fkg_events(region):
    v = region.vertices
    return {
        "top_seed": top_seed_event(1, 2, 3), "side_seed": side_seed_event(1, 2, 3),
        "occupied": occupied_block(1, 2, 3), "top_seed_1": top_seed_event(1, 2, 3, 1),
        "bottom_top": face_crossing(v[v[:, 2] == 0], v[v[:, 2] == 3]),
        "left_right": face_crossing(v[v[:, 0] == -2], v[v[:, 0] == 2]),
        "two_point_near": two_point((1, 0, 0)), "two_point_far": two_point((2, 2, 3)),
        "plaque_top": seed_present((0, 0, 3), 2, 1), "plaque_side": seed_present((2, 0, 1), 0, 1),
    }


def test_criterion_05_fkg():
    t0 = time.perf_counter()
    region = build_block(2, 3, 3)
    specs = _fkg_events(region)
    assert len(specs) == 10 and all(s.increasing for s in specs.values())
    grid = (0.3, 0.45, 0.6, 0.75, 0.9)
    est = {}
    for b, bc in enumerate((FREE, WIRED)):
        fs = [compile_event(s, region, bc) for s in specs.values()]
        for j, p in enumerate(grid):
            st = ChainState(region, RCParams(2, p), bc, RNGStream(5, 10 * b + j), "cluster")
            X = np.array([[f(s) for f in fs] for s in iter_chain(st, SamplerConfig(6600, 200))],
                         float)
            for i, name in enumerate(specs):
                est[(bc.kind, p, name)] = stats.batch_means(X[:, i])
    bad = []
    for name in specs:
        for kind in ("free", "wired"):
            for a, c in zip(grid, grid[1:]):
                ea, ec = est[(kind, a, name)], est[(kind, c, name)]
                if ec.value < ea.value - 3 * math.hypot(ea.se, ec.se):
                    bad.append((name, kind, a, c))
        for p in grid:
            ef, ew = est[("free", p, name)], est[("wired", p, name)]
            if ew.value < ef.value - 3 * math.hypot(ef.se, ew.se):
                bad.append((name, "w<f", p))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 1800
    record_criterion(5, ok, f"10 events x 5 p x 2 bc, violations {bad}, {elapsed:.0f}s")
    assert ok


def _tension(N, p, q, key):
    # a third of a row of columns per ladder level keeps every ratio well away from zero
    return surface_tension_estimate(N, 1, 0, RCParams(q, p), FREE, SamplerConfig(512, 0),
                                    RNGStream(6, key), group=(2 * N + 1) // 3)


def _tension_pattern(p_hi, p_lo, q, key):
    t8 = _tension(8, p_hi, q, key)
    t12 = _tension(12, p_hi, q, key + 1)
    t0 = _tension(12, p_lo, q, key + 2)
    positive = all(t.ok and t.lo > 0 for t in (t8, t12))
    stable = abs(t12.value - t8.value) <= 0.15 * t8.value
    null = t0.ok and t0.lo <= 0.0 <= t0.hi
    txt = (f"q={q:g}: tau({p_hi:.3f};8)={t8.value:.4f}+-{t8.half_width:.4f} "
           f"tau({p_hi:.3f};12)={t12.value:.4f}+-{t12.half_width:.4f} "
           f"tau({p_lo:.3f};12)={t0.value:.2e}+-{t0.half_width:.1e}")
    return positive and stable and null, txt


def test_criterion_06_surface_tension(box_q2):
    t0 = time.perf_counter()
    ok1, txt1 = _tension_pattern(0.35, 0.20, 1.0, 10)
    beta_c = fk_to_ising(box_q2.midpoint)
    ok2, txt2 = _tension_pattern(ising_to_fk(1.3 * beta_c), ising_to_fk(0.8 * beta_c), 2.0, 20)
    elapsed = time.perf_counter() - t0
    ok = ok1 and ok2 and elapsed < 3600
    record_criterion(6, ok, f"{txt1}; beta_c={beta_c:.4f}, {txt2}; {elapsed:.0f}s")
    assert ok


CALIBRATION = {}


def test_criterion_07_block_calibration():
    t0 = time.perf_counter()
    results = []
    for L in range(2, 9):
        r = calibrate_block(RCParams(1, 0.35), FREE, L, 3 * L, 0.1, 320, 3, (2, 3, 4),
                            RNGStream(7, L))
        results.append((L, r))
    elapsed = time.perf_counter() - t0
    found = [(L, r) for L, r in results if r.ok]
    L_best, best = max(results, key=lambda t: (t[1].best["value"], t[0]))
    CALIBRATION["result"] = found[0] if found else (L_best, best)
    ok = bool(found) and elapsed < 3600
    record_criterion(7, ok, f"L=2..8, H=3L: best {best.best} at L={L_best} "
                            f"(target CI lower bound >= 0.9); {elapsed:.0f}s")
    assert ok


def test_criterion_08_stochastic_domination():
    t0 = time.perf_counter()
    site = site_percolation_threshold(64, 400, 8)
    # reuse criterion 7 when it ran in this session, else calibrate at the reference size
    L, cal = CALIBRATION.get("result") or (6, calibrate_block(RCParams(1, 0.35), FREE, 6, 18, 0.1,
                                                              320, 3, (2, 3, 4), RNGStream(7, 6)))
    if cal.spec is not None:
        spec, eta_hat = cal.spec, cal.spec.eta
    else:
        # no calibrated tuple: grow with the best candidate found and its measured failure rate
        b = cal.best
        spec = RenormSpec(b["K"], b["ell"], b["h"], L, 3 * L)
        eta_hat = 1.0 - b["value"]
    runs = run_growth_replicas(spec, RCParams(1, 0.35), 200, 1, RNGStream(8, 1))
    good_runs = [(src, res) for src, res in runs if res.good_squares()]
    verified = all(verify_renormalized_path(src, res) for src, res in good_runs)
    rep = estimate_alpha([res for _, res in runs], eta_hat)
    a = rep.estimate
    elapsed = time.perf_counter() - t0
    ok = a.ok and a.lo >= 0.65 and verified and elapsed < 7200
    record_criterion(8, ok, f"site p_c cross-check {site.value:.4f}+-{site.half_width:.4f}; "
                            f"alpha={a.value:.3f} (CI lower {a.lo:.3f}, need >= 0.65) over "
                            f"{rep.n_events} events, flags {rep.flags}; verified "
                            f"{len(good_runs)}/{len(good_runs)} good chains: {verified}; "
                            f"{elapsed:.0f}s")
    assert abs(site.value - 0.5927) < 0.01
    assert ok


def test_criterion_09_slab_ordering(box_q2):
    t0 = time.perf_counter()
    reps = [estimate_slab_threshold(L, 2.0, 0.05, (16, 32), 3, (0.0, 1.0), 8,
                                    SamplerConfig(2000, 200), RNGStream(9, L)) for L in (1, 2, 3)]
    elapsed = time.perf_counter() - t0
    his = [r.hi for r in reps]
    nonincreasing = all(b <= a for a, b in zip(his, his[1:]))
    above = all(r.lo >= box_q2.lo and r.hi >= box_q2.hi for r in reps)
    ok = nonincreasing and above and elapsed < 3 * 3600
    txt = ", ".join(f"L={r.L}: [{r.lo:.4f}, {r.hi:.4f}]" for r in reps)
    record_criterion(9, ok, f"{txt}; box [{box_q2.lo:.4f}, {box_q2.hi:.4f}]; {elapsed:.0f}s")
    assert ok


def _same_tree(a, b) -> bool:
    fa, fb = sorted(os.listdir(a)), sorted(os.listdir(b))
    if fa != fb:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, fa, shallow=False)
    return not mismatch and not errors


def test_criterion_10_determinism(tmp_path):
    runs = {
        "sample": ["sample", "--dim", "3", "--q", "2", "--p", "0.4", "--N", "2", "--sweeps", "200",
                   "--burnin", "40", "--replicas", "3", "--seed", "11"],
        "crossing": ["crossing", "--dim", "2", "--q", "1.5", "--p", "0.5", "--N", "3",
                     "--bc", "mixed:top|bottom", "--sweeps", "200", "--burnin", "40",
                     "--replicas", "3", "--seed", "12"],
        "mixing": ["mixing", "--q", "2", "--p", "0.5", "--s", "0.5", "--K", "1", "--sweeps", "200",
                   "--burnin", "40", "--replicas", "2", "--seed", "13"],
        "renorm": ["renorm", "--q", "1", "--p", "0.99", "--K", "1", "--ell", "2", "--h", "6",
                   "--L", "2", "--H", "6", "--replicas", "3", "--seed", "14"],
    }
    same = {}
    for name, args in runs.items():
        outs = []
        for w in (1, 2, 3):
            out = tmp_path / f"{name}_{w}"
            cli_main([*args, "--workers", str(w), "--out", str(out)])
            outs.append(out)
        same[name] = all(_same_tree(outs[0], o) for o in outs[1:])
    ok = all(same.values())
    record_criterion(10, ok, f"byte-identical artifacts across 1/2/3 workers: {same}")
    assert ok
