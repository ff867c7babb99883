"""Command line experiment runner.

``rclab <command> [flags]`` where command is one of sample, crossing,
tension, mixing, blocks, renorm, threshold, oracle or merge.  A flat TOML
file given with ``--config`` supplies defaults; flags override it.

Every run writes ``manifest.json`` (resolved config, code version, seed,
replica streams, artifact digests) and ``result.json`` next to the
command's own artifacts.  Exit codes: 0 ok, 2 config error, 3 oracle cap,
4 estimator failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, stats
from ._accel import backend

EXIT_OK, EXIT_CONFIG, EXIT_CAP, EXIT_ESTIMATOR = 0, 2, 3, 4
COMMANDS = ("sample", "crossing", "tension", "mixing", "blocks", "renorm", "threshold", "oracle")

DEFAULTS = {
    "dim": 3, "q": 1.0, "p": None, "beta": None, "bc": "free", "seed": 0,
    "sweeps": 2000, "burnin": 200, "thin": 1, "replicas": 1, "replica_start": 0,
    "workers": 1, "out": "rclab_out", "format": "csv", "method": "auto",
    "shape": "box", "N": 4, "L": 1, "H": 3, "ell": 1, "h": 3, "K": 1, "delta": 1.0,
    "s": 0.5, "mode": "auto", "eta": 0.1, "budget": 400, "m": 1, "kind": "box",
    "theta": 0.05, "sizes": None, "depth": 8, "grid": 11, "lo": None, "hi": None,
    "k_grid": "2,3,4", "exterior": True,
}

# keys that never change results and stay out of the manifest
_VOLATILE = {"workers", "out", "config"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rclab", description="Random-cluster model laboratory.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _common(sp)
    mp = sub.add_parser("merge", help="pool result.json files from replica runs")
    mp.add_argument("files", nargs="+")
    mp.add_argument("--out", default=None)
    mp.add_argument("--format", choices=("csv", "json"), default=None)
    return ap


def _common(sp):
    a = sp.add_argument
    a("--config", help="flat TOML file of defaults")
    a("--dim", type=int)
    a("--q", type=float)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--p", type=float)
    g.add_argument("--beta", type=float)
    a("--bc", help="free, wired or mixed:<classes>")
    a("--seed", type=int)
    a("--sweeps", type=int)
    a("--burnin", type=int)
    a("--thin", type=int)
    a("--replicas", type=int)
    a("--replica-start", dest="replica_start", type=int)
    a("--workers", type=int)
    a("--out")
    a("--format", choices=("csv", "json"))
    a("--method", choices=("auto", "heatbath", "cluster", "product"))
    a("--shape", choices=("box", "block", "slab", "rectangle"))
    for k, t in (("N", int), ("L", int), ("H", int), ("ell", int), ("h", int), ("K", int),
                 ("delta", float), ("s", float), ("eta", float), ("budget", int), ("m", int),
                 ("theta", float), ("depth", int), ("grid", int), ("lo", float), ("hi", float)):
        a(f"--{k}", type=t)
    a("--mode", choices=("auto", "direct", "ladder"))
    a("--kind", choices=("box", "slab"))
    a("--sizes", help="comma separated sizes")
    a("--k-grid", dest="k_grid", help="comma separated seed sizes for calibration")
    a("--no-exterior", dest="exterior", action="store_const", const=False,
      help="drop the bonds that leave the region")


def _load_toml(path: str) -> dict:
    try:
        import tomllib as toml  # type: ignore[import-not-found]
    except ModuleNotFoundError:
        import tomli as toml
    try:
        with open(path, "rb") as fh:
            data = toml.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    bad = [k for k, v in data.items() if isinstance(v, dict)]
    if bad:
        raise ConfigError(f"config file must be flat; found tables {bad}")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(ns: argparse.Namespace) -> dict:
    """Defaults < config file < flags, then validation."""
    cfg = dict(DEFAULTS)
    flags = {k: v for k, v in vars(ns).items() if v is not None and k not in ("command", "config")}
    if ns.config:
        filed = _load_toml(ns.config)
        cmd = filed.pop("command", None)
        if cmd is not None and cmd != ns.command:
            raise ConfigError(f"config file is for {cmd!r}, not {ns.command!r}")
        unknown = sorted(set(filed) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        if "p" in flags:
            filed.pop("beta", None)
        if "beta" in flags:
            filed.pop("p", None)
        cfg.update(filed)
    cfg.update(flags)
    cfg["command"] = ns.command
    return validate(cfg)


def _int_list(v, what) -> list:
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        items = v
    else:
        items = [x for x in str(v).split(",") if x.strip()]
    try:
        return [int(x) for x in items]
    except ValueError as exc:
        raise ConfigError(f"{what} must be integers") from exc


def validate(cfg: dict) -> dict:
    from .rcmodel import BoundaryCondition
    from .threshold import ising_to_fk

    c = dict(cfg)
    if c.get("p") is not None and c.get("beta") is not None:
        raise ConfigError("give exactly one of p and beta")
    if c.get("beta") is not None:
        if not c["beta"] >= 0:
            raise ConfigError("beta must be a nonnegative number")
        c["p"] = ising_to_fk(float(c["beta"]))
    needs_p = c["command"] not in ("threshold",)
    if needs_p and c.get("p") is None:
        raise ConfigError("give exactly one of p and beta")
    if c.get("p") is not None and not 0.0 <= float(c["p"]) <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    if not (c["q"] >= 1.0 and math.isfinite(c["q"])):
        raise ConfigError("q must be a finite number >= 1")
    if c["dim"] < 2:
        raise ConfigError("dim must be >= 2")
    if c["shape"] == "slab" and c["dim"] < 3:
        raise ConfigError("slabs need dim >= 3")
    if c["sweeps"] <= c["burnin"] or c["burnin"] < 0:
        raise ConfigError("need sweeps > burnin >= 0")
    if c["thin"] < 1:
        raise ConfigError("thin must be >= 1")
    if c["replicas"] < 1 or c["replica_start"] < 0:
        raise ConfigError("replicas must be >= 1 and replica-start >= 0")
    if c["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    if c["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    if c["seed"] < 0:
        raise ConfigError("seed must be nonnegative")
    if c["method"] == "cluster" and float(c["q"]) != int(c["q"]):
        raise ConfigError("cluster dynamics need integer q")
    if c["method"] == "product" and c["q"] != 1.0:
        raise ConfigError("the product sampler needs q = 1")
    for k in ("N", "L", "H", "ell", "h", "K", "m", "budget", "depth", "grid"):
        if int(c[k]) < 0:
            raise ConfigError(f"{k} must be nonnegative")
    if not 0.0 <= c["s"] <= 1.0:
        raise ConfigError("s must lie in [0, 1]")
    if not 0.0 <= c["eta"] < 1.0:
        raise ConfigError("eta must lie in [0, 1)")
    if not 0.0 < c["theta"] < 0.5:
        raise ConfigError("theta must lie in (0, 0.5)")
    c["sizes"] = _int_list(c.get("sizes"), "sizes")
    c["k_grid"] = _int_list(c.get("k_grid"), "k-grid")
    try:
        BoundaryCondition(str(c["bc"])).kind
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad boundary condition {c['bc']!r}: {exc}") from exc
    if c["command"] in ("tension", "threshold", "blocks", "oracle") and c["replicas"] != 1:
        raise ConfigError(f"{c['command']} runs a single job; use replicas = 1")
    try:
        _region(c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return c


# ---------------------------------------------------------------------------
# jobs (top level so worker processes can import them)


def _region(c):
    from .lattice import build_block, build_box, build_rectangle, build_slab
    from .lattice import Region
    d = int(c["dim"])
    shape = c["shape"]
    if shape == "box":
        r = build_box(int(c["N"]), d)
    elif shape == "block":
        r = build_block(int(c["ell"]), int(c["h"]), d)
    elif shape == "slab":
        r = build_slab(int(c["L"]), int(c["N"]), d)
    else:
        r = build_rectangle(int(c["N"]), c["delta"], int(c["L"]), d)
    if c.get("exterior", True):
        return r
    return Region.product(r.lo, r.hi, r.kind, include_exterior=False, meta=r.meta)


def _params(c):
    from .rcmodel import RCParams
    return RCParams(float(c["q"]), float(c["p"]))


def _sampler_cfg(c):
    from .sampler import SamplerConfig
    return SamplerConfig(int(c["sweeps"]), int(c["burnin"]), int(c["thin"]), c["method"])


def _stream(c, replica: int):
    from .rng import RNGStream
    return RNGStream(int(c["seed"]), 0).child(replica)


def _crossing_faces(region):
    v = region.vertices
    return v[v[:, -1] == region.lo[-1]], v[v[:, -1] == region.hi[-1]]


def job(c: dict, replica: int) -> dict:
    """One replica of a batch-means experiment; returns named estimates (+ blobs)."""
    from .observables import compile_event, face_crossing, mixing_gap, sample_series
    from .rcmodel import BondConfig, BoundaryCondition, fk_graph, write_snapshot
    from .sampler import ChainState, iter_chain

    cmd = c["command"]
    rng = _stream(c, replica)
    cfg = _sampler_cfg(c)
    out: dict = {"estimates": {}, "blobs": {}}
    if cmd == "mixing":
        out["estimates"]["mixing_gap"] = mixing_gap(int(c["K"]), float(c["s"]), float(c["p"]),
                                                     float(c["q"]), cfg, rng, int(c["dim"]))
        return out
    region = _region(c)
    bc = BoundaryCondition(str(c["bc"]))
    params = _params(c)
    if cmd == "crossing":
        a, b = _crossing_faces(region)
        f = compile_event(face_crossing(a, b), region, bc)
        x = sample_series(region, params, bc, f, cfg, rng)
        out["estimates"]["crossing"] = stats.batch_means(x, stats.MIN_BATCHES)
        return out
    # sample: bond density and cluster count per retained sweep, final snapshot
    g = fk_graph(region, bc)
    chain = ChainState(region, params, bc, rng, cfg.method)
    dens, clus = [], []
    for s in iter_chain(chain, cfg):
        dens.append(s.mean())
        clus.append(_count(g, s))
    out["estimates"]["open_density"] = stats.batch_means(dens, stats.MIN_BATCHES)
    out["estimates"]["cluster_count"] = stats.batch_means(clus, stats.MIN_BATCHES)
    buf = io.BytesIO()
    write_snapshot(buf, BondConfig(region, chain.state.copy(), bc), params)
    out["blobs"][f"snapshot_{replica:04d}.rcsnap"] = buf.getvalue()
    return out


def _count(g, s) -> float:
    from . import kernels
    return float(kernels.count_anchored(g.labels(s), g.anchor))


def renorm_job(c: dict, replica: int) -> dict:
    from .renorm import RenormSpec, grow_cluster, make_source, verify_renormalized_path
    spec = RenormSpec(int(c["K"]), int(c["ell"]), int(c["h"]), int(c["L"]), int(c["H"]),
                      float(c["eta"]), int(c["dim"]))
    src = make_source(spec, int(c["m"]), _params(c), _stream(c, replica), _sampler_cfg(c))
    res = grow_cluster(src, spec, int(c["m"]), record_reads=False)
    ok = verify_renormalized_path(src, res)
    return {"history": res.history, "verified": bool(ok), "good": len(res.good_squares()),
            "inspected": len(res.inspected()), "json": res.to_json(),
            "svg": res.to_svg() if replica == int(c["replica_start"]) else None}


# ---------------------------------------------------------------------------
# output helpers


def _est_dict(e: stats.Estimate) -> dict:
    d = e.as_dict()
    d["batches"] = list(e.batches)
    d["weights"] = list(e.weights)
    return d


def _est_from(d: dict) -> stats.Estimate:
    return stats.Estimate(_num(d["value"]), _num(d["half_width"]), d["n"], d["n_batches"], d["method"],
                          d["status"], tuple(d.get("batches", ())), tuple(d.get("weights", ())))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _num(v) -> float:
    if v is None:
        return math.nan
    if isinstance(v, str):
        return float(v)
    return float(v)


def dumps(obj) -> str:
    return json.dumps(stats.strict(obj), indent=2, sort_keys=True, default=_json_default,
                      allow_nan=False) + "\n"


def _params_text(c: dict) -> str:
    keys = ("dim", "q", "p", "bc", "shape", "N", "L", "H", "ell", "h", "K", "delta", "s")
    return ";".join(f"{k}={c[k]}" for k in keys if c.get(k) is not None)


def estimates_csv(c: dict, ests: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["spec_id", "params", "value", "ci_lo", "ci_hi", "n", "method", "status"])
    for name in sorted(ests):
        e = ests[name]
        w.writerow([name, _params_text(c), repr(e.value), repr(e.lo), repr(e.hi), e.n,
                    e.method, e.status])
    return buf.getvalue()


class Writer:
    """Collects artifacts and writes them with a manifest."""

    def __init__(self, out: str):
        self.out = out
        self.files: dict = {}

    def add(self, name: str, data) -> None:
        self.files[name] = data.encode() if isinstance(data, str) else bytes(data)

    def finish(self, c: dict, extra: dict | None = None) -> None:
        os.makedirs(self.out, exist_ok=True)
        for name, data in self.files.items():
            with open(os.path.join(self.out, name), "wb") as fh:
                fh.write(data)
        manifest = {
            "config": {k: v for k, v in sorted(c.items()) if k not in _VOLATILE},
            "code_version": __version__,
            "backend": backend(),
            "seed": c.get("seed"),
            "artifacts": {n: hashlib.sha256(d).hexdigest() for n, d in sorted(self.files.items())},
        }
        if extra:
            manifest.update(extra)
        with open(os.path.join(self.out, "manifest.json"), "w") as fh:
            fh.write(dumps(manifest))


def _streams(c) -> list:
    r0 = int(c["replica_start"])
    return [{"replica": r, "seed": int(c["seed"]), "stream_id": _stream(c, r).stream_id}
            for r in range(r0, r0 + int(c["replicas"]))]


def _map(fn, c: dict, reps: list) -> list:
    """Run replicas, results returned in replica order whatever the worker count."""
    workers = min(int(c["workers"]), len(reps))
    if workers <= 1:
        return [fn(c, r) for r in reps]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, [c] * len(reps), reps))


# ---------------------------------------------------------------------------
# commands


def _failed(e: stats.Estimate) -> bool:
    return e.status not in ("ok", "ci_withheld")


def _finish_estimates(c, w: Writer, ests: dict, replicas: list, extra=None) -> int:
    doc = {"command": c["command"],
           "config": {k: v for k, v in sorted(c.items())
                      if k not in _VOLATILE | {"replicas", "replica_start"}},
           "replicas": replicas,
           "estimates": {k: _est_dict(v) for k, v in sorted(ests.items())}}
    if extra:
        doc.update(extra)
    w.add("result.json", dumps(doc))
    if c["format"] == "csv":
        w.add("estimates.csv", estimates_csv(c, ests))
    else:
        w.add("estimates.json", dumps({k: v.as_dict() for k, v in sorted(ests.items())}))
    w.finish(c, {"replica_streams": _streams(c)})
    return EXIT_ESTIMATOR if any(_failed(e) for e in ests.values()) else EXIT_OK


def cmd_batch(c: dict) -> int:
    reps = list(range(int(c["replica_start"]), int(c["replica_start"]) + int(c["replicas"])))
    parts = _map(job, c, reps)
    w = Writer(c["out"])
    names = sorted(parts[0]["estimates"])
    ests = {}
    for n in names:
        es = [p["estimates"][n] for p in parts]
        ests[n] = es[0] if len(es) == 1 or not es[0].batches else stats.pool(es)
    for p in parts:
        for k, v in sorted(p["blobs"].items()):
            w.add(k, v)
    return _finish_estimates(c, w, ests, reps)


def cmd_tension(c: dict) -> int:
    from .observables import surface_tension_estimate
    from .rcmodel import BoundaryCondition
    e = surface_tension_estimate(int(c["N"]), c["delta"], int(c["L"]), _params(c),
                                 BoundaryCondition(str(c["bc"])), _sampler_cfg(c),
                                 _stream(c, int(c["replica_start"])), int(c["dim"]), c["mode"])
    return _finish_estimates(c, Writer(c["out"]), {"surface_tension": e},
                             [int(c["replica_start"])])


def cmd_blocks(c: dict) -> int:
    from .rcmodel import BoundaryCondition
    from .renorm import calibrate_block
    res = calibrate_block(_params(c), BoundaryCondition(str(c["bc"])), int(c["L"]), int(c["H"]),
                          float(c["eta"]), int(c["budget"]), int(c["dim"]),
                          tuple(c["k_grid"]), _stream(c, int(c["replica_start"])),
                          int(c["burnin"]))
    w = Writer(c["out"])
    w.add("calibration.json", dumps(res.as_dict()))
    code = _finish_estimates(c, w, {"occupied_block": res.estimate}, [int(c["replica_start"])],
                             {"calibration_status": res.status})
    return code if res.ok else EXIT_ESTIMATOR


def cmd_renorm(c: dict) -> int:
    from .renorm import RenormSpec, estimate_alpha
    try:
        spec = RenormSpec(int(c["K"]), int(c["ell"]), int(c["h"]), int(c["L"]), int(c["H"]),
                          float(c["eta"]), int(c["dim"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    reps = list(range(int(c["replica_start"]), int(c["replica_start"]) + int(c["replicas"])))
    parts = _map(renorm_job, c, reps)
    w = Writer(c["out"])
    for r, p in zip(reps, parts):
        w.add(f"witness_{r:04d}.json", p["json"])
        if p["svg"] is not None:
            w.add(f"witness_{r:04d}.svg", p["svg"])
    rep = estimate_alpha([p["history"] for p in parts], spec.eta)
    w.add("alpha.json", dumps(rep.as_dict()))
    verified = all(p["verified"] for p in parts)
    summary = {"verified_all": verified, "good": [p["good"] for p in parts],
               "inspected": [p["inspected"] for p in parts]}
    code = _finish_estimates(c, w, {"alpha": rep.estimate}, reps, {"renorm": summary})
    return EXIT_ESTIMATOR if not verified else code


def cmd_threshold(c: dict) -> int:
    from .threshold import estimate_box_threshold, estimate_slab_threshold
    cfg = _sampler_cfg(c)
    rng = _stream(c, int(c["replica_start"]))
    if c["kind"] == "box":
        sizes = c["sizes"] or [4, 8, 16]
        rep = estimate_box_threshold(float(c["q"]), int(c["dim"]), tuple(sizes),
                                     (c["lo"] if c["lo"] is not None else 0.26,
                                      c["hi"] if c["hi"] is not None else 0.46),
                                     int(c["grid"]), cfg, rng)
    else:
        sizes = c["sizes"] or [16, 32]
        rep = estimate_slab_threshold(int(c["L"]), float(c["q"]), float(c["theta"]),
                                      tuple(sizes), int(c["dim"]),
                                      (c["lo"] if c["lo"] is not None else 0.0,
                                       c["hi"] if c["hi"] is not None else 1.0),
                                      int(c["depth"]), cfg, rng)
    w = Writer(c["out"])
    w.add("report.json", rep.to_json() + "\n")
    w.add("curves.csv", rep.curves_csv())
    w.finish(c, {"replica_streams": _streams(c)[:1]})
    return EXIT_OK


def cmd_oracle(c: dict) -> int:
    from .rcmodel import BoundaryCondition
    from .sampler import enumerate_exact
    region = _region(c)
    bc = BoundaryCondition(str(c["bc"]))
    table = enumerate_exact(region, _params(c), bc)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["config", "probability"])
    m = region.n_bonds
    for idx, pr in enumerate(table.probs):
        wr.writerow([format(idx, f"0{m}b")[::-1] if m else "", repr(float(pr))])
    w = Writer(c["out"])
    w.add("oracle.csv", buf.getvalue())
    ests = {f"marginal_{b:03d}": stats.exact(float(v)) for b, v in enumerate(table.marginals())}
    ests["log_partition"] = stats.exact(float(table.log_z))
    return _finish_estimates(c, w, ests, [int(c["replica_start"])])


def merge(paths: list[str]) -> dict:
    """Pool result.json documents; inputs are ordered by replica id, so order is irrelevant."""
    docs = []
    for p in paths:
        with open(p) as fh:
            docs.append(json.load(fh))
    base = docs[0]
    for d in docs[1:]:
        if d.get("config") != base.get("config") or d.get("command") != base.get("command"):
            raise ConfigError("config mismatch between result files")
        if set(d["estimates"]) != set(base["estimates"]):
            raise ConfigError("result files carry different estimates")
    docs.sort(key=lambda d: tuple(d["replicas"]))
    reps = [r for d in docs for r in d["replicas"]]
    if len(set(reps)) != len(reps):
        raise ConfigError("replica ids overlap")
    ests = {}
    for name in sorted(base["estimates"]):
        parts = [_est_from(d["estimates"][name]) for d in docs]
        if len(parts) == 1:
            ests[name] = parts[0]
        elif any(not e.batches for e in parts):
            raise ConfigError(f"estimate {name} carries no batches; cannot pool")
        else:
            ests[name] = stats.pool(parts)
    return {"command": base["command"], "config": base["config"], "replicas": reps,
            "estimates": {k: _est_dict(v) for k, v in ests.items()}}


def cmd_merge(ns) -> int:
    doc = merge(ns.files)
    out = ns.out or "rclab_merged"
    fmt = ns.format or "csv"
    w = Writer(out)
    w.add("result.json", dumps(doc))
    ests = {k: _est_from(v) for k, v in doc["estimates"].items()}
    c = dict(doc["config"])
    c.setdefault("command", doc["command"])
    if fmt == "csv":
        w.add("estimates.csv", estimates_csv({**DEFAULTS, **c}, ests))
    else:
        w.add("estimates.json", dumps({k: v.as_dict() for k, v in sorted(ests.items())}))
    w.finish({"command": "merge", "inputs": sorted(os.path.basename(p) for p in ns.files),
              "merged_command": doc["command"]}, {"replicas": doc["replicas"]})
    return EXIT_OK


_DISPATCH = {"sample": cmd_batch, "crossing": cmd_batch, "mixing": cmd_batch,
             "tension": cmd_tension, "blocks": cmd_blocks, "renorm": cmd_renorm,
             "threshold": cmd_threshold, "oracle": cmd_oracle}


def _error(kind: str, msg: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": msg}) + "\n")


def main(argv=None) -> int:
    from .sampler import OracleCapExceeded
    ap = _parser()
    try:
        ns = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if ns.command == "merge":
            return cmd_merge(ns)
        c = resolve(ns)
        return _DISPATCH[c["command"]](c)
    except ConfigError as exc:
        _error("config", str(exc))
        return EXIT_CONFIG
    except OracleCapExceeded as exc:
        _error("oracle_cap", str(exc))
        return EXIT_CAP


def entry() -> None:
    sys.exit(main())
