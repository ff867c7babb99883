"""Time the hot kernels under numba and under the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--sweeps 200] [--N 6]

Each backend runs in its own interpreter because the switch is read at import.
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r'''
import json, sys, time
import rclab
from rclab.lattice import build_box
from rclab.rcmodel import BoundaryCondition, RCParams
from rclab.sampler import ChainState
sweeps, N = int(sys.argv[1]), int(sys.argv[2])
region = build_box(N, 3)
out = {"backend": rclab.backend(), "bonds": int(region.n_bonds)}
for method in ("heatbath", "cluster"):
    st = ChainState(region, RCParams(2, 0.35), BoundaryCondition.wired(), 0, method)
    st.step()  # compile outside the timed loop
    t = time.perf_counter()
    for _ in range(sweeps):
        st.step()
    out[method] = (time.perf_counter() - t) / sweeps
print(json.dumps(out))
'''


def run(pure: bool, sweeps: int, N: int) -> dict:
    env = dict(os.environ, RCLAB_PURE_NUMPY="1" if pure else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(sweeps), str(N)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sweeps", type=int, default=200)
    ap.add_argument("--N", type=int, default=6, help="box radius in d = 3")
    a = ap.parse_args()
    fast = run(False, a.sweeps, a.N)
    slow = run(True, max(1, a.sweeps // 20), a.N)
    print(f"box N={a.N}, d=3, {fast['bonds']} bonds, q=2, p=0.35, wired")
    print(f"{'step':<10}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for m in ("heatbath", "cluster"):
        print(f"{m:<10}{1e3 * fast[m]:>12.3f}{1e3 * slow[m]:>12.3f}{slow[m] / fast[m]:>10.1f}")


if __name__ == "__main__":
    main()
