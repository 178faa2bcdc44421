"""Time each hot kernel under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeats 5] [--json out.json]

The first numba call compiles (or loads the on-disk cache); it is run once
untimed before measuring. Both backends must agree; the script checks.
"""
import argparse
import json
import time

import numpy as np

from gencad import _accel, kernels
from gencad.cadlang import CadCommand, CadSequence
from gencad.geometry import build_profile, execute
from gencad.imaging import canny, render_isometric


def _bracket():
    return CadSequence((
        CadCommand.sol(), CadCommand.line(0.8, 0.0), CadCommand.line(0.8, 0.6),
        CadCommand.line(0.0, 0.6), CadCommand.line(0.0, 0.0),
        CadCommand.sol(), CadCommand.circle(0.4, 0.3, 0.12),
        CadCommand.extrude(0.3),
        CadCommand.sol(), CadCommand.circle(0.2, 0.2, 0.1),
        CadCommand.extrude(0.4, origin=(0.0, 0.0, 0.3), op=1),
    ))


def cases():
    rng = np.random.default_rng(0)
    solid = execute(_bracket())
    table = build_profile([
        [CadCommand.line(0.8, 0.0), CadCommand.arc(0.8, 0.6, np.pi, 1),
         CadCommand.line(0.0, 0.6), CadCommand.line(0.0, 0.0)],
        [CadCommand.circle(0.4, 0.3, 0.1)],
    ]).table()
    pts2 = rng.uniform(-1, 1, (200_000, 2))
    pts3 = rng.uniform(-1, 1, (200_000, 3))
    x, y = rng.standard_normal((2000, 3)), rng.standard_normal((2000, 3))
    mag = rng.random((448, 448))
    gx, gy = rng.standard_normal((2, 448, 448))
    m = rng.standard_normal((64, 64))
    sym = m @ m.T
    img = render_isometric(solid, 128)
    return {
        "profile_sdf 200k points": lambda: kernels.profile_sdf(pts2, table),
        "nn_sqdist_brute 2000x2000": lambda: kernels.nn_sqdist_brute(x, y)[0],
        "non_max_suppression 448^2": lambda: kernels.non_max_suppression(mag, gx, gy),
        "jacobi_eigh 64x64": lambda: kernels.jacobi_eigh(sym)[0],
        "solid sdf 200k points": lambda: solid.sdf(pts3),
        "render_isometric 128": lambda: render_isometric(solid, 128),
        "canny 128": lambda: canny(img),
    }


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write the table as JSON")
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    for name, fn in cases().items():
        times, outs = {}, {}
        for use in (True, False):
            _accel.set_backend(use)
            outs[use] = fn()  # warm-up, compiles under numba
            times[_accel.backend()] = timeit(fn, args.repeats)
        same = np.allclose(np.asarray(outs[True], dtype=float), np.asarray(outs[False], dtype=float),
                           rtol=1e-9, atol=1e-12)
        rows.append({"kernel": name, "numba_s": times["numba"], "numpy_s": times["numpy"],
                     "speedup": times["numpy"] / times["numba"], "agree": bool(same)})
    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{width}}  {'numba':>9}  {'numpy':>9}  speedup  agree")
    for r in rows:
        print(f"{r['kernel']:<{width}}  {r['numba_s'] * 1e3:7.1f}ms  {r['numpy_s'] * 1e3:7.1f}ms"
              f"  {r['speedup']:6.1f}x  {r['agree']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
