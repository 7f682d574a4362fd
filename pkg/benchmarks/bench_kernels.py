"""Compare the compiled and numpy geometry kernels on a rendered scene workload.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--json out.json]
"""
import argparse
import json
import time

import numpy as np

from semocc import _kernels
from semocc import occupancy_eval as oe
from semocc import scenegen as sg
from semocc.camera import backproject_ray, invert_pose, pixel_centers


def _workloads(seed: int = 0):
    scene = sg.build_scene(seed)
    views = sg.render_rig(scene)
    ref = views[0]
    kinds, w2l, size = scene.packed()
    ray = backproject_ray(pixel_centers(ref.intrinsics).reshape(-1, 2), ref.intrinsics, ref.pose)
    grid = oe.build_eval_grid(oe.RangeBand(4, 50), intrinsics=ref.intrinsics, pose=ref.pose)
    intr = np.array([[v.intrinsics.fx, v.intrinsics.fy, v.intrinsics.cx, v.intrinsics.cy]
                     for v in views])
    w2c = np.stack([invert_pose(np.asarray(v.pose))[:3] for v in views])
    depth = np.stack([v.depth.astype(np.float64) for v in views])
    return {
        "raycast": lambda k: k.raycast(ray.origin, ray.direction, kinds, w2l, size),
        "inside": lambda k: k.inside(grid.points, kinds, w2l, size, 1e-9),
        "carve": lambda k: k.carve(grid.points, intr, w2c, depth, 0.1),
    }, {"rays": int(ray.origin.shape[0]), "grid_points": len(grid), "primitives": len(kinds)}


def bench(repeats: int = 5):
    work, sizes = _workloads()
    impls = _kernels.implementations()
    rows = []
    for name, fn in work.items():
        row = {"kernel": name}
        outs = {}
        for backend, mod in impls.items():
            fn(mod)  # warm-up
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                outs[backend] = fn(mod)
                times.append(time.perf_counter() - t0)
            row[backend] = min(times)
        if len(outs) == 2:
            a, b = (np.asarray(o[0] if isinstance(o, tuple) else o) for o in outs.values())
            row["agree"] = bool(np.array_equal(a, b) or np.allclose(a, b, equal_nan=True))
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)
    return rows, sizes


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    rows, sizes = bench(args.repeats)
    print(f"selected backend: {_kernels.BACKEND}; workload {sizes}")
    print(f"{'kernel':<10}{'python (ms)':>14}{'cython (ms)':>14}{'speedup':>10}  agree")
    for r in rows:
        cy = f"{1e3 * r['cython']:14.2f}" if "cython" in r else f"{'n/a':>14}"
        sp = f"{r['speedup']:10.1f}" if "speedup" in r else f"{'n/a':>10}"
        print(f"{r['kernel']:<10}{1e3 * r['python']:14.2f}{cy}{sp}  {r.get('agree', '-')}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"rows": rows, "workload": sizes, "backend": _kernels.BACKEND}, f, indent=2)


if __name__ == "__main__":
    main()
