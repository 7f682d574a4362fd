"""Slow, simple reference implementations used by tests.

Nothing here imports the fast paths: geometry, compositing and attention are
written out again from their definitions so that agreement is meaningful.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class OracleReport:
    name: str
    max_abs_diff: float
    max_rel_diff: float
    tolerance: float
    passed: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def compare(name: str, value, reference, tol: float, relative: bool = False,
            rel_floor: float = 1e-12) -> OracleReport:
    """Report the max abs / rel difference; pass when the chosen one is within ``tol``."""
    a = np.asarray(value, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    abs_d = float(diff.max()) if diff.size else 0.0
    rel = diff / np.maximum(np.abs(b), rel_floor)
    rel_d = float(rel.max()) if rel.size else 0.0
    return OracleReport(name, abs_d, rel_d, tol, (rel_d if relative else abs_d) <= tol)


# ------------------------------------------------------------------ geometry

def point_in_primitive(p, kind: str, pose, size) -> bool:
    """Closed-set membership of one world point, from the primitive's definition."""
    R = [[pose[r][c] for c in range(3)] for r in range(3)]
    t = [pose[r][3] for r in range(3)]
    d = [p[i] - t[i] for i in range(3)]
    local = [sum(R[r][c] * d[r] for r in range(3)) for c in range(3)]
    if kind == "cylinder":
        radius, height = size
        return math.hypot(local[0], local[1]) <= radius and abs(local[2]) <= height / 2
    return all(abs(local[i]) <= size[i] / 2 for i in range(3))


def scene_occupied(p, scene) -> bool:
    return any(point_in_primitive(p, pr.kind, np.asarray(pr.pose).tolist(), tuple(pr.size))
               for pr in scene.primitives)


def march_first_hit(scene, origin, direction, t_max: float = 200.0, step: float = 0.01,
                    refine: int = 30):
    """Distance to the first occupied point along a ray by fixed stepping plus bisection.

    Returns ``math.inf`` on a miss. Thin features shorter than ``step`` can be missed.
    """
    o = [float(x) for x in origin]
    n = math.sqrt(sum(float(x) ** 2 for x in direction))
    d = [float(x) / n for x in direction]
    at = lambda t: [o[i] + t * d[i] for i in range(3)]
    if scene_occupied(at(0.0), scene):
        return 0.0
    prev = 0.0
    k = 1
    while prev < t_max:
        t = min(k * step, t_max)
        if scene_occupied(at(t), scene):
            lo, hi = prev, t
            for _ in range(refine):
                mid = 0.5 * (lo + hi)
                if scene_occupied(at(mid), scene):
                    hi = mid
                else:
                    lo = mid
            return hi
        prev = t
        k += 1
    return math.inf


# ------------------------------------------------------------------ rendering

def dense_march_render(sigma_fn, t_start: float, t_end: float, step: float = 0.01):
    """Midpoint-rule compositing along a ray parameterised by distance.

    ``sigma_fn(t)`` gives the density at distance ``t``. Returns
    ``(expected_distance, opacity)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    n = max(1, int(round((t_end - t_start) / step)))
    h = (t_end - t_start) / n
    trans = 1.0
    depth = 0.0
    opacity = 0.0
    for i in range(n):
        t = t_start + (i + 0.5) * h
        a = 1.0 - math.exp(-float(sigma_fn(t)) * h)
        w = trans * a
        depth += w * t
        opacity += w
        trans *= 1.0 - a
    return depth, opacity


def slab_density(a: float, b: float, c: float):
    """Density ``c`` on [a, b] and zero elsewhere."""
    return lambda t: c if a <= t <= b else 0.0


def slab_opacity(a: float, b: float, c: float) -> float:
    return 1.0 - math.exp(-c * (b - a))


def slab_expected_depth(a: float, b: float, c: float) -> float:
    """Closed-form integral of t * c * exp(-c (t - a)) over [a, b]."""
    L = b - a
    e = math.exp(-c * L)
    return a * (1 - e) + (1 - e * (1 + c * L)) / c


# ------------------------------------------------------------------ attention

def naive_linear_attention(FQ, FK, FV, D: float):
    """Two-softmax linear attention evaluated channel by channel in float64."""
    Q = np.asarray(FQ, dtype=np.float64)
    K = np.asarray(FK, dtype=np.float64)
    V = np.asarray(FV, dtype=np.float64)
    M, C = Q.shape
    # key softmax: over points, separately for every channel
    keys = np.empty_like(K)
    for c in range(C):
        col = K[:, c]
        e = np.exp(col - col.max())
        keys[:, c] = e / e.sum()
    G = np.zeros((C, V.shape[1]))
    for c in range(C):
        for i in range(M):
            G[c] += keys[i, c] * V[i]
    out = np.zeros((M, V.shape[1]))
    scale = math.sqrt(D)
    for i in range(M):
        row = Q[i] / scale
        e = np.exp(row - row.max())
        w = e / e.sum()
        for c in range(C):
            out[i] += w[c] * G[c]
    return out


# ------------------------------------------------------------------ gradients

def finite_difference_grad(f, theta, h: float = 1e-5, indices=None):
    """Central differences (f(θ + h e_i) - f(θ - h e_i)) / 2h at ``indices`` (default: all)."""
    if h <= 0:
        raise ValueError("h must be positive")
    th = np.array(theta, dtype=np.float64).reshape(-1)
    idx = range(th.size) if indices is None else [int(i) for i in indices]
    out = []
    for i in idx:
        old = th[i]
        th[i] = old + h
        fp = float(f(th.copy()))
        th[i] = old - h
        fm = float(f(th.copy()))
        th[i] = old
        out.append((fp - fm) / (2 * h))
    return np.asarray(out)


def gradient_relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor): symmetric, and bounded for near-zero entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
