"""Pure numpy implementations of the geometry kernels.

Primitive tables use a packed layout shared with the compiled module:

* ``kinds``  int32 (P,)      0 = box (ground slabs included), 1 = upright cylinder
* ``w2l``    float64 (P,3,4) world-to-local rigid transform
* ``size``   float64 (P,3)   box half extents, or (radius, radius, half height)
"""
import numpy as np

KIND_BOX = 0
KIND_CYLINDER = 1


def _to_local(w2l, pts):
    return pts @ w2l[:, :3].T + w2l[:, 3]


def _ray_box(o, d, half, tmin):
    n = o.shape[0]
    t_enter = np.full(n, -np.inf)
    t_exit = np.full(n, np.inf)
    miss = np.zeros(n, dtype=bool)
    for a in range(3):
        da = d[:, a]
        oa = o[:, a]
        flat = np.abs(da) < 1e-15
        miss |= flat & ((oa < -half[a]) | (oa > half[a]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[a] - oa) / da
            t2 = (half[a] - oa) / da
        lo = np.where(flat, -np.inf, np.minimum(t1, t2))
        hi = np.where(flat, np.inf, np.maximum(t1, t2))
        t_enter = np.maximum(t_enter, lo)
        t_exit = np.minimum(t_exit, hi)
    hit = ~miss & (t_enter <= t_exit) & (t_exit >= tmin)
    t = np.where(t_enter >= tmin, t_enter, t_exit)
    return np.where(hit, t, np.inf)


def _ray_cylinder(o, d, r, h, tmin):
    n = o.shape[0]
    best = np.full(n, np.inf)
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    disc = b * b - a * c
    ok = (a > 1e-30) & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    safe_a = np.where(ok, a, 1.0)
    for sign in (-1.0, 1.0):
        t = (-b + sign * sq) / safe_a
        z = o[:, 2] + t * d[:, 2]
        good = ok & (t >= tmin) & (np.abs(z) <= h)
        best = np.where(good & (t < best), t, best)
    flat = np.abs(d[:, 2]) < 1e-15
    safe_dz = np.where(flat, 1.0, d[:, 2])
    for zc in (-h, h):
        t = (zc - o[:, 2]) / safe_dz
        x = o[:, 0] + t * d[:, 0]
        y = o[:, 1] + t * d[:, 1]
        good = ~flat & (t >= tmin) & (x * x + y * y <= r * r)
        best = np.where(good & (t < best), t, best)
    return best


def raycast(origins, dirs, kinds, w2l, size, tmin=0.0):
    """First hit distance and primitive index per ray (inf / -1 on miss)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    t_best = np.full(n, np.inf)
    idx = np.full(n, -1, dtype=np.int32)
    for p in range(len(kinds)):
        R = w2l[p, :, :3]
        o = _to_local(w2l[p], origins)
        d = dirs @ R.T
        if kinds[p] == KIND_BOX:
            t = _ray_box(o, d, size[p], tmin)
        else:
            t = _ray_cylinder(o, d, size[p, 0], size[p, 2], tmin)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        idx = np.where(closer, p, idx).astype(np.int32)
    return t_best, idx


def inside(points, kinds, w2l, size, eps=0.0):
    """Closed-set membership of points in the union of primitives."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    occ = np.zeros(points.shape[0], dtype=bool)
    for p in range(len(kinds)):
        q = _to_local(w2l[p], points)
        if kinds[p] == KIND_BOX:
            occ |= np.all(np.abs(q) <= size[p] + eps, axis=1)
        else:
            r, h = size[p, 0], size[p, 2]
            occ |= (np.sqrt(q[:, 0] * q[:, 0] + q[:, 1] * q[:, 1]) <= r + eps) & (np.abs(q[:, 2]) <= h + eps)
    return occ


def carve(points, intr, w2c, depth, eps):
    """Occupied flags: False where any view sees the point in front of its surface.

    ``intr`` is (V, 4) = fx, fy, cx, cy; ``w2c`` is (V, 3, 4); ``depth`` is
    (V, H, W) camera-z depth with +inf for background.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    carved = np.zeros(points.shape[0], dtype=bool)
    _, H, W = depth.shape
    for v in range(intr.shape[0]):
        pc = points @ w2c[v, :, :3].T + w2c[v, :, 3]
        z = pc[:, 2]
        front = z > 0
        zs = np.where(front, z, 1.0)
        u = intr[v, 0] * pc[:, 0] / zs + intr[v, 2]
        w = intr[v, 1] * pc[:, 1] / zs + intr[v, 3]
        inb = front & (u >= 0) & (u < W) & (w >= 0) & (w < H)
        col = np.clip(np.floor(u), 0, W - 1).astype(np.int64)
        row = np.clip(np.floor(w), 0, H - 1).astype(np.int64)
        surf = depth[v, row, col]
        carved |= inb & (z < surf - eps)
    return ~carved
