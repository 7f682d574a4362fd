# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels; same contracts as ``_geom_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, floor, INFINITY

cnp.import_array()

cdef int KIND_BOX = 0


cdef inline double _ray_box(double ox, double oy, double oz, double dx, double dy, double dz,
                            double hx, double hy, double hz, double tmin) nogil:
    cdef double o[3]
    cdef double d[3]
    cdef double hh[3]
    cdef double t_enter = -INFINITY, t_exit = INFINITY, t1, t2, lo, hi
    cdef int a
    o[0] = ox; o[1] = oy; o[2] = oz
    d[0] = dx; d[1] = dy; d[2] = dz
    hh[0] = hx; hh[1] = hy; hh[2] = hz
    for a in range(3):
        if fabs(d[a]) < 1e-15:
            if o[a] < -hh[a] or o[a] > hh[a]:
                return INFINITY
            continue
        t1 = (-hh[a] - o[a]) / d[a]
        t2 = (hh[a] - o[a]) / d[a]
        lo = t1 if t1 < t2 else t2
        hi = t2 if t1 < t2 else t1
        if lo > t_enter:
            t_enter = lo
        if hi < t_exit:
            t_exit = hi
    if t_enter > t_exit or t_exit < tmin:
        return INFINITY
    return t_enter if t_enter >= tmin else t_exit


cdef inline double _ray_cylinder(double ox, double oy, double oz, double dx, double dy, double dz,
                                 double r, double h, double tmin) nogil:
    cdef double best = INFINITY
    cdef double a = dx * dx + dy * dy
    cdef double b = ox * dx + oy * dy
    cdef double c = ox * ox + oy * oy - r * r
    cdef double disc = b * b - a * c
    cdef double sq, t, z, x, y, zc
    cdef int k
    if a > 1e-30 and disc >= 0:
        sq = sqrt(disc)
        for k in range(2):
            t = (-b - sq) / a if k == 0 else (-b + sq) / a
            z = oz + t * dz
            if t >= tmin and fabs(z) <= h and t < best:
                best = t
    if fabs(dz) >= 1e-15:
        for k in range(2):
            zc = -h if k == 0 else h
            t = (zc - oz) / dz
            x = ox + t * dx
            y = oy + t * dy
            if t >= tmin and x * x + y * y <= r * r and t < best:
                best = t
    return best


def raycast(origins, dirs, kinds, w2l, size, double tmin=0.0):
    cdef double[:, ::1] O = np.ascontiguousarray(origins, dtype=np.float64)
    cdef double[:, ::1] D = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef int[::1] K = np.ascontiguousarray(kinds, dtype=np.int32)
    cdef double[:, :, ::1] M = np.ascontiguousarray(w2l, dtype=np.float64)
    cdef double[:, ::1] S = np.ascontiguousarray(size, dtype=np.float64)
    cdef Py_ssize_t n = O.shape[0], P = K.shape[0], i, p
    t_out = np.full(n, np.inf)
    idx_out = np.full(n, -1, dtype=np.int32)
    cdef double[::1] T = t_out
    cdef int[::1] I = idx_out
    cdef double ox, oy, oz, dx, dy, dz, lx, ly, lz, ex, ey, ez, t
    with nogil:
        for i in range(n):
            for p in range(P):
                ox = O[i, 0]; oy = O[i, 1]; oz = O[i, 2]
                dx = D[i, 0]; dy = D[i, 1]; dz = D[i, 2]
                lx = M[p, 0, 0] * ox + M[p, 0, 1] * oy + M[p, 0, 2] * oz + M[p, 0, 3]
                ly = M[p, 1, 0] * ox + M[p, 1, 1] * oy + M[p, 1, 2] * oz + M[p, 1, 3]
                lz = M[p, 2, 0] * ox + M[p, 2, 1] * oy + M[p, 2, 2] * oz + M[p, 2, 3]
                ex = M[p, 0, 0] * dx + M[p, 0, 1] * dy + M[p, 0, 2] * dz
                ey = M[p, 1, 0] * dx + M[p, 1, 1] * dy + M[p, 1, 2] * dz
                ez = M[p, 2, 0] * dx + M[p, 2, 1] * dy + M[p, 2, 2] * dz
                if K[p] == KIND_BOX:
                    t = _ray_box(lx, ly, lz, ex, ey, ez, S[p, 0], S[p, 1], S[p, 2], tmin)
                else:
                    t = _ray_cylinder(lx, ly, lz, ex, ey, ez, S[p, 0], S[p, 2], tmin)
                if t < T[i]:
                    T[i] = t
                    I[i] = <int>p
    return t_out, idx_out


def inside(points, kinds, w2l, size, double eps=0.0):
    cdef double[:, ::1] X = np.ascontiguousarray(points, dtype=np.float64)
    cdef int[::1] K = np.ascontiguousarray(kinds, dtype=np.int32)
    cdef double[:, :, ::1] M = np.ascontiguousarray(w2l, dtype=np.float64)
    cdef double[:, ::1] S = np.ascontiguousarray(size, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], P = K.shape[0], i, p
    out = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] occ = out
    cdef double x, y, z, lx, ly, lz, r
    with nogil:
        for i in range(n):
            x = X[i, 0]; y = X[i, 1]; z = X[i, 2]
            for p in range(P):
                lx = M[p, 0, 0] * x + M[p, 0, 1] * y + M[p, 0, 2] * z + M[p, 0, 3]
                ly = M[p, 1, 0] * x + M[p, 1, 1] * y + M[p, 1, 2] * z + M[p, 1, 3]
                lz = M[p, 2, 0] * x + M[p, 2, 1] * y + M[p, 2, 2] * z + M[p, 2, 3]
                if K[p] == KIND_BOX:
                    if fabs(lx) <= S[p, 0] + eps and fabs(ly) <= S[p, 1] + eps and fabs(lz) <= S[p, 2] + eps:
                        occ[i] = 1
                        break
                else:
                    r = S[p, 0] + eps
                    if sqrt(lx * lx + ly * ly) <= r and fabs(lz) <= S[p, 2] + eps:
                        occ[i] = 1
                        break
    return out.astype(bool)


def carve(points, intr, w2c, depth, double eps):
    cdef double[:, ::1] X = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(intr, dtype=np.float64)
    cdef double[:, :, ::1] M = np.ascontiguousarray(w2c, dtype=np.float64)
    cdef double[:, :, ::1] Dm = np.ascontiguousarray(depth, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], V = C.shape[0], H = Dm.shape[1], W = Dm.shape[2], i, v
    cdef Py_ssize_t row, col
    out = np.ones(n, dtype=np.uint8)
    cdef unsigned char[::1] occ = out
    cdef double x, y, z, px, py, pz, u, w
    with nogil:
        for i in range(n):
            x = X[i, 0]; y = X[i, 1]; z = X[i, 2]
            for v in range(V):
                pz = M[v, 2, 0] * x + M[v, 2, 1] * y + M[v, 2, 2] * z + M[v, 2, 3]
                if pz <= 0:
                    continue
                px = M[v, 0, 0] * x + M[v, 0, 1] * y + M[v, 0, 2] * z + M[v, 0, 3]
                py = M[v, 1, 0] * x + M[v, 1, 1] * y + M[v, 1, 2] * z + M[v, 1, 3]
                u = C[v, 0] * px / pz + C[v, 2]
                w = C[v, 1] * py / pz + C[v, 3]
                if u < 0 or u >= W or w < 0 or w >= H:
                    continue
                col = <Py_ssize_t>floor(u)
                row = <Py_ssize_t>floor(w)
                if pz < Dm[v, row, col] - eps:
                    occ[i] = 0
                    break
    return out.astype(bool)
