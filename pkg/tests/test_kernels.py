import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semocc import _kernels
from semocc.camera import invert_pose

IMPLS = _kernels.implementations()


def _random_tables(rng, n):
    kinds = rng.integers(0, 2, n).astype(np.int32)
    w2l, size = [], []
    for _ in range(n):
        yaw = rng.uniform(-np.pi, np.pi)
        pose = np.eye(4)
        pose[:2, :2] = [[np.cos(yaw), -np.sin(yaw)], [np.sin(yaw), np.cos(yaw)]]
        pose[:3, 3] = rng.uniform([-10, -10, 0], [10, 10, 3])
        w2l.append(invert_pose(pose)[:3])
        size.append(rng.uniform(0.2, 2.0, 3))
    size = np.array(size)
    size[kinds == 1, 1] = size[kinds == 1, 0]
    return kinds, np.ascontiguousarray(w2l), np.ascontiguousarray(size)


def test_backend_reported():
    assert _kernels.BACKEND in ("cython", "python")
    assert "python" in IMPLS


def test_pure_python_switch():
    code = "from semocc import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, SEMOCC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"


@pytest.mark.skipif("cython" not in IMPLS, reason="compiled extension not built")
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_backend_parity(seed):
    rng = np.random.default_rng(seed)
    kinds, w2l, size = _random_tables(rng, 6)
    o = rng.uniform(-15, 15, (300, 3))
    d = rng.standard_normal((300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    py, cy = IMPLS["python"], IMPLS["cython"]
    t1, i1 = py.raycast(o, d, kinds, w2l, size, 0.0)
    t2, i2 = cy.raycast(o, d, kinds, w2l, size, 0.0)
    assert np.array_equal(i1, i2)
    fin = np.isfinite(t1)
    assert np.array_equal(fin, np.isfinite(t2))
    assert np.allclose(t1[fin], t2[fin], rtol=0, atol=1e-9)
    pts = rng.uniform(-12, 12, (500, 3))
    assert np.array_equal(py.inside(pts, kinds, w2l, size, 1e-9),
                          cy.inside(pts, kinds, w2l, size, 1e-9))
    intr = np.array([[20.0, 20.0, 16.0, 8.0], [20.0, 20.0, 16.0, 8.0]])
    w2c = np.stack([np.eye(4)[:3], invert_pose(np.diag([1.0, 1, 1, 1]) @ _shift(1.0))[:3]])
    depth = rng.uniform(2, 20, (2, 16, 32))
    depth[0, 0, :5] = np.inf
    assert np.array_equal(py.carve(pts, intr, w2c, depth, 0.1),
                          cy.carve(pts, intr, w2c, depth, 0.1))


def _shift(x):
    p = np.eye(4)
    p[0, 3] = x
    return p


def test_raycast_unit_box():
    kinds = np.array([_kernels.KIND_BOX], np.int32)
    w2l = np.eye(4)[None, :3].copy()
    size = np.array([[1.0, 1.0, 1.0]])
    for name, impl in IMPLS.items():
        t, idx = impl.raycast(np.array([[-5.0, 0, 0]]), np.array([[1.0, 0, 0]]), kinds, w2l, size,
                              0.0)
        assert idx[0] == 0 and abs(t[0] - 4.0) < 1e-12, name
        t, idx = impl.raycast(np.array([[-5.0, 3, 0]]), np.array([[1.0, 0, 0]]), kinds, w2l, size,
                              0.0)
        assert idx[0] == -1 and np.isinf(t[0]), name


def test_raycast_cylinder():
    kinds = np.array([_kernels.KIND_CYLINDER], np.int32)
    w2l = np.eye(4)[None, :3].copy()
    size = np.array([[0.5, 0.5, 1.0]])
    for impl in IMPLS.values():
        t, idx = impl.raycast(np.array([[-5.0, 0, 0]]), np.array([[1.0, 0, 0]]), kinds, w2l, size,
                              0.0)
        assert abs(t[0] - 4.5) < 1e-12
        t, idx = impl.raycast(np.array([[0.0, 0, 5.0]]), np.array([[0.0, 0, -1.0]]), kinds, w2l,
                              size, 0.0)
        assert abs(t[0] - 4.0) < 1e-12


def test_carve_rule():
    intr = np.array([[10.0, 10.0, 5.0, 5.0]])
    w2c = np.eye(4)[None, :3].copy()
    depth = np.full((1, 10, 10), 10.0)
    pts = np.array([[0, 0, 5.0], [0, 0, 10.0], [0, 0, 15.0], [0, 0, -1.0], [100, 0, 5.0]])
    for impl in IMPLS.values():
        occ = impl.carve(pts, intr, w2c, depth, 0.1)
        assert occ.tolist() == [False, True, True, True, True]
