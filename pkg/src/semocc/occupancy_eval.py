"""Occupancy evaluation on horizontal slices: grids, ground truth and O_acc / IE_acc / IE_rec."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import _kernels
from .camera import Intrinsics, invert_pose

DEFAULT_SLICES = (0.5, 1.0, 1.5)


@dataclass(frozen=True)
class RangeBand:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not (0 <= self.d_min < self.d_max):
            raise ValueError("need 0 <= d_min < d_max")

    @property
    def name(self) -> str:
        return f"{self.d_min:g}-{self.d_max:g}m"

    @classmethod
    def parse(cls, text: str) -> "RangeBand":
        lo, hi = text.split(":")
        return cls(float(lo), float(hi))


@dataclass
class EvalGrid:
    """Points on horizontal slices in front of a camera.

    The full lattice is ``dims = (n_slices, n_forward, n_lateral)``; ``footprint``
    marks the (forward, lateral) cells that belong to the band, and ``points``
    lists those cells for every slice, slice-major.
    """

    origin: np.ndarray  # world position of lattice index (0, 0, 0) at height 0
    forward_axis: np.ndarray
    lateral_axis: np.ndarray  # points to the camera's right
    spacing: tuple  # (forward, lateral)
    slice_heights: tuple
    dims: tuple
    footprint: np.ndarray  # (n_forward, n_lateral) bool
    band: RangeBand
    points: np.ndarray = field(repr=False, default=None)
    forward_distance: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return int(self.points.shape[0])

    @property
    def extents(self):
        """(forward, lateral) lengths spanned by the lattice."""
        return ((self.dims[1] - 1) * self.spacing[0], (self.dims[2] - 1) * self.spacing[1])

    def lattice_points(self) -> np.ndarray:
        """All lattice points, shape (n_slices, n_forward, n_lateral, 3)."""
        ns, nf, nl = self.dims
        f = np.arange(nf) * self.spacing[0]
        l = np.arange(nl) * self.spacing[1]
        up = np.array([0.0, 0.0, 1.0])
        h = np.asarray(self.slice_heights)
        return (self.origin + f[None, :, None, None] * self.forward_axis
                + l[None, None, :, None] * self.lateral_axis + h[:, None, None, None] * up)

    def scatter(self, values: np.ndarray, fill=False) -> np.ndarray:
        """Place per-point values back on the (n_slices, n_forward, n_lateral) lattice."""
        out = np.full(self.dims, fill, dtype=np.asarray(values).dtype)
        out[:, self.footprint] = np.asarray(values).reshape(len(self.slice_heights), -1)
        return out


def build_eval_grid(band: RangeBand, slice_heights=DEFAULT_SLICES, spacing: float = 0.2,
                    intrinsics: Intrinsics | None = None, pose=None, half_width: float | None = None,
                    ground_z: float = 0.0) -> EvalGrid:
    """Lattice on each slice height covering the band in front of the camera.

    The forward axis is the camera's viewing direction projected onto the
    ground. With ``half_width=None`` the lateral extent follows the horizontal
    field of view; otherwise it is a fixed half width in metres.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pose = np.asarray(pose, dtype=np.float64)
    fwd = pose[:3, 2].copy()
    fwd[2] = 0.0
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    cam = pose[:3, 3]
    if half_width is None:
        tan_l = intrinsics.cx / intrinsics.fx
        tan_r = (intrinsics.width - intrinsics.cx) / intrinsics.fx
        max_half = band.d_max * max(tan_l, tan_r)
    else:
        tan_l = tan_r = None
        max_half = float(half_width)
    n_f = int(np.floor((band.d_max - band.d_min) / spacing + 1e-9)) + 1
    J = int(np.floor(max_half / spacing + 1e-9))
    f = band.d_min + np.arange(n_f) * spacing
    l = np.arange(-J, J + 1) * spacing
    F, L = np.meshgrid(f, l, indexing="ij")
    if half_width is None:
        foot = (L <= F * tan_r + 1e-9) & (-L <= F * tan_l + 1e-9)
    else:
        foot = np.abs(L) <= half_width + 1e-9
    origin = np.array([cam[0], cam[1], ground_z]) + band.d_min * fwd - J * spacing * right
    grid = EvalGrid(origin, fwd, right, (spacing, spacing), tuple(float(h) for h in slice_heights),
                    (len(slice_heights), n_f, 2 * J + 1), foot, band)
    pts = grid.lattice_points()[:, foot].reshape(-1, 3)
    # band membership by camera-frame forward distance
    zc = (pts - cam) @ pose[:3, 2]
    keep = (zc >= band.d_min - 1e-9) & (zc <= band.d_max + 1e-9)
    if not keep.all():
        foot = foot.copy()
        fz = zc.reshape(len(slice_heights), -1)
        ok = np.all((fz >= band.d_min - 1e-9) & (fz <= band.d_max + 1e-9), axis=0)
        idx = np.argwhere(foot)
        foot[tuple(idx[~ok].T)] = False
        grid.footprint = foot
        pts = grid.lattice_points()[:, foot].reshape(-1, 3)
        zc = (pts - cam) @ pose[:3, 2]
    if len(pts) == 0:
        raise ValueError("evaluation grid is empty")
    grid.points = pts
    grid.forward_distance = zc
    return grid


# ------------------------------------------------------------------ metrics

@dataclass
class BandMetrics:
    band: str
    o_acc: float | None
    ie_acc: float | None
    ie_rec: float | None
    counts: dict

    def recompute(self):
        c = self.counts
        return (_ratio(c["correct"], c["total"]), _ratio(c["invisible_correct"], c["invisible"]),
                _ratio(c["ie_pred_empty"], c["invisible_empty"]))

    def exact(self):
        """Metrics as exact fractions (None when not applicable)."""
        c = self.counts
        f = lambda a, b: Fraction(a, b) if b else None
        return (f(c["correct"], c["total"]), f(c["invisible_correct"], c["invisible"]),
                f(c["ie_pred_empty"], c["invisible_empty"]))


def _ratio(a: int, b: int):
    return a / b if b else None


def compute_metrics(pred, gt, visible, band_mask=None, band_name: str = "all") -> BandMetrics:
    """O_acc over the band, IE_acc over invisible points, IE_rec over invisible-and-empty points.

    A metric with an empty denominator is None (not applicable).
    """
    pred = np.asarray(pred, dtype=bool).reshape(-1)
    gt = np.asarray(gt, dtype=bool).reshape(-1)
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    if not (pred.shape == gt.shape == vis.shape):
        raise ValueError("pred, gt and visible must have equal lengths")
    if band_mask is not None:
        m = np.asarray(band_mask, dtype=bool).reshape(-1)
        pred, gt, vis = pred[m], gt[m], vis[m]
    inv = ~vis
    correct = pred == gt
    counts = {
        "total": int(pred.size),
        "correct": int(correct.sum()),
        "visible": int(vis.sum()),
        "invisible": int(inv.sum()),
        "invisible_correct": int((correct & inv).sum()),
        "invisible_empty": int((inv & ~gt).sum()),
        "ie_pred_empty": int((inv & ~gt & ~pred).sum()),
        "gt_occupied": int(gt.sum()),
        "tp": int((pred & gt).sum()),
        "fp": int((pred & ~gt).sum()),
        "tn": int((~pred & ~gt).sum()),
        "fn": int((~pred & gt).sum()),
    }
    bm = BandMetrics(band_name, None, None, None, counts)
    bm.o_acc, bm.ie_acc, bm.ie_rec = bm.recompute()
    return bm


@dataclass
class MetricReport:
    bands: dict  # name -> BandMetrics
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"bands": {k: asdict(v) for k, v in self.bands.items()}, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls({k: BandMetrics(**v) for k, v in d["bands"].items()}, d.get("meta", {}))


def aggregate_reports(reports) -> MetricReport:
    """Count-weighted aggregate: metrics recomputed from summed confusion counts."""
    bands = {}
    for r in reports:
        for name, bm in r.bands.items():
            acc = bands.setdefault(name, {k: 0 for k in bm.counts})
            for k, v in bm.counts.items():
                acc[k] += v
    out = {}
    for name, counts in bands.items():
        bm = BandMetrics(name, None, None, None, counts)
        bm.o_acc, bm.ie_acc, bm.ie_rec = bm.recompute()
        out[name] = bm
    return MetricReport(out, {"aggregate_of": len(reports)})


# ------------------------------------------------------------------ prediction / ground truth

def predict_density(model, view, grid, *, z_near=3.0, z_far=50.0, seed: int = 0,
                    chunk_size: int = 2048) -> np.ndarray:
    from .camera import FrustumBounds
    bounds = FrustumBounds.for_intrinsics(view.intrinsics, z_near, z_far)
    model.eval()
    with torch.no_grad():
        ctx = model.encode(view, bounds)
        pts = torch.as_tensor(getattr(grid, "points", grid), dtype=model.dtype)
        sigma = model.density_chunks(pts, ctx, seed=seed, chunk_size=chunk_size)
    if not torch.isfinite(sigma).all():
        raise FloatingPointError("non-finite density on the evaluation grid")
    return sigma.numpy()


def predict_occupancy(checkpoint, view, grid, tau: float = 0.5, seed: int = 0) -> np.ndarray:
    """Run the trained field on every grid point and threshold sigma > tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    model = checkpoint.to_model() if hasattr(checkpoint, "to_model") else checkpoint
    cfg = getattr(checkpoint, "config", None)
    kw = {}
    if cfg is not None:
        kw = dict(z_near=cfg.z_near, z_far=cfg.z_far, chunk_size=cfg.chunk_size)
    sigma = predict_density(model, view, grid, seed=seed, **kw)
    return sigma > tau


def gt_from_depth_surfaces(views, grid, eps: float) -> np.ndarray:
    """Free-space carving: a point is empty if any view sees it in front of its depth surface."""
    if not views:
        raise ValueError("need at least one view")
    pts = np.asarray(getattr(grid, "points", grid), dtype=np.float64).reshape(-1, 3)
    shapes = {v.depth.shape for v in views}
    out = np.ones(len(pts), dtype=bool)
    for shape in shapes:
        group = [v for v in views if v.depth.shape == shape]
        intr = np.array([[v.intrinsics.fx, v.intrinsics.fy, v.intrinsics.cx, v.intrinsics.cy]
                         for v in group])
        w2c = np.stack([invert_pose(np.asarray(v.pose))[:3] for v in group])
        depth = np.stack([np.asarray(v.depth, dtype=np.float64) for v in group])
        out &= _kernels.carve(pts, intr, w2c, depth, eps)
    return out


# ------------------------------------------------------------------ export

_GRID_MAGIC = b"SOCCGRD1"


def save_grid(path, grid: EvalGrid, occupancy) -> None:
    """Header (origin, axes, spacing, slice heights, dims) + packed occupancy + packed footprint."""
    occ = grid.scatter(np.asarray(occupancy, dtype=bool), fill=False)
    header = {
        "origin": [float(x) for x in grid.origin],
        "forward_axis": [float(x) for x in grid.forward_axis],
        "lateral_axis": [float(x) for x in grid.lateral_axis],
        "spacing": list(grid.spacing),
        "slice_heights": list(grid.slice_heights),
        "dims": list(grid.dims),
        "band": [grid.band.d_min, grid.band.d_max],
        "layout": "slice, forward, lateral; row-major; numpy packbits big-endian",
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_GRID_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(np.packbits(occ.reshape(-1)).tobytes())
        f.write(np.packbits(grid.footprint.reshape(-1)).tobytes())


def load_grid(path):
    """Return (header, occupancy lattice, footprint)."""
    data = Path(path).read_bytes()
    if data[:8] != _GRID_MAGIC:
        raise ValueError(f"{path}: not an occupancy grid file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    dims = tuple(header["dims"])
    total = int(np.prod(dims))
    nbytes = (total + 7) // 8
    body = np.frombuffer(data[12 + n:], dtype=np.uint8)
    occ = np.unpackbits(body[:nbytes])[:total].astype(bool).reshape(dims)
    ftotal = dims[1] * dims[2]
    foot = np.unpackbits(body[nbytes:])[:ftotal].astype(bool).reshape(dims[1:])
    return header, occ, foot


def save_point_cloud(path, grid: EvalGrid, occupancy) -> None:
    pts = grid.points[np.asarray(occupancy, dtype=bool)]
    with open(path, "w") as f:
        f.write("# x y z (world, metres) of occupied grid points\n")
        for p in pts:
            f.write(f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f}\n")
