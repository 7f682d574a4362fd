"""Procedural street-like scenes, posed renders and exact ground truth.

World frame: x forward, y left, z up, ground surface at z = 0. Scenes are a
ground slab plus boxes (cars, trucks, buildings) and upright cylinders (poles,
vegetation). Views are ray cast with Lambertian shading under a fixed light and
a procedural albedo texture, so colours are view independent.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .camera import Intrinsics, backproject_ray, invert_pose, look_at, pixel_centers, project

GROUND, BOX, CYLINDER = "ground_plane", "box", "cylinder"
DEFAULT_CATEGORIES = ("road", "car", "truck", "building", "pole", "vegetation", "sky")
SKY_COLOR = np.array([0.55, 0.70, 0.90])
LIGHT_DIR = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])

# category -> (kind, size ranges, base albedo, sampling weight)
_OBJECT_TABLE = {
    "car": (BOX, ((3.6, 4.6), (1.6, 1.9), (1.4, 1.7)), (0.75, 0.15, 0.12), 0.45),
    "truck": (BOX, ((6.0, 8.0), (2.2, 2.5), (2.5, 3.2)), (0.85, 0.75, 0.30), 0.15),
    "building": (BOX, ((5.0, 9.0), (4.0, 7.0), (4.0, 7.0)), (0.60, 0.55, 0.50), 0.10),
    "pole": (CYLINDER, ((0.10, 0.20), (3.0, 5.0)), (0.35, 0.35, 0.40), 0.15),
    "vegetation": (CYLINDER, ((0.6, 1.2), (1.5, 3.0)), (0.20, 0.55, 0.20), 0.15),
}
_ROAD_ALBEDO = (0.42, 0.42, 0.45)


class InfeasibleSpecError(RuntimeError):
    """The rejection sampler could not satisfy the generation constraints."""


@dataclass
class ScenePrimitive:
    kind: str
    pose: np.ndarray  # local-to-world 4x4, origin at the primitive centre
    size: tuple  # box/ground: full (length, width, height); cylinder: (radius, height)
    category_id: int
    albedo: tuple

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.size = tuple(float(s) for s in self.size)
        if self.kind not in (GROUND, BOX, CYLINDER):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if min(self.size) <= 0:
            raise ValueError("primitive extents must be strictly positive")

    @property
    def half_extents(self) -> np.ndarray:
        if self.kind == CYLINDER:
            r, h = self.size
            return np.array([r, r, h / 2])
        return np.asarray(self.size) / 2

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pose": self.pose.tolist(), "size": list(self.size),
                "category_id": int(self.category_id), "albedo": [float(a) for a in self.albedo]}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePrimitive":
        return cls(d["kind"], np.array(d["pose"]), tuple(d["size"]), int(d["category_id"]),
                   tuple(d["albedo"]))


@dataclass
class RigCamera:
    name: str
    intrinsics: Intrinsics
    pose: np.ndarray

    def to_dict(self) -> dict:
        return {"name": self.name, "intrinsics": self.intrinsics.to_dict(),
                "pose": np.asarray(self.pose).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigCamera":
        return cls(d["name"], Intrinsics.from_dict(d["intrinsics"]), np.array(d["pose"]))


@dataclass
class RigSpec:
    width: int = 160
    height: int = 48
    focal: float = 80.0
    camera_height: float = 1.5
    stereo_baseline: float = 0.54
    side_yaw_deg: float = 60.0
    future_offset: float = 2.0  # forward displacement of the second timestep

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.width / 2, self.height / 2,
                          self.width, self.height)


@dataclass
class GenerationSpec:
    n_objects: tuple = (4, 8)
    category_names: tuple = DEFAULT_CATEGORIES
    forward_range: tuple = (6.0, 30.0)
    lateral_range: tuple = (-9.0, 9.0)
    ground_half_extent: float = 120.0
    ground_thickness: float = 0.5
    max_yaw: float = 0.35
    require_occlusion: bool = True
    max_retries: int = 200
    rig: RigSpec = field(default_factory=RigSpec)

    def __post_init__(self):
        self.n_objects = tuple(int(n) for n in self.n_objects)
        self.category_names = tuple(self.category_names)
        if isinstance(self.rig, dict):
            self.rig = RigSpec(**self.rig)
        if len(self.category_names) < 2:
            raise ValueError("need at least two categories")
        if self.n_objects[0] < 0 or self.n_objects[0] > self.n_objects[1]:
            raise ValueError("invalid object-count range")

    @property
    def num_categories(self) -> int:
        return len(self.category_names)

    @property
    def sky_id(self) -> int:
        return self.num_categories - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_objects"] = list(self.n_objects)
        d["category_names"] = list(self.category_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown generation-spec fields: {sorted(unknown)}")
        return cls(**known)


@dataclass
class SyntheticScene:
    primitives: list
    seed: int
    bounds: np.ndarray  # (2, 3) min / max corner
    category_names: tuple
    rig: list = field(default_factory=list)
    spec: GenerationSpec | None = None

    @property
    def sky_id(self) -> int:
        return len(self.category_names) - 1

    @property
    def reference(self) -> RigCamera:
        return self.rig[0]

    def packed(self):
        """Kernel tables (kinds, world-to-local, half extents)."""
        kinds = np.array([_kernels.KIND_CYLINDER if p.kind == CYLINDER else _kernels.KIND_BOX
                          for p in self.primitives], dtype=np.int32)
        w2l = np.stack([invert_pose(p.pose)[:3] for p in self.primitives]) if self.primitives \
            else np.zeros((0, 3, 4))
        size = np.stack([p.half_extents for p in self.primitives]) if self.primitives \
            else np.zeros((0, 3))
        return kinds, np.ascontiguousarray(w2l), np.ascontiguousarray(size)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "bounds": np.asarray(self.bounds).tolist(),
            "category_names": list(self.category_names),
            "primitives": [p.to_dict() for p in self.primitives],
            "rig": [c.to_dict() for c in self.rig],
            "spec": self.spec.to_dict() if self.spec is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(
            primitives=[ScenePrimitive.from_dict(p) for p in d["primitives"]],
            seed=int(d["seed"]),
            bounds=np.array(d["bounds"]),
            category_names=tuple(d["category_names"]),
            rig=[RigCamera.from_dict(c) for c in d.get("rig", [])],
            spec=GenerationSpec.from_dict(d["spec"]) if d.get("spec") else None,
        )


@dataclass
class CameraView:
    intrinsics: Intrinsics
    pose: np.ndarray
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) camera z, +inf where nothing is hit
    semantics: np.ndarray  # (H, W) category ids
    name: str = ""


def _yaw_pose(center, yaw) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    pose = np.eye(4)
    pose[:3, :3] = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    pose[:3, 3] = center
    return pose


def build_rig(rig: RigSpec) -> list:
    """Eight cameras: stereo pair plus two side cameras, at two timesteps.

    The first camera (left stereo, first timestep) is the reference view.
    """
    K = rig.intrinsics()
    h = rig.camera_height
    cams = []
    for step, x0 in enumerate((0.0, rig.future_offset)):
        yaw = math.radians(rig.side_yaw_deg)
        placements = [
            ("left", (x0, 0.0, h), 0.0),
            ("right", (x0, -rig.stereo_baseline, h), 0.0),
            ("side_left", (x0 + 0.3, 0.6, h), yaw),
            ("side_right", (x0 + 0.3, -rig.stereo_baseline - 0.6, h), -yaw),
        ]
        for name, pos, y in placements:
            pos = np.asarray(pos)
            target = pos + np.array([math.cos(y), math.sin(y), 0.0])
            cams.append(RigCamera(f"t{step}_{name}", K, look_at(pos, target)))
    return cams


def _object_categories(spec: GenerationSpec) -> list:
    return [c for c in spec.category_names[1:-1] if c in _OBJECT_TABLE]


def _sample_object(rng, spec: GenerationSpec, cats: list):
    weights = np.array([_OBJECT_TABLE[c][3] for c in cats])
    cat = cats[rng.choice(len(cats), p=weights / weights.sum())]
    kind, ranges, albedo, _ = _OBJECT_TABLE[cat]
    dims = tuple(rng.uniform(lo, hi) for lo, hi in ranges)
    height = dims[-1]
    x = rng.uniform(*spec.forward_range)
    y = rng.uniform(*spec.lateral_range)
    yaw = rng.uniform(-spec.max_yaw, spec.max_yaw) if kind == BOX else 0.0
    jitter = rng.uniform(-0.08, 0.08, size=3)
    albedo = tuple(float(np.clip(a + j, 0.05, 0.95)) for a, j in zip(albedo, jitter))
    prim = ScenePrimitive(kind, _yaw_pose((x, y, height / 2), yaw), dims,
                          spec.category_names.index(cat), albedo)
    radius = math.hypot(dims[0], dims[1]) / 2 if kind == BOX else dims[0]
    return prim, radius


def _ground(spec: GenerationSpec) -> ScenePrimitive:
    e, t = spec.ground_half_extent, spec.ground_thickness
    return ScenePrimitive(GROUND, _yaw_pose((0.0, 0.0, -t / 2), 0.0), (2 * e, 2 * e, t),
                          spec.category_names.index("road") if "road" in spec.category_names else 0,
                          _ROAD_ALBEDO)


def _occluded_objects(scene: SyntheticScene) -> list:
    """Indices of objects partly or fully hidden by other objects in the reference view."""
    cam = scene.reference
    rays = backproject_ray(pixel_centers(cam.intrinsics).reshape(-1, 2), cam.intrinsics, cam.pose)
    kinds, w2l, size = scene.packed()
    _, idx = _kernels.raycast(rays.origin, rays.direction, kinds, w2l, size)
    out = []
    for p in range(1, len(scene.primitives)):
        _, alone = _kernels.raycast(rays.origin, rays.direction, kinds[p:p + 1], w2l[p:p + 1],
                                    size[p:p + 1])
        n_alone = int((alone == 0).sum())
        if n_alone > 0 and int((idx == p).sum()) < n_alone:
            out.append(p)
    return out


def build_scene(seed: int, spec: GenerationSpec | None = None) -> SyntheticScene:
    """Deterministic scene for ``(seed, spec)``.

    Objects are rejection sampled without overlap; when ``spec.require_occlusion``
    is set (and objects are requested) the whole layout is resampled until at
    least one object is occluded in the reference view.
    """
    spec = spec or GenerationSpec()
    rng = np.random.default_rng(seed)
    cats = _object_categories(spec)
    if spec.n_objects[1] > 0 and not cats:
        raise InfeasibleSpecError("no object categories available in category_names")
    rig = build_rig(spec.rig)
    cam_xy = np.array([c.pose[:2, 3] for c in rig])
    need_occlusion = spec.require_occlusion and spec.n_objects[1] > 0
    e = spec.ground_half_extent
    for _ in range(spec.max_retries):
        n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
        prims, placed = [_ground(spec)], []
        for _obj in range(n):
            for _try in range(50):
                prim, radius = _sample_object(rng, spec, cats)
                xy = prim.pose[:2, 3]
                if any(np.linalg.norm(xy - q) < radius + r + 0.5 for q, r in placed):
                    continue
                if np.min(np.linalg.norm(cam_xy - xy, axis=1)) < radius + 1.0:
                    continue
                prims.append(prim)
                placed.append((xy, radius))
                break
        top = max([p.pose[2, 3] + p.half_extents[2] for p in prims[1:]], default=1.0)
        bounds = np.array([[-e, -e, -spec.ground_thickness], [e, e, max(top, 1.0)]])
        scene = SyntheticScene(prims, int(seed), bounds, spec.category_names, rig, spec)
        if not need_occlusion or (len(prims) > 1 and _occluded_objects(scene)):
            return scene
    raise InfeasibleSpecError(f"no valid scene after {spec.max_retries} attempts")


def _texture(points: np.ndarray) -> np.ndarray:
    s = np.sin(2 * np.pi * points[:, 0] / 2.7) * np.sin(2 * np.pi * points[:, 1] / 3.3) \
        * np.sin(2 * np.pi * points[:, 2] / 2.4 + 0.3)
    c = np.sin(2 * np.pi * (points[:, 0] + points[:, 1]) / 9.1)
    return 0.72 + 0.18 * s + 0.10 * c


def _normals(prim: ScenePrimitive, local: np.ndarray) -> np.ndarray:
    half = prim.half_extents
    n = np.zeros_like(local)
    if prim.kind == CYLINDER:
        radial = np.hypot(local[:, 0], local[:, 1]) / half[0]
        axial = np.abs(local[:, 2]) / half[2]
        cap = axial >= radial
        n[cap, 2] = np.sign(local[cap, 2])
        side = ~cap
        n[side, 0] = local[side, 0]
        n[side, 1] = local[side, 1]
        n[side] /= np.maximum(np.linalg.norm(n[side], axis=1, keepdims=True), 1e-12)
    else:
        ratio = np.abs(local) / half
        axis = np.argmax(ratio, axis=1)
        n[np.arange(len(local)), axis] = np.sign(local[np.arange(len(local)), axis])
    return n @ prim.pose[:3, :3].T


def cast_rays(scene: SyntheticScene, origins: np.ndarray, directions: np.ndarray):
    """First-hit distance and primitive index per ray."""
    kinds, w2l, size = scene.packed()
    return _kernels.raycast(origins, directions, kinds, w2l, size)


def _shade(scene: SyntheticScene, origins, dirs):
    """First hit along each ray: (t, primitive index, colour)."""
    t, idx = cast_rays(scene, origins, dirs)
    hit = idx >= 0
    color = np.tile(SKY_COLOR, (len(t), 1))
    points = origins + dirs * np.where(hit, t, 0.0)[:, None]
    for p, prim in enumerate(scene.primitives):
        m = idx == p
        if not m.any():
            continue
        local = (points[m] - prim.pose[:3, 3]) @ prim.pose[:3, :3]
        normals = _normals(prim, local)
        shade = 0.35 + 0.65 * np.clip(normals @ LIGHT_DIR, 0.0, None)
        tex = _texture(points[m] if prim.kind == GROUND else local)
        color[m] = np.asarray(prim.albedo)[None] * (tex * shade)[:, None]
    return t, idx, np.clip(color, 0, 1)


def render_view(scene: SyntheticScene, intrinsics: Intrinsics, pose, name: str = "",
                supersample: int = 4) -> CameraView:
    """Render colour, camera-z depth and semantics.

    Depth and semantics come from the ray through each pixel centre; colour is
    the box-filtered mean of ``supersample``^2 sub-pixel rays, which keeps
    distant texture from aliasing into noise.
    """
    pose = np.asarray(pose, dtype=np.float64)
    H, W = intrinsics.height, intrinsics.width
    rays = backproject_ray(pixel_centers(intrinsics).reshape(-1, 2), intrinsics, pose)
    t, idx, color = _shade(scene, rays.origin, rays.direction)
    hit = idx >= 0
    depth = np.where(hit, t * rays.z_per_unit, np.inf)
    sem = np.where(hit, 0, scene.sky_id).astype(np.int32)
    for p, prim in enumerate(scene.primitives):
        sem[idx == p] = prim.category_id
    if supersample > 1:
        n = int(supersample)
        off = (np.arange(n) + 0.5) / n - 0.5
        ox, oy = np.meshgrid(off, off)
        sub = pixel_centers(intrinsics).reshape(-1, 1, 2) + np.stack([ox, oy], -1).reshape(1, -1, 2)
        sr = backproject_ray(sub.reshape(-1, 2), intrinsics, pose)
        color = _shade(scene, sr.origin, sr.direction)[2].reshape(H * W, n * n, 3).mean(1)
    return CameraView(intrinsics, pose, color.reshape(H, W, 3), depth.reshape(H, W),
                      sem.reshape(H, W), name)


def render_rig(scene: SyntheticScene) -> list:
    return [render_view(scene, c.intrinsics, c.pose, c.name) for c in scene.rig]


def coverage_views(scene: SyntheticScene, points, altitude: float = 200.0, tile: float = 20.0,
                   stride: float = 10.0, resolution: int = 400) -> list:
    """Tiled top-down depth views over the bounding box of ``points``.

    High cameras with narrow fields of view look straight down, so their rays
    are nearly vertical and reach every empty point not under an overhang.
    They stand in for sweeps accumulated along a trajectory when building
    carving ground truth. Colour is not supersampled.
    """
    pts = _points(points)
    f = resolution * altitude / tile
    c = resolution / 2
    K = Intrinsics(f, f, c, c, resolution, resolution)
    # camera x = world x, camera z = world down
    R = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]).T
    lo, hi = pts[:, :2].min(0), pts[:, :2].max(0)
    xs = np.arange(lo[0], hi[0] + stride, stride)
    ys = np.arange(lo[1], hi[1] + stride, stride)
    views = []
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            pose = np.eye(4)
            pose[:3, :3] = R
            pose[:3, 3] = (x, y, altitude)
            views.append(render_view(scene, K, pose, f"cover_{i:02d}_{j:02d}", supersample=1))
    return views


def _points(grid) -> np.ndarray:
    pts = getattr(grid, "points", grid)
    return np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 3))


def gt_occupancy(scene: SyntheticScene, grid, tol: float = 1e-9) -> np.ndarray:
    """True where a point is inside or on any primitive (closed sets).

    ``tol`` absorbs rounding in the world-to-local transform so that points
    constructed exactly on a face count as occupied.
    """
    kinds, w2l, size = scene.packed()
    return _kernels.inside(_points(grid), kinds, w2l, size, tol)


def visibility_mask(scene: SyntheticScene, intrinsics: Intrinsics, pose, grid,
                    eps_vis: float) -> np.ndarray:
    """True for points the camera observes: in frustum and not behind the first surface."""
    pts = _points(grid)
    pose = np.asarray(pose, dtype=np.float64)
    pix, z = project(pts, intrinsics, pose, strict=False)
    inb = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < intrinsics.width) \
        & (pix[:, 1] >= 0) & (pix[:, 1] < intrinsics.height)
    origin = pose[:3, 3]
    dirs = pts - origin
    dist = np.linalg.norm(dirs, axis=1)
    dirs = dirs / np.maximum(dist, 1e-12)[:, None]
    t, _ = cast_rays(scene, np.broadcast_to(origin, pts.shape), dirs)
    z_per_unit = dirs @ pose[:3, 2]
    surf = t * z_per_unit
    return inb & (z <= surf + eps_vis)


# --------------------------------------------------------------------------- I/O

def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_view(view: CameraView, directory: Path) -> dict:
    """Write colour PNG, float32 depth TIFF and semantics PNG; return manifest entry."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.clip(view.color, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(directory / "color.png", optimize=False)
    Image.fromarray(view.depth.astype(np.float32), "F").save(directory / "depth.tiff")
    Image.fromarray(view.semantics.astype(np.uint8), "L").save(directory / "semantics.png")
    files = {"color": "color.png", "depth": "depth.tiff", "semantics": "semantics.png"}
    return {
        "name": view.name,
        "intrinsics": view.intrinsics.to_dict(),
        "K": view.intrinsics.K34().reshape(-1).tolist(),
        "pose": np.asarray(view.pose).reshape(-1).tolist(),
        "files": {k: f"{directory.name}/{v}" for k, v in files.items()},
        "sha256": {k: _sha256(directory / v) for k, v in files.items()},
    }


def load_view(entry: dict, root: Path) -> CameraView:
    root = Path(root)
    color = np.asarray(Image.open(root / entry["files"]["color"]), dtype=np.float64) / 255.0
    depth = np.asarray(Image.open(root / entry["files"]["depth"]), dtype=np.float64)
    sem = np.asarray(Image.open(root / entry["files"]["semantics"]), dtype=np.int32)
    return CameraView(Intrinsics.from_dict(entry["intrinsics"]),
                      np.array(entry["pose"], dtype=np.float64).reshape(4, 4),
                      color, depth, sem, entry["name"])


def save_scene(scene: SyntheticScene, views: list, directory: Path) -> dict:
    """Scene JSON + one sub-directory per view + manifest.json. Returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "scene.json").write_text(scene.to_json())
    entries = [save_view(v, directory / f"{i:02d}_{v.name}") for i, v in enumerate(views)]
    manifest = {"scene": "scene.json", "scene_sha256": _sha256(directory / "scene.json"),
                "reference_view": 0, "views": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_scene(directory: Path):
    """Return ``(scene, views)`` from a directory written by :func:`save_scene`."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    scene = SyntheticScene.from_dict(json.loads((directory / manifest["scene"]).read_text()))
    views = [load_view(e, directory) for e in manifest["views"]]
    return scene, views
