"""Self-supervised training: view splits, patch rays, the training step and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .camera import FrustumBounds, Ray, backproject_ray, pixel_centers
from .losses import LossWeights, batched_total_loss
from .model import DensityField, ModelConfig
from .renderer import ALPHA_STANDARD, composite, render_patch, sample_ray

log = logging.getLogger(__name__)


class NumericalAbort(FloatingPointError):
    """A training step produced non-finite values."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_after: float = 1e-5
    lr_switch_iter: int = 5000
    betas: tuple = (0.9, 0.999)
    epochs: int = 1
    steps_per_scene: int = 200
    patches_per_step: int = 8
    patch_size: int = 8
    samples_per_ray: int = 64
    chunk_size: int = 2048
    z_near: float = 3.0
    z_far: float = 50.0
    grad_clip: float = 10.0
    seed: int = 0
    checkpoint_every: int = 0
    normalize_depth: bool = False
    alpha_formula: str = ALPHA_STANDARD
    invalid_weight: float = 0.5
    loss_l1: float = 0.15
    loss_ssim: float = 0.85
    loss_smooth: float = 1e-3
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        if self.lr_after > self.lr:
            raise ValueError("lr_after must not exceed lr")
        if self.patch_size < 3:
            raise ValueError("patch_size must be at least 3")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.loss_l1, self.loss_ssim, self.loss_smooth)

    def bounds_for(self, intrinsics) -> FrustumBounds:
        return FrustumBounds.for_intrinsics(intrinsics, self.z_near, self.z_far)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            m = d["model"] or {}
            bad = set(m) - {f.name for f in fields(ModelConfig)}
            if bad:
                raise ValueError(f"unknown model fields: {sorted(bad)}")
            d["model"] = ModelConfig(**m)
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> TrainConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# ------------------------------------------------------------------ sampling

def split_views(n_views: int, rng: np.random.Generator):
    """Random disjoint (source, loss) index sets; view 0 is always a source.

    The non-reference views are shuffled and split in half, so both sets get at
    least one of them.
    """
    if n_views < 2:
        raise ValueError("need at least two views")
    others = rng.permutation(np.arange(1, n_views))
    if len(others) == 1:
        return [0], [int(others[0])]
    n_src = len(others) // 2
    source = [0] + sorted(int(i) for i in others[:n_src])
    loss = sorted(int(i) for i in others[n_src:])
    return source, loss


@dataclass
class PatchRays:
    view_ids: np.ndarray  # (B,)
    rows: np.ndarray  # (B, p, p) pixel row indices
    cols: np.ndarray  # (B, p, p)
    origins: np.ndarray  # (B*p*p, 3)
    directions: np.ndarray
    z_per_unit: np.ndarray

    @property
    def patch_size(self) -> int:
        return self.rows.shape[-1]


def sample_patch_rays(views, loss_ids, n_patches: int, patch_size: int,
                      rng: np.random.Generator) -> PatchRays:
    """Uniformly random patches over the loss views, one ray per patch pixel."""
    vids = rng.choice(np.asarray(loss_ids), size=n_patches)
    rows, cols, o, d, z = [], [], [], [], []
    off = np.arange(patch_size)
    for vid in vids:
        K = views[vid].intrinsics
        if patch_size > min(K.width, K.height):
            raise ValueError("patch does not fit in the image")
        r0 = rng.integers(0, K.height - patch_size + 1)
        c0 = rng.integers(0, K.width - patch_size + 1)
        rr, cc = np.meshgrid(r0 + off, c0 + off, indexing="ij")
        rows.append(rr)
        cols.append(cc)
        pix = np.stack([cc + 0.5, rr + 0.5], -1).reshape(-1, 2).astype(np.float64)
        ray = backproject_ray(pix, K, views[vid].pose)
        o.append(ray.origin)
        d.append(ray.direction)
        z.append(ray.z_per_unit)
    return PatchRays(vids, np.stack(rows), np.stack(cols), np.concatenate(o), np.concatenate(d),
                     np.concatenate(z))


# ------------------------------------------------------------------ state

def build_model(cfg: TrainConfig, category_names) -> DensityField:
    torch.manual_seed(cfg.seed)
    return DensityField(cfg.model, category_names)


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr_after if iteration >= cfg.lr_switch_iter else cfg.lr


@dataclass
class TrainState:
    model: DensityField
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    iteration: int = 0


@dataclass
class StepDiagnostics:
    loss: float
    lr: float
    photometric: float
    smoothness: float
    n_patches: int
    n_excluded: int
    grad_norm: float


def _step_rngs(cfg: TrainConfig, iteration: int):
    rng = np.random.default_rng([cfg.seed, iteration, 1])
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    return rng, gen


def compute_loss(model: DensityField, views, cfg: TrainConfig, rng, gen,
                 source_ids=None, loss_ids=None):
    """Forward pass for one step on one scene's views; returns (loss, diagnostics, extras)."""
    if source_ids is None:
        source_ids, loss_ids = split_views(len(views), rng)
    ref = views[0]
    bounds = cfg.bounds_for(ref.intrinsics)
    ctx = model.encode(ref, bounds)
    patches = sample_patch_rays(views, loss_ids, cfg.patches_per_step, cfg.patch_size, rng)
    plan_seed = int(torch.randint(0, 2 ** 62, (1,), generator=gen))
    dtype = model.dtype

    def density_fn(pts):
        return model(pts.to(dtype), ctx, seed=plan_seed, chunk_size=cfg.chunk_size)

    rays = Ray(torch.from_numpy(patches.origins).to(dtype), torch.from_numpy(patches.directions).to(dtype),
               None, torch.from_numpy(patches.z_per_unit).to(dtype))
    out = render_patch(rays, density_fn, [views[i] for i in source_ids], cfg.samples_per_ray,
                       bounds, jitter=True, generator=gen, alpha_formula=cfg.alpha_formula,
                       invalid_weight=cfg.invalid_weight)
    B, p = len(patches.view_ids), patches.patch_size
    target = np.stack([views[v].color[patches.rows[b], patches.cols[b]]
                       for b, v in enumerate(patches.view_ids)])
    target = torch.as_tensor(target, dtype=dtype)
    Kv = out.colors.shape[0]
    cands = out.colors.reshape(Kv, B, p, p, 3)
    valid = out.valid.reshape(Kv, B, p, p)
    depth = out.depth.reshape(B, p, p)
    loss, diag = batched_total_loss(target, cands, depth, valid, cfg.loss_weights,
                                    cfg.normalize_depth)
    return loss, diag, {"patches": patches, "render": out, "source_ids": source_ids,
                        "loss_ids": loss_ids}


def train_step(state: TrainState, views):
    """One Adam update on one scene. Raises :class:`NumericalAbort` on non-finite values."""
    cfg = state.config
    it = state.iteration
    lr = lr_at(cfg, it)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    rng, gen = _step_rngs(cfg, it)
    state.model.train()
    try:
        loss, diag, _ = compute_loss(state.model, views, cfg, rng, gen)
    except FloatingPointError as exc:
        raise NumericalAbort(f"iteration {it}: {exc}") from exc
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    gnorm = torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    if not torch.isfinite(gnorm):
        raise NumericalAbort(f"iteration {it}: non-finite gradient")
    state.optimizer.step()
    state.iteration += 1
    lv = float(loss.detach())
    return state, lv, StepDiagnostics(lv, lr, diag.photometric, diag.smoothness,
                                              diag.n_patches, diag.n_excluded, float(gnorm))


def render_view_depth(model: DensityField, ref_view, view, cfg: TrainConfig, seed: int = 0,
                      rays_per_batch: int = 1024) -> np.ndarray:
    """Rendered camera-z depth (unnormalised, as in training) for every pixel of ``view``.

    The field is conditioned on ``ref_view``; each ray batch uses a seeded chunk plan.
    """
    K = view.intrinsics
    bounds = cfg.bounds_for(ref_view.intrinsics)
    dtype = model.dtype
    model.eval()
    out = []
    with torch.no_grad():
        ctx = model.encode(ref_view, bounds)
        ray = backproject_ray(pixel_centers(K).reshape(-1, 2), K, view.pose)
        n = ray.origin.shape[0]
        for b, s in enumerate(range(0, n, rays_per_batch)):
            sl = slice(s, s + rays_per_batch)
            r = Ray(torch.as_tensor(ray.origin[sl], dtype=dtype),
                    torch.as_tensor(ray.direction[sl], dtype=dtype), None,
                    torch.as_tensor(ray.z_per_unit[sl], dtype=dtype))
            samples = sample_ray(r, cfg.samples_per_ray, bounds)
            R, S = samples.depths.shape
            sigma = model(samples.positions.reshape(-1, 3), ctx, seed=seed + b,
                          chunk_size=cfg.chunk_size).reshape(R, S)
            out.append(composite(sigma, samples.depths, samples.spacings, cfg.alpha_formula).depth)
    return torch.cat(out).numpy().reshape(K.height, K.width)


def depth_mae(pred: np.ndarray, gt: np.ndarray, z_near: float, z_far: float):
    """MAE over pixels whose true depth lies inside the frustum (visible surfaces)."""
    m = np.isfinite(gt) & (gt >= z_near) & (gt <= z_far)
    if not m.any():
        return None
    return float(np.abs(pred[m] - gt[m]).mean())


# ------------------------------------------------------------------ checkpoints

@dataclass
class Checkpoint:
    params: dict
    optimizer: dict
    iteration: int
    config: TrainConfig
    category_names: tuple
    fingerprint: str = ""

    def to_model(self) -> DensityField:
        model = DensityField(self.config.model, self.category_names)
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.params.items()})
        return model

    def to_state(self) -> TrainState:
        model = self.to_model()
        opt = make_optimizer(model, self.config)
        if self.optimizer:
            opt.load_state_dict(_unflatten_optim(self.optimizer, opt))
        return TrainState(model, opt, self.config, self.iteration)


def _flatten_optim(opt) -> dict:
    sd = opt.state_dict()
    out = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            out[f"{pid}/{k}"] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
    return out


def _unflatten_optim(flat: dict, opt) -> dict:
    sd = opt.state_dict()
    state = {}
    for key, v in flat.items():
        pid, name = key.split("/", 1)
        state.setdefault(int(pid), {})[name] = torch.from_numpy(np.array(v))
    sd["state"] = state
    return sd


def checkpoint_from_state(state: TrainState) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in state.model.state_dict().items()}
    return Checkpoint(params, _flatten_optim(state.optimizer), state.iteration, state.config,
                      state.model.category_names, state.config.fingerprint())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """npz container: ``param/<name>`` and ``optim/<group>/<key>`` arrays plus a JSON ``meta``.

    ``meta`` holds iteration, config, category names and the config
    fingerprint. Per-step randomness is derived from (seed, iteration), so no
    generator state needs storing.
    """
    meta = {"iteration": ckpt.iteration, "config": ckpt.config.to_dict(),
            "category_names": list(ckpt.category_names), "fingerprint": ckpt.fingerprint,
            "format": "semocc-checkpoint-1"}
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    arrays.update({f"optim/{k}": v for k, v in ckpt.optimizer.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **dict(sorted(arrays.items())))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        optim = {k[6:]: z[k] for k in z.files if k.startswith("optim/")}
    return Checkpoint(params, optim, int(meta["iteration"]), TrainConfig.from_dict(meta["config"]),
                      tuple(meta["category_names"]), meta.get("fingerprint", ""))


# ------------------------------------------------------------------ fit

@dataclass
class SceneData:
    """One training scene: its rig views (reference first) and category names."""

    views: list
    category_names: tuple
    scene: object = None

    @classmethod
    def from_scene(cls, scene, views=None):
        from .scenegen import render_rig
        return cls(views if views is not None else render_rig(scene), tuple(scene.category_names),
                   scene)


def _scene_for_iteration(cfg: TrainConfig, n_scenes: int, it: int) -> int:
    per_epoch = cfg.steps_per_scene * n_scenes
    epoch, within = divmod(it, per_epoch)
    order = np.random.default_rng([cfg.seed, epoch, 2]).permutation(n_scenes)
    return int(order[within // cfg.steps_per_scene])


def fit(cfg: TrainConfig, dataset, *, resume: Checkpoint | None = None, out_dir=None,
        on_step=None, max_steps: int | None = None) -> Checkpoint:
    """Train over ``dataset`` (a list of :class:`SceneData`) for ``cfg.epochs`` epochs.

    ``on_step(iteration, loss, diagnostics)`` is called after every update.
    ``max_steps`` stops early (used to simulate interruption). On a numerical
    abort the last good checkpoint is written to ``out_dir`` before re-raising.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if resume is not None:
        state = resume.to_state()
    else:
        model = build_model(cfg, _category_names(dataset))
        state = TrainState(model, make_optimizer(model, cfg), cfg, 0)
    total = cfg.epochs * cfg.steps_per_scene * len(dataset)
    out_dir = Path(out_dir) if out_dir is not None else None
    last_good = checkpoint_from_state(state)
    done = 0
    while state.iteration < total:
        if max_steps is not None and done >= max_steps:
            break
        views = dataset[_scene_for_iteration(cfg, len(dataset), state.iteration)].views
        try:
            state, loss, diag = train_step(state, views)
        except NumericalAbort:
            if out_dir is not None:
                save_checkpoint(last_good, out_dir / "last_good.npz")
            raise
        done += 1
        if on_step is not None:
            on_step(state.iteration, loss, diag)
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            last_good = checkpoint_from_state(state)
            if out_dir is not None:
                save_checkpoint(last_good, out_dir / f"ckpt_{state.iteration:07d}.npz")
    return checkpoint_from_state(state)


def _category_names(dataset):
    return tuple(dataset[0].category_names)
