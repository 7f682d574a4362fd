"""Ray sampling, alpha compositing and colour sampling from source views.

The network predicts density only. Colours are looked up in the source images
at each sample's projection and composited with the density weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .camera import FrustumBounds, Ray

ALPHA_STANDARD = "standard"
ALPHA_PAPER_LITERAL = "paper_literal"


@dataclass
class RaySamples:
    depths: torch.Tensor  # (R, S) camera-z depth, ascending
    spacings: torch.Tensor  # (R, S) distance to the next sample along the ray
    positions: torch.Tensor  # (R, S, 3) world


@dataclass
class CompositeOut:
    weights: torch.Tensor  # (R, S)
    alpha: torch.Tensor
    transmittance: torch.Tensor
    depth: torch.Tensor  # (R,) unnormalised sum(w * d)
    opacity: torch.Tensor  # (R,)

    @property
    def normalized_depth(self) -> torch.Tensor:
        return self.depth / self.opacity.clamp_min(1e-10)


def stratified_depths(n_rays: int, S: int, bounds: FrustumBounds, jitter: bool,
                      generator: torch.Generator | None = None, dtype=torch.float32):
    """(R, S) depths stratified linearly in inverse depth between z_near and z_far."""
    if S < 2:
        raise ValueError("need at least two samples per ray")
    edges = torch.linspace(0.0, 1.0, S + 1, dtype=torch.float64)
    if jitter:
        u = torch.rand(n_rays, S, generator=generator, dtype=torch.float64)
    else:
        u = torch.full((n_rays, S), 0.5, dtype=torch.float64)
    s = edges[:-1] + (edges[1:] - edges[:-1]) * u
    inv_n, inv_f = 1.0 / bounds.z_near, 1.0 / bounds.z_far
    inv = inv_n + s * (inv_f - inv_n)
    return (1.0 / inv).to(dtype)


def _spacings(depths: torch.Tensor, z_per_unit: torch.Tensor) -> torch.Tensor:
    """Euclidean gaps between samples; the last gap repeats the mean of the others."""
    dz = depths[:, 1:] - depths[:, :-1]
    last = dz.mean(dim=1, keepdim=True)
    return torch.cat([dz, last], 1) / z_per_unit[:, None]


def sample_ray(ray: Ray, S: int, bounds: FrustumBounds, jitter: bool = False,
               seed: int | torch.Generator | None = None) -> RaySamples:
    """Stratified samples along one ray or a batch of rays (leading dims flattened)."""
    gen = seed if isinstance(seed, torch.Generator) or seed is None \
        else torch.Generator().manual_seed(int(seed))
    origin = torch.as_tensor(np.asarray(ray.origin) if not torch.is_tensor(ray.origin)
                             else ray.origin).reshape(-1, 3)
    direction = torch.as_tensor(np.asarray(ray.direction) if not torch.is_tensor(ray.direction)
                                else ray.direction).reshape(-1, 3)
    zpu = torch.as_tensor(np.asarray(ray.z_per_unit) if not torch.is_tensor(ray.z_per_unit)
                          else ray.z_per_unit).reshape(-1).to(origin.dtype)
    depths = stratified_depths(origin.shape[0], S, bounds, jitter, gen, dtype=origin.dtype)
    t = depths / zpu[:, None]
    positions = origin[:, None, :] + t[..., None] * direction[:, None, :]
    return RaySamples(depths, _spacings(depths, zpu), positions)


def composite(sigma: torch.Tensor, depths: torch.Tensor, spacings: torch.Tensor,
              alpha_formula: str = ALPHA_STANDARD) -> CompositeOut:
    """Front-to-back compositing of (R, S) densities.

    ``paper_literal`` evaluates alpha = exp(1 - sigma * delta) verbatim; it is
    kept only to show that this form is not a valid opacity.
    """
    tau = sigma * spacings
    if alpha_formula == ALPHA_STANDARD:
        alpha = 1.0 - torch.exp(-tau)
        # exclusive cumulative product of (1 - alpha) = exp(-cumulative optical depth)
        shifted = torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], 1)
        trans = torch.exp(-torch.cumsum(shifted, 1))
    elif alpha_formula == ALPHA_PAPER_LITERAL:
        alpha = torch.exp(1.0 - tau)
        one_minus = torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], 1)
        trans = torch.cumprod(one_minus, 1)
    else:
        raise ValueError(f"unknown alpha formula {alpha_formula!r}")
    weights = trans * alpha
    return CompositeOut(weights, alpha, trans, (weights * depths).sum(1), weights.sum(1))


def sample_source_colors(points: torch.Tensor, views, invalid_fill: float = 0.0):
    """Bilinear colour lookup of (N, 3) world points in each source view.

    Returns ``(colors, valid)`` of shapes (K, N, 3) and (K, N). Points behind a
    camera or projecting outside its image are invalid and get colour 0.
    """
    colors, valid = [], []
    pts = points.detach()
    for view in views:
        K = view.intrinsics
        pose = torch.as_tensor(np.asarray(view.pose), dtype=pts.dtype)
        pc = (pts - pose[:3, 3]) @ pose[:3, :3]
        z = pc[:, 2]
        safe = torch.where(z > 0, z, torch.ones_like(z))
        u = K.fx * pc[:, 0] / safe + K.cx
        v = K.fy * pc[:, 1] / safe + K.cy
        ok = (z > 0) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        img = view_image_tensor(view, pts.dtype)
        grid = torch.stack([2 * u / K.width - 1, 2 * v / K.height - 1], -1)
        c = F.grid_sample(img[None], grid[None, None], mode="bilinear", padding_mode="border",
                          align_corners=False)[0, :, 0].T
        colors.append(torch.where(ok[:, None], c, torch.full_like(c, invalid_fill)))
        valid.append(ok)
    return torch.stack(colors), torch.stack(valid)


def view_image_tensor(view, dtype=torch.float32) -> torch.Tensor:
    cached = getattr(view, "_chw_cache", None)
    if cached is None or cached.dtype != dtype:
        cached = torch.as_tensor(np.asarray(view.color), dtype=dtype).permute(2, 0, 1).contiguous()
        try:
            view._chw_cache = cached
        except AttributeError:
            pass
    return cached


@dataclass
class PatchRender:
    depth: torch.Tensor  # (R,)
    colors: torch.Tensor  # (K, R, 3)
    valid: torch.Tensor  # (K, R) bool
    composite: CompositeOut
    samples: RaySamples


def render_patch(rays: Ray, density_fn, source_views, S: int, bounds: FrustumBounds,
                 jitter: bool = False, generator=None, alpha_formula: str = ALPHA_STANDARD,
                 invalid_weight: float = 0.5) -> PatchRender:
    """Render depth and one colour per source view for every ray.

    ``density_fn`` maps all (R * S, 3) sample positions to densities in a
    single call. A pixel is invalid for a source view when more than
    ``invalid_weight`` of its compositing weight falls on samples that view
    cannot see.
    """
    samples = sample_ray(rays, S, bounds, jitter, generator)
    R = samples.depths.shape[0]
    pts = samples.positions.reshape(-1, 3)
    sigma = density_fn(pts).reshape(R, S)
    if not torch.isfinite(sigma).all():
        raise FloatingPointError("non-finite density")
    comp = composite(sigma, samples.depths.to(sigma.dtype), samples.spacings.to(sigma.dtype),
                     alpha_formula)
    cols, ok = sample_source_colors(pts.to(sigma.dtype), source_views)
    Kv = cols.shape[0]
    cols = cols.reshape(Kv, R, S, 3)
    ok = ok.reshape(Kv, R, S)
    rendered = (comp.weights[None, ..., None] * cols).sum(2)
    bad_mass = (comp.weights.detach()[None] * (~ok).to(sigma.dtype)).sum(2)
    valid = bad_mass <= invalid_weight * comp.opacity.detach()[None].clamp_min(1e-12)
    return PatchRender(comp.depth, rendered, valid, comp, samples)
