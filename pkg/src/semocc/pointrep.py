"""Per-point visual and text features, and the multiplicative modulation stack."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import FrustumBounds, Intrinsics, ndc_normalize, positional_encoding, principal_offset, \
    world_to_camera
from .encoders import FeatureMap, SegmentationMap, TextEmbeddingTable


@dataclass
class PointBatch:
    positions_world: torch.Tensor  # (M, 3)
    positions_cam0: torch.Tensor  # (M, 3)
    pixels: torch.Tensor  # (M, 2)
    in_frustum: torch.Tensor  # (M,) bool
    vis_feat: torch.Tensor | None = None  # (M, C')
    text_feat: torch.Tensor | None = None  # (M, C_vl)
    category: torch.Tensor | None = None  # (M,) int64
    ndc_clamped: torch.Tensor | None = None

    def __len__(self):
        return int(self.positions_world.shape[0])


def _grid_coords(pixels: torch.Tensor, fmap_hw, stride: int) -> torch.Tensor:
    """Continuous image pixels -> grid_sample coordinates on a stride-s grid."""
    H, W = fmap_hw
    gx = 2.0 * pixels[:, 0] / (stride * W) - 1.0
    gy = 2.0 * pixels[:, 1] / (stride * H) - 1.0
    return torch.stack([gx, gy], -1)


def bilinear_sample(fmap: FeatureMap, pixels: torch.Tensor) -> torch.Tensor:
    """Sample (M, C) features at continuous pixel coordinates (cell centres exact)."""
    H, W, C = fmap.values.shape
    grid = _grid_coords(pixels.to(fmap.values.dtype), (H, W), fmap.stride)
    out = F.grid_sample(fmap.chw()[None], grid[None, None], mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out[0, :, 0].T


def sample_point_features(points: torch.Tensor, f_fused: FeatureMap, intrinsics: Intrinsics,
                          pose, bounds: FrustumBounds, n_freq: int = 6) -> PointBatch:
    """Concat(F(p_0(x)), gamma(ndc(x^0))) for every world point.

    Points outside the reference image or behind the camera get zero sampled
    features and ``in_frustum = False``; their positional encoding is still
    computed from the clamped NDC coordinates.
    """
    dtype = f_fused.values.dtype
    points = points.to(dtype)
    pc = world_to_camera(points, pose)
    z = pc[:, 2]
    safe = torch.where(z > 0, z, torch.ones_like(z))
    u = intrinsics.fx * pc[:, 0] / safe + intrinsics.cx
    v = intrinsics.fy * pc[:, 1] / safe + intrinsics.cy
    pixels = torch.stack([u, v], -1)
    in_frustum = (z > 0) & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    feat = bilinear_sample(f_fused, pixels.detach()) * in_frustum[:, None].to(dtype)
    ndc, clamped = ndc_normalize(pc, bounds, principal_offset(intrinsics))
    enc = positional_encoding(ndc, n_freq)
    return PointBatch(points, pc, pixels, in_frustum, torch.cat([feat, enc], -1),
                      ndc_clamped=clamped)


def lookup_text_features(batch: PointBatch, seg: SegmentationMap,
                         table: TextEmbeddingTable) -> PointBatch:
    """Nearest-cell category lookup; out-of-frustum points take the sky row."""
    H, W = seg.labels.shape
    s = seg.stride
    px = batch.pixels.detach()
    col = torch.clamp(torch.floor(px[:, 0] / s), 0, W - 1).long()
    row = torch.clamp(torch.floor(px[:, 1] / s), 0, H - 1).long()
    cat = seg.labels[row, col]
    cat = torch.where(batch.in_frustum, cat, torch.full_like(cat, table.sky_id))
    text = table.rows.to(batch.positions_world.dtype)[cat].detach()
    return replace(batch, category=cat, text_feat=text)


class VLModulation(nn.Module):
    """L layers of ReLU(FC_l(v) * FC_t(g)), with one skip injection of v^1.

    ``FC_t`` is shared by every layer and evaluated once. After layer
    ``skip_at`` (default ceil(L/2)) the initial feature is concatenated and
    projected back to the hidden width. With ``use_text=False`` the text gate
    is dropped and the stack becomes a plain ReLU MLP of the same shape.
    """

    def __init__(self, in_dim: int, text_dim: int, hidden: int = 128, n_layers: int = 4,
                 skip_at: int | None = None, use_text: bool = True):
        super().__init__()
        if n_layers < 1:
            raise ValueError("need at least one modulation layer")
        self.n_layers, self.hidden, self.use_text = n_layers, hidden, use_text
        self.skip_at = math.ceil(n_layers / 2) if skip_at is None else skip_at
        self.fc_v = nn.ModuleList(
            [nn.Linear(in_dim if l == 0 else hidden, hidden) for l in range(n_layers)])
        self.fc_t = nn.Linear(text_dim, hidden) if use_text else None
        self.fc_skip = nn.Linear(hidden + in_dim, hidden)

    def forward(self, v: torch.Tensor, g: torch.Tensor | None = None, return_intermediates=False):
        gate = self.fc_t(g) if self.use_text else None
        v1, h, inter = v, v, []
        for l, fc in enumerate(self.fc_v):
            h = fc(h)
            h = F.relu(h * gate if gate is not None else h)
            inter.append(h)
            if l + 1 == self.skip_at:
                h = self.fc_skip(torch.cat([h, v1], -1))
                inter.append(h)
        if not torch.isfinite(h).all():
            raise FloatingPointError("non-finite modulation output")
        return (h, inter) if return_intermediates else h


def vl_modulate(batch: PointBatch, params: VLModulation) -> PointBatch:
    return replace(batch, vis_feat=params(batch.vis_feat, batch.text_feat))
