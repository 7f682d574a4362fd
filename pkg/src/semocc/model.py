"""The density field: image encoders -> point features -> modulation -> attention -> density."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ChunkPlan, SpatialAttention, chunked_attention, density_head, project_qkv
from .camera import FrustumBounds, encoding_width
from .encoders import (AppearanceEncoder, FeatureMap, FusionNet, OracleVLProvider,
                       SegmentationMap, TextEmbeddingTable, appearance_encode, fuse, segment,
                       text_embed, vl_image_encode)
from .pointrep import VLModulation, lookup_text_features, sample_point_features


@dataclass
class ModelConfig:
    c_app: int = 64
    c_vl: int = 32
    c_fused: int = 64
    hidden: int = 128
    attn_dim: int = 128
    n_layers: int = 4
    skip_at: int | None = None
    n_freq: int = 6
    encoder_width: int = 32
    vl_noise: float = 0.05
    use_fused: bool = True
    use_vl_mod: bool = True
    use_attention: bool = True
    use_vl_keys: bool = True

    def to_dict(self):
        return asdict(self)


@dataclass
class SceneContext:
    """Everything the density field needs from the input view."""

    features: FeatureMap
    segmentation: SegmentationMap
    table: TextEmbeddingTable
    intrinsics: object
    pose: np.ndarray
    bounds: FrustumBounds


class DensityField(nn.Module):
    def __init__(self, cfg: ModelConfig, category_names):
        super().__init__()
        self.cfg = cfg
        self.category_names = tuple(category_names)
        self.appearance = AppearanceEncoder(cfg.c_app, cfg.encoder_width)
        self.fusion = FusionNet(cfg.c_app, cfg.c_vl, cfg.c_fused) if cfg.use_fused else None
        feat_c = cfg.c_fused if cfg.use_fused else cfg.c_app
        self.point_dim = feat_c + encoding_width(cfg.n_freq)
        self.modulation = VLModulation(self.point_dim, cfg.c_vl, cfg.hidden, cfg.n_layers,
                                       cfg.skip_at, use_text=cfg.use_vl_mod)
        if cfg.use_attention:
            self.attention = SpatialAttention(cfg.hidden, cfg.c_vl, cfg.attn_dim, cfg.use_vl_keys)
            self.head = None
        else:
            self.attention = None
            self.head = nn.Linear(cfg.hidden, 1)
        # frozen: never registered as parameters
        self.table = text_embed(self.category_names, "oracle", cfg.c_vl)
        self.provider = OracleVLProvider(self.table, cfg.vl_noise)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode(self, view, bounds: FrustumBounds, f_vis: FeatureMap | None = None) -> SceneContext:
        f_app = appearance_encode(view.color, self.appearance)
        if f_vis is None:
            f_vis = vl_image_encode(view, self.provider)
        seg = segment(f_vis, self.table)
        feats = fuse(f_app, f_vis, self.fusion) if self.fusion is not None else f_app
        return SceneContext(feats, seg, self.table, view.intrinsics, np.asarray(view.pose),
                            bounds)

    def point_features(self, points: torch.Tensor, ctx: SceneContext):
        batch = sample_point_features(points, ctx.features, ctx.intrinsics, ctx.pose, ctx.bounds,
                                      self.cfg.n_freq)
        batch = lookup_text_features(batch, ctx.segmentation, ctx.table)
        return batch

    def forward(self, points: torch.Tensor, ctx: SceneContext, plan: ChunkPlan | None = None,
                seed: int = 0, chunk_size: int = 2048) -> torch.Tensor:
        """Density for (M, 3) world points; attention uses ``plan`` or a seeded random one."""
        batch = self.point_features(points, ctx)
        v_hat = self.modulation(batch.vis_feat, batch.text_feat)
        if self.attention is None:
            return F.softplus(self.head(v_hat)).squeeze(-1)
        fq, fk, fv = project_qkv(v_hat, batch.text_feat, self.attention)
        if plan is None:
            plan = ChunkPlan.random(points.shape[0], chunk_size, seed)
        f_final = chunked_attention(fq, fk, fv, self.attention.scale, plan)
        return density_head(f_final, self.attention)

    def density_chunks(self, points: torch.Tensor, ctx: SceneContext, seed: int = 0,
                       chunk_size: int = 2048, group: int = 32):
        """Memory-bounded evaluation over many points (no grad); same result as ``forward``."""
        M = points.shape[0]
        out = torch.empty(M, dtype=self.dtype)
        with torch.no_grad():
            if self.attention is None:
                for s in range(0, M, chunk_size * group):
                    out[s:s + chunk_size * group] = self(points[s:s + chunk_size * group], ctx)
                return out
            plan = ChunkPlan.random(M, chunk_size, seed)
            chunks = plan.chunks()
            for g in range(0, len(chunks), group):
                idx = torch.cat(chunks[g:g + group])
                sub = ChunkPlan(torch.arange(idx.numel()), chunk_size)
                out[idx] = self(points[idx], ctx, plan=sub)
        return out
