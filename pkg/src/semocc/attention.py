"""Language-guided linear cross-attention over point sets and the density head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ChunkPlan:
    permutation: torch.Tensor  # (M,) int64
    chunk_size: int = 2048
    seed: int = 0

    @classmethod
    def random(cls, m: int, chunk_size: int = 2048, seed: int = 0) -> "ChunkPlan":
        g = torch.Generator().manual_seed(int(seed))
        return cls(torch.randperm(m, generator=g), int(chunk_size), int(seed))

    @classmethod
    def identity(cls, m: int, chunk_size: int | None = None) -> "ChunkPlan":
        return cls(torch.arange(m), int(chunk_size or max(m, 1)), 0)

    def chunks(self):
        return list(torch.split(self.permutation, self.chunk_size))


class SpatialAttention(nn.Module):
    """theta_Q, theta_K, theta_V projections and the softplus density head.

    Keys come from the per-point text features when ``text_keys`` is set,
    otherwise from the visual features themselves.
    """

    def __init__(self, feat_dim: int = 128, text_dim: int = 32, attn_dim: int = 128,
                 text_keys: bool = True):
        super().__init__()
        self.text_keys = text_keys
        self.attn_dim = attn_dim
        self.q = nn.Linear(feat_dim, attn_dim)
        self.k = nn.Linear(text_dim if text_keys else feat_dim, attn_dim)
        self.v = nn.Linear(feat_dim, attn_dim)
        self.density = nn.Linear(attn_dim, 1)

    @property
    def scale(self) -> float:
        return float(self.attn_dim)


def project_qkv(V: torch.Tensor, Ct: torch.Tensor, params: SpatialAttention):
    key_in = Ct if params.text_keys else V
    if V.shape[-1] != params.q.in_features or key_in.shape[-1] != params.k.in_features:
        raise ValueError(f"width mismatch: V {tuple(V.shape)}, keys {tuple(key_in.shape)}")
    return params.q(V), params.k(key_in), params.v(V)


def linear_attention(FQ: torch.Tensor, FK: torch.Tensor, FV: torch.Tensor, D: float):
    """Softmax(FQ / sqrt(D)) @ (Softmax(FK^T) @ FV).

    The key softmax runs over points (per channel), the query softmax over
    channels (per point); the context matrix is C x C.
    """
    keys = torch.softmax(FK, dim=0)
    context = keys.T @ FV
    queries = torch.softmax(FQ / math.sqrt(D), dim=-1)
    return queries @ context


def _batched_linear_attention(FQ, FK, FV, D):
    keys = torch.softmax(FK, dim=1)
    context = keys.transpose(1, 2) @ FV
    return torch.softmax(FQ / math.sqrt(D), dim=-1) @ context


def chunked_attention(FQ, FK, FV, D, plan: ChunkPlan) -> torch.Tensor:
    """Attention restricted to each chunk of ``plan``, scattered back to input order.

    Rows are gathered once in plan order; full chunks run as one batched
    product and a trailing partial chunk on its own.
    """
    perm = plan.permutation
    cs = plan.chunk_size
    q, k, v = FQ[perm], FK[perm], FV[perm]
    n_full = (perm.numel() // cs) * cs
    parts = []
    if n_full:
        shape = (-1, cs, FQ.shape[-1])
        parts.append(_batched_linear_attention(q[:n_full].reshape(shape), k[:n_full].reshape(shape),
                                               v[:n_full].reshape(shape), D).reshape(n_full, -1))
    if n_full < perm.numel():
        parts.append(linear_attention(q[n_full:], k[n_full:], v[n_full:], D))
    out = torch.cat(parts) if len(parts) > 1 else parts[0]
    return out[torch.argsort(perm)]


def density_head(F_final: torch.Tensor, params: SpatialAttention) -> torch.Tensor:
    return F.softplus(params.density(F_final)).squeeze(-1)


def occupancy_from_density(sigma, tau: float = 0.5):
    if tau <= 0:
        raise ValueError("tau must be positive")
    return sigma > tau
