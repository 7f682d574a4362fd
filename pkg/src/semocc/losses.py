"""Patch photometric loss (L1 + DSSIM, min over source views) and edge-aware smoothness."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

C1 = 0.01 ** 2
C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.15
    ssim: float = 0.85
    smooth: float = 1e-3

    def __post_init__(self):
        if min(self.l1, self.ssim, self.smooth) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class PatchPair:
    """Target patch and its candidate renders.

    ``target`` is (p, p, 3); ``candidates`` is (K, p, p, 3); ``depth`` is the
    rendered depth of the target pixels (p, p); ``valid`` is (K, p, p).
    """

    target: torch.Tensor
    candidates: torch.Tensor
    depth: torch.Tensor
    valid: torch.Tensor | None = None


def dssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel (1 - SSIM) / 2 with 3x3 box statistics and reflection padding.

    Inputs are channel-last (..., p, p, 3); SSIM is clamped to [0, 1].
    """
    lead = a.shape[:-3]
    x = a.reshape(-1, *a.shape[-3:]).permute(0, 3, 1, 2)
    y = b.reshape(-1, *b.shape[-3:]).permute(0, 3, 1, 2)
    x = F.pad(x, (1, 1, 1, 1), mode="reflect")
    y = F.pad(y, (1, 1, 1, 1), mode="reflect")
    mu_x = F.avg_pool2d(x, 3, 1)
    mu_y = F.avg_pool2d(y, 3, 1)
    sig_x = F.avg_pool2d(x * x, 3, 1) - mu_x ** 2
    sig_y = F.avg_pool2d(y * y, 3, 1) - mu_y ** 2
    sig_xy = F.avg_pool2d(x * y, 3, 1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sig_xy + C2)
    den = (mu_x ** 2 + mu_y ** 2 + C1) * (sig_x + sig_y + C2)
    ssim = torch.clamp(num / den, 0.0, 1.0)
    out = (1.0 - ssim) / 2.0
    return out.permute(0, 2, 3, 1).reshape(*lead, *out.shape[-2:], out.shape[1])


def ssim_term(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError("SSIM inputs must have equal shapes")
    return dssim_map(a, b).mean()


def candidate_scores(pair: PatchPair, w: LossWeights = LossWeights()):
    """Per-candidate photometric score and the fraction of valid pixels."""
    K = pair.candidates.shape[0]
    target = pair.target.expand_as(pair.candidates)
    l1 = (pair.candidates - target).abs().mean(-1)
    ds = dssim_map(pair.candidates, target).mean(-1)
    if pair.valid is None:
        valid = torch.ones_like(l1, dtype=torch.bool)
    else:
        valid = pair.valid.to(torch.bool)
    vm = valid.to(l1.dtype)
    count = vm.flatten(1).sum(1)
    score = (w.l1 * (l1 * vm).flatten(1).sum(1) + w.ssim * (ds * vm).flatten(1).sum(1)) \
        / count.clamp_min(1.0)
    frac = count / valid[0].numel()
    return score.reshape(K), frac


def photometric_loss(pair: PatchPair, w: LossWeights = LossWeights(),
                     min_valid_fraction: float = 0.5):
    """Min over usable candidates of the L1/DSSIM score; None if no candidate is usable."""
    score, frac = candidate_scores(pair, w)
    usable = frac >= min_valid_fraction
    if not bool(usable.any()):
        return None
    return score[usable].min()


def smoothness_loss(depth: torch.Tensor, image: torch.Tensor, normalize: bool = False):
    """Mean |dx d| exp(-|dx I|) + mean |dy d| exp(-|dy I|) with forward differences.

    ``depth`` is (..., p, p) and ``image`` (..., p, p, 3); the image gradient is
    averaged over colour channels.
    """
    d = depth
    if normalize:
        d = d / d.mean(dim=(-2, -1), keepdim=True).clamp_min(1e-7)
    dx_d = (d[..., :, 1:] - d[..., :, :-1]).abs()
    dy_d = (d[..., 1:, :] - d[..., :-1, :]).abs()
    dx_i = (image[..., :, 1:, :] - image[..., :, :-1, :]).abs().mean(-1)
    dy_i = (image[..., 1:, :, :] - image[..., :-1, :, :]).abs().mean(-1)
    return (dx_d * torch.exp(-dx_i)).mean(dim=(-2, -1)) + (dy_d * torch.exp(-dy_i)).mean(dim=(-2, -1))


@dataclass
class LossDiagnostics:
    photometric: float
    smoothness: float
    n_patches: int
    n_excluded: int


def total_loss(pairs, w: LossWeights = LossWeights(), normalize_depth: bool = False,
               min_valid_fraction: float = 0.5):
    """Mean over usable patches of L_ph + lambda_e * L_e; returns (loss, diagnostics)."""
    ph_terms, sm_terms, excluded = [], [], 0
    for pair in pairs:
        ph = photometric_loss(pair, w, min_valid_fraction)
        if ph is None:
            excluded += 1
            continue
        ph_terms.append(ph)
        sm_terms.append(smoothness_loss(pair.depth, pair.target, normalize_depth))
    if not ph_terms:
        raise FloatingPointError("no patch had a usable candidate view")
    ph = torch.stack(ph_terms)
    sm = torch.stack(sm_terms)
    loss = (ph + w.smooth * sm).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    diag = LossDiagnostics(float(ph.detach().mean()), float(sm.detach().mean()), len(ph_terms),
                          excluded)
    return loss, diag


def batched_total_loss(target, candidates, depth, valid, w: LossWeights = LossWeights(),
                       normalize_depth: bool = False, min_valid_fraction: float = 0.5):
    """Vectorised :func:`total_loss` over (B, p, p, 3) targets and (K, B, p, p, 3) candidates."""
    K, B = candidates.shape[:2]
    tgt = target[None].expand_as(candidates)
    l1 = (candidates - tgt).abs().mean(-1)
    ds = dssim_map(candidates, tgt).mean(-1)
    vm = valid.to(l1.dtype)
    count = vm.flatten(2).sum(2)
    score = (w.l1 * (l1 * vm).flatten(2).sum(2) + w.ssim * (ds * vm).flatten(2).sum(2)) \
        / count.clamp_min(1.0)
    usable = count / valid[0, 0].numel() >= min_valid_fraction
    score = torch.where(usable, score, torch.full_like(score, float("inf")))
    ph, _ = score.min(0)
    keep = torch.isfinite(ph)
    if not bool(keep.any()):
        raise FloatingPointError("no patch had a usable candidate view")
    sm = smoothness_loss(depth, target, normalize_depth)
    loss = (ph[keep] + w.smooth * sm[keep]).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    diag = LossDiagnostics(float(ph[keep].detach().mean()), float(sm[keep].detach().mean()),
                          int(keep.sum()),
                           int((~keep).sum()))
    return loss, diag
