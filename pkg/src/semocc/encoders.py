"""Image-side feature extraction.

Appearance features come from a small trainable encoder-decoder. The frozen
vision-language image features and the category text table come from a
provider: ``oracle`` derives them from ground-truth semantics, ``file`` loads
precomputed arrays. Fusion is two trainable 3x3 convolutions.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class FeatureMap:
    """(H', W', C) feature grid sampled every ``stride`` image pixels."""

    values: torch.Tensor
    stride: int = 1

    @property
    def channels(self) -> int:
        return int(self.values.shape[-1])

    @property
    def shape(self):
        return tuple(self.values.shape)

    def chw(self) -> torch.Tensor:
        return self.values.permute(2, 0, 1)

    @classmethod
    def from_chw(cls, x: torch.Tensor, stride: int = 1) -> "FeatureMap":
        return cls(x.permute(1, 2, 0), stride)


@dataclass
class TextEmbeddingTable:
    rows: torch.Tensor  # (Q, C) unit rows
    category_names: tuple

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.rows[self.category_names.index(name)]

    @property
    def sky_id(self) -> int:
        return len(self.category_names) - 1


@dataclass
class SegmentationMap:
    labels: torch.Tensor  # (H', W') int64
    stride: int = 1
    flagged: torch.Tensor | None = field(default=None)  # zero-norm cells


# ---------------------------------------------------------------- appearance

class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride) if (stride != 1 or c_in != c_out) else None

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class AppearanceEncoder(nn.Module):
    """Residual encoder (two downsamplings) with an upsampling decoder back to stride 1."""

    def __init__(self, out_channels: int = 64, width: int = 32):
        super().__init__()
        self.stem = nn.Conv2d(3, width, 3, 1, 1)
        self.down1 = _ResBlock(width, width, 2)
        self.down2 = _ResBlock(width, 2 * width, 2)
        self.up1 = nn.Conv2d(2 * width + width, width, 3, 1, 1)
        self.up0 = nn.Conv2d(width + width, width, 3, 1, 1)
        self.head = nn.Conv2d(width, out_channels, 1)
        nn.init.zeros_(self.head.bias)
        self.out_channels = out_channels

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, C_app, H, W)."""
        x = image * 2.0 - 1.0
        s0 = F.relu(self.stem(x))
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        u1 = F.interpolate(s2, size=s1.shape[-2:], mode="bilinear", align_corners=False)
        u1 = F.relu(self.up1(torch.cat([u1, s1], 1)))
        u0 = F.interpolate(u1, size=s0.shape[-2:], mode="bilinear", align_corners=False)
        u0 = F.relu(self.up0(torch.cat([u0, s0], 1)))
        return self.head(u0)


def appearance_encode(image, encoder: AppearanceEncoder) -> FeatureMap:
    """(H, W, 3) image -> stride-1 appearance FeatureMap."""
    img = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    dtype = next(encoder.parameters()).dtype
    x = img.to(dtype).permute(2, 0, 1)[None]
    out = encoder(x)[0]
    if not torch.isfinite(out).all():
        raise FloatingPointError("appearance encoder produced non-finite features")
    return FeatureMap.from_chw(out, 1)


# ---------------------------------------------------------------- fusion

class FusionNet(nn.Module):
    def __init__(self, c_app: int = 64, c_vl: int = 32, c_fused: int = 64):
        super().__init__()
        self.c_app, self.c_vl = c_app, c_vl
        self.conv1 = nn.Conv2d(c_app + c_vl, c_fused, 3, 1, 1)
        self.conv2 = nn.Conv2d(c_fused, c_fused, 3, 1, 1)

    def forward(self, f_app: torch.Tensor, f_vis: torch.Tensor) -> torch.Tensor:
        """Channel-first (B, C, H, W) inputs."""
        return self.conv2(F.relu(self.conv1(torch.cat([f_app, f_vis], 1))))


def fuse(f_app: FeatureMap, f_vis: FeatureMap, net: FusionNet) -> FeatureMap:
    if f_app.channels != net.c_app or f_vis.channels != net.c_vl:
        raise ValueError(f"fusion expects ({net.c_app}, {net.c_vl}) channels, "
                         f"got ({f_app.channels}, {f_vis.channels})")
    vis = f_vis.chw()[None].to(f_app.values.dtype)
    app = f_app.chw()[None]
    if vis.shape[-2:] != app.shape[-2:]:
        vis = F.interpolate(vis, size=app.shape[-2:], mode="bilinear", align_corners=False)
    return FeatureMap.from_chw(net(app, vis)[0], f_app.stride)


# ---------------------------------------------------------------- text table

def _name_seed(name: str, salt: int) -> int:
    digest = hashlib.sha256(f"{salt}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def text_embed(category_names, provider: str = "oracle", channels: int = 32, *,
               path: str | Path | None = None, salt: int = 0) -> TextEmbeddingTable:
    """One unit row per category name.

    The oracle provider draws each row from a Gaussian seeded by the name, so a
    category keeps its embedding regardless of the other names in the list.
    """
    names = tuple(category_names)
    if len(names) < 2:
        raise ValueError("need at least two categories")
    if len(set(names)) != len(names):
        raise ValueError("duplicate category names")
    if provider == "oracle":
        rows = np.stack([np.random.default_rng(_name_seed(n, salt)).standard_normal(channels)
                         for n in names])
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return TextEmbeddingTable(torch.from_numpy(rows).float(), names)
    if provider == "file":
        arr, header = load_array(path)
        if arr.ndim != 2 or arr.shape[0] != len(names):
            raise ValueError(f"text table shape {arr.shape} does not match {len(names)} names")
        stored = header.get("category_names")
        if stored is not None and tuple(stored) != names:
            raise ValueError("text table category names differ from the requested ones")
        return TextEmbeddingTable(torch.from_numpy(arr), names)
    raise ValueError(f"unknown text provider {provider!r}")


# ---------------------------------------------------------------- VL image features

class OracleVLProvider:
    """Per-pixel text row of the true category plus Gaussian noise, renormalised.

    Noise is seeded from ``seed`` and the semantics bytes, so repeated calls on
    the same view are bit-identical.
    """

    def __init__(self, table: TextEmbeddingTable, noise: float = 0.05, stride: int = 1,
                 seed: int = 0):
        self.table, self.noise, self.stride, self.seed = table, noise, stride, seed

    def __call__(self, view) -> FeatureMap:
        sem = np.asarray(view.semantics)[::self.stride, ::self.stride]
        rows = self.table.rows.numpy().astype(np.float64)
        feat = rows[sem]
        if self.noise > 0:
            h = hashlib.sha256(sem.astype(np.int32).tobytes()).digest()
            rng = np.random.default_rng([self.seed, int.from_bytes(h[:8], "little")])
            feat = feat + self.noise * rng.standard_normal(feat.shape)
            feat /= np.linalg.norm(feat, axis=-1, keepdims=True)
        return FeatureMap(torch.from_numpy(feat.astype(np.float32)), self.stride)


class FileVLProvider:
    """Loads per-view feature maps saved with :func:`save_feature_map`."""

    def __init__(self, paths: dict):
        self.paths = paths

    def __call__(self, view) -> FeatureMap:
        fmap = load_feature_map(self.paths[view.name])
        H, W = np.asarray(view.semantics).shape
        expect = (math.ceil(H / fmap.stride), math.ceil(W / fmap.stride))
        if tuple(fmap.values.shape[:2]) != expect:
            raise ValueError(f"feature map grid {tuple(fmap.values.shape[:2])} does not match "
                             f"image {H}x{W} at stride {fmap.stride}")
        return fmap


def vl_image_encode(view, provider) -> FeatureMap:
    with torch.no_grad():
        fmap = provider(view)
    return FeatureMap(fmap.values.detach(), fmap.stride)


def segment(f_vis: FeatureMap, table: TextEmbeddingTable) -> SegmentationMap:
    """Per-cell argmax of cosine similarity; ties go to the lowest index."""
    v = f_vis.values.to(torch.float64)
    t = table.rows.to(torch.float64)
    norm = v.norm(dim=-1)
    flagged = norm == 0
    sim = (v @ t.T) / (norm.clamp_min(1e-300)[..., None] * t.norm(dim=-1))
    # torch.argmax returns the first maximal index
    labels = torch.argmax(sim, dim=-1)
    labels = torch.where(flagged, torch.full_like(labels, table.sky_id), labels)
    return SegmentationMap(labels, f_vis.stride, flagged)


# ---------------------------------------------------------------- file format
# magic, 4-byte little-endian header length, JSON header, raw row-major data.

_MAGIC = b"SOCCARR1"


def save_array(path, array: np.ndarray, **meta) -> None:
    array = np.ascontiguousarray(array)
    header = dict(meta, shape=list(array.shape), dtype=array.dtype.str)
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(array.tobytes(order="C"))


def load_array(path):
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a feature array file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    arr = np.frombuffer(data[12 + n:], dtype=np.dtype(header["dtype"])).reshape(header["shape"])
    return arr.copy(), header


def save_feature_map(path, fmap: FeatureMap) -> None:
    arr = fmap.values.detach().cpu().numpy()
    H, W, C = arr.shape
    save_array(path, arr, H=H, W=W, C=C, stride=int(fmap.stride))


def load_feature_map(path) -> FeatureMap:
    arr, header = load_array(path)
    if arr.ndim != 3:
        raise ValueError("feature map must be 3-dimensional")
    return FeatureMap(torch.from_numpy(arr), int(header["stride"]))


def save_text_table(path, table: TextEmbeddingTable) -> None:
    save_array(path, table.rows.numpy(), category_names=list(table.category_names))
