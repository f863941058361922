"""Tri-plane feature fields: point queries, decoding and mesh extraction.

Plane layout: ``planes[..., k, c, row, col]`` with k = 0 (XY), 1 (XZ), 2 (YZ).
For a plane spanned by axes (a, b), the column index follows ``a`` and the row
index follows ``b``; node ``i`` sits at coordinate ``-1 + 2 i / (R - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class TriPlane:
    planes: torch.Tensor  # 3×C×R×R, or B×3×C×R×R

    def __post_init__(self):
        p = self.planes
        if p.ndim not in (4, 5) or p.shape[-4] != 3 or p.shape[-1] != p.shape[-2]:
            raise ValueError(f"tri-plane tensor must be [B×]3×C×R×R, got {tuple(p.shape)}")
        if not torch.isfinite(p).all():
            raise ValueError("tri-plane contains non-finite values")

    @property
    def channels(self) -> int:
        return self.planes.shape[-3]

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]


@dataclass
class PointSample:
    density: torch.Tensor
    feature: torch.Tensor


def sample_planes(planes: torch.Tensor, xyz: torch.Tensor) -> torch.Tensor:
    """Batched tri-plane query.

    planes: B×3×C×R×R, xyz: B×P×3 -> B×P×C. Coordinates outside [-1, 1]
    are clamped to the boundary.
    """
    b, _, c, r, _ = planes.shape
    xyz = xyz.clamp(-1.0, 1.0)
    grids = torch.stack([xyz[..., list(ax)] for ax in PLANE_AXES], dim=1)  # B×3×P×2
    out = F.grid_sample(
        planes.reshape(b * 3, c, r, r),
        grids.reshape(b * 3, 1, -1, 2),
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )  # (B·3)×C×1×P
    return out.reshape(b, 3, c, -1).sum(dim=1).transpose(1, 2)


def sample_triplane(tp: TriPlane | torch.Tensor, xyz) -> torch.Tensor:
    """Query an unbatched tri-plane at one point (3,) or many points (P×3)."""
    planes = tp.planes if isinstance(tp, TriPlane) else tp
    xyz = torch.as_tensor(xyz, dtype=planes.dtype)
    if not torch.isfinite(xyz).all():
        raise ValueError("query coordinates must be finite")
    single = xyz.ndim == 1
    pts = xyz.reshape(1, -1, 3)
    out = sample_planes(planes.unsqueeze(0), pts)[0]
    return out[0] if single else out


class TriPlaneDecoder(nn.Module):
    """Two-layer MLP turning aggregated plane features into (density, feature)."""

    def __init__(self, in_channels: int = 16, hidden: int = 64, feature_channels: int = 8):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, hidden)
        self.fc2 = nn.Linear(hidden, 1 + feature_channels)
        self.feature_channels = feature_channels

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.softplus(self.fc1(feat))
        out = self.fc2(h)
        return F.softplus(out[..., 0]), out[..., 1:]


def decode_point(feat: torch.Tensor, decoder: TriPlaneDecoder) -> PointSample:
    feat = torch.as_tensor(feat)
    if not torch.isfinite(feat).all():
        raise ValueError("decoder input must be finite")
    density, feature = decoder(feat)
    return PointSample(density, feature)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # V×3
    faces: np.ndarray  # F×3 int

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def euler_characteristic(self) -> int:
        if self.is_empty:
            return 0
        f = self.faces
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(f))
        return n_verts - n_edges + len(f)

    def genus(self) -> float:
        """Genus of a closed, connected surface (2 - χ) / 2."""
        return (2 - self.euler_characteristic()) / 2

    def to_obj(self, path: str | Path) -> None:
        lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        Path(path).write_text("\n".join(lines) + "\n")


def density_grid(
    density_fn: Callable[[torch.Tensor], torch.Tensor], grid_res: int, chunk: int = 65536
) -> np.ndarray:
    lin = torch.linspace(-1.0, 1.0, grid_res, dtype=torch.float64)
    xs, ys, zs = torch.meshgrid(lin, lin, lin, indexing="ij")
    pts = torch.stack([xs, ys, zs], dim=-1).reshape(-1, 3)
    out = []
    with torch.no_grad():
        for start in range(0, len(pts), chunk):
            out.append(torch.as_tensor(density_fn(pts[start:start + chunk])).double())
    return torch.cat(out).reshape(grid_res, grid_res, grid_res).numpy()


def extract_mesh(
    tp: TriPlane | None,
    decoder: TriPlaneDecoder | None,
    grid_res: int = 64,
    iso: float = 10.0,
    density_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> TriangleMesh:
    """Marching-cubes iso-surface of the decoded density field.

    ``density_fn`` (points P×3 -> densities P) replaces the tri-plane/decoder
    pair, e.g. for analytic test fields.
    """
    from skimage.measure import marching_cubes

    if grid_res < 2:
        raise ValueError("grid_res must be >= 2")
    if density_fn is None:
        planes = tp.planes if isinstance(tp, TriPlane) else tp
        if planes.ndim == 5:
            planes = planes[0]
        dtype = next(decoder.parameters()).dtype

        def density_fn(pts):
            feat = sample_planes(planes.unsqueeze(0).to(dtype), pts.unsqueeze(0).to(dtype))[0]
            return decoder(feat)[0]

    vol = density_grid(density_fn, grid_res)
    if not (vol.min() < iso < vol.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = 2.0 / (grid_res - 1)
    verts, faces, _, _ = marching_cubes(vol, level=iso, spacing=(spacing,) * 3)
    verts = np.clip(verts - 1.0, -1.0, 1.0)
    return TriangleMesh(verts, faces.astype(np.int64))
