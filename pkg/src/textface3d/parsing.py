"""Face-part parsing into masked, resized crops.

Two parsers are provided: ground-truth pass-through for the procedural data
(label maps with 0 = background and 1..5 = :data:`PART_NAMES`) and a fixed
spatial-region grid usable on any image. Masks are treated as constants, so
gradients only flow through crop pixel values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

PART_NAMES = ("hair", "eyes", "mouth", "skin", "accessory")


@dataclass
class PartSet:
    part_names: list[str]
    masks: np.ndarray  # M×H×W bool
    crops: np.ndarray  # M×r×r×3

    def __len__(self) -> int:
        return len(self.part_names)


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive (row0, row1, col0, col1) extents of a nonempty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def crop_parts(image, masks, part_res: int = 32) -> np.ndarray:
    """Zero everything outside each mask, cut its bounding box, resize to part_res²."""
    img = np.asarray(image, dtype=np.float64)
    crops = []
    for mask in np.asarray(masks, dtype=bool):
        if not mask.any():
            raise ValueError("cannot crop an empty mask")
        r0, r1, c0, c1 = mask_bbox(mask)
        patch = (img * mask[..., None])[r0:r1 + 1, c0:c1 + 1]
        t = torch.as_tensor(patch).permute(2, 0, 1).unsqueeze(0)
        crops.append(_resize(t, part_res)[0].permute(1, 2, 0).numpy())
    return np.stack(crops) if crops else np.zeros((0, part_res, part_res, 3))


def region_masks(height: int, width: int, grid=(2, 2)) -> tuple[list[str], np.ndarray]:
    """Axis-aligned grid cells that tile the image exactly."""
    gr, gc = grid
    rows = np.linspace(0, height, gr + 1).round().astype(int)
    cols = np.linspace(0, width, gc + 1).round().astype(int)
    names, masks = [], []
    for i in range(gr):
        for j in range(gc):
            m = np.zeros((height, width), dtype=bool)
            m[rows[i]:rows[i + 1], cols[j]:cols[j + 1]] = True
            names.append(f"region_{i}_{j}")
            masks.append(m)
    return names, np.stack(masks)


def foreground(image, background=(1.0, 1.0, 1.0), tol: float = 0.05) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return np.abs(img - np.asarray(background)).max(axis=-1) > tol


def parse_parts(
    image,
    aux=None,
    part_res: int = 32,
    grid=(2, 2),
    threshold: float = 0.05,
    background=(1.0, 1.0, 1.0),
    background_tol: float = 0.05,
) -> PartSet:
    """Split an H×W×3 image into parts.

    With ``aux`` (an H×W label map) the labelled parts are returned as-is;
    otherwise grid regions whose foreground fraction is below ``threshold``
    are dropped.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected H×W×3 image, got {img.shape}")
    if aux is not None:
        labels = np.asarray(aux)
        names, masks = [], []
        for idx, name in enumerate(PART_NAMES, start=1):
            m = labels == idx
            if m.any():
                names.append(name)
                masks.append(m)
    else:
        all_names, all_masks = region_masks(img.shape[0], img.shape[1], grid)
        fg = foreground(img, background, background_tol)
        keep = [fg[m].mean() >= threshold for m in all_masks]
        names = [n for n, k in zip(all_names, keep) if k]
        masks = [m for m, k in zip(all_masks, keep) if k]
    if not masks:
        raise ValueError("no parts found")
    masks = np.stack(masks)
    return PartSet(names, masks, crop_parts(img, masks, part_res))


def region_crops(
    images: torch.Tensor,
    grid=(2, 2),
    part_res: int = 32,
    threshold: float = 0.05,
    background=(1.0, 1.0, 1.0),
    background_tol: float = 0.05,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable batched region parser.

    images: B×3×H×W -> (crops B×M×3×r×r, valid B×M bool). Validity is
    computed without gradient.
    """
    b, _, h, w = images.shape
    gr, gc = grid
    rows = np.linspace(0, h, gr + 1).round().astype(int)
    cols = np.linspace(0, w, gc + 1).round().astype(int)
    bg = torch.as_tensor(background, dtype=images.dtype).view(1, 3, 1, 1)
    with torch.no_grad():
        fg = ((images - bg).abs().amax(dim=1) > background_tol).to(images.dtype)
    crops, valid = [], []
    for i in range(gr):
        for j in range(gc):
            cell = images[:, :, rows[i]:rows[i + 1], cols[j]:cols[j + 1]]
            crops.append(_resize(cell, part_res))
            valid.append(fg[:, rows[i]:rows[i + 1], cols[j]:cols[j + 1]].mean(dim=(1, 2)) >= threshold)
    return torch.stack(crops, dim=1), torch.stack(valid, dim=1)


def truth_crops(images: torch.Tensor, labels: torch.Tensor, part_res: int = 32) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched ground-truth parser: labels B×H×W -> (crops B×5×3×r×r, valid B×5)."""
    b = images.shape[0]
    crops = images.new_zeros(b, len(PART_NAMES), 3, part_res, part_res)
    valid = torch.zeros(b, len(PART_NAMES), dtype=torch.bool)
    for n in range(b):
        for idx in range(len(PART_NAMES)):
            m = labels[n] == idx + 1
            if not m.any():
                continue
            r0, r1, c0, c1 = mask_bbox(m.numpy())
            patch = (images[n] * m.to(images.dtype))[:, r0:r1 + 1, c0:c1 + 1]
            crops[n, idx] = _resize(patch.unsqueeze(0), part_res)[0]
            valid[n, idx] = True
    return crops, valid
