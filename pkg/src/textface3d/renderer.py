"""Pinhole cameras, ray sampling and emission-absorption volume rendering.

Camera convention (OpenCV): camera x points right, y down, z forward. The
extrinsic matrix maps world to camera coordinates. Intrinsics are normalized
so that the image spans [0, 1] in both directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .triplane import TriPlane, TriPlaneDecoder, sample_planes


@dataclass
class CameraParams:
    extrinsic: np.ndarray  # 4×4 world-to-camera
    intrinsic: np.ndarray  # 3×3 normalized

    def __post_init__(self):
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)
        self.intrinsic = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        self.validate()

    def validate(self) -> None:
        e, k = self.extrinsic, self.intrinsic
        if not (np.isfinite(e).all() and np.isfinite(k).all()):
            raise ValueError("camera parameters must be finite")
        if not np.allclose(e[3], [0, 0, 0, 1], atol=1e-6):
            raise ValueError("extrinsic bottom row must be (0, 0, 0, 1)")
        rot = e[:3, :3]
        if abs(np.linalg.det(rot)) < 1e-8:
            raise ValueError("singular extrinsic matrix")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5):
            raise ValueError("extrinsic rotation block is not orthonormal")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.extrinsic.ravel(), self.intrinsic.ravel()])

    @classmethod
    def from_vector(cls, vec) -> "CameraParams":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.shape != (25,):
            raise ValueError(f"camera vector must have 25 entries, got {vec.size}")
        return cls(vec[:16], vec[16:])

    @property
    def center(self) -> np.ndarray:
        rot, t = self.extrinsic[:3, :3], self.extrinsic[:3, 3]
        return -rot.T @ t


def intrinsic_matrix(focal: float, cx: float = 0.5, cy: float = 0.5) -> np.ndarray:
    return np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])


def look_at_camera(
    yaw: float, pitch: float, radius: float = 2.7, focal: float = 1.5,
    target=(0.0, 0.0, 0.0),
) -> CameraParams:
    """Camera on a sphere around ``target``; yaw = pitch = 0 looks down -z.

    Positive yaw moves the camera towards +x, positive pitch upwards (+y).
    """
    target = np.asarray(target, dtype=np.float64)
    eye = target + radius * np.array(
        [math.sin(yaw) * math.cos(pitch), math.sin(pitch), math.cos(yaw) * math.cos(pitch)]
    )
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera axes in world coords
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    return CameraParams(ext, intrinsic_matrix(focal))


@dataclass
class RayBundle:
    origins: torch.Tensor  # H×W×3
    directions: torch.Tensor  # H×W×3
    near: float
    far: float


@dataclass
class RenderOutput:
    feature_image: torch.Tensor  # H×W×F
    rgb_image: torch.Tensor  # H×W×3
    weight_image: torch.Tensor  # H×W
    depth_image: torch.Tensor  # H×W


def _as_cam_tensor(cams, dtype) -> torch.Tensor:
    if isinstance(cams, CameraParams):
        cams = cams.to_vector()[None]
    return torch.as_tensor(np.asarray(cams) if not torch.is_tensor(cams) else cams, dtype=dtype)


def rays_from_cameras(cams: torch.Tensor, res: int) -> tuple[torch.Tensor, torch.Tensor]:
    """B×25 camera vectors -> (origins, unit directions), each B×(res·res)×3.

    Pixels are enumerated row-major through their centres.
    """
    if res < 1:
        raise ValueError("res must be >= 1")
    b = cams.shape[0]
    ext = cams[:, :16].reshape(b, 4, 4)
    k = cams[:, 16:].reshape(b, 3, 3)
    rot, t = ext[:, :3, :3], ext[:, :3, 3]
    coords = (torch.arange(res, dtype=cams.dtype) + 0.5) / res
    v, u = torch.meshgrid(coords, coords, indexing="ij")
    u, v = u.reshape(1, -1), v.reshape(1, -1)
    fx, fy = k[:, 0, 0, None], k[:, 1, 1, None]
    cx, cy = k[:, 0, 2, None], k[:, 1, 2, None]
    d_cam = torch.stack([(u - cx) / fx, (v - cy) / fy, torch.ones_like(u.expand(b, -1))], dim=-1)
    dirs = d_cam @ rot  # row-vector form of rot^T @ d
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origin = -(rot.transpose(1, 2) @ t.unsqueeze(-1)).squeeze(-1)
    return origin.unsqueeze(1).expand_as(dirs), dirs


def generate_rays(cam: CameraParams, res: int, near_scale: float = 0.5, far_scale: float = 1.5) -> RayBundle:
    origins, dirs = rays_from_cameras(_as_cam_tensor(cam, torch.float64), res)
    dist = float(np.linalg.norm(cam.center))
    return RayBundle(
        origins[0].reshape(res, res, 3), dirs[0].reshape(res, res, 3),
        near_scale * dist, far_scale * dist,
    )


def sample_depths(
    near: torch.Tensor, far: torch.Tensor, n_samples: int, stratified: bool,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Depths per bin for rays with bounds ``near``/``far`` (same shape S).

    Returns S×n_samples. Without stratification every depth is its bin
    midpoint; with it, one uniform draw per bin.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    near = torch.as_tensor(near)
    far = torch.as_tensor(far, dtype=near.dtype)
    shape = near.shape + (n_samples,)
    if stratified:
        u = torch.rand(shape, generator=generator, dtype=near.dtype)
    else:
        u = torch.full(shape, 0.5, dtype=near.dtype)
    idx = torch.arange(n_samples, dtype=near.dtype)
    width = (far - near).unsqueeze(-1) / n_samples
    return near.unsqueeze(-1) + (idx + u) * width


def sample_along_ray(ray_near: float, ray_far: float, n_samples: int, stratified: bool = False,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    return sample_depths(torch.tensor(float(ray_near), dtype=torch.float64), torch.tensor(float(ray_far), dtype=torch.float64),
                         n_samples, stratified, generator)


def composite(
    densities: torch.Tensor,
    features: torch.Tensor,
    deltas: torch.Tensor,
    depths: torch.Tensor | None = None,
    eps: float = 1e-10,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Emission-absorption compositing along the last sample axis.

    densities, deltas: ...×n; features: ...×n×F. Returns (feature ...×F,
    weight_sum ..., depth ...). ``depths`` defaults to the running sum of
    deltas measured at the bin centres.
    """
    densities = torch.as_tensor(densities)
    if (densities < 0).any():
        raise ValueError("densities must be non-negative")
    deltas = torch.as_tensor(deltas, dtype=densities.dtype)
    tau = densities * deltas
    alpha = 1.0 - torch.exp(-tau)
    depth_tau = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(depth_tau - tau))
    weights = trans * alpha
    feature = (weights.unsqueeze(-1) * features).sum(dim=-2)
    # Σ Tᵢαᵢ telescopes to 1 - T_{n+1}
    weight_sum = -torch.expm1(-depth_tau[..., -1])
    if depths is None:
        depths = torch.cumsum(deltas, dim=-1) - 0.5 * deltas
    depth = (weights * depths).sum(dim=-1) / weight_sum.clamp_min(eps)
    return feature, weight_sum, depth


def render_batch(
    planes: torch.Tensor,
    decoder: TriPlaneDecoder,
    cams: torch.Tensor,
    res: int,
    n_samples: int,
    stratified: bool = False,
    generator: torch.Generator | None = None,
    background=(1.0, 1.0, 1.0),
    near_scale: float = 0.5,
    far_scale: float = 1.5,
) -> dict[str, torch.Tensor]:
    """Render B tri-planes from B cameras.

    Returns channel-first maps: ``feature`` B×F×res×res, ``rgb`` B×3×res×res,
    ``weight`` and ``depth`` B×res×res.
    """
    b = planes.shape[0]
    cams = cams.to(planes.dtype)
    origins, dirs = rays_from_cameras(cams, res)
    dist = origins[:, 0].norm(dim=-1, keepdim=True)  # B×1
    near, far = near_scale * dist, far_scale * dist
    t = sample_depths(near.expand(b, res * res), far.expand(b, res * res), n_samples, stratified, generator)
    pts = origins.unsqueeze(2) + t.unsqueeze(-1) * dirs.unsqueeze(2)  # B×P×n×3
    feat = sample_planes(planes, pts.reshape(b, -1, 3))
    sigma, feats = decoder(feat)
    sigma = sigma.reshape(b, res * res, n_samples)
    feats = feats.reshape(b, res * res, n_samples, -1)
    delta = ((far - near) / n_samples).unsqueeze(-1).expand_as(t)
    rgb_samples = torch.sigmoid(feats[..., :3])
    both = torch.cat([feats, rgb_samples], dim=-1)
    comp, wsum, depth = composite(sigma, both, delta, t)
    nf = feats.shape[-1]
    bg = torch.as_tensor(background, dtype=planes.dtype)
    rgb = comp[..., nf:] + (1.0 - wsum).unsqueeze(-1) * bg

    def chw(x):
        return x.reshape(b, res, res, -1).permute(0, 3, 1, 2)

    return {
        "feature": chw(comp[..., :nf]),
        "rgb": chw(rgb),
        "weight": wsum.reshape(b, res, res),
        "depth": depth.reshape(b, res, res),
    }


def render_image(
    tp: TriPlane,
    decoder: TriPlaneDecoder,
    cam: CameraParams,
    res: int,
    n_samples: int,
    stratified: bool = False,
    generator: torch.Generator | None = None,
    background=(1.0, 1.0, 1.0),
    near_scale: float = 0.5,
    far_scale: float = 1.5,
) -> RenderOutput:
    planes = tp.planes if isinstance(tp, TriPlane) else tp
    if planes.ndim == 4:
        planes = planes.unsqueeze(0)
    out = render_batch(
        planes, decoder, _as_cam_tensor(cam, planes.dtype), res, n_samples, stratified,
        generator, background, near_scale, far_scale,
    )
    return RenderOutput(
        out["feature"][0].permute(1, 2, 0),
        out["rgb"][0].permute(1, 2, 0),
        out["weight"][0],
        out["depth"][0],
    )
