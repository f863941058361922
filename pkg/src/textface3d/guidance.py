"""Inference-time generator fine-tuning and single-image inversion."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .data import sample_camera
from .encoders import as_image_batch
from .losses import dcg_from_embeddings
from .networks import Generator
from .renderer import CameraParams


def clone_freeze(G: Generator) -> Generator:
    frozen = copy.deepcopy(G)
    frozen.eval()
    frozen.requires_grad_(False)
    return frozen


def _cams(poses: list[CameraParams], dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([p.to_vector() for p in poses]), dtype=dtype)


@dataclass
class GuidanceResult:
    G: Generator
    G_frozen: Generator
    losses: list[float] = field(default_factory=list)


def run_directional_guidance(
    G: Generator,
    s_star: str,
    text_encoder,
    image_encoder,
    s_o: str = "Photo",
    M: int = 4,
    iters: int = 100,
    lr: float = 0.002,
    z: torch.Tensor | None = None,
    pose_sampler: Callable[[np.random.Generator], CameraParams] = sample_camera,
    seed: int = 0,
    eps: float = 1e-8,
) -> GuidanceResult:
    """Fine-tune a copy of ``G`` so that the embedding change of its renders,
    relative to a frozen clone, points along E_T(s_star) - E_T(s_o).

    The noise ``z`` stays fixed over all iterations; every iteration samples
    ``M`` fresh poses.
    """
    dtype = next(G.parameters()).dtype
    target = text_encoder(s_star).to(dtype)
    base = text_encoder(s_o).to(dtype)
    if (target - base).norm() < eps:
        raise ValueError("style prompts indistinguishable")
    rng = np.random.default_rng(seed)
    if z is None:
        z = torch.as_tensor(rng.standard_normal(G.z_dim), dtype=dtype)
    z = torch.as_tensor(z, dtype=dtype).reshape(1, -1).expand(M, -1)
    e = target.reshape(1, -1).expand(M, -1)

    G_frozen = clone_freeze(G)
    G_tuned = copy.deepcopy(G)
    G_tuned.requires_grad_(True)
    image_encoder.requires_grad_(False)
    opt = torch.optim.Adam(G_tuned.parameters(), lr=lr)
    losses = []
    for _ in range(iters):
        cams = _cams([pose_sampler(rng) for _ in range(M)], dtype)
        cur = G_tuned(z, e, cams, stratified=False)["image"]
        with torch.no_grad():
            ref = G_frozen(z, e, cams, stratified=False)["image"]
            ref_emb = image_encoder(ref)
        loss = dcg_from_embeddings(image_encoder(cur), ref_emb, target, base, eps)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite guidance loss")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return GuidanceResult(G_tuned, G_frozen, losses)


@dataclass
class InversionResult:
    z: torch.Tensor
    e_bar: torch.Tensor
    G: Generator
    stage1_l2: list[float] = field(default_factory=list)
    stage2_l2: list[float] = field(default_factory=list)
    initial_l2: float = float("nan")
    aborted: bool = False

    @property
    def final_l2(self) -> float:
        hist = self.stage2_l2 or self.stage1_l2
        return hist[-1] if hist else self.initial_l2


def invert_image(
    G: Generator,
    target,
    target_cam: CameraParams,
    text_encoder,
    feature_encoder=None,
    stage1_iters: int = 200,
    stage2_iters: int = 100,
    init_text: str = "a face",
    optimize_text: bool = True,
    lr_latent: float = 0.05,
    lr_tune: float = 1e-3,
    feature_weight: float = 0.1,
    seed: int = 0,
) -> InversionResult:
    """Two-stage inversion.

    Stage 1 optimizes the latent pivot (z, and ē when ``optimize_text``) with
    ``G`` frozen; stage 2 fine-tunes a copy of ``G`` with the pivot fixed.
    Losses are pixel MSE plus ``feature_weight`` times MSE between
    ``feature_encoder.features`` of render and target. Reported L2 values are
    pixel MSE.
    """
    dtype = next(G.parameters()).dtype
    tgt = as_image_batch(target).to(dtype)
    cam = torch.as_tensor(target_cam.to_vector(), dtype=dtype).reshape(1, -1)
    z = torch.zeros(1, G.z_dim, dtype=dtype, requires_grad=True)
    e = text_encoder(init_text).to(dtype).reshape(1, -1).clone().requires_grad_(optimize_text)
    tgt_feat = feature_encoder.features(tgt).detach() if feature_encoder is not None else None
    if feature_encoder is not None:
        feature_encoder.requires_grad_(False)

    def objective(gen):
        img = gen(z, e, cam, stratified=False)["image"]
        pix = F.mse_loss(img, tgt)
        loss = pix
        if tgt_feat is not None:
            loss = loss + feature_weight * F.mse_loss(feature_encoder.features(img), tgt_feat)
        return loss, pix

    frozen = clone_freeze(G)
    with torch.no_grad():
        _, pix0 = objective(frozen)
    result = InversionResult(z.detach().clone(), e.detach().clone(), copy.deepcopy(G), initial_l2=pix0.item())

    params = [z] + ([e] if optimize_text else [])
    opt = torch.optim.Adam(params, lr=lr_latent)
    for _ in range(stage1_iters):
        loss, pix = objective(frozen)
        if not torch.isfinite(loss):
            result.aborted = True
            return result
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.stage1_l2.append(pix.item())
    z.requires_grad_(False)
    e.requires_grad_(False)
    result.z, result.e_bar = z.detach().clone(), e.detach().clone()
    if stage1_iters:
        with torch.no_grad():
            result.stage1_l2.append(objective(frozen)[1].item())

    tuned = copy.deepcopy(G)
    tuned.requires_grad_(True)
    opt = torch.optim.Adam(tuned.parameters(), lr=lr_tune)
    for _ in range(stage2_iters):
        loss, pix = objective(tuned)
        if not torch.isfinite(loss):
            result.aborted = True
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.stage2_l2.append(pix.item())
    if stage2_iters and not result.aborted:
        with torch.no_grad():
            result.stage2_l2.append(objective(tuned)[1].item())
    result.G = tuned
    return result
