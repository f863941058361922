"""Learnable networks: generator, discriminator and part-level alignment module."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, RenderConfig
from .losses import score_map_aggregate
from .renderer import CameraParams, RenderOutput, render_batch
from .triplane import TriPlane, TriPlaneDecoder

CAMERA_DIM = 25


class MappingNetwork(nn.Module):
    """MLP over the concatenation [z ‖ ē ‖ p]."""

    def __init__(self, z_dim: int, text_dim: int, w_dim: int, hidden: int, camera_conditioning: bool = True):
        super().__init__()
        self.z_dim, self.text_dim = z_dim, text_dim
        self.camera_conditioning = camera_conditioning
        self.fc1 = nn.Linear(z_dim + text_dim + CAMERA_DIM, hidden)
        self.fc2 = nn.Linear(hidden, w_dim)

    def forward(self, z, e_bar, p):
        if z.shape[-1] != self.z_dim or e_bar.shape[-1] != self.text_dim or p.shape[-1] != CAMERA_DIM:
            raise ValueError(
                f"mapping input dims {z.shape[-1]}/{e_bar.shape[-1]}/{p.shape[-1]} "
                f"!= {self.z_dim}/{self.text_dim}/{CAMERA_DIM}"
            )
        if not self.camera_conditioning:
            p = torch.zeros_like(p)
        x = torch.cat([z, e_bar, p], dim=-1)
        return self.fc2(F.leaky_relu(self.fc1(x), 0.2))


def map_latent(z, e_bar, p, mapping: MappingNetwork) -> torch.Tensor:
    if isinstance(p, CameraParams):
        p = torch.as_tensor(p.to_vector(), dtype=z.dtype)
    return mapping(z, e_bar, p)


class ModulatedConv(nn.Module):
    """Convolution whose input-channel kernel slices are scaled by a style."""

    def __init__(self, in_ch: int, out_ch: int, w_dim: int, kernel: int = 3, demodulate: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel) / math.sqrt(in_ch * kernel * kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = nn.Linear(w_dim, in_ch)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)
        self.demodulate = demodulate
        self.padding = kernel // 2

    def forward(self, x, w):
        b, c, h, wd = x.shape
        style = self.affine(w)  # B×in
        weight = self.weight.unsqueeze(0) * style[:, None, :, None, None]
        if self.demodulate:
            weight = weight * torch.rsqrt(weight.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
        weight = weight.reshape(-1, c, *self.weight.shape[2:])
        out = F.conv2d(x.reshape(1, b * c, h, wd), weight, padding=self.padding, groups=b)
        return out.reshape(b, -1, h, wd) + self.bias.view(1, -1, 1, 1)


class TriPlaneBackbone(nn.Module):
    """Modulated convolutional decoder from a learned 4×4 constant to three planes."""

    def __init__(self, w_dim: int, channels: tuple[int, ...], plane_channels: int, plane_res: int):
        super().__init__()
        if 4 * 2 ** (len(channels) - 1) != plane_res:
            raise ValueError(f"{len(channels)} blocks from 4×4 cannot reach plane_res {plane_res}")
        self.const = nn.Parameter(torch.randn(channels[0], 4, 4))
        ins = (channels[0],) + tuple(channels[:-1])
        self.blocks = nn.ModuleList(ModulatedConv(i, o, w_dim) for i, o in zip(ins, channels))
        self.to_planes = ModulatedConv(channels[-1], 3 * plane_channels, w_dim, kernel=1, demodulate=False)
        self.plane_channels = plane_channels

    def forward(self, w):
        x = self.const.unsqueeze(0).expand(w.shape[0], -1, -1, -1)
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.leaky_relu(block(x, w), 0.2)
        out = self.to_planes(x, w)
        r = out.shape[-1]
        return out.reshape(w.shape[0], 3, self.plane_channels, r, r)


class Upsampler(nn.Module):
    """Nearest ×2 upsampling (resized to the final size) and two convolutions.

    The convolutions predict a residual in logit space on top of the
    upsampled rendered colour.
    """

    def __init__(self, feature_channels: int, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3 + feature_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 3, 3, padding=1)

    def forward(self, rgb, feature, final_res: int):
        x = torch.cat([rgb * 2 - 1, feature], dim=1)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if x.shape[-1] != final_res:
            x = F.interpolate(x, size=(final_res, final_res), mode="bilinear", align_corners=False, antialias=True)
        base = ((x[:, :3] + 1) / 2).clamp(1e-3, 1 - 1e-3)
        residual = self.conv2(F.leaky_relu(self.conv1(x), 0.2))
        return torch.sigmoid(torch.logit(base) + residual)


class Generator(nn.Module):
    def __init__(self, text_dim: int, model: ModelConfig, render: RenderConfig):
        super().__init__()
        self.model_cfg, self.render_cfg = model, render
        self.text_dim = text_dim
        self.mapping = MappingNetwork(model.z_dim, text_dim, model.w_dim, model.mapping_hidden, model.camera_conditioning)
        self.backbone = TriPlaneBackbone(model.w_dim, model.backbone_channels, model.plane_channels, model.plane_res)
        self.decoder = TriPlaneDecoder(model.plane_channels, model.decoder_hidden, model.feature_channels)
        self.upsampler = Upsampler(model.feature_channels, model.upsampler_channels)

    @property
    def z_dim(self) -> int:
        return self.model_cfg.z_dim

    def planes(self, z, e_bar, p):
        return self.backbone(self.mapping(z, e_bar, p))

    def forward(
        self, z, e_bar, cams, neural_res: int | None = None, render_cams=None,
        stratified: bool | None = None, generator: torch.Generator | None = None,
        n_samples: int | None = None,
    ) -> dict[str, torch.Tensor]:
        """Generate B faces; ``render_cams`` overrides the viewing cameras
        while ``cams`` stays the conditioning pose."""
        rc = self.render_cfg
        planes = self.planes(z, e_bar, cams)
        out = render_batch(
            planes, self.decoder, cams if render_cams is None else render_cams,
            neural_res or rc.neural_res, n_samples or rc.n_samples,
            rc.stratified if stratified is None else stratified, generator,
            rc.background, rc.near_scale, rc.far_scale,
        )
        out["image"] = self.upsampler(out["rgb"], out["feature"], rc.final_res)
        out["planes"] = planes
        return out


def generate(z, text, p, G: Generator, text_encoder, neural_res: int | None = None,
             seed: int | None = None) -> tuple[RenderOutput, TriPlane]:
    """Single-sample generation; returns the final-resolution render and its tri-plane.

    Sampling is stratified only when ``seed`` is given.
    """
    dtype = next(G.parameters()).dtype
    z = torch.as_tensor(z, dtype=dtype).reshape(1, -1)
    e_bar = text_encoder(text).to(dtype).reshape(1, -1)
    cam = torch.as_tensor(p.to_vector() if isinstance(p, CameraParams) else p, dtype=dtype).reshape(1, -1)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    out = G(z, e_bar, cam, neural_res=neural_res, stratified=seed is not None, generator=gen)
    render = RenderOutput(
        out["feature"][0].permute(1, 2, 0),
        out["image"][0].permute(1, 2, 0),
        out["weight"][0],
        out["depth"][0],
    )
    return render, TriPlane(out["planes"][0])


class Discriminator(nn.Module):
    """Convolutional trunk with projection conditioning on [ē ‖ p]."""

    def __init__(self, text_dim: int, model: ModelConfig, image_res: int = 32):
        super().__init__()
        layers, ch = [], 3
        for out_ch in model.disc_channels:
            layers += [nn.Conv2d(ch, out_ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch = out_ch
        self.trunk = nn.Sequential(*layers)
        side = image_res // 2 ** len(model.disc_channels)
        self.fc = nn.Linear(ch * side * side, model.disc_feature)
        self.out = nn.Linear(model.disc_feature, 1)
        self.embed = nn.Linear(text_dim + CAMERA_DIM, model.disc_feature, bias=False)
        self.image_res = image_res

    def forward(self, x, e_bar, p):
        if x.shape[-1] != self.image_res or x.shape[-2] != self.image_res:
            raise ValueError(f"discriminator expects {self.image_res}² images, got {tuple(x.shape[-2:])}")
        h = F.leaky_relu(self.fc(self.trunk(x * 2 - 1).flatten(1)), 0.2)
        cond = self.embed(torch.cat([e_bar, p], dim=-1))
        proj = (cond * h).sum(dim=-1, keepdim=True) / math.sqrt(h.shape[-1])
        return (self.out(h) + proj).squeeze(-1)


def discriminate(x, e_bar, p, D: Discriminator) -> torch.Tensor:
    return D(x, e_bar, p)


class PartFeatureExtractor(nn.Module):
    """δ: part crop (3×r×r) -> d-dimensional feature."""

    def __init__(self, dim: int = 64, width: int = 16):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(2 * width * 4, dim)

    def forward(self, crops):
        h = self.trunk(crops * 2 - 1)
        return self.fc(F.adaptive_avg_pool2d(h, 2).flatten(1))


def extract_part_features(parts, delta: PartFeatureExtractor) -> torch.Tensor:
    """Rows of the returned M×d matrix are δ applied to each part crop."""
    crops = parts.crops if hasattr(parts, "crops") else parts
    crops = torch.as_tensor(np.asarray(crops) if not torch.is_tensor(crops) else crops)
    if crops.shape[0] == 0:
        raise ValueError("no parts")
    if crops.shape[-1] == 3:
        crops = crops.permute(0, 3, 1, 2)
    return delta(crops.to(delta.fc.weight.dtype))


class TokenProjection(nn.Module):
    """l_K: one independent affine projection per head."""

    def __init__(self, in_dim: int, out_dim: int, heads: int = 1):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(heads, in_dim, out_dim) / math.sqrt(in_dim))
        self.bias = nn.Parameter(torch.zeros(heads, out_dim))

    def forward(self, H):
        return torch.einsum("nd,hde->hne", H, self.weight) + self.bias[:, None, :]


def project_tokens(H, l_K: TokenProjection) -> torch.Tensor:
    """Returns N×d for a single head, h×N×d otherwise."""
    K = l_K(torch.as_tensor(H, dtype=l_K.weight.dtype))
    return K[0] if K.shape[0] == 1 else K


class AttributeClassifier(nn.Module):
    """γ: flattened aggregated features -> k sigmoid probabilities."""

    def __init__(self, in_dim: int, hidden: int, k: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, k)

    def logits(self, f_agg):
        return self.fc2(F.leaky_relu(self.fc1(f_agg.flatten(-2)), 0.2))

    def forward(self, f_agg):
        return torch.sigmoid(self.logits(f_agg))


def classify_attributes(f_agg, gamma: AttributeClassifier) -> torch.Tensor:
    return gamma(torch.as_tensor(f_agg, dtype=gamma.fc1.weight.dtype))


class AlignmentModule(nn.Module):
    """Part-level text-to-face alignment: δ, l_K and γ around the score map.

    ``token_embs`` (N×D) are the frozen text embeddings of the attribute
    vocabulary.
    """

    def __init__(self, token_embs: torch.Tensor, model: ModelConfig):
        super().__init__()
        self.register_buffer("token_embs", torch.as_tensor(token_embs, dtype=torch.float32))
        n, text_dim = self.token_embs.shape
        self.delta = PartFeatureExtractor(model.part_dim)
        self.l_k = TokenProjection(text_dim, model.part_dim, model.heads)
        self.gamma = AttributeClassifier(n * model.heads * model.part_dim, model.classifier_hidden, n)

    def aggregate(self, crops, part_mask=None):
        """crops: B×M×3×r×r, part_mask: B×M -> F_agg B×N×(h·d)."""
        b, m = crops.shape[:2]
        feats = self.delta(crops.flatten(0, 1)).reshape(b, m, -1)
        keys = self.l_k(self.token_embs)  # h×N×d
        per_head = [score_map_aggregate(feats, keys[i], part_mask)[1] for i in range(keys.shape[0])]
        return torch.cat(per_head, dim=-1)

    def logits(self, crops, part_mask=None):
        return self.gamma.logits(self.aggregate(crops, part_mask))

    def forward(self, crops, part_mask=None):
        return torch.sigmoid(self.logits(crops, part_mask))
