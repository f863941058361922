"""Text, image and identity embedding encoders.

Every encoder returns unit-norm vectors. The toy encoders are deterministic
stand-ins for large pretrained models; anything that maps its input to a unit
vector of the configured dimension can be plugged in instead (see
:func:`build_text_encoder` / :func:`build_image_encoder`).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig

_NON_WORD = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, replace punctuation by whitespace and split."""
    return _NON_WORD.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class TextInput:
    raw: str
    tokens: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(tokenize(self.raw)))


def _raw(text) -> str:
    return text.raw if isinstance(text, TextInput) else str(text)


def token_seed(token: str, seed: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class ToyTextEncoder:
    """Hashed bag-of-words encoder.

    Each token is mapped to a fixed Gaussian vector drawn from a generator
    seeded by a hash of the token; a sentence embedding is the normalized mean
    of its token vectors, so word order is ignored.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            rng = np.random.default_rng(token_seed(token, self.seed))
            vec = rng.standard_normal(self.dim) / np.sqrt(self.dim)
            self._cache[token] = vec
        return vec

    def encode_np(self, text) -> np.ndarray:
        tokens = tokenize(_raw(text))
        if not tokens:
            raise ValueError("empty text")
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self.token_vector(tok)
        acc /= len(tokens)
        return acc / np.linalg.norm(acc)

    def __call__(self, texts: str | TextInput | Sequence, dtype=torch.float32) -> torch.Tensor:
        if isinstance(texts, (str, TextInput)):
            return torch.as_tensor(self.encode_np(texts), dtype=dtype)
        return torch.as_tensor(np.stack([self.encode_np(t) for t in texts]), dtype=dtype)

    def state(self) -> dict:
        return {"kind": "toy", "dim": self.dim, "seed": self.seed}


def as_image_batch(images) -> torch.Tensor:
    """Accept H×W×3, B×H×W×3 arrays or B×3×H×W tensors; return B×3×H×W."""
    x = torch.as_tensor(images)
    if not x.is_floating_point():
        x = x.float() / 255.0
    if x.ndim == 3:
        if x.shape[-1] != 3:
            raise ValueError(f"expected H×W×3 image, got shape {tuple(x.shape)}")
        return x.permute(2, 0, 1).unsqueeze(0)
    if x.ndim == 4:
        if x.shape[1] == 3:
            return x
        if x.shape[-1] == 3:
            return x.permute(0, 3, 1, 2)
    raise ValueError(f"expected 3 colour channels, got shape {tuple(x.shape)}")


class ToyImageEncoder(nn.Module):
    """Small convolutional image encoder producing unit-norm embeddings.

    ``features`` exposes the penultimate activations (used for Fréchet
    distances).
    """

    def __init__(self, dim: int = 64, width: int = 16, feature_dim: int = 64, seed: int | None = 0):
        super().__init__()
        if seed is not None:
            gen_state = torch.random.get_rng_state()
            torch.manual_seed(seed)
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.fc1 = nn.Linear(4 * width * 4, feature_dim)
        self.fc2 = nn.Linear(feature_dim, dim)
        if seed is not None:
            torch.random.set_rng_state(gen_state)
        self.dim = dim

    def features(self, images: torch.Tensor) -> torch.Tensor:
        x = as_image_batch(images).to(self.fc1.weight.dtype)
        h = self.trunk(x * 2 - 1)
        h = F.adaptive_avg_pool2d(h, 2).flatten(1)
        return F.leaky_relu(self.fc1(h), 0.2)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.fc2(self.features(images)), dim=-1, eps=1e-12)


class HueImageEncoder(nn.Module):
    """Hand-built colour-sensitive encoder living in the toy text space.

    Per-channel mean deviations from grey are written along the token vectors
    of the colour words ``red``, ``green`` and ``blue``; overall brightness
    goes along ``bright``; a constant ``photo`` component anchors the rest.
    """

    def __init__(self, text_encoder: ToyTextEncoder, gain: float = 4.0):
        super().__init__()
        words = ["red", "green", "blue", "bright", "photo"]
        basis = np.stack([text_encoder.token_vector(w) for w in words])
        self.register_buffer("basis", torch.as_tensor(basis, dtype=torch.float32))
        self.gain = gain
        self.dim = text_encoder.dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = as_image_batch(images).to(self.basis.dtype)
        m = x.mean(dim=(2, 3))
        grey = m.mean(dim=1, keepdim=True)
        coeff = torch.cat([self.gain * (m - grey), grey - 0.5, torch.ones_like(grey)], dim=1)
        return F.normalize(coeff @ self.basis, dim=-1, eps=1e-12)


class NormalizedEncoder(nn.Module):
    """Wrap an external callable so that its outputs are unit vectors."""

    def __init__(self, inner: Callable):
        super().__init__()
        self.inner = inner

    def forward(self, x):
        out = torch.as_tensor(self.inner(x))
        if out.ndim == 1:
            out = out.unsqueeze(0)
        return F.normalize(out.float(), dim=-1, eps=1e-12)


def _load_external(path: str):
    obj = torch.load(path, weights_only=False)
    if not callable(obj):
        raise TypeError(f"external encoder at {path} is not callable")
    return obj


class ExternalTextEncoder:
    """Adapter giving an external ``list[str] -> N×D`` callable the toy API."""

    def __init__(self, inner: Callable):
        self.inner = NormalizedEncoder(inner)

    def __call__(self, texts, dtype=torch.float32) -> torch.Tensor:
        single = isinstance(texts, (str, TextInput))
        raw = [_raw(texts)] if single else [_raw(t) for t in texts]
        if any(not tokenize(t) for t in raw):
            raise ValueError("empty text")
        out = self.inner(raw).to(dtype)
        return out[0] if single else out


def build_text_encoder(cfg: EncoderConfig):
    if cfg.kind == "external":
        return ExternalTextEncoder(_load_external(cfg.external_path))
    return ToyTextEncoder(cfg.dim, cfg.seed)


def build_image_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.kind == "external":
        return NormalizedEncoder(_load_external(cfg.external_path))
    return ToyImageEncoder(cfg.dim, seed=cfg.seed)


def encode_text(text, encoder: ToyTextEncoder | None = None) -> torch.Tensor:
    encoder = encoder or ToyTextEncoder()
    return encoder(text)


@torch.no_grad()
def encode_image(image, encoder: nn.Module) -> torch.Tensor:
    """Embed a single H×W×3 image (values in [0, 1])."""
    return encoder(as_image_batch(image))[0]


@torch.no_grad()
def encode_identity(image, encoder: nn.Module) -> torch.Tensor:
    return encoder(as_image_batch(image))[0]


def fit_text_aligned(
    encoder: ToyImageEncoder,
    images: torch.Tensor,
    text_embs: torch.Tensor,
    steps: int,
    batch_size: int = 32,
    lr: float = 3e-3,
    tau: float = 0.07,
    seed: int = 0,
) -> list[float]:
    """Train ``encoder`` so image embeddings match their caption embeddings.

    Symmetric InfoNCE between image embeddings and fixed text embeddings;
    duplicate captions inside a batch are treated as positives.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    losses = []
    n = images.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        img = encoder(images[idx])
        txt = text_embs[idx]
        logits = img @ txt.T / tau
        same = (txt @ txt.T) > 1 - 1e-6
        target = same.float() / same.float().sum(1, keepdim=True)
        loss = 0.5 * (
            -(target * logits.log_softmax(1)).sum(1).mean()
            - (target * logits.T.log_softmax(1)).sum(1).mean()
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    encoder.eval()
    return losses


def fit_identity(
    encoder: ToyImageEncoder,
    views: torch.Tensor,
    steps: int,
    batch_size: int = 32,
    lr: float = 3e-3,
    tau: float = 0.1,
    seed: int = 0,
) -> list[float]:
    """Supervised-contrastive fitting on ``views`` of shape I×V×3×H×W.

    Two random views of each sampled identity form a positive pair; other
    identities in the batch are negatives.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    n_id, n_views = views.shape[:2]
    losses = []
    for _ in range(steps):
        ids = torch.randperm(n_id, generator=gen)[:batch_size]
        pick = torch.stack([torch.randperm(n_views, generator=gen)[:2] for _ in ids])
        a = encoder(views[ids, pick[:, 0]])
        b = encoder(views[ids, pick[:, 1]])
        logits = a @ b.T / tau
        labels = torch.arange(len(ids))
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    encoder.eval()
    return losses
