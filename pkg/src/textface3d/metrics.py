"""Evaluation metrics and the frozen judge networks they rely on.

Judges are fitted once on freshly synthesized toy faces that never appear in
the training set:

* ``clip``: image encoder aligned with the toy text space (CLIP score and
  Fréchet-distance features),
* ``identity``: pose-invariant identity encoder (multi-view consistency),
* ``probe``: attribute classifier (attribute accuracy of generated faces).
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config
from .data import (
    ATTRIBUTE_GROUPS,
    ATTRIBUTES,
    DatasetManifest,
    face_attributes,
    face_captions,
    frontal_camera,
    identity_views,
    pose_ring,
    random_face,
    render_face,
    sample_camera,
)
from .encoders import ToyImageEncoder, as_image_batch, fit_identity, fit_text_aligned
from .renderer import CameraParams

log = logging.getLogger(__name__)

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "mvic_mean", "clip_score_mean", "clip_score_mismatched_mean", "fid",
        "attribute_accuracy", "label_prior_baseline", "n_samples", "seed",
    ],
    "properties": {
        "mvic_mean": {"type": "number", "minimum": -1, "maximum": 1},
        "clip_score_mean": {"type": "number", "minimum": 0, "maximum": 100},
        "clip_score_mismatched_mean": {"type": "number", "minimum": 0, "maximum": 100},
        "fid": {"type": "number", "minimum": 0},
        "attribute_accuracy": {
            "type": "object",
            "required": ["mean"],
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "label_prior_baseline": {
            "type": "object",
            "required": ["mean"],
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "real_probe_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "n_samples": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
    },
}


def clip_score(x, s, text_encoder, image_encoder) -> float:
    """max(100 · cos(E_I(x), E_T(s)), 0)."""
    with torch.no_grad():
        img = image_encoder(as_image_batch(x))[0]
        txt = text_encoder(s).to(img.dtype)
    return max(float(F.cosine_similarity(img, txt, dim=0)) * 100.0, 0.0)


def clip_scores(images: torch.Tensor, text_embs: torch.Tensor, image_encoder) -> torch.Tensor:
    with torch.no_grad():
        img = image_encoder(images)
    cos = F.cosine_similarity(img, text_embs.to(img.dtype), dim=-1)
    return (cos * 100).clamp_min(0)


def mean_pairwise_cosine(embs: torch.Tensor) -> float:
    embs = F.normalize(embs.double(), dim=-1)
    v = embs.shape[0]
    if v < 2:
        raise ValueError("need at least two views")
    total = sum(float(embs[i] @ embs[j]) for i, j in itertools.combinations(range(v), 2))
    return total / (v * (v - 1) / 2)


def render_views(G, z, e_bar, poses, cond_pose: CameraParams | None = None) -> torch.Tensor:
    """V final-resolution renders of one face (V×3×H×W). The tri-plane is
    conditioned on ``cond_pose`` (frontal by default) for every view."""
    cond_pose = cond_pose or frontal_camera()
    dtype = next(G.parameters()).dtype
    v = len(poses)
    cams = torch.as_tensor(np.stack([p.to_vector() for p in poses]), dtype=dtype)
    cond = torch.as_tensor(cond_pose.to_vector(), dtype=dtype).expand(v, -1)
    z = torch.as_tensor(z, dtype=dtype).reshape(1, -1).expand(v, -1)
    e = torch.as_tensor(e_bar, dtype=dtype).reshape(1, -1).expand(v, -1)
    with torch.no_grad():
        return G(z, e, cond, render_cams=cams, stratified=False)["image"]


def mvic(G, z, s, poses, identity_encoder, text_encoder, cond_pose: CameraParams | None = None) -> float:
    """Mean identity cosine over all unordered pairs of rendered views."""
    if len(poses) < 2:
        raise ValueError("mvic needs at least two poses")
    imgs = render_views(G, z, text_encoder(s), poses, cond_pose)
    with torch.no_grad():
        return mean_pairwise_cosine(identity_encoder(imgs))


def frechet_distance(mu_a, cov_a, mu_b, cov_b, eps: float = 1e-6) -> float:
    """‖μa-μb‖² + tr(Σa + Σb - 2 (Σa Σb)^½) with εI added to both covariances.

    tr (Σa Σb)^½ is evaluated as the sum of square roots of the eigenvalues of
    the symmetric matrix Σa^½ Σb Σa^½.
    """
    mu_a, mu_b = np.asarray(mu_a, dtype=np.float64), np.asarray(mu_b, dtype=np.float64)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError("feature dimensions differ")
    d = cov_a.shape[0]
    cov_a = cov_a + eps * np.eye(d)
    cov_b = cov_b + eps * np.eye(d)
    w, v = np.linalg.eigh((cov_a + cov_a.T) / 2)
    sqrt_a = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    mid = sqrt_a @ cov_b @ sqrt_a
    ev = np.linalg.eigvalsh((mid + mid.T) / 2)
    tr_sqrt = np.sqrt(np.clip(ev, 0, None)).sum()
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt
    return float(max(value, 0.0))


def fid(feats_a, feats_b, eps: float = 1e-6) -> float:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if min(len(a), len(b)) <= a.shape[1]:
        warnings.warn("fewer samples than feature dimensions; covariance is rank deficient", stacklevel=2)
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False), eps)


# -- judges --------------------------------------------------------------------

class AttributeProbe(nn.Module):
    def __init__(self, k: int = len(ATTRIBUTES), width: int = 16):
        super().__init__()
        self.encoder = ToyImageEncoder(dim=k, width=width, seed=None)

    def forward(self, images):
        return self.encoder.fc2(self.encoder.features(images))


def group_predictions(logits: torch.Tensor) -> dict[str, torch.Tensor]:
    """Per-group class indices: argmax for categorical groups, threshold for binary."""
    out = {}
    for name, idx in ATTRIBUTE_GROUPS.items():
        cols = logits[:, list(idx)]
        out[name] = cols.argmax(1) if len(idx) > 1 else (cols[:, 0] > 0).long()
    return out


def group_accuracy(logits: torch.Tensor, y: torch.Tensor) -> dict[str, float]:
    pred = group_predictions(logits)
    truth = group_predictions(torch.where(y > 0.5, 1.0, -1.0))
    acc = {k: float((pred[k] == truth[k]).float().mean()) for k in pred}
    acc["mean"] = float(np.mean([acc[k] for k in ATTRIBUTE_GROUPS]))
    return acc


def label_prior_baseline(y: torch.Tensor) -> dict[str, float]:
    """Accuracy of always predicting each group's majority class."""
    truth = group_predictions(torch.where(y > 0.5, 1.0, -1.0))
    base = {}
    for name, idx in ATTRIBUTE_GROUPS.items():
        counts = torch.bincount(truth[name], minlength=max(2, len(idx)))
        base[name] = float(counts.max()) / len(y)
    base["mean"] = float(np.mean([base[k] for k in ATTRIBUTE_GROUPS]))
    return base


@dataclass
class Judges:
    clip: ToyImageEncoder
    identity: ToyImageEncoder
    probe: AttributeProbe

    def state(self) -> dict:
        return {
            "clip": self.clip.state_dict(),
            "identity": self.identity.state_dict(),
            "probe": self.probe.state_dict(),
        }


def judges_from_state(state: dict, dim: int) -> Judges:
    j = Judges(ToyImageEncoder(dim, seed=None), ToyImageEncoder(dim, seed=None), AttributeProbe())
    j.clip.load_state_dict(state["clip"])
    j.identity.load_state_dict(state["identity"])
    j.probe.load_state_dict(state["probe"])
    for m in (j.clip, j.identity, j.probe):
        m.eval().requires_grad_(False)
    return j


def judge_images(n: int, seed: int):
    """Fresh held-out toy faces: images N×3×H×W, captions, attributes N×k."""
    rng = np.random.default_rng(seed)
    imgs, caps, ys = [], [], []
    for _ in range(n):
        face = random_face(rng)
        img, _ = render_face(face, sample_camera(rng))
        imgs.append(img)
        caps.append(face_captions(face)[int(rng.integers(3))])
        ys.append(face_attributes(face))
    x = torch.as_tensor(np.stack(imgs)).permute(0, 3, 1, 2).float() / 255.0
    return x, caps, torch.tensor(ys, dtype=torch.float32)


def fit_probe(probe: AttributeProbe, images, y, steps: int, batch_size: int, lr: float, seed: int) -> list[float]:
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, len(images), (batch_size,), generator=gen)
        loss = F.binary_cross_entropy_with_logits(probe(images[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    probe.eval()
    return losses


def fit_judges(cfg: Config, text_encoder) -> dict:
    """Fit all judges deterministically from ``cfg.judges``; returns their state."""
    jc = cfg.judges
    rng_state = torch.random.get_rng_state()
    torch.manual_seed(jc.seed)
    try:
        images, caps, ys = judge_images(jc.n_images, jc.seed)
        text_embs = text_encoder(caps)
        dim = text_embs.shape[-1]
        clip = ToyImageEncoder(dim, seed=None)
        fit_text_aligned(clip, images, text_embs, jc.steps, jc.batch_size, jc.lr, seed=jc.seed)
        views, _ = identity_views(jc.n_identities, jc.views_per_identity, jc.seed + 1)
        identity = ToyImageEncoder(dim, seed=None)
        fit_identity(identity, views, jc.steps, jc.batch_size, jc.lr, seed=jc.seed + 1)
        probe = AttributeProbe()
        fit_probe(probe, images, ys, jc.steps, jc.batch_size, jc.lr, seed=jc.seed + 2)
    finally:
        torch.random.set_rng_state(rng_state)
    return Judges(clip, identity, probe).state()


# -- full evaluation -----------------------------------------------------------

def generate_for_records(G, text_encoder, manifest: DatasetManifest, indices, seed: int, batch: int = 32):
    """Generate one face per record, conditioned on its first caption and camera."""
    rng = np.random.default_rng(seed)
    dtype = next(G.parameters()).dtype
    z_all = torch.as_tensor(rng.standard_normal((len(indices), G.z_dim)), dtype=dtype)
    caps = [manifest.records[i]["captions"][0] for i in indices]
    e_all = text_encoder(caps).to(dtype)
    cams = torch.as_tensor(np.stack([manifest.records[i]["camera"] for i in indices]), dtype=dtype)
    out = []
    with torch.no_grad():
        for s in range(0, len(indices), batch):
            sl = slice(s, s + batch)
            out.append(G(z_all[sl], e_all[sl], cams[sl], stratified=False)["image"])
    return torch.cat(out), caps, e_all, z_all


def evaluate_all(G, judges: Judges, text_encoder, manifest: DatasetManifest, seed: int = 0,
                 n_samples: int = 512, n_mvic: int = 16, n_views: int = 8) -> dict:
    labeled = [i for i, r in enumerate(manifest.records) if r["captions"]]
    rng = np.random.default_rng(seed)
    idx = rng.choice(labeled, size=min(n_samples, len(labeled)), replace=False)
    idx = sorted(int(i) for i in idx)
    fake, caps, e_all, z_all = generate_for_records(G, text_encoder, manifest, idx, seed)
    y = manifest.attributes()[idx]
    real = manifest.images()[idx]

    with torch.no_grad():
        acc = group_accuracy(judges.probe(fake), y)
        real_acc = group_accuracy(judges.probe(real), y)["mean"]
        matched = clip_scores(fake, e_all, judges.clip)
        mismatched = clip_scores(fake, torch.roll(e_all, 1, dims=0), judges.clip)
        f_real = judges.clip.features(real).numpy()
        f_fake = judges.clip.features(fake).numpy()

    ring = pose_ring(n_views)
    mv = []
    for j in range(min(n_mvic, len(idx))):
        imgs = render_views(G, z_all[j], e_all[j], ring)
        with torch.no_grad():
            mv.append(mean_pairwise_cosine(judges.identity(imgs)))

    return {
        "mvic_mean": float(np.mean(mv)),
        "clip_score_mean": float(matched.mean()),
        "clip_score_mismatched_mean": float(mismatched.mean()),
        "fid": fid(f_real, f_fake),
        "attribute_accuracy": acc,
        "label_prior_baseline": label_prior_baseline(y),
        "real_probe_accuracy": real_acc,
        "n_samples": len(idx),
        "seed": int(seed),
    }
