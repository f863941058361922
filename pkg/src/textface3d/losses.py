"""Training and guidance objectives."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def contrastive_loss(text_embs, img_embs, tau: float = 0.07, standard_infonce: bool = False):
    """Symmetric text/image contrastive loss over a mini-batch of n pairs.

    Each per-sample term is ``-(1/n) log softmax`` at the paired index, and the
    total is ``1/(2n)`` times the sum over both directions. With
    ``standard_infonce`` the inner ``1/n`` is dropped.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = text_embs.shape[0]
    logits = text_embs @ img_embs.T / tau
    diag = torch.arange(n)
    per_text = -logits.log_softmax(dim=1)[diag, diag]
    per_image = -logits.log_softmax(dim=0)[diag, diag]
    inner = 1.0 if standard_infonce else 1.0 / n
    return (per_text + per_image).sum() * inner / (2 * n)


def contrastive_terms(text_embs, img_embs, tau: float = 0.07):
    """Per-sample summands (L(s_i), L(x_i)) of :func:`contrastive_loss`."""
    n = text_embs.shape[0]
    logits = text_embs @ img_embs.T / tau
    diag = torch.arange(n)
    return -logits.log_softmax(dim=1)[diag, diag] / n, -logits.log_softmax(dim=0)[diag, diag] / n


def score_map_aggregate(F_parts, K, part_mask=None):
    """Score map W = row-softmax(F Kᵀ / √d) and aggregated features Wᵀ F.

    F_parts: [B×]M×d, K: N×d. ``part_mask`` ([B×]M, bool) removes dropped
    parts from the aggregation. Returns (W [B×]M×N, F_agg [B×]N×d).
    """
    d = F_parts.shape[-1]
    if d == 0:
        raise ValueError("feature dimension must be positive")
    if K.shape[-1] != d:
        raise ValueError(f"dimension mismatch: F has {d}, K has {K.shape[-1]}")
    W = torch.softmax(F_parts @ K.transpose(-1, -2) / math.sqrt(d), dim=-1)
    if part_mask is not None:
        W = W * part_mask.unsqueeze(-1).to(W.dtype)
    F_agg = W.transpose(-1, -2) @ F_parts
    return W, F_agg


def fine_grained_loss(probs, y, positive_only: bool = False, eps: float = 1e-7):
    """Binary cross-entropy summed over the k attributes (mean over a batch)."""
    probs = torch.as_tensor(probs).clamp(eps, 1 - eps)
    y = torch.as_tensor(y, dtype=probs.dtype)
    loss = y * torch.log(probs)
    if not positive_only:
        loss = loss + (1 - y) * torch.log1p(-probs)
    loss = -loss.sum(dim=-1)
    return loss.mean() if loss.ndim else loss


def fine_grained_loss_logits(logits, y, positive_only: bool = False):
    """Same objective from pre-sigmoid logits (numerically stable form)."""
    y = y.to(logits.dtype)
    loss = y * F.softplus(-logits)
    if not positive_only:
        loss = loss + (1 - y) * F.softplus(logits)
    return loss.sum(dim=-1).mean()


def gan_losses(real_logits, fake_logits, grad_penalty=0.0, r1_gamma: float = 1.0):
    """Non-saturating losses: (d_loss, g_loss)."""
    if not torch.is_tensor(real_logits):
        real_logits = torch.as_tensor(real_logits, dtype=torch.float64)
    if not torch.is_tensor(fake_logits):
        fake_logits = torch.as_tensor(fake_logits, dtype=real_logits.dtype)
    d_loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean() + r1_gamma * grad_penalty
    g_loss = F.softplus(-fake_logits).mean()
    return d_loss, g_loss


def r1_penalty(real_logits, real_images, create_graph: bool = True):
    """Mean squared gradient norm of D at the real images."""
    (grad,) = torch.autograd.grad(real_logits.sum(), real_images, create_graph=create_graph)
    return grad.pow(2).flatten(1).sum(dim=1).mean()


def dcg_from_embeddings(cur_embs, frozen_embs, target_emb, base_emb, eps: float = 1e-8):
    """Directional loss between image-change and text-change directions.

    cur_embs/frozen_embs: M×D; target_emb/base_emb: D. An image direction
    shorter than ``eps`` is scored against ``eps`` instead of its own length,
    so an exactly zero direction contributes 1 while still receiving a
    gradient towards the text direction.
    """
    v_t = target_emb - base_emb
    norm_t = v_t.norm()
    if norm_t < eps:
        raise ValueError("style prompts indistinguishable")
    v_t = v_t / norm_t
    v_i = cur_embs - frozen_embs
    cos = (v_i @ v_t) / v_i.norm(dim=-1).clamp_min(eps)
    # rounding can push |cos| past 1; both ends are stationary points anyway
    return (1 - cos.clamp(-1.0, 1.0)).mean()


def dcg_loss(imgs_cur, imgs_frozen, s_star, s_o, text_encoder, image_encoder, eps: float = 1e-8):
    cur = image_encoder(imgs_cur)
    frozen = image_encoder(imgs_frozen)
    dtype = cur.dtype
    return dcg_from_embeddings(cur, frozen, text_encoder(s_star).to(dtype), text_encoder(s_o).to(dtype), eps)
