"""Shared oracles for the test-suite: central finite differences and the
gradient cases used both by per-module tests and the acceptance gate."""

from __future__ import annotations

import math

import torch

from textface3d.encoders import ToyImageEncoder, ToyTextEncoder
from textface3d.losses import (
    contrastive_loss,
    dcg_loss,
    fine_grained_loss,
    gan_losses,
    score_map_aggregate,
)
from textface3d.renderer import look_at_camera, render_image
from textface3d.triplane import TriPlane, TriPlaneDecoder, decode_point, sample_triplane

DT = torch.float64


def fd_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x`` (in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn())
        flat[i] = orig - eps
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def check_grads(fn, params) -> float:
    """Max relative error between autograd and central differences over ``params``."""
    for p in params:
        p.grad = None
    fn().backward()
    errs = []
    with torch.no_grad():
        for p in params:
            errs.append(rel_error(p.grad.detach().clone(), fd_grad(fn, p)))
    return max(errs)


def _leaf(*shape, gen, scale=1.0):
    return (torch.randn(*shape, generator=gen, dtype=DT) * scale).requires_grad_(True)


def tiny_decoder(c=2, hidden=4, f=3, seed=0) -> TriPlaneDecoder:
    torch.manual_seed(seed)
    return TriPlaneDecoder(c, hidden, f).double()


# -- the eight differentiable operations --------------------------------------

def case_sample_triplane(gen):
    planes = _leaf(3, 2, 4, 4, gen=gen)
    xyz = (torch.rand(5, 3, generator=gen, dtype=DT) * 1.6 - 0.8).requires_grad_(True)
    w = torch.randn(5, 2, generator=gen, dtype=DT)
    return check_grads(lambda: (sample_triplane(planes, xyz) * w).sum(), [planes, xyz])


def case_decode_point(gen):
    dec = tiny_decoder()
    feat = _leaf(6, 2, gen=gen)

    def fn():
        s = decode_point(feat, dec)
        return s.density.sum() + (s.feature ** 2).sum()

    return check_grads(fn, [feat, *dec.parameters()])


def case_render_image(gen):
    planes = _leaf(3, 2, 4, 4, gen=gen)
    dec = tiny_decoder()
    cam = look_at_camera(0.2, 0.1)
    w = torch.randn(2, 2, 3, generator=gen, dtype=DT)

    def fn():
        out = render_image(TriPlane(planes), dec, cam, res=2, n_samples=6)
        return (out.rgb_image * w).sum() + out.weight_image.sum() + out.feature_image.pow(2).sum()

    return check_grads(fn, [planes, *dec.parameters()])


def case_contrastive_loss(gen):
    t = _leaf(4, 5, gen=gen)
    i = _leaf(4, 5, gen=gen)
    return check_grads(lambda: contrastive_loss(t, i, tau=0.5), [t, i])


def case_score_map_aggregate(gen):
    f = _leaf(3, 4, gen=gen)
    k = _leaf(5, 4, gen=gen)
    w = torch.randn(5, 4, generator=gen, dtype=DT)
    v = torch.randn(3, 5, generator=gen, dtype=DT)

    def fn():
        W, agg = score_map_aggregate(f, k)
        return (agg * w).sum() + (W * v).sum()

    return check_grads(fn, [f, k])


def case_fine_grained_loss(gen):
    probs = (torch.rand(2, 5, generator=gen, dtype=DT) * 0.8 + 0.1).requires_grad_(True)
    y = (torch.rand(2, 5, generator=gen) > 0.5).to(DT)
    return check_grads(lambda: fine_grained_loss(probs, y), [probs])


def case_gan_losses(gen):
    real = _leaf(4, gen=gen)
    fake = _leaf(4, gen=gen)
    gp = torch.tensor(0.3, dtype=DT, requires_grad=True)

    def fn():
        d, g = gan_losses(real, fake, gp, r1_gamma=0.7)
        return d + 1.3 * g

    return check_grads(fn, [real, fake, gp])


def case_dcg_loss(gen):
    text = ToyTextEncoder(dim=8, seed=0)
    torch.manual_seed(0)
    enc = ToyImageEncoder(dim=8, width=4, feature_dim=8, seed=None).double()
    cur = torch.rand(2, 3, 8, 8, generator=gen, dtype=DT).requires_grad_(True)
    frozen = torch.rand(2, 3, 8, 8, generator=gen, dtype=DT)
    return check_grads(lambda: dcg_loss(cur, frozen, "red", "photo", text, enc), [cur])


GRADIENT_CASES = {
    "sample_triplane": case_sample_triplane,
    "decode_point": case_decode_point,
    "render_image": case_render_image,
    "contrastive_loss": case_contrastive_loss,
    "score_map_aggregate": case_score_map_aggregate,
    "fine_grained_loss": case_fine_grained_loss,
    "gan_losses": case_gan_losses,
    "dcg_loss": case_dcg_loss,
}


def slab_transmittance(sigma: float, length: float) -> float:
    """Closed-form opacity of a homogeneous slab."""
    return 1.0 - math.exp(-sigma * length)
