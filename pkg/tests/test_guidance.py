import numpy as np
import pytest
import torch

from textface3d.config import ModelConfig, RenderConfig
from textface3d.data import CAMERA_RADIUS, FOCAL
from textface3d.encoders import HueImageEncoder, ToyImageEncoder, ToyTextEncoder
from textface3d.guidance import clone_freeze, invert_image, run_directional_guidance
from textface3d.networks import Generator
from textface3d.renderer import look_at_camera
from textface3d.training import param_hash

SMALL = ModelConfig(z_dim=8, w_dim=16, mapping_hidden=16, plane_channels=4, plane_res=8,
                    backbone_channels=(8, 8), decoder_hidden=8, feature_channels=4, upsampler_channels=4)
RENDER = RenderConfig(neural_res=8, final_res=16, n_samples=8, stratified=False)


@pytest.fixture
def text_enc():
    return ToyTextEncoder()


@pytest.fixture
def small_gen():
    torch.manual_seed(0)
    G = Generator(64, SMALL, RENDER)
    # style affines start at zero weight; perturb them so z and ē matter
    for m in G.modules():
        if hasattr(m, "affine"):
            torch.nn.init.normal_(m.affine.weight, std=0.3)
    return G


def _render(G, seed=0):
    z = torch.randn(2, G.z_dim, generator=torch.Generator().manual_seed(seed))
    e = ToyTextEncoder()(["red hair", "blue eyes"])
    cam = torch.as_tensor(np.stack([look_at_camera(0.2, 0.1, CAMERA_RADIUS, FOCAL).to_vector()] * 2),
                          dtype=torch.float32)
    with torch.no_grad():
        return G(z, e, cam, stratified=False)["image"]


def test_clone_freeze_is_exact_copy(small_gen):
    frozen = clone_freeze(small_gen)
    assert torch.equal(_render(small_gen), _render(frozen))
    assert not any(p.requires_grad for p in frozen.parameters())
    assert frozen is not small_gen and not frozen.training


def test_guidance_leaves_input_and_frozen_untouched(small_gen, text_enc):
    before = param_hash(small_gen)
    ref = _render(small_gen)
    res = run_directional_guidance(small_gen, "a red-tinted face", text_enc, HueImageEncoder(text_enc), M=2, iters=10)
    assert len(res.losses) == 10 and all(0 <= l <= 2 for l in res.losses)
    assert param_hash(small_gen) == before
    assert torch.equal(_render(res.G_frozen), ref)
    assert param_hash(res.G) != before


@pytest.mark.parametrize("iters,lr", [(0, 0.002), (3, 0.0)])
def test_guidance_noop_settings(small_gen, text_enc, iters, lr):
    res = run_directional_guidance(small_gen, "a blue face", text_enc, HueImageEncoder(text_enc), M=2, iters=iters, lr=lr)
    assert torch.equal(_render(res.G), _render(small_gen))


def test_guidance_same_prompt_rejected(small_gen, text_enc):
    with pytest.raises(ValueError, match="indistinguishable"):
        run_directional_guidance(small_gen, "Photo", text_enc, HueImageEncoder(text_enc), s_o="photo", iters=1)


def test_guidance_is_deterministic(small_gen, text_enc):
    enc = HueImageEncoder(text_enc)
    a = run_directional_guidance(small_gen, "a green face", text_enc, enc, M=2, iters=4, seed=3)
    b = run_directional_guidance(small_gen, "a green face", text_enc, enc, M=2, iters=4, seed=3)
    assert a.losses == b.losses and param_hash(a.G) == param_hash(b.G)


def _target(G, text_enc):
    torch.manual_seed(0)
    cam = look_at_camera(0.1, 0.05, CAMERA_RADIUS, FOCAL)
    z = torch.randn(1, G.z_dim) * 0.5
    e = text_enc("red hair").reshape(1, -1)
    with torch.no_grad():
        img = G(z, e, torch.as_tensor(cam.to_vector(), dtype=torch.float32)[None], stratified=False)["image"]
    return img, cam


def test_inversion_zero_iters_is_identity(small_gen, text_enc):
    tgt, cam = _target(small_gen, text_enc)
    res = invert_image(small_gen, tgt, cam, text_enc, stage1_iters=0, stage2_iters=0)
    assert param_hash(res.G) == param_hash(small_gen)
    assert torch.equal(res.z, torch.zeros(1, small_gen.z_dim))
    assert torch.equal(res.e_bar, text_enc("a face").reshape(1, -1))
    assert res.final_l2 == res.initial_l2 and not res.aborted


def test_inversion_reduces_l2(small_gen, text_enc):
    # a target outside the frozen generator's range leaves work for stage 2
    torch.manual_seed(1)
    tgt, cam = _target(Generator(64, SMALL, RENDER), text_enc)
    tgt = (tgt + 0.2 * torch.linspace(-1, 1, 16)).clamp(0, 1)
    before = param_hash(small_gen)
    res = invert_image(small_gen, tgt, cam, text_enc, feature_encoder=ToyImageEncoder(),
                       stage1_iters=30, stage2_iters=20)
    assert res.stage1_l2[-1] <= res.initial_l2
    assert res.stage2_l2[-1] < res.stage1_l2[-1]
    assert param_hash(small_gen) == before


def test_inversion_fixed_text(small_gen, text_enc):
    tgt, cam = _target(small_gen, text_enc)
    res = invert_image(small_gen, tgt, cam, text_enc, stage1_iters=5, stage2_iters=0, optimize_text=False)
    assert torch.equal(res.e_bar, text_enc("a face").reshape(1, -1))
    assert not torch.equal(res.z, torch.zeros(1, small_gen.z_dim))


def test_inversion_aborts_on_nan(small_gen, text_enc):
    tgt, cam = _target(small_gen, text_enc)
    res = invert_image(small_gen, torch.full_like(tgt, float("nan")), cam, text_enc, stage1_iters=5, stage2_iters=5)
    assert res.aborted and res.stage1_l2 == []
