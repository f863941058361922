"""Alternating adversarial training with alignment losses."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import Config, config_from_dict
from .data import ATTRIBUTES, DatasetManifest, TrainSample, sample_batch
from .encoders import ToyImageEncoder, build_text_encoder
from .losses import (
    contrastive_loss,
    fine_grained_loss_logits,
    gan_losses,
    r1_penalty,
)
from .networks import AlignmentModule, Discriminator, Generator
from .parsing import region_crops, truth_crops

log = logging.getLogger(__name__)


def blur_sigma(images_seen: int, cfg: Config) -> float:
    t = cfg.train
    if images_seen < 0:
        raise ValueError("images_seen must be >= 0")
    return t.blur_sigma0 * max(0.0, 1.0 - images_seen / t.blur_images)


def render_res(images_seen: int, cfg: Config) -> int:
    t = cfg.train
    if images_seen < 0:
        raise ValueError("images_seen must be >= 0")
    frac = min(1.0, images_seen / t.res_images)
    res = t.res_start + (t.res_end - t.res_start) * frac
    return int(max(t.res_start, min(t.res_end, 4 * round(res / 4))))


def gaussian_blur(images: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return images
    radius = max(1, int(math.ceil(2 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=images.dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    c = images.shape[1]
    out = F.pad(images, (radius, radius, 0, 0), mode="reflect")
    out = F.conv2d(out, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    out = F.pad(out, (0, 0, radius, radius), mode="reflect")
    return F.conv2d(out, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    cfg: Config
    G: Generator
    D: Discriminator
    C: AlignmentModule
    E_cl: ToyImageEncoder
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    gen: torch.Generator
    text_encoder: object
    step: int = 0
    images_seen: int = 0
    judges: dict | None = None
    abort_dir: Path | None = None
    _text_cache: dict = field(default_factory=dict, repr=False)

    def embed(self, captions) -> torch.Tensor:
        """Text embeddings; ``None`` captions map to the zero (null) condition."""
        rows = []
        for cap in captions:
            if cap is None:
                rows.append(torch.zeros(self.G.text_dim))
                continue
            e = self._text_cache.get(cap)
            if e is None:
                e = self.text_encoder(cap)
                self._text_cache[cap] = e
            rows.append(e)
        return torch.stack(rows)


def _adam(params, lr, betas):
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=1e-8)


def build_state(cfg: Config) -> TrainState:
    """Fresh networks and optimizers, deterministically initialised from the seed."""
    cfg.validate()
    torch.manual_seed(cfg.train.seed)
    text_encoder = build_text_encoder(cfg.encoder)
    token_embs = text_encoder(list(ATTRIBUTES))
    text_dim = token_embs.shape[-1]
    G = Generator(text_dim, cfg.model, cfg.render)
    D = Discriminator(text_dim, cfg.model, cfg.render.final_res)
    C = AlignmentModule(token_embs, cfg.model)
    E_cl = ToyImageEncoder(text_dim, seed=None)
    t = cfg.train
    opt_g = _adam(list(G.parameters()) + list(E_cl.parameters()), t.lr_g, t.betas)
    opt_d = _adam(list(D.parameters()) + list(C.parameters()), t.lr_d, t.betas)
    return TrainState(
        cfg, G, D, C, E_cl, opt_g, opt_d,
        rng=np.random.default_rng(t.seed),
        gen=torch.Generator().manual_seed(t.seed),
        text_encoder=text_encoder,
    )


def _clip(opt: torch.optim.Optimizer, max_norm: float):
    # Adam with beta1 = 0 turns a single gradient spike into an outsized step
    if max_norm > 0:
        params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def _set_trainable(modules, flag: bool):
    for m in modules:
        m.requires_grad_(flag)


def alignment_logits(state: TrainState, images: torch.Tensor, labels: torch.Tensor | None = None):
    pc = state.cfg.parts
    if labels is not None:
        crops, valid = truth_crops(images, labels, pc.part_res)
    else:
        crops, valid = region_crops(images, pc.grid, pc.part_res, pc.threshold,
                                    state.cfg.render.background, pc.background_tol)
    return state.C.logits(crops, valid)


@dataclass
class Batch:
    z: torch.Tensor
    e: torch.Tensor
    p: torch.Tensor
    x: torch.Tensor
    y: torch.Tensor
    labeled: torch.Tensor
    labels: torch.Tensor | None = None


def collate(state: TrainState, samples: list[TrainSample], manifest: DatasetManifest | None = None) -> Batch:
    idx = [s.index for s in samples]
    if manifest is not None:
        x = manifest.images()[idx]
    else:
        x = torch.as_tensor(np.stack([s.x for s in samples])).permute(0, 3, 1, 2).float() / 255.0
    labels = None
    if state.cfg.train.fg_real_parser == "truth" and manifest is not None:
        labels = manifest.label_maps()[idx]
    return Batch(
        z=torch.as_tensor(np.stack([s.z for s in samples]), dtype=torch.float32),
        e=state.embed([s.s for s in samples]),
        p=torch.as_tensor(np.stack([s.p for s in samples]), dtype=torch.float32),
        x=x,
        y=torch.as_tensor(np.stack([s.y for s in samples]), dtype=torch.float32),
        labeled=torch.tensor([s.s is not None for s in samples]),
        labels=labels,
    )


def train_step(state: TrainState, batch: Batch) -> tuple[TrainState, dict]:
    """One discriminator/alignment step followed by one generator step."""
    cfg, t = state.cfg, state.cfg.train
    res = render_res(state.images_seen, cfg)
    sigma = blur_sigma(state.images_seen, cfg)
    G, D, C, E = state.G, state.D, state.C, state.E_cl

    # phase 1: D and the alignment module
    _set_trainable([G, E], False)
    _set_trainable([D, C], True)
    with torch.no_grad():
        fake = G(batch.z, batch.e, batch.p, neural_res=res, generator=state.gen)["image"]
    real = batch.x.detach().requires_grad_(True)
    real_logits = D(gaussian_blur(real, sigma), batch.e, batch.p)
    fake_logits = D(gaussian_blur(fake, sigma), batch.e, batch.p)
    r1 = r1_penalty(real_logits, real)
    d_loss, _ = gan_losses(real_logits, fake_logits, r1, t.r1_gamma)
    fg_real = fine_grained_loss_logits(alignment_logits(state, batch.x, batch.labels), batch.y, t.fg_positive_only)
    fg_fake_d = fine_grained_loss_logits(alignment_logits(state, fake), batch.y, t.fg_positive_only)
    loss_d = t.w_gan * d_loss + t.w_fg * (fg_real + fg_fake_d)
    _check_finite(state, loss_d, "phase 1")
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    _clip(state.opt_d, t.grad_clip)
    state.opt_d.step()

    # phase 2: G and the trainable contrastive image encoder
    _set_trainable([D, C], False)
    _set_trainable([G, E], True)
    fake = G(batch.z, batch.e, batch.p, neural_res=res, generator=state.gen)["image"]
    fake_logits = D(gaussian_blur(fake, sigma), batch.e, batch.p)
    _, g_loss = gan_losses(real_logits.detach(), fake_logits)
    lab = batch.labeled
    if lab.any() and t.w_cl > 0:
        l_cl = contrastive_loss(batch.e[lab], E(fake[lab]), t.tau, t.standard_infonce)
    else:
        l_cl = fake.new_zeros(())
    fg_fake = fine_grained_loss_logits(alignment_logits(state, fake), batch.y, t.fg_positive_only)
    loss_g = t.w_gan * g_loss + t.w_cl * l_cl + t.w_fg * fg_fake
    _check_finite(state, loss_g, "phase 2")
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    _clip(state.opt_g, t.grad_clip)
    state.opt_g.step()
    _set_trainable([D, C], True)

    state.step += 1
    state.images_seen += len(batch.z)
    record = {
        "step": state.step,
        "l_cl": l_cl.item(),
        "l_fg": fg_fake.item(),
        "l_fg_real": fg_real.item(),
        "d_loss": d_loss.item(),
        "g_loss": g_loss.item(),
        "r1": r1.item(),
        "res": res,
        "blur": sigma,
    }
    return state, record


class NonFiniteLoss(FloatingPointError):
    pass


def _check_finite(state: TrainState, loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        root = state.abort_dir or Path(tempfile.gettempdir())
        path = root / f"abort_step{state.step}.pt"
        save_checkpoint(state, path)
        raise NonFiniteLoss(f"non-finite loss in {where} at step {state.step}; snapshot saved to {path}")


# -- checkpoints ---------------------------------------------------------------

def _module_dicts(state: TrainState) -> dict:
    return {
        "G": state.G.state_dict(),
        "D": state.D.state_dict(),
        "C": state.C.state_dict(),
        "E_cl": state.E_cl.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
    }


def checkpoint_payload(state: TrainState) -> dict:
    payload = _module_dicts(state)
    payload.update({
        "format": 1,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.hash(),
        "step": state.step,
        "images_seen": state.images_seen,
        "rng": json.dumps(state.rng.bit_generator.state),
        "torch_gen": state.gen.get_state(),
        "judges": state.judges,
    })
    return payload


def atomic_save(obj, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    buf = io.BytesIO()
    torch.save(obj, buf)
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(state: TrainState, path) -> None:
    atomic_save(checkpoint_payload(state), path)


def load_checkpoint(path) -> TrainState:
    try:
        payload = torch.load(path, weights_only=False)
        cfg = config_from_dict(payload["config"])
    except Exception as exc:  # noqa: BLE001 - any failure means an unusable file
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    state = build_state(cfg)
    for key in ("G", "D", "C", "E_cl", "opt_g", "opt_d"):
        getattr(state, key).load_state_dict(payload[key])
    state.step = payload["step"]
    state.images_seen = payload["images_seen"]
    state.rng.bit_generator.state = json.loads(payload["rng"])
    state.gen.set_state(payload["torch_gen"])
    state.judges = payload.get("judges")
    return state


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- loop ----------------------------------------------------------------------

def train(
    cfg: Config,
    manifest: DatasetManifest,
    out_dir=None,
    state: TrainState | None = None,
    steps: int | None = None,
    log_path=None,
) -> TrainState:
    """Run ``steps`` (default ``cfg.train.steps``) training steps.

    Passing ``state`` resumes from it. Periodic checkpoints go to
    ``out_dir/ckpt_XXXXXX.pt`` and the final one to ``out_dir/final.pt``.
    """
    if state is None:
        state = build_state(cfg)
        if cfg.train.fit_judges:
            from .metrics import fit_judges

            state.judges = fit_judges(cfg, state.text_encoder)
    total = cfg.train.steps if steps is None else steps
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "train_log.jsonl"
        state.abort_dir = out_dir
    manifest.images()
    log_fh = open(log_path, "a") if log_path is not None else None
    try:
        for _ in range(total):
            samples = sample_batch(manifest, cfg.train.batch_size, state.rng, cfg.model.z_dim, with_images=False)
            batch = collate(state, samples, manifest)
            state, record = train_step(state, batch)
            if log_fh is not None and state.step % cfg.train.log_every == 0:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if state.step % 100 == 0:
                log.info("step %d %s", state.step, record)
            if out_dir is not None and cfg.train.ckpt_every and state.step % cfg.train.ckpt_every == 0:
                save_checkpoint(state, out_dir / f"ckpt_{state.step:06d}.pt")
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "final.pt")
    return state


def snapshot_generator(G: Generator) -> Generator:
    return copy.deepcopy(G)
