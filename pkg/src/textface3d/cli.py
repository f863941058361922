"""Command-line entry point: ``textface3d <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import Config, load_config
from .data import frontal_camera, load_dataset, pose_ring, save_png, synthesize_toy_dataset
from .encoders import HueImageEncoder
from .guidance import run_directional_guidance
from .metrics import REPORT_SCHEMA, clip_score, evaluate_all, judges_from_state, render_views
from .training import file_digest, load_checkpoint, save_checkpoint, train
from .triplane import TriPlane, extract_mesh

DATA_ENV = "TEXTFACE3D_DATA"
log = logging.getLogger("textface3d")


class RunError(RuntimeError):
    """Failure reported to the user with exit code 1."""


def _data_root(arg) -> Path:
    root = arg or os.environ.get(DATA_ENV)
    if not root:
        raise RunError(f"no dataset given: pass --data or set {DATA_ENV}")
    return Path(root)


def _load(path):
    try:
        return load_checkpoint(path)
    except (ValueError, FileNotFoundError) as exc:
        raise RunError(str(exc)) from exc


def _write_run(out_dir: Path, args, config_hash: str | None, ckpt, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": args.command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
        "config_hash": config_hash,
        "checkpoint_sha256": file_digest(ckpt) if ckpt is not None and Path(ckpt).exists() else None,
    }
    record.update(extra or {})
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _to_uint8(img: torch.Tensor) -> np.ndarray:
    """3×H×W float in [0, 1] -> H×W×3 uint8."""
    return (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)


def _grid(images: torch.Tensor) -> np.ndarray:
    return np.concatenate([_to_uint8(x) for x in images], axis=1)


def _latent(seed: int, z_dim: int) -> torch.Tensor:
    return torch.as_tensor(np.random.default_rng(seed).standard_normal(z_dim), dtype=torch.float32)


# -- commands ------------------------------------------------------------------

def cmd_synth_data(args) -> None:
    out = _data_root(args.out)
    synthesize_toy_dataset(args.n, args.seed, out, unlabeled_fraction=args.unlabeled_fraction)
    _write_run(out, args, None, None)
    print(f"wrote {args.n} samples to {out}")


def cmd_train(args) -> None:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.no_judges:
        cfg.train.fit_judges = False
    cfg.validate()
    manifest = load_dataset(_data_root(args.data))
    state = _load(args.resume) if args.resume else None
    if state is not None:
        cfg = state.cfg
    steps = cfg.train.steps if args.steps is None else args.steps
    out = Path(args.out)
    state = train(cfg, manifest, out_dir=out, state=state, steps=steps)
    _write_run(out, args, cfg.hash(), out / "final.pt")
    print(f"trained to step {state.step}; checkpoint {out / 'final.pt'}")


def cmd_generate(args) -> None:
    state = _load(args.ckpt)
    G, enc = state.G.eval(), state.text_encoder
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    z = _latent(args.seed, G.z_dim)
    e = enc(args.text)
    ring = pose_ring(args.n_views)
    views = render_views(G, z, e, ring)
    judges = judges_from_state(state.judges, e.shape[-1]) if state.judges else None
    scores = []
    for i, img in enumerate(views):
        save_png(out / f"view_{i:02d}.png", _to_uint8(img))
        scores.append(clip_score(img[None], args.text, enc, judges.clip) if judges else None)

    cond = torch.as_tensor(frontal_camera().to_vector(), dtype=torch.float32).reshape(1, -1)
    with torch.no_grad():
        planes = G.planes(z.reshape(1, -1), e.reshape(1, -1), cond)[0]
    if args.save_maps:
        _save_maps(G, z, e, cond, ring, out / "maps")
    mesh = extract_mesh(TriPlane(planes.double()), copy.deepcopy(G.decoder).double(),
                        grid_res=args.mesh_res, iso=args.iso)
    mesh.to_obj(out / "mesh.obj")
    sidecar = {"text": args.text, "seed": args.seed, "n_views": args.n_views, "clip_score": scores}
    _write_run(out, args, state.cfg.hash(), args.ckpt, extra=sidecar)
    print(f"wrote {args.n_views} views, mesh ({len(mesh.faces)} faces) to {out}")


def _save_maps(G, z, e, cond, poses, out: Path) -> None:
    """Low-resolution depth and opacity maps as raw .npy plus normalized PNG."""
    out.mkdir(parents=True, exist_ok=True)
    v = len(poses)
    cams = torch.as_tensor(np.stack([p.to_vector() for p in poses]), dtype=torch.float32)
    with torch.no_grad():
        r = G(z.reshape(1, -1).expand(v, -1), e.reshape(1, -1).expand(v, -1), cond.expand(v, -1),
              render_cams=cams, stratified=False)
    for i in range(v):
        for name in ("depth", "weight"):
            m = r[name][i].numpy()
            np.save(out / f"{name}_{i:02d}.npy", m)
            span = float(m.max() - m.min())
            norm = (m - m.min()) / span if span > 0 else np.zeros_like(m)
            save_png(out / f"{name}_{i:02d}.png", (norm * 255).round().astype(np.uint8))


def cmd_manipulate(args) -> None:
    state = _load(args.ckpt)
    G, enc = state.G, state.text_encoder
    out = Path(args.out)
    z = _latent(args.seed, G.z_dim)
    try:
        res = run_directional_guidance(
            G, args.text, enc, HueImageEncoder(enc), s_o=args.style_base,
            M=args.n_poses, iters=args.iters, lr=args.lr, z=z, seed=args.seed,
        )
    except (ValueError, FloatingPointError) as exc:
        raise RunError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    ring = pose_ring(args.n_views)
    e = enc(args.text)
    save_png(out / "before.png", _grid(render_views(res.G_frozen, z, e, ring)))
    save_png(out / "after.png", _grid(render_views(res.G, z, e, ring)))
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "dcg_loss"])
        w.writerows(enumerate(res.losses))
    state.G = res.G
    save_checkpoint(state, out / "tuned.pt")
    _write_run(out, args, state.cfg.hash(), out / "tuned.pt")
    print(f"guidance done; final loss {res.losses[-1] if res.losses else float('nan'):.4f}")


def cmd_evaluate(args) -> None:
    import jsonschema

    state = _load(args.ckpt)
    if not state.judges:
        raise RunError("checkpoint has no fitted judges; train with judges enabled")
    manifest = load_dataset(_data_root(args.data))
    judges = judges_from_state(state.judges, state.text_encoder.dim)
    report = evaluate_all(state.G.eval(), judges, state.text_encoder, manifest, seed=args.seed,
                          n_samples=args.n_samples, n_mvic=args.n_mvic)
    jsonschema.validate(report, REPORT_SCHEMA)
    out = Path(args.out)
    if out.suffix != ".json":
        out = out / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2) + "\n")
    _write_run(out.parent, args, state.cfg.hash(), args.ckpt)
    print(json.dumps(report))


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="textface3d", description="Text-guided 3D face generation on toy data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a procedural toy face dataset")
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help=f"output directory (default: ${DATA_ENV})")
    s.add_argument("--unlabeled-fraction", type=float, default=0.0, help="fraction of samples without captions")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train generator, discriminator and alignment modules")
    s.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    s.add_argument("--out", required=True, help="output directory for logs and checkpoints")
    s.add_argument("--config", help="JSON or TOML config file")
    s.add_argument("--steps", type=int, help="number of steps (default: from config)")
    s.add_argument("--seed", type=int, help="override train.seed")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--no-judges", action="store_true", help="skip fitting evaluation judges")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="render views and a mesh for a text prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-views", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--mesh-res", type=int, default=64, help="marching-cubes grid resolution")
    s.add_argument("--iso", type=float, default=10.0, help="density iso-level")
    s.add_argument("--save-maps", action="store_true", help="also write depth/opacity maps (.npy and .png) to maps/")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("manipulate", help="fine-tune toward a style prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True, help="target style prompt")
    s.add_argument("--style-base", default="Photo", help="prompt describing the training style")
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--lr", type=float, default=0.002)
    s.add_argument("--n-poses", type=int, default=4, help="poses sampled per iteration")
    s.add_argument("--n-views", type=int, default=4, help="views in the before/after grids")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_manipulate)

    s = sub.add_parser("evaluate", help="compute MVIC, CLIP score, FID and attribute accuracy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
    s.add_argument("--out", required=True, help="report path (*.json) or directory for report.json")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-samples", type=int, default=512)
    s.add_argument("--n-mvic", type=int, default=16)
    s.set_defaults(func=cmd_evaluate)
    return p


def _check_args(parser, args) -> None:
    for name in ("n", "n_views", "n_poses", "n_samples", "n_mvic", "mesh_res"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name.replace('_', '-')} must be positive")
    for name in ("steps", "iters"):
        v = getattr(args, name, None)
        if v is not None and v < 0:
            parser.error(f"--{name} must be non-negative")
    if args.command == "evaluate" and args.n_mvic < 1:
        parser.error("--n-mvic must be positive")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with code 2 on usage errors
    _check_args(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except (RunError, ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
