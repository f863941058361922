from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import textface3d
from textface3d.config import Config, JudgeConfig
from textface3d.data import synthesize_toy_dataset

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    return synthesize_toy_dataset(24, 3, tmp_path_factory.mktemp("tiny"))


def small_judges() -> JudgeConfig:
    return JudgeConfig(n_images=96, n_identities=24, views_per_identity=3, steps=20, batch_size=16)


@pytest.fixture
def fast_cfg() -> Config:
    cfg = Config()
    cfg.train.fit_judges = False
    cfg.train.batch_size = 4
    cfg.judges = small_judges()
    return cfg


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(textface3d.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_run(request):
    """The 2 K-step toy training run used by the end-to-end criteria.

    Cached under the pytest cache, keyed by config hash and package source, so
    repeated sessions reuse a run made by identical code and settings.
    """
    from textface3d import training
    from textface3d.data import load_dataset

    cfg = Config()
    key = f"{cfg.hash()}-{_source_digest()}"
    root = Path(request.config.cache.mkdir("textface3d-acceptance")) / key
    meta_path = root / "meta.json"
    if not meta_path.exists():
        data_dir = root / "data"
        manifest = synthesize_toy_dataset(2000, 0, data_dir)
        t0 = time.perf_counter()
        training.train(cfg, manifest, out_dir=root / "run")
        meta = {"train_seconds": time.perf_counter() - t0, "steps": cfg.train.steps}
        meta_path.write_text(json.dumps(meta))
    meta = json.loads(meta_path.read_text())
    state = training.load_checkpoint(root / "run" / "final.pt")
    return {
        "cfg": cfg,
        "state": state,
        "manifest": load_dataset(root / "data"),
        "meta": meta,
        "root": root,
    }
