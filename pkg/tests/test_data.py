import json

import numpy as np
import pytest

from textface3d.data import (
    ATTRIBUTES,
    caption_for,
    face_captions,
    load_dataset,
    render_face,
    sample_batch,
    synthesize_toy_dataset,
)
from textface3d.encoders import tokenize
from textface3d.renderer import CameraParams


def test_synthesis_is_deterministic(tmp_path):
    a = synthesize_toy_dataset(1, 5, tmp_path / "a")
    b = synthesize_toy_dataset(1, 5, tmp_path / "b")
    assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
    assert (tmp_path / "a" / a.records[0]["image"]).read_bytes() == (tmp_path / "b" / b.records[0]["image"]).read_bytes()


def _mentioned(caption: str) -> set[int]:
    toks = " ".join(tokenize(caption))
    found = {i for i, attr in enumerate(ATTRIBUTES) if attr in toks}
    return found


def test_captions_mention_exactly_set_attributes(tiny_dataset):
    for rec in tiny_dataset.records:
        on = {i for i, v in enumerate(rec["attributes"]) if v}
        assert len(rec["captions"]) == 3
        for cap in rec["captions"]:
            assert _mentioned(cap) == on, cap
    assert _mentioned(caption_for([0, 0, 1, 1, 0, 1, 0])) == {2, 3, 5}


def test_rerender_reproduces_image(tiny_dataset):
    for i in (0, 7):
        rec = tiny_dataset.records[i]
        img, labels = render_face(rec["face"], CameraParams.from_vector(rec["camera"]))
        assert np.array_equal(img, tiny_dataset.image(i))
        assert np.array_equal(labels, tiny_dataset.mask(i))


def test_load_roundtrip(tiny_dataset):
    loaded = load_dataset(tiny_dataset.root)
    assert loaded.records == tiny_dataset.records


def _corrupt(src, tmp_path, edit):
    root = tmp_path / "bad"
    recs = [json.loads(l) for l in (src.root / "manifest.jsonl").read_text().splitlines()]
    edit(recs)
    root.mkdir()
    (root / "images").symlink_to(src.root / "images")
    (root / "masks").symlink_to(src.root / "masks")
    (root / "manifest.jsonl").write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    return root


def test_bad_camera_names_record(tiny_dataset, tmp_path):
    root = _corrupt(tiny_dataset, tmp_path, lambda r: r[3].update(camera=r[3]["camera"][:24]))
    with pytest.raises(ValueError, match="record 3"):
        load_dataset(root)


def test_missing_image_names_path(tiny_dataset, tmp_path):
    root = _corrupt(tiny_dataset, tmp_path, lambda r: r[2].update(image="images/gone.png"))
    with pytest.raises(FileNotFoundError, match="gone.png"):
        load_dataset(root)


def test_attribute_length_checked(tiny_dataset, tmp_path):
    root = _corrupt(tiny_dataset, tmp_path, lambda r: r[0].update(attributes=[1, 0]))
    with pytest.raises(ValueError, match="record 0"):
        load_dataset(root)


def test_sample_batch_determinism_and_shape(tiny_dataset):
    a = sample_batch(tiny_dataset, 5, np.random.default_rng(3))
    b = sample_batch(tiny_dataset, 5, np.random.default_rng(3))
    assert [s.index for s in a] == [s.index for s in b]
    assert [s.s for s in a] == [s.s for s in b]
    assert all(np.array_equal(x.z, y.z) for x, y in zip(a, b))
    assert len(sample_batch(tiny_dataset, 1, np.random.default_rng(0))) == 1
    for s in a:
        assert s.s in tiny_dataset.records[s.index]["captions"]
    with pytest.raises(ValueError):
        sample_batch(tiny_dataset, 0, np.random.default_rng(0))


def test_noise_normality_bound(tiny_dataset):
    n, dim = 256, 32
    z = np.stack([s.z for s in sample_batch(tiny_dataset, n, np.random.default_rng(9), z_dim=dim)])
    assert abs(z.mean()) < 5 / np.sqrt(n * dim)


def test_unlabeled_records(tmp_path):
    m = synthesize_toy_dataset(20, 1, tmp_path, unlabeled_fraction=0.5)
    empty = [r for r in m.records if not r["captions"]]
    assert 0 < len(empty) < 20
    load_dataset(tmp_path)
    samples = sample_batch(m, 64, np.random.default_rng(0), with_images=False)
    assert any(s.s is None for s in samples)


def test_every_attribute_has_text():
    face = {"hair": 1, "eyes": 0, "glasses": True, "pale": True}
    caps = face_captions(face)
    assert all(_mentioned(c) == {1, 3, 5, 6} for c in caps)
