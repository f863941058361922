"""Procedural toy faces, dataset manifests and mini-batch sampling.

A toy face is an ellipsoid head textured with hair, eyes, mouth and optional
glasses, ray-cast analytically from the same pinhole cameras the volume
renderer uses. Every record stores the exact face parameters so the image can
be re-rendered bit-for-bit.

Layout on disk::

    root/manifest.jsonl    one JSON record per line
    root/images/NNNNNN.png
    root/masks/NNNNNN.png  palette PNG, value = part index (0 = background)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .parsing import PART_NAMES
from .renderer import CameraParams, look_at_camera, rays_from_cameras

ATTRIBUTES = (
    "black hair", "blond hair", "red hair",
    "blue eyes", "brown eyes",
    "glasses",
    "pale skin",
)
# Attribute groups used for accuracy: several indices form one categorical
# variable, a single index is a present/absent variable.
ATTRIBUTE_GROUPS = {"hair": (0, 1, 2), "eyes": (3, 4), "glasses": (5,), "skin": (6,)}

HAIR_COLORS = np.array([[0.12, 0.10, 0.10], [0.95, 0.82, 0.40], [0.80, 0.22, 0.10]])
EYE_COLORS = np.array([[0.15, 0.40, 0.95], [0.42, 0.24, 0.08]])
SKIN_COLORS = np.array([[0.78, 0.56, 0.40], [0.98, 0.88, 0.82]])  # tan, pale
MOUTH_COLOR = np.array([0.70, 0.20, 0.25])
FRAME_COLOR = np.array([0.08, 0.08, 0.08])
LIGHT = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])

YAW_RANGE = 0.6
PITCH_RANGE = 0.25
CAMERA_RADIUS = 2.7
FOCAL = 1.8
IMAGE_RES = 32


def random_face(rng: np.random.Generator) -> dict:
    return {
        "hair": int(rng.integers(3)),
        "eyes": int(rng.integers(2)),
        "glasses": bool(rng.random() < 0.5),
        "pale": bool(rng.random() < 0.5),
        "scale": float(rng.uniform(0.92, 1.08)),
        "hairline": float(rng.uniform(0.42, 0.55)),
        "skin_jitter": [float(v) for v in rng.uniform(-0.03, 0.03, 3)],
    }


def face_attributes(face: dict) -> list[int]:
    y = [0] * len(ATTRIBUTES)
    y[face["hair"]] = 1
    y[3 + face["eyes"]] = 1
    y[5] = int(face["glasses"])
    y[6] = int(face["pale"])
    return y


def face_captions(face: dict) -> list[str]:
    hair = ATTRIBUTES[face["hair"]]
    eyes = ATTRIBUTES[3 + face["eyes"]]
    pale, glasses = face["pale"], face["glasses"]
    c0 = f"A face with {hair}, {eyes} and pale skin" if pale else f"A face with {hair} and {eyes}"
    c0 += ", wearing glasses." if glasses else "."
    c1 = f"This person has {eyes} and {hair}" + (" and pale skin." if pale else ".")
    c1 += " They wear glasses." if glasses else ""
    c2 = f"Portrait of someone with {hair}" + (", pale skin" if pale else "") + f" and {eyes}"
    c2 += " and glasses." if glasses else "."
    return [c0, c1, c2]


def caption_for(attributes) -> str:
    """Canonical caption for a k-hot attribute vector."""
    y = list(attributes)
    face = {
        "hair": int(np.argmax(y[0:3])), "eyes": int(np.argmax(y[3:5])),
        "glasses": bool(y[5]), "pale": bool(y[6]),
    }
    return face_captions(face)[0]


def sample_camera(rng: np.random.Generator) -> CameraParams:
    yaw = rng.uniform(-YAW_RANGE, YAW_RANGE)
    pitch = rng.uniform(-PITCH_RANGE, PITCH_RANGE)
    return look_at_camera(yaw, pitch, CAMERA_RADIUS, FOCAL)


def frontal_camera() -> CameraParams:
    """The dataset's camera looking straight at the face."""
    return look_at_camera(0.0, 0.0, CAMERA_RADIUS, FOCAL)


def pose_ring(n: int = 8, pitch: float = 0.0) -> list[CameraParams]:
    """``n`` azimuths spread over the training yaw range."""
    yaws = np.linspace(-YAW_RANGE, YAW_RANGE, n) if n > 1 else [0.0]
    return [look_at_camera(float(y), pitch, CAMERA_RADIUS, FOCAL) for y in yaws]


def _shade_rays(face: dict, origins: np.ndarray, dirs: np.ndarray):
    """Colour and part label for each ray (P×3 arrays)."""
    radii = np.array([0.6, 0.75, 0.62]) * face["scale"]
    o, d = origins / radii, dirs / radii
    a = (d * d).sum(-1)
    b = 2 * (o * d).sum(-1)
    c = (o * o).sum(-1) - 1
    disc = b * b - 4 * a * c
    hit = disc > 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0))) / (2 * a), 0.0)
    q = o + t[:, None] * d  # unit-sphere coordinates of the hit point
    normal = q / radii
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]

    label = np.full(len(q), 4)  # skin
    colour = np.tile(np.clip(SKIN_COLORS[int(face["pale"])] + face["skin_jitter"], 0, 1), (len(q), 1))
    front = qz > 0
    mouth = front & ((qx / 0.32) ** 2 + ((qy + 0.45) / 0.12) ** 2 < 1)
    label[mouth], colour[mouth] = 3, MOUTH_COLOR
    eye_dist = np.minimum(np.hypot(qx - 0.36, qy - 0.12), np.hypot(qx + 0.36, qy - 0.12))
    eyes = front & (eye_dist < 0.2)
    label[eyes], colour[eyes] = 2, EYE_COLORS[face["eyes"]]
    if face["glasses"]:
        bridge = front & (np.abs(qx) < 0.17) & (np.abs(qy - 0.12) < 0.05)
        frame = front & (((eye_dist >= 0.2) & (eye_dist < 0.29)) | bridge)
        label[frame], colour[frame] = 5, FRAME_COLOR
    hair = (qy > face["hairline"]) | ((qz < -0.2) & (qy > -0.55)) | ((np.abs(qx) > 0.8) & (qy > 0.0))
    label[hair], colour[hair] = 1, HAIR_COLORS[face["hair"]]

    shade = 0.35 + 0.65 * np.clip((normal * LIGHT).sum(-1), 0, None)
    rgb = np.where(hit[:, None], colour * shade[:, None], 1.0)
    label = np.where(hit, label, 0)
    return rgb, label


def render_face(face: dict, cam: CameraParams, res: int = IMAGE_RES, supersample: int = 2):
    """Ray-cast a toy face. Returns (uint8 H×W×3 image, uint8 H×W part labels)."""
    cam_t = torch.as_tensor(cam.to_vector()[None], dtype=torch.float64)
    o, d = rays_from_cameras(cam_t, res * supersample)
    rgb, _ = _shade_rays(face, o[0].numpy(), d[0].numpy())
    rgb = rgb.reshape(res, supersample, res, supersample, 3).mean(axis=(1, 3))
    o, d = rays_from_cameras(cam_t, res)
    _, label = _shade_rays(face, o[0].numpy(), d[0].numpy())
    image = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    return image, label.reshape(res, res).astype(np.uint8)


def _mask_palette() -> list[int]:
    base = [0, 0, 0, 128, 64, 0, 0, 0, 255, 255, 0, 0, 255, 200, 150, 0, 255, 0]
    return base + [0] * (768 - len(base))


def save_png(path, array: np.ndarray, palette: bool = False) -> None:
    img = Image.fromarray(array, mode="P" if palette else None)
    if palette:
        img.putpalette(_mask_palette())
    img.save(path, format="PNG")


@dataclass
class DatasetManifest:
    root: Path
    records: list[dict]
    _images: torch.Tensor | None = field(default=None, repr=False)
    _labels: torch.Tensor | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def image(self, i: int) -> np.ndarray:
        return np.asarray(Image.open(self.root / self.records[i]["image"]).convert("RGB"))

    def mask(self, i: int) -> np.ndarray | None:
        rel = self.records[i].get("mask")
        return None if rel is None else np.asarray(Image.open(self.root / rel))

    def images(self) -> torch.Tensor:
        """All images as an N×3×H×W float tensor in [0, 1] (cached)."""
        if self._images is None:
            arr = np.stack([self.image(i) for i in range(len(self))])
            self._images = torch.as_tensor(arr).permute(0, 3, 1, 2).float() / 255.0
        return self._images

    def label_maps(self) -> torch.Tensor:
        if self._labels is None:
            maps = [self.mask(i) for i in range(len(self))]
            if any(m is None for m in maps):
                raise ValueError("dataset has records without masks")
            self._labels = torch.as_tensor(np.stack(maps)).long()
        return self._labels

    def attributes(self) -> torch.Tensor:
        return torch.tensor([r["attributes"] for r in self.records], dtype=torch.float32)

    def cameras(self) -> torch.Tensor:
        return torch.tensor([r["camera"] for r in self.records], dtype=torch.float64)


def synthesize_toy_dataset(n: int, seed: int, out_dir, unlabeled_fraction: float = 0.0) -> DatasetManifest:
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        face = random_face(rng)
        cam = sample_camera(rng)
        unlabeled = rng.random() < unlabeled_fraction
        image, labels = render_face(face, cam)
        name = f"{i:06d}.png"
        save_png(root / "images" / name, image)
        save_png(root / "masks" / name, labels, palette=True)
        records.append({
            "image": f"images/{name}",
            "mask": f"masks/{name}",
            "captions": [] if unlabeled else face_captions(face),
            "camera": cam.to_vector().tolist(),
            "attributes": face_attributes(face),
            "face": face,
        })
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return DatasetManifest(root, records)


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    k = len(ATTRIBUTES)
    for i, rec in enumerate(records):
        for key in ("image", "mask"):
            rel = rec.get(key)
            if key == "image" and rel is None:
                raise ValueError(f"record {i}: missing image entry")
            if rel is not None and not (root / rel).exists():
                raise FileNotFoundError(f"record {i}: missing file {root / rel}")
        cam = rec.get("camera")
        if not isinstance(cam, list) or len(cam) != 25:
            raise ValueError(f"record {i}: camera must have 25 entries, got {len(cam) if isinstance(cam, list) else cam!r}")
        try:
            CameraParams.from_vector(cam)
        except ValueError as exc:
            raise ValueError(f"record {i}: invalid camera: {exc}") from exc
        attrs = rec.get("attributes")
        if not isinstance(attrs, list) or len(attrs) != k or any(a not in (0, 1) for a in attrs):
            raise ValueError(f"record {i}: attributes must be a {k}-long 0/1 list")
        caps = rec.get("captions", [])
        if not isinstance(caps, list) or not all(isinstance(c, str) and c.strip() for c in caps):
            raise ValueError(f"record {i}: captions must be a list of nonempty strings")
        rec.setdefault("captions", caps)
    return DatasetManifest(root, records)


@dataclass
class TrainSample:
    z: np.ndarray
    s: str | None  # None for caption-free records
    p: np.ndarray  # 25-vector
    x: np.ndarray  # H×W×3 uint8
    y: np.ndarray  # k-hot
    index: int
    masks: np.ndarray | None = None


def sample_batch(manifest: DatasetManifest, n: int, rng: np.random.Generator, z_dim: int = 32,
                 with_images: bool = True) -> list[TrainSample]:
    """Draw ``n`` records uniformly with replacement, a uniform caption each
    and fresh standard-normal noise."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    if len(manifest) == 0:
        raise ValueError("empty dataset")
    idx = rng.integers(0, len(manifest), size=n)
    z = rng.standard_normal((n, z_dim))
    samples = []
    for j, i in enumerate(idx):
        rec = manifest.records[int(i)]
        caps = rec["captions"]
        cap = caps[int(rng.integers(len(caps)))] if caps else None
        samples.append(TrainSample(
            z=z[j], s=cap, p=np.asarray(rec["camera"]),
            x=manifest.image(int(i)) if with_images else None,
            y=np.asarray(rec["attributes"]), index=int(i),
        ))
    return samples


def identity_views(n_identities: int, views: int, seed: int, res: int = IMAGE_RES) -> tuple[torch.Tensor, list[dict]]:
    """Render several random poses of each of ``n_identities`` random faces.

    Returns an I×V×3×H×W float tensor and the face parameters.
    """
    rng = np.random.default_rng(seed)
    faces, out = [], []
    for _ in range(n_identities):
        face = random_face(rng)
        faces.append(face)
        out.append(np.stack([render_face(face, sample_camera(rng), res)[0] for _ in range(views)]))
    arr = torch.as_tensor(np.stack(out)).permute(0, 1, 4, 2, 3).float() / 255.0
    return arr, faces
