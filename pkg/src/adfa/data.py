"""Dataset layout, manifests, and the synthetic disk/occluder dataset."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import load_image
from .errors import IngestionError

log = logging.getLogger(__name__)

SPLITS = ("train/normal", "test/normal", "test/abnormal")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class DatasetManifest:
    root: Path
    # split -> list of (path relative to root, sha256 of file bytes)
    files: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def paths(self, split: str) -> list[Path]:
        return [self.root / rel for rel, _ in self.files.get(split, [])]

    @property
    def train_paths(self) -> list[Path]:
        return self.paths("train/normal")

    def test_items(self) -> list[tuple[Path, int]]:
        """(path, label) with label 1 for abnormal."""
        return [(p, 0) for p in self.paths("test/normal")] + [
            (p, 1) for p in self.paths("test/abnormal")
        ]

    def counts(self) -> dict:
        return {split: len(v) for split, v in self.files.items()}

    @property
    def name(self) -> str:
        return self.root.name

    def digest(self) -> str:
        h = hashlib.sha256()
        for split in SPLITS:
            for rel, sha in self.files.get(split, []):
                h.update(f"{split}\0{rel}\0{sha}\n".encode())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "root": str(self.root),
            "sha256": self.digest(),
            "files": {s: [list(x) for x in v] for s, v in self.files.items()},
            "warnings": list(self.warnings),
        }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_dataset(root: str | os.PathLike, require_test: bool = False) -> DatasetManifest:
    """Scan ``root/{train/normal,test/normal,test/abnormal}`` into a manifest.

    Unreadable images are excluded with a warning.  An empty training split is
    an error; so are missing test splits when ``require_test`` is set.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    manifest = DatasetManifest(root)
    seen = {}
    for split in SPLITS:
        d = root / split
        entries = []
        if d.is_dir():
            for p in sorted(d.iterdir()):
                if not p.is_file() or p.suffix.lower() not in IMAGE_SUFFIXES:
                    continue
                try:
                    load_image(p)
                except IngestionError as exc:
                    manifest.warnings.append(str(exc))
                    log.warning("%s", exc)
                    continue
                sha = _sha256(p)
                if sha in seen:
                    raise IngestionError(f"{p} duplicates {seen[sha]} across or within splits")
                seen[sha] = p
                entries.append((p.relative_to(root).as_posix(), sha))
        manifest.files[split] = entries
    if not manifest.files["train/normal"]:
        raise IngestionError(f"split train/normal under {root} is missing or empty")
    if require_test:
        for split in ("test/normal", "test/abnormal"):
            if not manifest.files[split]:
                raise IngestionError(f"split {split} under {root} is missing or empty")
    return manifest


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    size: int = 64
    noise_std: float = 0.06
    background: float = 0.35
    disk_level: float = 0.6
    disk_radius: tuple = (0.22, 0.3)  # fraction of size
    center_jitter: float = 0.12  # fraction of size
    stripe_period: tuple = (5.0, 8.0)  # pixels
    stripe_amplitude: float = 0.12
    box_edge: tuple = (0.16, 0.24)  # fraction of size
    box_contrast: float = 0.18
    checker_period: int = 4
    offset_jitter: float = 0.0  # per-image global intensity shift, +-


def _render(rng: np.random.Generator, p: SynthParams, abnormal: bool):
    s = p.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    img = p.background + p.noise_std * rng.standard_normal((s, s))
    cy, cx = s / 2 + rng.uniform(-1, 1, size=2) * p.center_jitter * s
    radius = rng.uniform(*p.disk_radius) * s
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(*p.stripe_period)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    img = np.where(disk, p.disk_level + p.stripe_amplitude * stripes + p.noise_std * rng.standard_normal((s, s)), img)
    img = img + rng.uniform(-1, 1) * p.offset_jitter
    box = None
    # Occluder draws come after the base image so normal and abnormal share it.
    edge = rng.uniform(*p.box_edge, size=2) * s
    y0 = rng.uniform(0, s - edge[0])
    x0 = rng.uniform(0, s - edge[1])
    sign = rng.choice([-1.0, 1.0])
    if abnormal:
        y0i, x0i = int(y0), int(x0)
        y1i, x1i = int(y0 + edge[0]), int(x0 + edge[1])
        box = (y0i, x0i, y1i, x1i)
        checker = ((yy // p.checker_period + xx // p.checker_period) % 2) * 2 - 1
        inside = (yy >= y0i) & (yy < y1i) & (xx >= x0i) & (xx < x1i)
        patch = img + sign * p.box_contrast * checker
        img = np.where(inside, patch, img)
    img = np.clip(img, 0.0, 1.0)
    return (img * 255.0 + 0.5).astype(np.uint8), box


def render_sample(seed: int, split: str, index: int, abnormal: bool, params: SynthParams = SynthParams()):
    """Deterministic (image, occluder box or None) for one synthetic sample."""
    key = SPLITS.index(split)
    rng = np.random.default_rng([seed, key, index])
    return _render(rng, params, abnormal)


def generate_synthetic(
    out: str | os.PathLike,
    n_train: int = 40,
    n_test_normal: int = 20,
    n_test_abnormal: int = 20,
    seed: int = 0,
    params: SynthParams = SynthParams(),
) -> DatasetManifest:
    """Write a synthetic dataset in the standard layout and return its manifest.

    Normals are striped disks at jittered positions on a noisy background.
    Abnormals add a checkered rectangle; outside that rectangle they are
    pixel-identical to the normal rendered from the same seed.
    """
    if min(n_train, n_test_normal, n_test_abnormal) < 1:
        raise ValueError("every split needs at least one image")
    out = Path(out)
    counts = {"train/normal": n_train, "test/normal": n_test_normal, "test/abnormal": n_test_abnormal}
    boxes = {}
    for split, count in counts.items():
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            img, box = render_sample(seed, split, i, split == "test/abnormal", params)
            name = f"{i:04d}.png"
            Image.fromarray(img, mode="L").save(d / name, optimize=False)
            if box is not None:
                boxes[f"{split}/{name}"] = box
    meta = {"seed": seed, "params": params.__dict__, "boxes": boxes}
    (out / "synthetic.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list))
    return load_dataset(out)
