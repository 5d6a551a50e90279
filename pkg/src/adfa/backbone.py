"""Frozen pretrained backbone: image preprocessing, multi-scale taps, fusion and coordinates."""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import torchvision
from PIL import Image, UnidentifiedImageError
from torch import Tensor, nn
from torchvision.models.feature_extraction import create_feature_extractor

from .errors import ConfigError, IngestionError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# torchvision checkpoint name looked up in the weight cache.
_PRETRAINED_FILES = {"wide_resnet50_2": "wide_resnet50_2-95faca4d.pth"}
_PRETRAINED_URLS = {
    "wide_resnet50_2": "https://download.pytorch.org/models/wide_resnet50_2-95faca4d.pth"
}


@dataclass(frozen=True)
class PreprocessConfig:
    resize_edge: int = 256
    crop_size: int = 224
    channel_mean: tuple = IMAGENET_MEAN
    channel_std: tuple = IMAGENET_STD
    resize_filter: str = "bilinear"

    def __post_init__(self):
        if self.crop_size > self.resize_edge:
            raise ConfigError(
                f"crop_size {self.crop_size} exceeds resize_edge {self.resize_edge}"
            )
        if self.crop_size < 1:
            raise ConfigError("crop_size must be positive")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ConfigError("channel_mean and channel_std need 3 entries")
        if min(self.channel_std) <= 0:
            raise ConfigError("channel_std must be strictly positive")
        if self.resize_filter not in ("bilinear", "bicubic"):
            raise ConfigError(f"unknown resize_filter {self.resize_filter!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an image file to an (H, W, C) array scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                peak = 65535.0 if im.mode.startswith("I;16") or arr.max() > 255 else 255.0
                arr = arr / peak
            else:
                if im.mode not in ("L", "RGB"):
                    im = im.convert("RGB")
                arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float32)


def preprocess_image(raw: np.ndarray | Tensor, cfg: PreprocessConfig) -> Tensor:
    """Resize to a square ``resize_edge``, center crop, replicate gray to RGB, normalize.

    ``raw`` is (H, W) or (H, W, C) with values in [0, 1].
    """
    x = torch.as_tensor(np.asarray(raw, dtype=np.float32))
    if x.dim() == 2:
        x = x.unsqueeze(-1)
    if x.dim() != 3 or x.shape[0] < 1 or x.shape[1] < 1 or x.shape[2] < 1:
        raise IngestionError(f"bad image shape {tuple(x.shape)}")
    x = x.permute(2, 0, 1)
    if x.shape[0] == 1:
        x = x.expand(3, -1, -1)
    elif x.shape[0] == 4:
        x = x[:3]
    elif x.shape[0] != 3:
        raise IngestionError(f"unsupported channel count {x.shape[0]}")
    x = x.unsqueeze(0)
    if tuple(x.shape[-2:]) != (cfg.resize_edge, cfg.resize_edge):
        x = F.interpolate(
            x,
            size=(cfg.resize_edge, cfg.resize_edge),
            mode=cfg.resize_filter,
            align_corners=False,
            antialias=True,
        ).clamp_(0.0, 1.0)
    off = (cfg.resize_edge - cfg.crop_size) // 2
    x = x[0, :, off : off + cfg.crop_size, off : off + cfg.crop_size]
    mean = torch.tensor(cfg.channel_mean, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(cfg.channel_std, dtype=x.dtype).view(3, 1, 1)
    return ((x - mean) / std).contiguous()


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneSpec:
    """What to load; the serializable half of a backbone handle."""

    arch: str = "wide_resnet50_2"
    weights: str = "pretrained"  # or "random"
    seed: int = 0
    weights_path: str = ""
    tap_points: tuple = ("layer1", "layer2", "layer3")

    def __post_init__(self):
        if self.weights not in ("pretrained", "random"):
            raise ConfigError(f"backbone.weights must be 'pretrained' or 'random', got {self.weights!r}")
        if not hasattr(torchvision.models, self.arch):
            raise ConfigError(f"unknown backbone architecture {self.arch!r}")
        if len(self.tap_points) < 1:
            raise ConfigError("at least one tap point is required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultiScaleFeatures:
    """Per-image tap outputs, each (C, H, W), finest first."""

    maps: list
    batch_index: int = 0


@dataclass
class BackboneHandle:
    spec: BackboneSpec
    extractor: nn.Module
    expected_shapes: list = field(default_factory=list)
    identity: str = ""

    @property
    def weights_source(self) -> str:
        if self.spec.weights == "random":
            return f"random_seeded({self.spec.seed})"
        return "pretrained"

    @property
    def tap_points(self) -> tuple:
        return self.spec.tap_points


def weight_cache_dir() -> Path:
    return Path(os.environ.get("ADFA_CACHE", Path.home() / ".cache" / "adfa"))


def _resolve_pretrained(spec: BackboneSpec) -> Path:
    if spec.weights_path:
        path = Path(spec.weights_path).expanduser()
        if not path.is_file():
            raise ConfigError(f"backbone.weights_path {path} does not exist")
        return path
    fname = _PRETRAINED_FILES.get(spec.arch)
    if fname is None:
        raise ConfigError(f"no default pretrained weights for {spec.arch}; set backbone.weights_path")
    path = weight_cache_dir() / fname
    if path.is_file():
        return path
    try:
        torch.hub.download_url_to_file(_PRETRAINED_URLS[spec.arch], str(path), progress=False)
    except Exception as exc:  # network or filesystem failure
        raise ConfigError(
            f"pretrained weights for {spec.arch} not found at {path} and download failed "
            f"({exc.__class__.__name__}); place the file there or set backbone.weights_path"
        ) from exc
    return path


def _he_init(model: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, generator=gen)
            nn.init.zeros_(m.bias)


def _fingerprint(module: nn.Module, spec: BackboneSpec) -> str:
    h = hashlib.sha256()
    h.update(spec.arch.encode())
    h.update(",".join(spec.tap_points).encode())
    for name, t in list(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def load_backbone(spec: BackboneSpec, crop_size: int = 224, device: str = "cpu") -> BackboneHandle:
    """Build the architecture, load or seed its weights, and freeze it."""
    model = getattr(torchvision.models, spec.arch)(weights=None)
    if spec.weights == "random":
        _he_init(model, spec.seed)
    else:
        state = torch.load(_resolve_pretrained(spec), map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise ConfigError(f"weights do not match {spec.arch}: {exc}") from exc
    try:
        extractor = create_feature_extractor(
            model, return_nodes={tp: tp for tp in spec.tap_points}
        )
    except Exception as exc:
        raise ConfigError(f"bad tap points {spec.tap_points}: {exc}") from exc
    extractor.eval().requires_grad_(False).to(device)
    with torch.no_grad():
        probe = extractor(torch.zeros(1, 3, crop_size, crop_size, device=device))
    shapes = [tuple(probe[tp].shape[1:]) for tp in spec.tap_points]
    return BackboneHandle(spec, extractor, shapes, _fingerprint(extractor, spec))


def extract_features(batch: Tensor, handle: BackboneHandle) -> list[MultiScaleFeatures]:
    """Run the frozen backbone on a (B, 3, S, S) batch; one record per image."""
    if batch.dim() != 4 or batch.shape[0] == 0:
        raise ConfigError(f"expected a nonempty (B, 3, S, S) batch, got {tuple(batch.shape)}")
    device = next(handle.extractor.parameters()).device
    with torch.no_grad():
        out = handle.extractor(batch.to(device))
    maps = [out[tp] for tp in handle.tap_points]
    for m, want in zip(maps, handle.expected_shapes):
        if tuple(m.shape[1:]) != tuple(want):
            raise ConfigError(f"backbone output {tuple(m.shape[1:])} does not match expected {want}")
    return [MultiScaleFeatures([m[i] for m in maps], batch_index=i) for i in range(batch.shape[0])]


def coordinate_channels(h: int, w: int) -> Tensor:
    """(2, h, w) grid: channel 0 is the row coordinate, channel 1 the column, both in [-1, 1]."""
    if h < 1 or w < 1:
        raise ValueError(f"grid extents must be >= 1, got {h}x{w}")

    def axis(n):
        return torch.linspace(-1.0, 1.0, n) if n > 1 else torch.zeros(1)

    rows, cols = torch.meshgrid(axis(h), axis(w), indexing="ij")
    return torch.stack([rows, cols])


def fuse_maps(maps: Sequence[Tensor]) -> Tensor:
    """Upsample every map to the first map's grid and concatenate along channels.

    Accepts (C, H, W) or (B, C, H, W) maps.
    """
    batched = maps[0].dim() == 4
    ms = [m if batched else m.unsqueeze(0) for m in maps]
    size = ms[0].shape[-2:]
    parts = [ms[0]] + [
        F.interpolate(m, size=size, mode="bilinear", align_corners=False) for m in ms[1:]
    ]
    fused = torch.cat(parts, dim=1)
    coords = coordinate_channels(*size).to(fused).expand(fused.shape[0], -1, -1, -1)
    out = torch.cat([fused, coords], dim=1)
    return out if batched else out[0]


def fuse_and_embed(ms: MultiScaleFeatures) -> Tensor:
    """Spatially-aware features (D + 2, H, W) for one image."""
    if len(ms.maps) < 1:
        raise ConfigError("no feature maps to fuse")
    return fuse_maps(ms.maps)


class FeatureExtractor:
    """Preprocessing plus frozen backbone plus fusion: paths in, spatial features out."""

    def __init__(self, handle: BackboneHandle, preprocess: PreprocessConfig, batch_size: int = 8):
        self.handle = handle
        self.preprocess = preprocess
        self.batch_size = batch_size

    @property
    def identity(self) -> str:
        return self.handle.identity

    def embed_tensors(self, images: Tensor) -> Tensor:
        """(B, 3, S, S) preprocessed images -> (B, D + 2, H, W) on the CPU."""
        device = next(self.handle.extractor.parameters()).device
        with torch.no_grad():
            out = self.handle.extractor(images.to(device))
            maps = [out[tp] for tp in self.handle.tap_points]
            return fuse_maps(maps).cpu()

    def embed_paths(self, paths: Sequence[str | os.PathLike]) -> Tensor:
        chunks = []
        for start in range(0, len(paths), self.batch_size):
            batch = torch.stack(
                [preprocess_image(load_image(p), self.preprocess) for p in paths[start : start + self.batch_size]]
            )
            chunks.append(self.embed_tensors(batch))
        if not chunks:
            raise IngestionError("no images to embed")
        return torch.cat(chunks)
