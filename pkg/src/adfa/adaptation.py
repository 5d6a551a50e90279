"""Center bank, adaptation loss and the descriptor training loop."""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

import torch
from torch import Tensor

from .descriptor import PatchDescriptor
from .errors import ConfigError, NumericError, TrainingError
from .soft_topk import SoftTopKConfig, pairwise_distances, select_topk

log = logging.getLogger(__name__)

CENTER_POLICIES = ("fixed_after_init", "per_epoch")


@dataclass(frozen=True)
class DescriptorConfig:
    d_prime: int = 448
    epsilon: float = 0.1
    gamma: int = 2
    b: int = 1

    def __post_init__(self):
        if self.d_prime < 1:
            raise ConfigError(f"descriptor.d_prime must be positive, got {self.d_prime}")
        if self.epsilon < 0:
            raise ConfigError(f"descriptor.epsilon must be >= 0, got {self.epsilon}")

    def build(self, in_channels: int, seed: int) -> PatchDescriptor:
        return PatchDescriptor(in_channels, self.d_prime, self.epsilon, self.gamma, self.b, seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0
    center_policy: str = "fixed_after_init"
    device: str = "cpu"
    threads: int = 1  # 0 keeps the torch default

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.center_policy not in CENTER_POLICIES:
            raise ConfigError(f"train.center_policy must be one of {CENTER_POLICIES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CenterBank:
    centers: Tensor  # (H*W, D')
    grid: tuple  # (H, W)
    source_fingerprint: str = ""
    refresh_policy: str = "fixed_after_init"

    def __post_init__(self):
        if self.centers.dim() != 2 or self.centers.shape[0] != self.grid[0] * self.grid[1]:
            raise ConfigError(
                f"center bank of shape {tuple(self.centers.shape)} does not fit grid {self.grid}"
            )
        if not torch.isfinite(self.centers).all():
            raise ConfigError("center bank has non-finite entries")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time: float
    val_score: float | None = None


@dataclass
class TrainLog:
    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)

    def losses(self) -> list[float]:
        return [e.mean_loss for e in self.epochs]

    def to_dict(self) -> dict:
        return {"config": self.config, "epochs": [asdict(e) for e in self.epochs]}


def _batches(features: Tensor | Iterable[Tensor], batch_size: int = 8) -> Iterator[Tensor]:
    if isinstance(features, Tensor):
        if features.dim() == 3:
            features = features.unsqueeze(0)
        yield from features.split(batch_size)
    else:
        for x in features:
            yield x.unsqueeze(0) if x.dim() == 3 else x


def _state_digest(descriptor: PatchDescriptor) -> str:
    h = hashlib.sha256()
    for name, t in descriptor.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def bank_fingerprint(data_fingerprint: str, descriptor: PatchDescriptor) -> str:
    h = hashlib.sha256()
    h.update(data_fingerprint.encode())
    h.update(str(descriptor.seed).encode())
    h.update(_state_digest(descriptor).encode())
    return h.hexdigest()


def init_center_bank(
    features: Tensor | Iterable[Tensor],
    descriptor: PatchDescriptor,
    data_fingerprint: str = "",
    refresh_policy: str = "fixed_after_init",
) -> CenterBank:
    """Mean patch vector at every grid position over all training images, in one streaming pass."""
    mean = None
    count = 0
    grid = None
    device = next(descriptor.parameters()).device
    with torch.no_grad():
        for x in _batches(features):
            patches = descriptor(x.to(device)).double()
            grid = tuple(x.shape[-2:])
            for p in patches:
                count += 1
                if mean is None:
                    mean = torch.zeros_like(p)
                mean += (p - mean) / count
    if count == 0:
        raise ValueError("cannot build a center bank from an empty dataset")
    centers = mean.to(torch.float32).cpu()
    return CenterBank(centers, grid, bank_fingerprint(data_fingerprint, descriptor), refresh_policy)


def refresh_center_bank(
    bank: CenterBank, features: Tensor | Iterable[Tensor], descriptor: PatchDescriptor, data_fingerprint: str = ""
) -> CenterBank:
    """Recompute the bank with the current descriptor weights."""
    if bank.refresh_policy != "per_epoch":
        raise ConfigError("refresh requested for a bank fixed after init")
    return init_center_bank(features, descriptor, data_fingerprint, bank.refresh_policy)


def patch_scores(patches: Tensor, centers: Tensor, cfg: SoftTopKConfig) -> Tensor:
    """Top-k-weighted distance of every patch to the bank: (..., HW, D') -> (..., HW)."""
    d = pairwise_distances(patches, centers.to(patches.device))
    z = select_topk(d, cfg)
    return (z * d).sum(-1)


def adfa_loss(patches: Tensor, bank: CenterBank | Tensor, cfg: SoftTopKConfig) -> Tensor:
    """Mean over patches (and over the batch, if any) of the top-k-weighted distance."""
    centers = bank.centers if isinstance(bank, CenterBank) else bank
    per_patch = patch_scores(patches, centers, cfg)
    return per_patch.mean(-1).mean()


def train(
    features: Tensor,
    cfg: TrainConfig = TrainConfig(),
    topk: SoftTopKConfig = SoftTopKConfig(),
    descriptor_cfg: DescriptorConfig = DescriptorConfig(),
    data_fingerprint: str = "",
) -> tuple[PatchDescriptor, CenterBank, TrainLog]:
    """Adapt a freshly seeded descriptor to cached backbone features of normal images.

    ``features`` is the (N, D + 2, H, W) stack of spatially-aware features;
    the backbone itself never enters this function, so it cannot be updated.
    """
    if features.dim() != 4 or features.shape[0] == 0:
        raise ValueError(f"expected nonempty (N, C, H, W) features, got {tuple(features.shape)}")
    device = torch.device(cfg.device)
    descriptor = descriptor_cfg.build(features.shape[1], cfg.seed).to(device)
    bank = init_center_bank(features, descriptor, data_fingerprint, cfg.center_policy)
    centers = bank.centers.to(device)

    opt = torch.optim.AdamW(
        descriptor.parameters(),
        lr=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        amsgrad=True,
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    history = TrainLog(
        config={"train": cfg.to_dict(), "soft_topk": topk.to_dict(), "descriptor": descriptor_cfg.to_dict()}
    )
    n = features.shape[0]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        descriptor.train()
        total = 0.0
        order = torch.randperm(n, generator=gen)
        for batch_id, idx in enumerate(order.split(cfg.batch_size)):
            x = features[idx].to(device)
            where = f"at epoch {epoch} batch {batch_id} (learning rate {cfg.learning_rate})"
            try:
                loss = adfa_loss(descriptor(x), centers, topk)
            except NumericError as exc:
                raise TrainingError(f"{exc} {where}") from exc
            if not math.isfinite(loss.item()):
                raise TrainingError(f"loss became {loss.item()} {where}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        descriptor.eval()
        if cfg.center_policy == "per_epoch":
            bank = refresh_center_bank(bank, features, descriptor, data_fingerprint)
            centers = bank.centers.to(device)
        record = EpochRecord(epoch, total / n, time.perf_counter() - t0)
        history.epochs.append(record)
        log.info("epoch %d  loss %.6f  (%.1fs)", epoch, record.mean_loss, record.wall_time)
    descriptor.eval().cpu()
    return descriptor, bank, history
