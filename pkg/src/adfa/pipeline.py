"""Run-level glue: config -> features -> trained model -> checkpoint / report / ablation grid."""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import torch
from torch import Tensor

from .adaptation import CenterBank, TrainLog, train
from .backbone import BackboneSpec, FeatureExtractor, load_backbone
from .checkpoint import read_container, write_container
from .config import RunConfig
from .data import DatasetManifest
from .descriptor import PatchDescriptor
from .errors import ConfigError
from .scoring import AblationCell, AblationGrid, AdfaModel, EvalReport, ablation_run, evaluate
from .soft_topk import SoftTopKConfig

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.adfa"
TRAIN_LOG_NAME = "train_log.json"


def build_extractor(cfg: RunConfig, spec: BackboneSpec | None = None) -> FeatureExtractor:
    spec = spec or cfg.backbone
    handle = load_backbone(spec, cfg.preprocess.crop_size, cfg.train.device)
    return FeatureExtractor(handle, cfg.preprocess, cfg.eval.batch_size)


def fit(
    cfg: RunConfig,
    manifest: DatasetManifest,
    extractor: FeatureExtractor,
    features: Tensor | None = None,
) -> tuple[AdfaModel, TrainLog]:
    """Train on the manifest's normal images; ``features`` may be passed in to skip the backbone."""
    if features is None:
        features = extractor.embed_paths(manifest.train_paths)
    descriptor, bank, history = train(
        features, cfg.train, cfg.soft_topk, cfg.descriptor, manifest.digest()
    )
    meta = {
        "config": cfg.echo(),
        "dataset_sha256": manifest.digest(),
        "feature_channels": int(features.shape[1]),
    }
    model = AdfaModel(descriptor, bank, cfg.soft_topk, extractor, extractor.identity, meta)
    return model, history


def save_model(path: str | Path, model: AdfaModel) -> str:
    d = model.descriptor
    tensors = {
        "descriptor.reduce.weight": d.reduce.weight,
        "descriptor.reduce.bias": d.reduce.bias,
        "descriptor.attn.weight": d.attn.weight,
        "bank.centers": model.bank.centers,
    }
    meta = dict(model.meta)
    meta.update(
        {
            "descriptor": d.config(),
            "soft_topk": model.topk.to_dict(),
            "backbone_sha256": model.backbone_identity,
            "bank": {
                "grid": list(model.bank.grid),
                "fingerprint": model.bank.source_fingerprint,
                "refresh_policy": model.bank.refresh_policy,
            },
        }
    )
    return write_container(path, tensors, meta)


def load_model(path: str | Path, extractor: FeatureExtractor | None = None) -> tuple[AdfaModel, str]:
    """Rebuild a model from a checkpoint; returns (model, checkpoint sha256)."""
    tensors, meta, sha = read_container(path)
    dc = meta["descriptor"]
    descriptor = PatchDescriptor(dc["in_channels"], dc["d_prime"], dc["epsilon"], dc["gamma"], dc["b"], dc["seed"])
    state = {
        "reduce.weight": tensors["descriptor.reduce.weight"],
        "reduce.bias": tensors["descriptor.reduce.bias"],
        "attn.weight": tensors["descriptor.attn.weight"],
    }
    try:
        descriptor.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint {path} has inconsistent descriptor tensors: {exc}") from exc
    descriptor.eval()
    b = meta["bank"]
    bank = CenterBank(tensors["bank.centers"], tuple(b["grid"]), b["fingerprint"], b["refresh_policy"])
    topk = SoftTopKConfig(**meta["soft_topk"])
    model = AdfaModel(descriptor, bank, topk, extractor, meta["backbone_sha256"], meta)
    return model, sha


def config_from_checkpoint(meta: dict, weights_path: str = "") -> RunConfig:
    data = json.loads(json.dumps(meta["config"]))
    if weights_path:
        data["backbone"]["weights_path"] = weights_path
    return RunConfig.from_dict(data)


def run_ablation(cfg: RunConfig, manifest: DatasetManifest, grid: AblationGrid | None = None) -> AblationGrid:
    """Train and evaluate every grid cell from the same seed and data."""
    grid = grid or AblationGrid(base_epsilon=cfg.descriptor.epsilon)
    grid.dataset = grid.dataset or manifest.name
    grid.config = cfg.echo()
    grid.dataset_sha256 = manifest.digest()
    test_items = manifest.test_items()
    cache = {}

    def features_for(spec: BackboneSpec):
        key = json.dumps(spec.to_dict(), sort_keys=True, default=list)
        if key not in cache:
            ex = build_extractor(cfg, spec)
            cache[key] = (
                ex,
                ex.embed_paths(manifest.train_paths),
                ex.embed_paths([p for p, _ in test_items]),
            )
        return cache[key]

    def run_cell(cell: AblationCell) -> float:
        spec = cfg.backbone
        if cell.backbone == "random":
            spec = dataclasses.replace(spec, weights="random")
        cell_cfg = cfg.replace(
            backbone=spec,
            descriptor=dataclasses.replace(cfg.descriptor, epsilon=cell.epsilon),
            soft_topk=dataclasses.replace(cfg.soft_topk, operator=cell.operator),
        )
        ex, train_feats, test_feats = features_for(spec)
        model, _ = fit(cell_cfg, manifest, ex, train_feats)
        report = evaluate(test_items, model, manifest.name, cell_cfg.echo(), features=test_feats)
        log.info("ablation %s: AUROC %.4f", cell.name, report.auroc)
        return report.auroc

    return ablation_run(grid, run_cell)


def eval_report(
    cfg: RunConfig, manifest: DatasetManifest, model: AdfaModel, checkpoint_sha: str, roc_out=None
) -> EvalReport:
    return evaluate(
        manifest.test_items(),
        model,
        dataset=manifest.name,
        config=cfg.echo(),
        checkpoint_sha256=checkpoint_sha,
        roc_out=roc_out,
        dataset_sha256=manifest.digest(),
    )
