"""Image anomaly scores, AUROC, evaluation reports and the ablation grid."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .adaptation import CenterBank, patch_scores
from .descriptor import PatchDescriptor
from .errors import ConfigError, IngestionError
from .soft_topk import SoftTopKConfig

log = logging.getLogger(__name__)


@dataclass
class AnomalyScore:
    image_id: str
    score: float
    per_patch_scores: Tensor | None = None


@dataclass
class AdfaModel:
    """Trained descriptor with its center bank and the settings needed to score."""

    descriptor: PatchDescriptor
    bank: CenterBank
    topk: SoftTopKConfig
    extractor: object = None  # backbone.FeatureExtractor, needed only for raw images
    backbone_identity: str = ""
    meta: dict = field(default_factory=dict)

    def check_backbone(self) -> None:
        if self.extractor is None:
            raise ConfigError("model has no feature extractor attached")
        if self.backbone_identity and self.extractor.identity != self.backbone_identity:
            raise ConfigError(
                "backbone does not match the checkpoint "
                f"({self.extractor.identity[:12]} != {self.backbone_identity[:12]})"
            )

    def score_features(self, features: Tensor, batch_size: int = 8) -> Tensor:
        """(N, D + 2, H, W) spatial features -> (N, HW) per-patch scores."""
        if tuple(features.shape[-2:]) != tuple(self.bank.grid):
            raise ConfigError(f"feature grid {tuple(features.shape[-2:])} != bank grid {self.bank.grid}")
        out = []
        self.descriptor.eval()
        with torch.no_grad():
            for x in features.split(batch_size):
                out.append(patch_scores(self.descriptor(x), self.bank.centers, self.topk))
        return torch.cat(out)


def anomaly_score(image, model: AdfaModel, image_id: str = "", keep_patches: bool = False) -> AnomalyScore:
    """Max over patch positions of the top-k-weighted distance to the bank.

    ``image`` is a file path or a preprocessed (3, S, S) tensor.
    """
    from .backbone import load_image, preprocess_image

    model.check_backbone()
    if isinstance(image, (str, Path)):
        image_id = image_id or str(image)
        x = preprocess_image(load_image(image), model.extractor.preprocess)
    else:
        x = torch.as_tensor(image)
    feats = model.extractor.embed_tensors(x.unsqueeze(0))
    per_patch = model.score_features(feats)[0]
    return AnomalyScore(image_id, float(per_patch.max()), per_patch if keep_patches else None)


def auroc(normal_scores: Sequence[float], abnormal_scores: Sequence[float]) -> float:
    """Probability that an abnormal score exceeds a normal one, ties counted half.

    Exact: the pair count is accumulated in integers before the final division.
    """
    normal = np.sort(np.asarray(normal_scores, dtype=np.float64))
    abnormal = np.asarray(abnormal_scores, dtype=np.float64)
    if normal.size == 0 or abnormal.size == 0:
        raise ValueError("AUROC needs at least one normal and one abnormal score")
    below = np.searchsorted(normal, abnormal, side="left")
    at_or_below = np.searchsorted(normal, abnormal, side="right")
    twice_u = int(np.sum(2 * below + (at_or_below - below)))
    return twice_u / (2 * normal.size * abnormal.size)


def roc_curve(normal_scores: Sequence[float], abnormal_scores: Sequence[float]):
    """(false positive rate, true positive rate) at every distinct threshold, for plotting."""
    scores = np.concatenate([normal_scores, abnormal_scores]).astype(np.float64)
    labels = np.concatenate([np.zeros(len(normal_scores)), np.ones(len(abnormal_scores))])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), scores.size - 1]
    tps = np.cumsum(labels)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / max(labels.sum(), 1)]
    fpr = np.r_[0.0, fps / max((1 - labels).sum(), 1)]
    return fpr, tpr


def plot_roc(normal_scores, abnormal_scores, path: str | Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fpr, tpr = roc_curve(normal_scores, abnormal_scores)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, lw=1.5, label=f"AUROC {auroc(normal_scores, abnormal_scores):.3f}")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


@dataclass
class EvalReport:
    dataset: str
    auroc: float
    n_normal: int
    n_abnormal: int
    scores: dict
    config: dict
    checkpoint_sha256: str = ""
    wall_time: float = 0.0
    files: list = field(default_factory=list)
    dataset_sha256: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def evaluate(
    test_items: Sequence[tuple],
    model: AdfaModel,
    dataset: str = "",
    config: dict | None = None,
    checkpoint_sha256: str = "",
    features: Tensor | None = None,
    roc_out: str | Path | None = None,
    dataset_sha256: str = "",
) -> EvalReport:
    """Score every (path, label) test item and summarize with AUROC.

    Precomputed spatial ``features`` (aligned with ``test_items``) skip the backbone.
    """
    t0 = time.perf_counter()
    labels = [int(lbl) for _, lbl in test_items]
    if 0 not in labels or 1 not in labels:
        raise IngestionError("evaluation needs both normal and abnormal test images")
    if features is None:
        model.check_backbone()
        features = model.extractor.embed_paths([p for p, _ in test_items])
    scores = model.score_features(features).amax(-1).tolist()
    normal = [s for s, lbl in zip(scores, labels) if lbl == 0]
    abnormal = [s for s, lbl in zip(scores, labels) if lbl == 1]
    report = EvalReport(
        dataset=dataset,
        auroc=auroc(normal, abnormal),
        n_normal=len(normal),
        n_abnormal=len(abnormal),
        scores={"normal": normal, "abnormal": abnormal},
        config=config or {},
        checkpoint_sha256=checkpoint_sha256,
        wall_time=time.perf_counter() - t0,
        files=[[str(p), lbl, s] for (p, lbl), s in zip(test_items, scores)],
        dataset_sha256=dataset_sha256,
    )
    if roc_out:
        plot_roc(normal, abnormal, roc_out, title=dataset)
    return report


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

DEFAULT_EPSILONS = (0.0, 0.05, 0.10, 0.20)


@dataclass
class AblationCell:
    name: str
    epsilon: float
    operator: str  # soft | hard
    backbone: str  # pretrained | random
    auroc: float | None = None
    error: str = ""


@dataclass
class AblationGrid:
    epsilons: tuple = DEFAULT_EPSILONS
    hard_topk: bool = True
    random_backbone: bool = True
    base_epsilon: float = 0.1
    dataset: str = ""
    cells: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    dataset_sha256: str = ""

    def requested_cells(self) -> list[AblationCell]:
        cells = [AblationCell(f"eps={e:.2f}", float(e), "soft", "pretrained") for e in self.epsilons]
        if self.hard_topk:
            cells.append(AblationCell("hard top-k", self.base_epsilon, "hard", "pretrained"))
        if self.random_backbone:
            cells.append(AblationCell("random init", self.base_epsilon, "soft", "random"))
        return cells

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "cell", "epsilon", "operator", "backbone", "auroc", "error"])
        for c in self.cells:
            w.writerow(
                [self.dataset, c.name, f"{c.epsilon:.2f}", c.operator, c.backbone,
                 "" if c.auroc is None else f"{c.auroc:.6f}", c.error]
            )
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def render(self) -> str:
        """Text table: one row per dataset, epsilon columns then the two alternative arms."""
        heads = ["Dataset"] + [c.name for c in self.cells]
        row = [self.dataset or "-"] + [
            "failed" if c.auroc is None else f"{c.auroc:.3f}" for c in self.cells
        ]
        widths = [max(len(h), len(v)) for h, v in zip(heads, row)]
        line = lambda xs: " | ".join(x.rjust(wd) for x, wd in zip(xs, widths))  # noqa: E731
        sep = "-+-".join("-" * wd for wd in widths)
        return "\n".join([line(heads), sep, line(row)]) + "\n"


def ablation_run(grid: AblationGrid, run_cell: Callable[[AblationCell], float]) -> AblationGrid:
    """Evaluate every requested cell exactly once; a failing cell is recorded and skipped."""
    grid.cells = []
    for cell in grid.requested_cells():
        try:
            cell.auroc = float(run_cell(cell))
        except Exception as exc:  # one bad cell must not sink the grid
            log.exception("ablation cell %s failed", cell.name)
            cell.error = f"{exc.__class__.__name__}: {exc}"
        grid.cells.append(cell)
    return grid
