import csv
import io
import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adfa.adaptation import CenterBank, init_center_bank
from adfa.descriptor import PatchDescriptor
from adfa.errors import ConfigError, IngestionError
from adfa.scoring import (
    AblationCell,
    AblationGrid,
    AdfaModel,
    EvalReport,
    ablation_run,
    anomaly_score,
    auroc,
    evaluate,
    plot_roc,
    roc_curve,
)
from adfa.soft_topk import SoftTopKConfig, pairwise_distances, soft_topk


def _pair_oracle(normal, abnormal):
    total = 0.0
    for a, n in itertools.product(abnormal, normal):
        total += 1.0 if a > n else 0.5 if a == n else 0.0
    return total / (len(normal) * len(abnormal))


# --- AUROC ----------------------------------------------------------------------


def test_auroc_examples():
    assert auroc([1, 2], [3, 4]) == 1.0
    assert auroc([5, 5, 5], [5, 5]) == 0.5
    assert auroc([0.1, 0.2], [0.15, 0.3]) == 0.75


def test_auroc_empty_class():
    with pytest.raises(ValueError):
        auroc([], [1.0])
    with pytest.raises(ValueError):
        auroc([1.0], [])


scores = st.lists(st.integers(0, 6).map(float), min_size=1, max_size=25)


@settings(max_examples=150, deadline=None)
@given(normal=scores, abnormal=scores)
def test_auroc_matches_pair_counting(normal, abnormal):
    assert auroc(normal, abnormal) == _pair_oracle(normal, abnormal)


@settings(max_examples=80, deadline=None)
@given(normal=scores, abnormal=scores, a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_auroc_invariant_under_increasing_maps(normal, abnormal, a, b):
    base = auroc(normal, abnormal)
    assert auroc(np.exp(normal), np.exp(abnormal)) == base
    assert auroc([a * x + b for x in normal], [a * x + b for x in abnormal]) == base


@settings(max_examples=80, deadline=None)
@given(values=st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=30, unique=True), cut=st.integers(1, 29))
def test_auroc_class_swap(values, cut):
    cut = min(cut, len(values) - 1)
    normal, abnormal = values[:cut], values[cut:]
    assert auroc(normal, abnormal) == pytest.approx(1 - auroc(abnormal, normal), abs=1e-15)


def test_roc_curve_endpoints_and_area():
    rng = np.random.default_rng(0)
    normal, abnormal = rng.normal(size=30), rng.normal(1, size=25)
    fpr, tpr = roc_curve(normal, abnormal)
    assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(auroc(normal, abnormal), abs=1e-12)


@pytest.mark.parametrize("suffix", [".png", ".svg"])
def test_plot_roc_writes_file(tmp_path, suffix):
    out = tmp_path / f"roc{suffix}"
    plot_roc([0.1, 0.4, 0.2], [0.5, 0.3], out, title="toy")
    assert out.stat().st_size > 0


# --- scores ---------------------------------------------------------------------


class _FakeExtractor:
    """Stands in for the backbone: the 'image' already is the spatial feature map."""

    identity = "fake"

    def embed_tensors(self, images):
        return images


def _small_model(c=5, h=3, w=3, n_train=6, seed=0, k=3):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(n_train, c, h, w, generator=g)
    desc = PatchDescriptor(c, 4, seed=seed)
    bank = init_center_bank(feats, desc)
    return AdfaModel(desc, bank, SoftTopKConfig(k=k), _FakeExtractor(), "fake"), g


def test_single_patch_model_scores_distance_to_center():
    desc = PatchDescriptor(3, 2, seed=0)
    center = torch.tensor([[1.0, -2.0]])
    model = AdfaModel(desc, CenterBank(center, (1, 1)), SoftTopKConfig(k=1, operator="hard"), _FakeExtractor(), "fake")
    x = torch.randn(3, 1, 1)
    s = anomaly_score(x, model, keep_patches=True)
    with torch.no_grad():
        expect = torch.linalg.norm(desc(x[None])[0, 0] - center[0])
    assert s.score == pytest.approx(float(expect), rel=1e-6)
    assert s.score == float(s.per_patch_scores.max())


def test_score_matches_sequential_recompute():
    model, g = _small_model()
    x = torch.randn(5, 3, 3, generator=g)
    s = anomaly_score(x, model, keep_patches=True)
    with torch.no_grad():
        patches = model.descriptor(x[None])[0]
    rows = []
    for t in range(patches.shape[0]):
        d = pairwise_distances(patches[t : t + 1], model.bank.centers)[0]
        rows.append(float((soft_topk(d, model.topk) * d).sum()))
    np.testing.assert_allclose(s.per_patch_scores.numpy(), rows, rtol=1e-5)
    assert s.score == pytest.approx(max(rows), rel=1e-6)
    assert anomaly_score(x, model).score == s.score


def test_backbone_mismatch_is_config_error():
    model, g = _small_model()
    model.backbone_identity = "something else"
    with pytest.raises(ConfigError, match="backbone"):
        anomaly_score(torch.zeros(5, 3, 3), model)


def test_grid_mismatch_is_config_error():
    model, _ = _small_model()
    with pytest.raises(ConfigError, match="grid"):
        model.score_features(torch.zeros(1, 5, 4, 4))


def _items(n_normal, n_abnormal):
    return [(f"n{i}.png", 0) for i in range(n_normal)] + [(f"a{i}.png", 1) for i in range(n_abnormal)]


def test_evaluate_report_schema(tmp_path):
    model, g = _small_model()
    items = _items(4, 3)
    feats = torch.randn(7, 5, 3, 3, generator=g)
    feats[4:] += 3.0
    rep = evaluate(items, model, "toy", {"k": 3}, "abc", features=feats, roc_out=tmp_path / "roc.png")
    assert (rep.n_normal, rep.n_abnormal) == (4, 3)
    assert 0.0 <= rep.auroc <= 1.0
    assert rep.auroc == auroc(rep.scores["normal"], rep.scores["abnormal"])
    assert (tmp_path / "roc.png").exists()
    rep.save(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    for key in ("auroc", "n_normal", "n_abnormal", "scores", "config", "checkpoint_sha256"):
        assert key in data
    assert isinstance(rep, EvalReport)


def test_evaluate_needs_both_classes():
    model, _ = _small_model()
    with pytest.raises(IngestionError):
        evaluate(_items(3, 0), model, features=torch.zeros(3, 5, 3, 3))


# --- ablation grid ----------------------------------------------------------------


def test_default_grid_cells():
    cells = AblationGrid().requested_cells()
    assert [c.name for c in cells] == ["eps=0.00", "eps=0.05", "eps=0.10", "eps=0.20", "hard top-k", "random init"]
    assert cells[4].operator == "hard" and cells[5].backbone == "random"


def test_every_cell_runs_once_and_failures_are_contained():
    seen = []

    def run(cell: AblationCell):
        seen.append(cell.name)
        if cell.operator == "hard":
            raise RuntimeError("boom")
        return 0.5 + cell.epsilon

    grid = ablation_run(AblationGrid(dataset="toy"), run)
    assert seen == [c.name for c in grid.cells] and len(set(seen)) == 6
    hard = [c for c in grid.cells if c.operator == "hard"][0]
    assert hard.auroc is None and "boom" in hard.error
    rows = list(csv.DictReader(io.StringIO(grid.to_csv())))
    assert len(rows) == 6 and rows[1]["auroc"] == "0.550000"
    text = grid.render()
    assert "failed" in text and "toy" in text and "0.700" in text


def test_singleton_grid_equals_plain_run():
    grid = AblationGrid(epsilons=(0.1,), hard_topk=False, random_backbone=False)
    out = ablation_run(grid, lambda cell: 0.8125)
    assert len(out.cells) == 1 and out.cells[0].auroc == 0.8125
