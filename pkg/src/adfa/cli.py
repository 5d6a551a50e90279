"""Command-line entry point: ``adfa {train,eval,score,ablate,synth}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import RunConfig, load_config
from .data import generate_synthetic, load_dataset
from .errors import AdfaError, IngestionError
from .scoring import AblationGrid, anomaly_score

log = logging.getLogger("adfa")


def _runtime(cfg: RunConfig) -> None:
    if cfg.train.threads > 0:
        torch.set_num_threads(cfg.train.threads)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "data", None):
        overrides.append(f'paths.data="{args.data}"')
    return load_config(args.config, overrides)


def _data_root(cfg: RunConfig) -> Path:
    if not cfg.paths.data:
        raise IngestionError("no dataset given; set paths.data or pass --data")
    return Path(cfg.paths.data)


def cmd_train(args) -> int:
    cfg = _config(args)
    _runtime(cfg)
    manifest = load_dataset(_data_root(cfg))
    extractor = pipeline.build_extractor(cfg)
    model, history = pipeline.fit(cfg, manifest, extractor)
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    sha = pipeline.save_model(out / pipeline.CHECKPOINT_NAME, model)
    record = history.to_dict()
    record["checkpoint_sha256"] = sha
    (out / pipeline.TRAIN_LOG_NAME).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{out / pipeline.CHECKPOINT_NAME}\t{sha}")
    return 0


def _model_from_checkpoint(path, cfg: RunConfig | None, weights_path: str = ""):
    model, sha = pipeline.load_model(path)
    ck_cfg = pipeline.config_from_checkpoint(model.meta, weights_path)
    if cfg is not None:
        ck_cfg = ck_cfg.replace(
            backbone=cfg.backbone if not weights_path else ck_cfg.backbone, eval=cfg.eval, paths=cfg.paths
        )
    model.extractor = pipeline.build_extractor(ck_cfg)
    model.check_backbone()
    return model, sha, ck_cfg


def cmd_eval(args) -> int:
    cfg = _config(args)
    _runtime(cfg)
    manifest = load_dataset(_data_root(cfg), require_test=True)
    model, sha, run_cfg = _model_from_checkpoint(args.checkpoint, cfg)
    report = pipeline.eval_report(run_cfg, manifest, model, sha, roc_out=args.roc_out)
    out = Path(args.report) if args.report else Path(args.checkpoint).with_name("eval_report.json")
    report.save(out)
    print(f"{report.dataset}\tAUROC\t{report.auroc:.4f}\t{out}")
    return 0


def cmd_score(args) -> int:
    cfg = _config(args) if args.config else None
    if cfg is not None:
        _runtime(cfg)
    model, _, _ = _model_from_checkpoint(args.checkpoint, cfg, args.weights_path or "")
    for path in args.files:
        s = anomaly_score(path, model)
        print(f"{path}\t{s.score:.6f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _runtime(cfg)
    manifest = load_dataset(_data_root(cfg), require_test=True)
    if args.grid != "default":
        eps = tuple(float(x) for x in args.grid.split(","))
        grid = AblationGrid(epsilons=eps, base_epsilon=cfg.descriptor.epsilon)
    else:
        grid = AblationGrid(base_epsilon=cfg.descriptor.epsilon)
    grid = pipeline.run_ablation(cfg, manifest, grid)
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(grid.to_csv())
    (out / "ablation.txt").write_text(grid.render())
    (out / "ablation.json").write_text(grid.to_json() + "\n")
    print(grid.render(), end="")
    return 0 if all(c.auroc is not None for c in grid.cells) else 1


def cmd_synth(args) -> int:
    manifest = generate_synthetic(
        args.out, args.n_train, args.n_test_normal, args.n_test_abnormal, seed=args.seed
    )
    counts = manifest.counts()
    print("\t".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adfa", description="Attention-augmented top-k feature adaptation for image anomaly detection")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("-c", "--config", required=config_required, help="TOML run config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")

    p = sub.add_parser("train", help="adapt the descriptor on train/normal")
    common(p)
    p.add_argument("--data", help="dataset root (overrides paths.data)")
    p.add_argument("--out", help="output directory (overrides paths.out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AUROC on test/normal vs test/abnormal")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", help="JSON report path (default: next to the checkpoint)")
    p.add_argument("--roc-out", help="write a ROC plot (.png or .svg)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="print path<TAB>score for each image")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--weights-path", help="backbone weights file, if not the one recorded")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="epsilon sweep, hard top-k and random-init arms")
    common(p)
    p.add_argument("--data")
    p.add_argument("--grid", default="default", help="'default' or comma-separated epsilons")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-test-normal", type=int, default=20)
    p.add_argument("--n-test-abnormal", type=int, default=20)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except AdfaError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.__class__.__name__}: {msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
