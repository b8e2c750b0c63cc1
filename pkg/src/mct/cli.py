"""Command-line driver: convert, split, pretrain, train, eval, map, sweep."""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import metrics as M
from .config import ConfigError, ExperimentConfig
from .data import (DataError, GroundTruth, HsiCube, SplitSpec, convert_raw, crop_bands, labels_at, load_cube,
                   load_gt, normalize_bands, save_gt, save_cube, stratified_split)
from .datasets import PUBLISHED, synthetic_scene
from .mce import MceConfig, usable_bands
from .model import MCT, ModelConfig
from .pretrain import CMPP, transfer_weights
from .tensor import ShapeError
from .train import evaluate, fit, predict_scene, pretrain
from .transformer import EncoderConfig

log = logging.getLogger("mct")

EXIT_CODES = {"config": 2, "data": 3, "shape": 4, "io": 5}
DEVIATION_FLAG_OA = 5.0


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------- helpers

def version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                              cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"mct {__version__}" + (f" ({desc})" if desc else "")


@contextlib.contextmanager
def thread_limit(deterministic: bool):
    """Cap BLAS threads by MCT_THREADS; deterministic runs use one thread."""
    limit = 1 if deterministic else os.environ.get("MCT_THREADS")
    if limit is None:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=int(limit)):
        yield


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "transfer", None):
        cfg.transfer = args.transfer
    if getattr(args, "map_mode", None):
        cfg.map_mode = args.map_mode
    if getattr(args, "pretrained", None):
        cfg.pretrain_checkpoint = args.pretrained
    return cfg.validate()


def _scene(cfg: ExperimentConfig) -> tuple[HsiCube, GroundTruth]:
    if not cfg.cube or not cfg.gt:
        raise CliError("config", "config must name both a cube and a ground-truth file")
    cube = load_cube(cfg.cube)
    gt = load_gt(cfg.gt, cube)
    cube = crop_bands(cube, usable_bands(cube.bands, cfg.mce.get("groups", 4)))
    return normalize_bands(cube), gt


def _model_config(cfg: ExperimentConfig, bands: int, n_classes: int) -> ModelConfig:
    mce = MceConfig(bands=bands, **cfg.mce)
    enc = EncoderConfig(d_model=mce.d_model, **cfg.encoder)
    return ModelConfig(mce, enc, n_classes, cfg.head_hidden)


def _split(cfg: ExperimentConfig, gt: GroundTruth, seed: int) -> SplitSpec:
    if cfg.split:
        return SplitSpec.load(cfg.split)
    return stratified_split(gt, cfg.per_class, seed)


def _run_dir(cfg: ExperimentConfig, seeds: dict) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    (out / "VERSION").write_text(version_string() + "\n")
    (out / "seeds.json").write_text(json.dumps(seeds, indent=2, sort_keys=True) + "\n")
    return out


def _write_log(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _load_model(path) -> MCT:
    tensors, meta, _ = checkpoint.load(path)
    if "model" not in meta:
        raise CliError("data", f"{path}: checkpoint has no model config")
    model = MCT(ModelConfig.from_dict(meta["model"]), seed=0)
    model.load_state_dict(tensors, strict=True)
    return model


# ---------------------------------------------------------------- commands

def cmd_convert(args) -> int:
    kind = convert_raw(args.raw, args.sidecar, args.output)
    print(json.dumps({"written": args.output, "kind": kind}))
    return 0


def cmd_split(args) -> int:
    gt = load_gt(args.gt)
    spec = stratified_split(gt, args.per_class, args.seed if args.seed is not None else 0)
    spec.save(args.output)
    print(json.dumps({"train": len(spec.train), "test": len(spec.test), "written": args.output}))
    return 0


def cmd_synth(args) -> int:
    cube, gt = synthetic_scene(args.height, args.width, args.bands, args.classes, seed=args.seed,
                               noise=args.noise, separation=args.separation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(cube, out / "scene.hsic")
    save_gt(gt, out / "scene.hsig")
    print(json.dumps({"cube": str(out / "scene.hsic"), "gt": str(out / "scene.hsig")}))
    return 0


def run_pretrain(cfg: ExperimentConfig, cube: HsiCube, n_classes: int, seed: int, out: Path) -> tuple[MCT, str]:
    mcfg = _model_config(cfg, cube.bands, n_classes)
    model = MCT(mcfg, seed=seed)
    cmpp = CMPP.for_model(model, seed=seed)
    rows = pretrain(model, cmpp, cube, cfg.pretrain, seed=seed, zero_center=cfg.zero_center)
    _write_log(rows, out / "pretrain_log.csv")
    tensors = {**model.encoder_state(), **cmpp.state_dict()}
    meta = {"phase": "pretrain", "model": mcfg.to_dict(), "seed": seed, "version": version_string()}
    digest = checkpoint.save(out / "pretrain.mctw", tensors, meta)
    return model, digest


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    with thread_limit(cfg.deterministic):
        cube, gt = _scene(cfg)
        _model_config(cfg, cube.bands, gt.n_classes)  # fail before anything is written
        out = _run_dir(cfg, {"pretrain": cfg.seed})
        _, digest = run_pretrain(cfg, cube, gt.n_classes, cfg.seed, out)
    print(json.dumps({"checkpoint": str(out / "pretrain.mctw"), "sha256": digest}))
    return 0


def run_train(cfg: ExperimentConfig, cube: HsiCube, gt: GroundTruth, seed: int, out: Path,
              pretrained: str | None = None) -> dict:
    """Fine-tune (or train from scratch), save the model, evaluate on the test split."""
    split = _split(cfg, gt, seed)
    split.save(out / "split.json")
    mcfg = _model_config(cfg, cube.bands, gt.n_classes)
    model = MCT(mcfg, seed=seed)
    manifest = {"seed": seed, "transfer": cfg.transfer, "version": version_string()}
    if cfg.transfer != "none":
        if not pretrained:
            raise CliError("config", f"transfer={cfg.transfer} needs a pretrain checkpoint")
        tensors, meta, _ = checkpoint.load(pretrained)
        report = transfer_weights(tensors, model, cfg.transfer, head_seed=seed)
        manifest.update({"source_checkpoint": pretrained, "source_sha256": checkpoint.file_hash(pretrained),
                         "copied": report.copied, "skipped": report.skipped})
    rows = fit(model, cube, split.train, labels_at(gt, split.train), cfg.train, seed=seed)
    _write_log(rows, out / "train_log.csv")
    meta = {"phase": "train", "model": mcfg.to_dict(), "seed": seed}
    manifest["model_sha256"] = checkpoint.save(out / "model.mctw", model.state_dict(), meta)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    summary = M.summary(evaluate(model, cube, gt, split.test, cfg.eval_batch))
    summary["final_loss"] = rows[-1]["loss"] if rows else None
    M.write_json(summary, out / "metrics.json")
    M.write_csv(summary, out / "metrics.csv")
    return summary


def cmd_train(args) -> int:
    cfg = _load_config(args)
    with thread_limit(cfg.deterministic):
        cube, gt = _scene(cfg)
        _model_config(cfg, cube.bands, gt.n_classes)
        out = _run_dir(cfg, {"train": cfg.seed})
        summary = run_train(cfg, cube, gt, cfg.seed, out, cfg.pretrain_checkpoint)
    print(json.dumps({k: summary[k] for k in ("oa", "aa", "kappa")}))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    with thread_limit(cfg.deterministic):
        cube, gt = _scene(cfg)
        model = _load_model(args.model)
        split = SplitSpec.load(args.split) if args.split else _split(cfg, gt, cfg.seed)
        summary = M.summary(evaluate(model, cube, gt, split.test, cfg.eval_batch))
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    M.write_json(summary, out / "metrics.json")
    M.write_csv(summary, out / "metrics.csv")
    print(json.dumps({k: summary[k] for k in ("oa", "aa", "kappa")}))
    return 0


def cmd_map(args) -> int:
    cfg = _load_config(args)
    with thread_limit(cfg.deterministic):
        cube, gt = _scene(cfg)
        model = _load_model(args.model)
        mask = gt.labels if cfg.map_mode == "labeled" else None
        pred = predict_scene(model, cube, mask, cfg.eval_batch)
    img = M.render_map(pred, gt.n_classes, gt.labels, cfg.map_mode)
    target = args.output or str(Path(cfg.out) / f"map_{cfg.map_mode}.ppm")
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    M.write_ppm(img, target)
    print(json.dumps({"written": target, "mode": cfg.map_mode}))
    return 0


def cmd_sweep(args) -> int:
    """Seed sweep with optional pretraining; reports min / median / max."""
    cfg = _load_config(args)
    results = []
    with thread_limit(cfg.deterministic):
        cube, gt = _scene(cfg)
        _model_config(cfg, cube.bands, gt.n_classes)
        root = _run_dir(cfg, {"seeds": cfg.seeds})
        for seed in cfg.seeds:
            out = root / f"seed{seed}"
            out.mkdir(exist_ok=True)
            pretrained = cfg.pretrain_checkpoint
            if cfg.transfer != "none" and not pretrained:
                run_pretrain(cfg, cube, gt.n_classes, seed, out)
                pretrained = str(out / "pretrain.mctw")
            summary = run_train(cfg, cube, gt, seed, out, pretrained)
            results.append({"seed": seed, **{k: summary[k] for k in ("oa", "aa", "kappa")}})
    report = {"runs": results}
    for key in ("oa", "aa", "kappa"):
        vals = [r[key] for r in results]
        report[key] = {"min": min(vals), "median": float(np.median(vals)), "max": max(vals)}
    if cfg.reference in PUBLISHED:
        ref = PUBLISHED[cfg.reference]
        achieved = 100.0 * report["oa"]["median"]
        report["published"] = ref
        report["oa_deviation_points"] = achieved - ref["oa"]
        report["deviation_flag"] = abs(achieved - ref["oa"]) > DEVIATION_FLAG_OA
    (root / "sweep.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report))
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mct", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, transfer=False, map_mode=False):
        sp.add_argument("--config", type=str)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--out", type=str)
        if transfer:
            sp.add_argument("--transfer", choices=["full", "partial", "none"])
            sp.add_argument("--pretrained", type=str, help="pretrain checkpoint to transfer from")
        if map_mode:
            sp.add_argument("--map-mode", dest="map_mode", choices=["labeled", "full"])

    sp = sub.add_parser("convert", help="headerless binary + sidecar JSON -> .hsic/.hsig")
    sp.add_argument("raw")
    sp.add_argument("sidecar")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("split", help="stratified limited-label split")
    sp.add_argument("gt")
    sp.add_argument("--per-class", dest="per_class", type=int, default=5)
    sp.add_argument("--seed", type=int)
    sp.add_argument("-o", "--output", default="split.json")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("synth", help="write a synthetic benchmark scene")
    sp.add_argument("--out", default="synthetic")
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--bands", type=int, default=16)
    sp.add_argument("--classes", type=int, default=2)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--separation", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="center-mask pretraining")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="fine-tune or train from scratch, then evaluate")
    common(sp, transfer=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics for a model checkpoint on a split")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--split")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("map", help="render a classification map (PPM)")
    common(sp, map_mode=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_map)

    sp = sub.add_parser("sweep", help="seed sweep with min/median/max report")
    common(sp, transfer=True)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except (ConfigError, KeyError) as exc:
        category, msg = "config", str(exc)
    except ShapeError as exc:
        category, msg = "shape", str(exc)
    except (DataError, checkpoint.CheckpointError) as exc:
        category, msg = "data", str(exc)
    except OSError as exc:
        category, msg = "io", str(exc)
    print(json.dumps({"error": category, "message": msg}), file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
