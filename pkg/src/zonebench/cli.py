"""Command line entry point: ``zonebench synth|pipeline|replay|evaluate``.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence,
5 evaluation error. Set ``ZONEBENCH_DETERMINISTIC=1`` for bit-reproducible runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augment import expand, make_plan
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import DatasetManifest, load_sample
from .errors import ConfigError, InputError, ZoneBenchError
from .evaluation import boxplot_export, evaluate_model, model_order_key, render_triptych, select_triptych, summarize
from .ingest import ingest, split_by_patient, synth_generate
from .models import ModelConfig, build, count_parameters, forward
from .train import TrainConfig, deterministic_mode, predict_classes, train

log = logging.getLogger("zonebench")


class StageError(Exception):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"[{stage}] {cause}")


class _Stages:
    def __init__(self):
        self.current = "setup"
        self.timings: dict[str, float] = {}

    def __call__(self, name):
        self.current = name
        return self

    def __enter__(self):
        self._t = time.perf_counter()

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.current] = round(time.perf_counter() - self._t, 3)
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.current, exc) from exc


def versions() -> dict:
    import numba
    import torch

    return {
        "zonebench": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "numba": numba.__version__,
    }


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    manifest = synth_generate(args.patients, args.slices, args.seed, args.out)
    print(f"wrote {len(manifest)} slices for {args.patients} patients to {args.out}")
    return 0


# ---------------------------------------------------------------- pipeline


def _train_one(name: str, model_cfg: dict, train_root: str, train_kwargs: dict, out_dir: str) -> dict:
    model = build(ModelConfig.from_dict(model_cfg))
    train_set = DatasetManifest.read(Path(train_root))
    tcfg = TrainConfig(**train_kwargs, checkpoint_dir=Path(out_dir))
    model, history = train(model, train_set, tcfg)
    save_checkpoint(model, Path(out_dir) / "final.ckpt", meta={"name": name, "history": history.meta})
    return {"name": name, "final_loss": history.final_loss, "parameters": count_parameters(model)}


def run_pipeline(cfg: RunConfig, workers: int = 1) -> Path:
    run_dir = cfg.output_root / f"run-{cfg.digest()}"
    failed = run_dir / "FAILED"
    stages = _Stages()
    run_dir.mkdir(parents=True, exist_ok=True)
    failed.unlink(missing_ok=True)
    try:
        with stages("model-build"):
            model_cfgs = {name: cfg.model_config(name) for name in cfg.models}
        with stages("ingest"):
            dataset = ingest(cfg.data_root, run_dir / "dataset")
        with stages("split"):
            train_set, test_set = split_by_patient(dataset, cfg.train.get("train_fraction", 0.9), cfg.seed)
            train_set.write(dataset.root / "train.csv")
            test_set.write(dataset.root / "test.csv")
        with stages("augment"):
            train_aug = expand(train_set, make_plan(cfg.augmentation_seed), run_dir / "augmented")
        with stages("train"):
            train_kwargs = dict(cfg.train)
            train_kwargs.setdefault("shuffle_seed", cfg.seed)
            jobs = [
                (name, model_cfgs[name].to_dict(), str(train_aug.root), train_kwargs, str(run_dir / "models" / name))
                for name in cfg.models
            ]
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    trained = list(pool.map(_train_one, *zip(*jobs)))
            else:
                trained = [_train_one(*job) for job in jobs]
        with stages("evaluate"):
            reports = run_dir / "reports"
            ckpts = {name: run_dir / "models" / name / "final.ckpt" for name in cfg.models}
            evaluate_checkpoints(ckpts, test_set, reports, cfg.reference_model)
        manifest = {
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(),
            "seeds": {
                "split": cfg.seed,
                "augmentation": cfg.augmentation_seed,
                "shuffle": train_kwargs["shuffle_seed"],
                "init": {n: c.init_seed for n, c in model_cfgs.items()},
            },
            "deterministic": deterministic_mode(),
            "versions": versions(),
            "models": trained,
            "counts": {"dataset": len(dataset), "train": len(train_set), "train_augmented": len(train_aug), "test": len(test_set)},
            "stage_seconds": stages.timings,
            "artifacts": sorted(str(p.relative_to(run_dir)) for p in reports.iterdir()),
        }
        (run_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except StageError as err:
        failed.write_text(json.dumps({"stage": err.stage, "error": str(err.cause)}, indent=2) + "\n")
        raise
    return run_dir


def cmd_pipeline(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise StageError("config", exc) from exc
    run_dir = run_pipeline(cfg, workers=args.workers)
    print((run_dir / "reports" / "summary.txt").read_text(), end="")
    print(f"run directory: {run_dir}")
    return 0


def cmd_replay(args) -> int:
    try:
        record = json.loads(Path(args.run_manifest).read_text())
        cfg = RunConfig.from_dict(record["config"])
        if args.output_root:
            cfg.output_root = Path(args.output_root).resolve()
    except (OSError, KeyError, json.JSONDecodeError, ConfigError) as exc:
        raise StageError("config", ConfigError(f"cannot replay {args.run_manifest}: {exc}")) from exc
    run_dir = run_pipeline(cfg, workers=args.workers)
    print(f"run directory: {run_dir}")
    return 0


# ---------------------------------------------------------------- evaluate


def evaluate_checkpoints(checkpoints: dict, test_set: DatasetManifest, out_dir: Path, reference_model: str | None):
    """Load, evaluate, and write summary, box-plot and triptych reports."""
    if not checkpoints:
        raise InputError("no checkpoints to evaluate")
    if not len(test_set):
        raise InputError("test set is empty")
    models = {name: load_checkpoint(path) for name, path in checkpoints.items()}
    records = {name: evaluate_model(m, test_set, name=name) for name, m in models.items()}
    out_dir = Path(out_dir)
    table = summarize(records)
    table.write(out_dir)
    boxplot_export(records, out_dir / "boxplot.csv")
    ref = reference_model if reference_model in records else sorted(records, key=model_order_key)[0]
    if len(records[ref]) >= 3:
        selection = select_triptych(records[ref])
        by_key = {e.key: e for e in test_set.entries}
        picks = [by_key[k] for k in selection]
        images = np.stack([load_sample(test_set, e).image for e in picks])[..., None]
        preds = {}
        for name, m in models.items():
            classes = predict_classes(forward(m, images))
            preds[name] = dict(zip(selection, classes))
        render_triptych(selection, test_set, preds, out_dir, ref)
    return table


def _checkpoint_names(paths) -> dict:
    from .checkpoint import read_header

    names, result = {}, {}
    for p in paths:
        header, _ = read_header(p)
        name = header.get("meta", {}).get("name") or header["config"]["architecture"]
        names.setdefault(name, []).append(Path(p))
    for name, ps in names.items():
        if len(ps) == 1:
            result[name] = ps[0]
        else:
            for p in ps:
                result[f"{name}:{p.stem}"] = p
    return result


def cmd_evaluate(args) -> int:
    if not args.checkpoint:
        raise StageError("evaluate", InputError("at least one --checkpoint is required"))
    with _Stages()("evaluate"):
        test_set = DatasetManifest.read(Path(args.test_dir))
        ckpts = _checkpoint_names(args.checkpoint)
        table = evaluate_checkpoints(ckpts, test_set, Path(args.out), args.reference_model)
    print(table.to_text(), end="")
    return 0


# ---------------------------------------------------------------- main


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zonebench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic phantom study")
    s.add_argument("--patients", type=int, required=True)
    s.add_argument("--slices", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="ingest, split, augment, train and evaluate from a config file")
    s.add_argument("config", type=Path)
    s.add_argument("--workers", type=int, default=1, help="train models in parallel processes")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("replay", help="re-execute a run from its run_manifest.json")
    s.add_argument("run_manifest", type=Path)
    s.add_argument("--output-root", type=Path, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("evaluate", help="evaluate saved checkpoints on a test dataset")
    s.add_argument("--checkpoint", action="append", default=[], type=Path)
    s.add_argument("--test-dir", type=Path, required=True, help="dataset directory or manifest CSV")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--reference-model", default="R2U_NET")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as err:
        print(f"zonebench: {err}", file=sys.stderr)
        return err.exit_code
    except ZoneBenchError as err:
        print(f"zonebench: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
