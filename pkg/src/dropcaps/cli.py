"""``dropcaps`` command line.

Every command writes into a staging directory under ``--out`` and moves the
finished files into place only on success, followed by ``run_manifest.json``.
Exit status: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import uuid
from pathlib import Path

import numpy as np
import scipy

from . import __version__, augment, checkpoint, dataio, pipeline, synth
from .errors import DropcapsError, UsageError
from .evaluation import AccuracyDistribution, significance_row
from .report import render_report
from .stats import SignificanceCell
from .trainer import split_by_repetition, train, write_history_csv

OUT_ENV = "DROPCAPS_OUT"
log = logging.getLogger("dropcaps")


# -- argument helpers -----------------------------------------------------------

def parse_rates(text: str) -> list[float]:
    """Comma-separated percentages, e.g. ``0,10,25,50,75``."""
    try:
        pcts = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--rates expects comma-separated percentages, got {text!r}") from None
    if not pcts or any(not 0 <= p < 100 for p in pcts):
        raise UsageError("--rates values must lie in [0, 100)")
    if len(set(pcts)) != len(pcts):
        raise UsageError("--rates contains duplicates")
    return [p / 100.0 for p in pcts]


def load_cfg(args) -> dict:
    cfg = dataio.load_config(args.config) if args.config else dataio.default_config()
    if args.seed is not None:
        cfg = dataio.validate_config({**cfg, "seed": args.seed})
    return cfg


def out_root(args) -> Path:
    root = args.out or os.environ.get(OUT_ENV)
    if not root:
        raise UsageError(f"no output directory: pass --out or set {OUT_ENV}")
    return Path(root)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """Staging directory that is promoted into the output root on success."""

    def __init__(self, root: Path):
        self.root = root
        self.dir = root / f".staging-{uuid.uuid4().hex[:12]}"

    def __enter__(self) -> Path:
        self.dir.mkdir(parents=True)
        return self.dir

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.dir, ignore_errors=True)
            return False
        for item in sorted(self.dir.iterdir()):
            target = self.root / item.name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            os.replace(item, target)
        self.dir.rmdir()
        return False


def write_manifest(root: Path, args, cfg: dict | None, files: list[str], extra: dict | None = None) -> None:
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_hash": dataio.config_hash(cfg) if cfg is not None else None,
        "seed": cfg["seed"] if cfg is not None else None,
        "versions": {"dropcaps": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "outputs": {f: _sha256_file(root / f) for f in sorted(files) if (root / f).is_file()},
    }
    if extra:
        doc.update(extra)
    tmp = root / "run_manifest.json.part"
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, root / "run_manifest.json")


def _listing(stage: Path) -> list[str]:
    return sorted(str(p.relative_to(stage)) for p in stage.rglob("*") if p.is_file())


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> dict:
    cfg = load_cfg(args)
    root = out_root(args)
    with Stage(root) as stage:
        sessions = synth.generate(pipeline.synth_spec(cfg))
        dataio.export_sessions(sessions, stage / "recordings")
        files = _listing(stage)
    print(f"wrote {len(sessions)} recordings to {root / 'recordings'}")
    return {"cfg": cfg, "files": files}


def cmd_import(args) -> dict:
    src = Path(args.manifest)
    manifest = dataio.DatasetManifest.load(src)
    sessions = manifest.validate(src.parent)
    root = out_root(args)
    with Stage(root) as stage:
        dataio.export_sessions(sessions, stage / "recordings", manifest.excluded_subjects)
        files = _listing(stage)
    print(f"imported {len(sessions)} recordings from {src}")
    return {"cfg": None, "files": files}


def cmd_preprocess(args) -> dict:
    cfg = load_cfg(args)
    src = Path(args.recordings) / "manifest.json"
    manifest = dataio.DatasetManifest.load(src)
    sessions = manifest.validate(src.parent)
    if any(s.sample_rate_hz != cfg["sample_rate_hz"] for s in sessions):
        raise UsageError("recordings' sample rate differs from the configuration")
    windows = pipeline.preprocess_all(sessions, cfg, pipeline.onset_index(cfg))
    root = out_root(args)
    with Stage(root) as stage:
        dataio.export_dataset(windows, stage / "windows", dataio.data_hash(cfg))
        files = _listing(stage)
    print(f"wrote {len(windows)} windows to {root / 'windows'}")
    return {"cfg": cfg, "files": files}


def _plan(args, cfg) -> augment.AugmentationPlan:
    if args.rates and args.strategy:
        raise UsageError("--rates and --strategy are mutually exclusive")
    if args.masks is not None:
        cfg = {**cfg, "masks_per_rate": args.masks}
    if args.rates:
        rates = parse_rates(args.rates)
        return augment.AugmentationPlan(tuple(rates), masks_per_rate=cfg["masks_per_rate"],
                                        combine_all_rates=len(rates) > 1, master_seed=cfg["seed"],
                                        grid_policy=cfg["grid_policy"])
    return pipeline.strategy_plan(args.strategy or "none", cfg)


def cmd_augment(args) -> dict:
    cfg = load_cfg(args)
    plan = _plan(args, cfg)
    root = out_root(args)
    with Stage(root) as stage:
        augment.save_masks(plan.masks(), stage / "masks.json")
        n_train = None
        if args.windows:
            base, _ = split_by_repetition(dataio.import_dataset(args.windows, dataio.data_hash(cfg)),
                                          cfg["train_repetitions"], cfg["test_repetitions"])
            n_train = len(augment.build_augmented_set(base, plan))
        (stage / "plan.json").write_text(json.dumps({
            "label": plan.label, "rates": list(plan.rates), "masks_per_rate": plan.masks_per_rate,
            "combined": plan.combine_all_rates, "augmented_size": n_train}, indent=2) + "\n")
        files = _listing(stage)
    print(f"{plan.label}: {len(plan.masks())} masks" + (f", {n_train} training windows" if n_train else ""))
    return {"cfg": cfg, "files": files}


def cmd_train(args) -> dict:
    cfg = load_cfg(args)
    overrides = {k: v for k, v in (("epochs", args.epochs), ("steps_per_epoch", args.steps)) if v is not None}
    cfg = dataio.validate_config({**cfg, **overrides})
    plan = _plan(args, cfg)
    windows = dataio.import_dataset(args.windows, None if args.any_config else dataio.data_hash(cfg))
    base, _ = split_by_repetition(windows, cfg["train_repetitions"], cfg["test_repetitions"])
    data = augment.build_augmented_set(base, plan)
    model = pipeline.build_model(pipeline.model_spec(cfg), seed=cfg["seed"])
    fit = train(model, data, pipeline.train_config(cfg))
    root = out_root(args)
    with Stage(root) as stage:
        (stage / "model.ckpt").write_bytes(fit.checkpoint)
        write_history_csv(fit.history, stage / "history.csv")
        augment.save_masks(plan.masks(), stage / "masks.json")
        (stage / "strategy.json").write_text(json.dumps({"label": plan.label}) + "\n")
        files = _listing(stage)
    print(f"trained {plan.label} for {cfg['epochs']} epochs on {len(data)} windows")
    return {"cfg": cfg, "files": files}


def cmd_eval(args) -> dict:
    cfg = load_cfg(args)
    rates = parse_rates(args.rates) if args.rates else sorted(cfg["eval_rates"])
    n_masks = args.masks if args.masks is not None else cfg["n_test_masks"]
    ckpt = Path(args.checkpoint)
    model = checkpoint.load(ckpt)
    train_masks = augment.load_masks(args.training_masks) if args.training_masks else []
    label = args.label
    if label is None:
        meta = ckpt.parent / "strategy.json"
        label = json.loads(meta.read_text())["label"] if meta.exists() else ckpt.stem
    windows = dataio.import_dataset(args.windows, None if args.any_config else dataio.data_hash(cfg))
    _, test = split_by_repetition(windows, cfg["train_repetitions"], cfg["test_repetitions"])
    from .evaluation import evaluate_under_dropout
    dists = [evaluate_under_dropout(model, test, r, n_masks, cfg["seed"], train_masks, ckpt.stem, label)
             for r in sorted(rates)]
    cells = {}
    clean = [d for d in dists if d.rate == 0]
    if clean:
        row = significance_row(clean[0], [d for d in dists if d.rate > 0], cfg["family_size"])
        cells = {(label, r): c for r, c in row.items()}
    root = out_root(args)
    with Stage(root) as stage:
        render_report(dists, cells, stage / "report",
                      {"config_hash": dataio.config_hash(cfg), "checkpoint": ckpt.name, "n_masks": n_masks})
        files = _listing(stage)
    print((root / "report" / "accuracy_matrix.txt").read_text(), end="")
    return {"cfg": cfg, "files": files}


def cmd_report(args) -> dict:
    dists: list[AccuracyDistribution] = []
    cells: dict = {}
    for path in args.summaries:
        doc = json.loads(Path(path).read_text())
        for d in doc["distributions"]:
            dists.append(AccuracyDistribution(d["model_id"], d["strategy"], d["rate"], d["values"],
                                              d["units"], d["mask_seeds"]))
        for c in doc["significance"]:
            cells[(c["strategy"], c["rate"])] = SignificanceCell(c["p_raw"], c["p_corrected"], c["marker"])
    root = out_root(args)
    with Stage(root) as stage:
        render_report(dists, cells, stage / "report", {"sources": [str(p) for p in args.summaries]})
        files = _listing(stage)
    print((root / "report" / "accuracy_matrix.txt").read_text(), end="")
    return {"cfg": None, "files": files}


def cmd_run(args) -> dict:
    cfg = load_cfg(args)
    root = out_root(args)
    with Stage(root) as stage:
        result = pipeline.run_experiment(cfg, stage)
        files = _listing(stage)
    print((root / "report" / "accuracy_matrix.txt").read_text(), end="")
    print((root / "report" / "significance_matrix.txt").read_text(), end="")
    return {"cfg": cfg, "files": files, "extra": {"strategies": list(result.checkpoints)}}


def cmd_selftest(args) -> dict:
    from . import selftest
    results = selftest.run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise SelftestFailure("selftest failed")
    return {"cfg": None, "files": [], "no_manifest": True}


class SelftestFailure(DropcapsError):
    pass


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON configuration (defaults to the desk-scale config)")
    common.add_argument("--seed", type=int, help="override the configuration seed")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dropcaps", description="Channel-dropout robustness experiments.")
    p.add_argument("--version", action="version", version=f"dropcaps {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate synthetic recordings")
    s = sub.add_parser("import", parents=[common], help="validate and ingest canonical recordings")
    s.add_argument("manifest", help="path to a dataset manifest.json")
    s = sub.add_parser("preprocess", parents=[common], help="filter, normalize and window recordings")
    s.add_argument("--recordings", required=True, help="directory holding manifest.json")

    def plan_flags(s):
        s.add_argument("--rates", help="augmentation rates in percent, e.g. 50 or 10,25,50,75")
        s.add_argument("--strategy", help="none, combined or a percentage")
        s.add_argument("--masks", type=int, help="masks per augmentation rate")

    s = sub.add_parser("augment", parents=[common], help="draw training masks for a plan")
    plan_flags(s)
    s.add_argument("--windows", help="window dataset, to report the augmented size")
    s = sub.add_parser("train", parents=[common], help="train a model on augmented windows")
    plan_flags(s)
    s.add_argument("--windows", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--steps", type=int, help="steps per epoch (0 = one pass)")
    s.add_argument("--any-config", action="store_true", help="skip the dataset config-hash check")
    s = sub.add_parser("eval", parents=[common], help="masked evaluation and report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--windows", required=True)
    s.add_argument("--rates", help="test dropout rates in percent (default from config)")
    s.add_argument("--masks", type=int, help="test masks per rate")
    s.add_argument("--training-masks", help="masks.json written by train; test masks must avoid them")
    s.add_argument("--label", help="strategy label for the report row")
    s.add_argument("--any-config", action="store_true", help="skip the dataset config-hash check")
    s = sub.add_parser("report", parents=[common], help="merge summary.json files into one report")
    s.add_argument("summaries", nargs="+")
    sub.add_parser("run", parents=[common], help="full experiment from synthesis to report")
    sub.add_parser("selftest", parents=[common], help="gradient checks and oracle suites")
    return p


COMMANDS = {"synth": cmd_synth, "import": cmd_import, "preprocess": cmd_preprocess,
            "augment": cmd_augment, "train": cmd_train, "eval": cmd_eval, "report": cmd_report,
            "run": cmd_run, "selftest": cmd_selftest}


def _diagnostic(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        outcome = COMMANDS[args.command](args)
        if not outcome.get("no_manifest"):
            write_manifest(out_root(args), args, outcome["cfg"], outcome["files"], outcome.get("extra"))
    except UsageError as exc:
        _diagnostic("usage", exc)
        return 2
    except (DropcapsError, OSError, ValueError, ArithmeticError) as exc:
        _diagnostic("domain", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
