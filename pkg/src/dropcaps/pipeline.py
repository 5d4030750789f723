"""End-to-end experiment: synthesize, preprocess, split, augment, train, evaluate, report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import checkpoint, dataio, synth
from .augment import AugmentationPlan, build_augmented_set
from .dsp import PreprocessConfig, RecordingSession, WindowSample, preprocess_session, samples_for
from .errors import ConfigurationError
from .evaluation import AccuracyDistribution, evaluate_under_dropout, significance_row
from .models import Model, build_model, desk_capsnet_spec, desk_cnn_spec, spec_from_dict
from .report import render_report
from .trainer import TrainConfig, TrainResult, split_by_repetition, train, write_history_csv

log = logging.getLogger(__name__)


def synth_spec(cfg: dict) -> synth.SynthSpec:
    return synth.SynthSpec(n_classes=cfg["n_classes"], n_subjects=cfg["n_subjects"],
                           sample_rate_hz=cfg["sample_rate_hz"], duration_s=cfg["duration_s"],
                           onset_s=cfg["onset_s"], noise_level=cfg["noise_level"],
                           width=cfg["spatial_width"], seed=cfg["seed"])


def preprocess_config(cfg: dict) -> PreprocessConfig:
    return PreprocessConfig(filter_order=cfg["filter_order"], low_hz=cfg["low_hz"], high_hz=cfg["high_hz"],
                            transient_s=cfg["transient_s"], window_s=cfg["window_s"], step_s=cfg["step_s"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       learning_rate=cfg["learning_rate"], beta1=cfg["beta1"], beta2=cfg["beta2"],
                       seed=cfg["seed"], steps_per_epoch=cfg["steps_per_epoch"],
                       train_repetitions=cfg["train_repetitions"], test_repetitions=cfg["test_repetitions"])


def model_spec(cfg: dict):
    window = samples_for(cfg["window_s"], cfg["sample_rate_hz"])
    if cfg["model"] == "capsnet":
        return desk_capsnet_spec(cfg["n_classes"], window, cfg["model_width"])
    return desk_cnn_spec(cfg["n_classes"], window)


def strategy_plan(name: str, cfg: dict) -> AugmentationPlan:
    """``none``, ``combined`` or an integer percentage such as ``50``."""
    common = dict(masks_per_rate=cfg["masks_per_rate"], master_seed=cfg["seed"],
                  grid_policy=cfg["grid_policy"])
    if name == "none":
        return AugmentationPlan((0.0,), **common)
    if name == "combined":
        return AugmentationPlan(tuple(cfg["augment_rates"]), combine_all_rates=True, **common)
    try:
        pct = int(name)
    except ValueError:
        raise ConfigurationError(f"unknown augmentation strategy {name!r}") from None
    return AugmentationPlan((pct / 100.0,), **common)


def onset_index(cfg: dict) -> int:
    return samples_for(cfg["onset_s"], cfg["sample_rate_hz"])


def preprocess_all(sessions: Sequence[RecordingSession], cfg: dict, onset: int = 0) -> list[WindowSample]:
    pcfg = preprocess_config(cfg)
    return [w for s in sessions for w in preprocess_session(s, pcfg, onset_index=onset)]


def evaluate_model(model: Model, test: Sequence[WindowSample], plan: AugmentationPlan, cfg: dict,
                   model_id: str) -> tuple[list[AccuracyDistribution], dict]:
    rates = sorted(cfg["eval_rates"])
    training_masks = plan.masks()
    dists = [evaluate_under_dropout(model, test, r, cfg["n_test_masks"], cfg["seed"], training_masks,
                                    model_id, plan.label) for r in rates]
    clean = [d for d in dists if d.rate == 0]
    cells = {}
    if clean:
        masked = [d for d in dists if d.rate > 0]
        row = significance_row(clean[0], masked, cfg["family_size"])
        cells = {(plan.label, r): c for r, c in row.items()}
    return dists, cells


@dataclass
class ExperimentResult:
    distributions: list = field(default_factory=list)
    cells: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    report_files: dict = field(default_factory=dict)

    def means(self) -> dict[str, dict[float, float]]:
        out: dict[str, dict[float, float]] = {}
        for d in self.distributions:
            out.setdefault(d.strategy, {})[d.rate] = d.mean
        return out


def run_experiment(cfg: dict, out_dir) -> ExperimentResult:
    """Full desk-scale experiment; identical ``cfg`` gives bitwise-identical outputs."""
    cfg = dataio.validate_config(dict(cfg))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = dataio.config_hash(cfg)
    sessions = synth.generate(synth_spec(cfg))
    windows = preprocess_all(sessions, cfg, onset_index(cfg))
    train_set, test_set = split_by_repetition(windows, cfg["train_repetitions"], cfg["test_repetitions"])
    log.info("%d training and %d test windows", len(train_set), len(test_set))
    result = ExperimentResult()
    tcfg = train_config(cfg)
    for name in cfg["strategies"]:
        plan = strategy_plan(name, cfg)
        data = build_augmented_set(train_set, plan)
        model = build_model(model_spec(cfg), seed=cfg["seed"])
        log.info("training %s on %d windows", plan.label, len(data))
        fit: TrainResult = train(model, data, tcfg)
        ckpt = out / "checkpoints" / f"{name}.ckpt"
        ckpt.parent.mkdir(exist_ok=True)
        ckpt.write_bytes(fit.checkpoint)
        write_history_csv(fit.history, out / "checkpoints" / f"{name}_history.csv")
        result.checkpoints[name] = fit.checkpoint
        result.histories[name] = fit.history
        dists, cells = evaluate_model(model, test_set, plan, cfg, name)
        result.distributions.extend(dists)
        result.cells.update(cells)
    meta = {"config_hash": chash, "config": cfg, "statistical_unit": "subject x mask (0%: subject)",
            "family_size": cfg["family_size"],
            "test_masks": "purpose=test, master seed = config seed; disjoint from training masks"}
    result.report_files = render_report(result.distributions, result.cells, out / "report", meta)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return result


def checkpoint_model(blob: bytes) -> Model:
    spec_doc, state = checkpoint.loads(blob)
    model = build_model(spec_from_dict(spec_doc))
    model.load_state_dict(state)
    return model


def with_overrides(cfg: dict, **overrides) -> dict:
    return dataio.validate_config({**cfg, **overrides})
