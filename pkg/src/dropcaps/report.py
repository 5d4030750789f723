"""Accuracy and significance matrices, raw distributions and plot data."""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError
from .evaluation import AccuracyDistribution
from .stats import SignificanceCell

ACCURACY_FMT = "%.3f"


def rate_label(rate: float) -> str:
    return f"{rate * 100:g}%"


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\r\n").writerows(rows)
    return buf.getvalue()


def _txt_text(rows) -> str:
    return "".join(" ".join(str(c) for c in row) + "\n" for row in rows)


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _layout(distributions: Sequence[AccuracyDistribution]):
    strategies = list(dict.fromkeys(d.strategy for d in distributions))
    rates = sorted({d.rate for d in distributions})
    by_key = {}
    for d in distributions:
        if (d.strategy, d.rate) in by_key:
            raise InputError(f"duplicate distribution for {d.strategy!r} at {rate_label(d.rate)}")
        by_key[(d.strategy, d.rate)] = d
    return strategies, rates, by_key


def accuracy_rows(distributions: Sequence[AccuracyDistribution]) -> list[list[str]]:
    strategies, rates, by_key = _layout(distributions)
    rows = [["strategy"] + [rate_label(r) for r in rates]]
    for s in strategies:
        rows.append([s] + [ACCURACY_FMT % by_key[(s, r)].mean if (s, r) in by_key else ""
                           for r in rates])
    return rows


def significance_rows(distributions: Sequence[AccuracyDistribution],
                      cells: Mapping[tuple[str, float], SignificanceCell]) -> list[list[str]]:
    strategies, rates, _ = _layout(distributions)
    rows = [["strategy"] + [rate_label(r) for r in rates]]
    for s in strategies:
        row = [s]
        for r in rates:
            cell = cells.get((s, r))
            row.append("-" if r == 0 else (cell.marker if cell else ""))
        rows.append(row)
    return rows


def render_report(distributions: Sequence[AccuracyDistribution],
                  cells: Mapping[tuple[str, float], SignificanceCell],
                  out_dir, metadata: Mapping | None = None) -> dict[str, Path]:
    """Write the report files into ``out_dir`` and return their paths by name.

    ``cells`` maps (strategy, rate) to the comparison against that strategy's 0% row.
    """
    distributions = list(distributions)
    if not distributions:
        raise InputError("no accuracy distributions to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    acc = accuracy_rows(distributions)
    sig = significance_rows(distributions, cells)

    raw = [["model_id", "strategy", "rate", "unit", "mask_seed", "accuracy"]]
    plot = [["rate", "strategy", "mean", "min", "q1", "median", "q3", "max", "n"]]
    for d in distributions:
        seeds = d.mask_seeds or ("",) * len(d.values)
        raw.extend([d.model_id, d.strategy, repr(d.rate), u, s, repr(v)]
                   for u, s, v in zip(d.units, seeds, d.values))
    _, rates, by_key = _layout(distributions)
    for r in rates:
        for s in dict.fromkeys(d.strategy for d in distributions):
            d = by_key.get((s, r))
            if d is None:
                continue
            q = np.quantile(d.values, [0.0, 0.25, 0.5, 0.75, 1.0])
            plot.append([repr(r), s, repr(d.mean)] + [repr(float(v)) for v in q] + [len(d.values)])

    summary = {
        "metadata": dict(metadata or {}),
        "accuracy_matrix": acc,
        "significance_matrix": sig,
        "significance": [{"strategy": s, "rate": r, "p_raw": c.p_raw,
                          "p_corrected": c.p_corrected, "marker": c.marker}
                         for (s, r), c in sorted(cells.items(), key=lambda kv: (str(kv[0][0]), kv[0][1]))],
        "distributions": [d.to_dict() for d in distributions],
    }
    files = {
        "accuracy_matrix.csv": _csv_text(acc),
        "accuracy_matrix.txt": _txt_text(acc),
        "significance_matrix.csv": _csv_text(sig),
        "significance_matrix.txt": _txt_text(sig),
        "distributions.csv": _csv_text(raw),
        "plot_data.csv": _csv_text(plot),
        "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
    }
    paths = {}
    for name, text in files.items():
        _write(out / name, text)
        paths[name] = out / name
    return paths
