"""MAE scoring, per-fold aggregation and ablation-table reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffengine import DimensionError
from .graphcore import ConnectivityMatrix, LongitudinalSample, stack

log = logging.getLogger(__name__)

FORMATS = ("table", "csv", "json")
VARIANT_LABELS = {
    "no_kl": "Base cascade (w/o KL)",
    "no_kl_plus_topology": "Base cascade (w/o KL) + topology",
    "full": "Full cascade (KL)",
}


class ReportError(ValueError):
    pass


def _w(g) -> np.ndarray:
    return g.weights if isinstance(g, ConnectivityMatrix) else np.asarray(g, dtype=np.float64)


def mae(predicted, target) -> float:
    """Mean absolute difference over all n_r x n_r entries."""
    p, t = _w(predicted), _w(target)
    if p.shape != t.shape:
        raise DimensionError(f"mae: shapes differ, {list(p.shape)} vs {list(t.shape)}")
    return float(np.abs(p - t).mean())


def evaluate_fold(models, test_samples: Sequence[LongitudinalSample], m: int) -> list[float]:
    """Mean test MAE at ``t_1..t_m`` when rolling ``models`` from ground-truth ``t_0``.

    ``models`` is anything with ``predict(x0) -> list of [B, n, n] arrays``
    (a trained :class:`~evograph.training.Cascade`) or a sequence of callables
    mapping a ``[B, n, n]`` array to the next one.
    """
    if not test_samples:
        raise ReportError("empty test set")
    for s in test_samples:
        if s.timepoints < m + 1:
            raise ReportError(f"subject {s.subject_id} has {s.timepoints} timepoints, need {m + 1}")
    x0 = stack([s.graphs[0] for s in test_samples])
    if hasattr(models, "predict"):
        preds = models.predict(x0)
    else:
        preds, prev = [], x0
        for step in models:
            prev = np.asarray(step(prev), dtype=np.float64)
            preds.append(prev)
    if len(preds) < m:
        raise ReportError(f"models predict {len(preds)} timepoints, need {m}")
    out = []
    for i in range(m):
        target = stack([s.graphs[i + 1] for s in test_samples])
        out.append(float(np.mean([mae(p, t) for p, t in zip(preds[i], target)])))
    return out


@dataclass
class EvalReport:
    """Per-fold MAE rows ``(variant, timepoint, fold, mae)`` plus provenance."""

    rows: list[tuple[str, int, int, float]] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0

    def add(self, variant: str, fold: int, maes: Sequence[float]) -> None:
        for i, value in enumerate(maes, start=1):
            self.rows.append((variant, i, fold, float(value)))

    @property
    def variants(self) -> list[str]:
        seen = []
        for v, *_ in self.rows:
            if v not in seen:
                seen.append(v)
        return seen

    @property
    def timepoints(self) -> list[int]:
        return sorted({t for _, t, _, _ in self.rows})

    def aggregates(self) -> dict[tuple[str, int], dict[str, float]]:
        """Mean, population std and best (minimum) fold MAE per (variant, timepoint)."""
        groups: dict[tuple[str, int], list[float]] = {}
        for v, t, _, value in self.rows:
            groups.setdefault((v, t), []).append(value)
        out = {}
        for key, values in groups.items():
            arr = np.array(values)
            out[key] = {"mean": float(arr.mean()), "std": float(arr.std()), "best": float(arr.min()),
                        "folds": len(values)}
        return out


def aggregates_from_rows(rows) -> dict[tuple[str, int], dict[str, float]]:
    return EvalReport([(v, int(t), int(f), float(x)) for v, t, f, x in rows]).aggregates()


def _fmt(x: float) -> str:
    return repr(float(x))


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "timepoint", "fold", "mae"])
    for v, t, f, x in report.rows:
        writer.writerow([v, t, f, _fmt(x)])
    return buf.getvalue()


def read_report_csv(text: str) -> list[tuple[str, int, int, float]]:
    reader = csv.DictReader(io.StringIO(text))
    return [(r["variant"], int(r["timepoint"]), int(r["fold"]), float(r["mae"])) for r in reader]


def report_json(report: EvalReport) -> str:
    agg = report.aggregates()
    payload = {
        "config_hash": report.config_hash,
        "seed": report.seed,
        "aggregates": [
            {"variant": v, "timepoint": t, **agg[(v, t)]} for v in report.variants for t in report.timepoints
            if (v, t) in agg
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def report_table(report: EvalReport) -> str:
    """Plain-text table: one row per variant, mean +- std and best MAE per timepoint."""
    tps = report.timepoints or [1, 2]
    header = ["Method"]
    for t in tps:
        header += [f"t{t} Mean MAE ± std", f"t{t} Best MAE"]
    agg = report.aggregates()
    lines = []
    for v in report.variants:
        row = [VARIANT_LABELS.get(v, v)]
        for t in tps:
            a = agg.get((v, t))
            row += [f"{a['mean']:.5f} ± {a['std']:.5f}", f"{a['best']:.5f}"] if a else ["-", "-"]
        lines.append(row)
    widths = [max(len(r[i]) for r in [header, *lines]) for i in range(len(header))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    out = [fmt(header), "-+-".join("-" * w for w in widths)]
    out += [fmt(r) for r in lines]
    return "\n".join(out) + "\n"


def emit_report(report: EvalReport, fmt: str) -> str:
    if fmt not in FORMATS:
        raise ReportError(f"unknown report format {fmt!r}; choose from {', '.join(FORMATS)}")
    if not report.rows:
        log.warning("report has no variants; emitting header only")
    return {"table": report_table, "csv": report_csv, "json": report_json}[fmt](report)
