"""Confusion counts, micro-F1 and run reports."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .data import Label
from .errors import DataError

# Dev-set micro-F1 reported for the original MediaEval 2020 submissions.
REFERENCE_MICRO_F1 = {
    "run1_multimodal": 0.859,
    "run2_text": 0.853,
    "run3_scene": 0.816,
    "run4_fused": 0.805,
}
REFERENCE_OBJECT_ONLY_ABLATION = 0.804

FEATURE_TYPES = {
    "run1": "Textual + Visual",
    "run2": "Textual",
    "run3": "Visual",
    "run4": "Visual",
}


class UndefinedMetricWarning(UserWarning):
    pass


def feature_type(run_id: str) -> str:
    return FEATURE_TYPES.get(run_id.split("_")[0], "")


@dataclass
class ConfusionCounts:
    tp: dict[str, int]
    fp: dict[str, int]
    fn: dict[str, int]
    n_total: int

    def tn(self, label: str) -> int:
        return self.n_total - self.tp[label] - self.fp[label] - self.fn[label]

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionCounts":
        return cls(dict(d["tp"]), dict(d["fp"]), dict(d["fn"]), int(d["n_total"]))


def _label_value(x) -> str:
    try:
        return Label(x).value
    except ValueError:
        raise DataError(f"unknown label {x!r}")


def confusion(preds: Sequence, golds: Sequence) -> ConfusionCounts:
    if len(preds) != len(golds):
        raise DataError(f"length mismatch: {len(preds)} predictions vs {len(golds)} gold labels")
    classes = [lab.value for lab in Label]
    tp = dict.fromkeys(classes, 0)
    fp = dict.fromkeys(classes, 0)
    fn = dict.fromkeys(classes, 0)
    for p, g in zip(preds, golds):
        p, g = _label_value(p), _label_value(g)
        if p == g:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    return ConfusionCounts(tp, fp, fn, len(preds))


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def _f1(p: Optional[float], r: Optional[float]) -> Optional[float]:
    if p is None or r is None or p + r == 0:
        return None
    return 2 * p * r / (p + r)


def micro_f1(counts: ConfusionCounts) -> float:
    """Pooled-count F1; returns 0.0 and warns when a denominator is zero."""
    tp = sum(counts.tp.values())
    precision = _ratio(tp, tp + sum(counts.fp.values()))
    recall = _ratio(tp, tp + sum(counts.fn.values()))
    f1 = _f1(precision, recall)
    if f1 is None:
        if precision is None or recall is None:
            warnings.warn("micro-F1 undefined (no predictions); reporting 0.0", UndefinedMetricWarning, stacklevel=2)
        return 0.0
    return f1


def per_class_scores(counts: ConfusionCounts) -> dict[str, dict[str, float]]:
    out = {}
    for c in counts.tp:
        p = _ratio(counts.tp[c], counts.tp[c] + counts.fp[c])
        r = _ratio(counts.tp[c], counts.tp[c] + counts.fn[c])
        f = _f1(p, r)
        out[c] = {"precision": p or 0.0, "recall": r or 0.0, "f1": f or 0.0}
    return out


@dataclass
class EvaluationReport:
    run_id: str
    micro_f1: float
    per_class: dict[str, dict[str, float]]
    counts: ConfusionCounts
    n_evaluated: int
    n_skipped: int
    feature_type: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def positive_class_f1(self) -> float:
        return self.per_class.get(Label.RELEVANT.value, {}).get("f1", 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positive_class_f1"] = self.positive_class_f1
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        d = dict(d)
        d.pop("positive_class_f1", None)
        d["counts"] = ConfusionCounts.from_dict(d["counts"])
        return cls(**d)


def evaluate(run_id: str, preds: Sequence, golds: Sequence) -> EvaluationReport:
    """Score predictions.

    Pairs lacking a gold label or a prediction (e.g. an image model on a tweet
    without an image) are counted in ``n_skipped``, never imputed.
    """
    if len(preds) != len(golds):
        raise DataError(f"length mismatch: {len(preds)} predictions vs {len(golds)} gold labels")
    kept = [(p, g) for p, g in zip(preds, golds) if g is not None and p is not None]
    counts = confusion([p for p, _ in kept], [g for _, g in kept])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        score = micro_f1(counts)
    return EvaluationReport(
        run_id=run_id,
        micro_f1=score,
        per_class=per_class_scores(counts),
        counts=counts,
        n_evaluated=len(kept),
        n_skipped=len(preds) - len(kept),
        feature_type=feature_type(run_id),
        warnings=[str(w.message) for w in caught],
    )


@dataclass(frozen=True)
class ComparisonTable:
    text: str
    csv: str


def compare_runs(reports: Sequence[EvaluationReport]) -> ComparisonTable:
    if not reports:
        raise ValueError("compare_runs needs at least one report")
    ids = [r.run_id for r in reports]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise DataError(f"duplicate run_id(s): {', '.join(dupes)}")
    rows = [
        (r.run_id, r.feature_type or feature_type(r.run_id), f"{r.micro_f1:.3f}")
        for r in sorted(reports, key=lambda r: r.run_id)
    ]
    header = ("Run", "Type of Features", "Micro F1-Score")
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(3)]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header, *rows]]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "feature_type", "micro_f1"])
    w.writerows(rows)
    return ComparisonTable("\n".join(lines) + "\n", buf.getvalue())


def reference_reports() -> list[EvaluationReport]:
    """Placeholder reports carrying the published dev-set scores, for table rendering only."""
    empty = ConfusionCounts({}, {}, {}, 0)
    return [
        EvaluationReport(run_id, score, {}, empty, 0, 0, feature_type(run_id))
        for run_id, score in REFERENCE_MICRO_F1.items()
    ]
