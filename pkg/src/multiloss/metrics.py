"""Uncertainty measures, calibration metrics and the correct/incorrect split.

Arrays of per-head predictions have shape (..., M, C): M rows on the class
simplex per input. All functions vectorize over leading axes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CSV_COLUMNS = (
    "method", "accuracy", "ece", "brier",
    "eq2_true", "eq2_false", "eq3_true", "eq3_false", "eq4_true", "eq4_false",
)
MEASURES = ("eq2", "eq3", "eq4")
EQ4_MODES = ("population", "raw_sum")
NA = "NA"


def _per_head(per_head) -> np.ndarray:
    arr = np.asarray(per_head, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-2] == 0 or arr.shape[-1] == 0:
        raise ValueError(f"expected a non-empty (..., M, C) array, got shape {arr.shape}")
    return arr


def avg_prediction(per_head) -> np.ndarray:
    """Arithmetic mean of the M head rows."""
    return _per_head(per_head).mean(axis=-2)


def normalized_entropy(p) -> np.ndarray:
    """-sum p log p / log C along the last axis, with 0 log 0 = 0, clipped to [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    c = p.shape[-1]
    if c < 2:
        raise ValueError("normalized entropy needs at least 2 classes")
    safe = np.where(p > 0, p, 1.0)
    h = -(np.where(p > 0, p * np.log(safe), 0.0)).sum(axis=-1) / math.log(c)
    return np.clip(h, 0.0, 1.0)


def entropy_of_average(per_head) -> np.ndarray:
    return normalized_entropy(avg_prediction(per_head))


def mean_entropy(per_head) -> np.ndarray:
    return normalized_entropy(_per_head(per_head)).mean(axis=-1)


def class_variance(per_head, mode: str = "population") -> np.ndarray:
    """Spread of the predicted class's probability across heads.

    The predicted class is the argmax of the averaged row. ``population``
    divides the summed squared deviations by M; ``raw_sum`` does not.
    """
    if mode not in EQ4_MODES:
        raise ValueError(f"eq4 mode must be one of {EQ4_MODES}, got {mode!r}")
    arr = _per_head(per_head)
    j = arr.mean(axis=-2).argmax(axis=-1)
    col = np.take_along_axis(arr, j[..., None, None], axis=-1)[..., 0]
    # shift by the first head's value so identical rows give exactly zero
    d = col - col[..., :1]
    dev = ((d - d.mean(axis=-1, keepdims=True)) ** 2).sum(axis=-1)
    return dev / arr.shape[-2] if mode == "population" else dev


def brier(pred, true_class) -> np.ndarray:
    """(1/C) sum_i (t_i - p_i)^2 per sample; average it for the dataset score."""
    pred = np.asarray(pred, dtype=np.float64)
    true_class = np.asarray(true_class)
    c = pred.shape[-1]
    if np.any(true_class < 0) or np.any(true_class >= c):
        raise ValueError(f"true class out of range [0, {c})")
    t = np.zeros_like(pred)
    np.put_along_axis(t, true_class[..., None].astype(np.int64), 1.0, axis=-1)
    return ((t - pred) ** 2).mean(axis=-1)


def ece_bins(confidences, correct, bins: int = 15) -> List[dict]:
    """Per-bin count, mean confidence and accuracy over equal-width, right-closed bins."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=bool).reshape(-1)
    if conf.size == 0:
        raise ValueError("ece of an empty set")
    if conf.shape != hit.shape:
        raise ValueError(f"confidences {conf.shape} and correct {hit.shape} differ in length")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    # bin b covers (edges[b], edges[b+1]]; a confidence of exactly 0 joins bin 0
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    out = []
    for b in range(bins):
        sel = idx == b
        n = int(sel.sum())
        out.append({
            "lower": float(edges[b]),
            "upper": float(edges[b + 1]),
            "count": n,
            "confidence": float(conf[sel].mean()) if n else None,
            "accuracy": float(hit[sel].mean()) if n else None,
        })
    return out


def ece(confidences, correct, bins: int = 15) -> float:
    table = ece_bins(confidences, correct, bins)
    total = sum(b["count"] for b in table)
    return float(sum(b["count"] / total * abs(b["accuracy"] - b["confidence"]) for b in table if b["count"]))


def accuracy(pred_class, labels) -> float:
    pred_class = np.asarray(pred_class)
    labels = np.asarray(labels)
    if pred_class.size == 0:
        raise ValueError("accuracy of an empty set")
    return float((pred_class == labels).mean())


def _mean_or_na(values: Optional[np.ndarray], mask: np.ndarray) -> Optional[float]:
    if values is None or not mask.any():
        return None
    return float(values[mask].mean())


def separation_analysis(correct, eq2, eq3=None, eq4=None) -> Dict[str, Tuple[Optional[float], Optional[float]]]:
    """Mean of each measure over correct and over incorrect predictions.

    A side with no samples, or a measure that is undefined for the model
    (``None``), is reported as ``None`` (NA).
    """
    correct = np.asarray(correct, dtype=bool)
    out = {}
    for name, values in zip(MEASURES, (eq2, eq3, eq4)):
        v = None if values is None else np.asarray(values, dtype=np.float64)
        out[name] = (_mean_or_na(v, correct), _mean_or_na(v, ~correct))
    return out


@dataclass
class EvaluationReport:
    accuracy: float
    ece: float
    brier: float
    n_samples: int
    separation: Dict[str, Tuple[Optional[float], Optional[float]]]
    records: List[dict] = field(default_factory=list)
    ece_bins: int = 15
    eq4_mode: str = "population"

    @property
    def n_correct(self) -> int:
        return sum(1 for r in self.records if r["pred"] == r["true"])

    def to_dict(self, include_records: bool = True) -> dict:
        d = {
            "accuracy": self.accuracy,
            "ece": self.ece,
            "brier": self.brier,
            "n_samples": self.n_samples,
            "ece_bins": self.ece_bins,
            "eq4_mode": self.eq4_mode,
            "separation": {k: {"true": t, "false": f} for k, (t, f) in self.separation.items()},
        }
        if include_records:
            d["records"] = self.records
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        sep = {k: (v["true"], v["false"]) for k, v in d["separation"].items()}
        return cls(d["accuracy"], d["ece"], d["brier"], d["n_samples"], sep,
                   d.get("records", []), d.get("ece_bins", 15), d.get("eq4_mode", "population"))

    def to_json(self, include_records: bool = True) -> str:
        return json.dumps(self.to_dict(include_records), indent=2, sort_keys=True) + "\n"

    def csv_row(self, method: str) -> Dict[str, object]:
        row: Dict[str, object] = {"method": method, "accuracy": self.accuracy, "ece": self.ece, "brier": self.brier}
        for name in MEASURES:
            t, f = self.separation[name]
            row[f"{name}_true"] = t
            row[f"{name}_false"] = f
        return row


def _fmt(value) -> str:
    if value is None:
        return NA
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows: Sequence[Dict[str, object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def parse_csv(text: str) -> List[Dict[str, object]]:
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row: Dict[str, object] = {"method": raw["method"]}
        for col in CSV_COLUMNS[1:]:
            row[col] = None if raw[col] == NA else float(raw[col])
        rows.append(row)
    return rows


def evaluate(
    per_head,
    labels,
    bins: int = 15,
    eq4_mode: str = "population",
    single_model: bool = False,
) -> EvaluationReport:
    """Full report for a batch of prediction sets (N, M, C) against labels (N,).

    ``single_model`` marks predictors that produce one vector by construction
    (weight averaging); their mean-entropy and class-variance measures are NA.
    """
    arr = _per_head(per_head)
    if arr.ndim != 3:
        raise ValueError(f"expected (N, M, C) predictions, got shape {arr.shape}")
    labels = np.asarray(labels).astype(np.int64)
    if labels.shape != (arr.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {arr.shape[0]} predictions")
    avg = arr.mean(axis=-2)
    pred = avg.argmax(axis=-1)
    conf = avg.max(axis=-1)
    correct = pred == labels
    eq2 = entropy_of_average(arr)
    eq3 = None if single_model else mean_entropy(arr)
    eq4 = None if single_model else class_variance(arr, eq4_mode)
    records = [
        {
            "pred": int(pred[i]),
            "true": int(labels[i]),
            "confidence": float(conf[i]),
            "eq2": float(eq2[i]),
            "eq3": None if eq3 is None else float(eq3[i]),
            "eq4": None if eq4 is None else float(eq4[i]),
        }
        for i in range(len(labels))
    ]
    return EvaluationReport(
        accuracy=accuracy(pred, labels),
        ece=ece(conf, correct, bins),
        brier=float(brier(avg, labels).mean()),
        n_samples=len(labels),
        separation=separation_analysis(correct, eq2, eq3, eq4),
        records=records,
        ece_bins=bins,
        eq4_mode=eq4_mode,
    )
