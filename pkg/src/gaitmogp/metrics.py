"""Prediction-quality metrics: MAE, R², DTW and averaged DTW.

DTW is the classical dynamic-programming construction with
absolute-difference local cost, unconstrained (no band), and
boundary-anchored monotone warping paths. aDTW averages DTW over the
output channels of one subject; averaging over subjects is done by the
caller so both levels of the mean stay explicit.

All functions are pure and concurrent-safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .serialize import format_float

REPORT_SCHEMA = "metrics-v1"


def _as_sequence(name: str, values, min_length: int = 1) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size < min_length:
        raise ValidationError(f"{name} needs at least {min_length} values")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must be finite")
    return arr


def mae(pred, truth) -> float:
    """Mean absolute error between two equal-length sequences."""
    pred = _as_sequence("pred", pred)
    truth = _as_sequence("truth", truth)
    if pred.size != truth.size:
        raise ValidationError(
            f"length mismatch: pred has {pred.size}, truth has {truth.size}")
    return float(np.mean(np.abs(pred - truth)))


def r_squared(pred, truth) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot.

    SS_tot is centered on the truth mean; constant truth leaves R²
    undefined and raises.
    """
    pred = _as_sequence("pred", pred, min_length=2)
    truth = _as_sequence("truth", truth, min_length=2)
    if pred.size != truth.size:
        raise ValidationError(
            f"length mismatch: pred has {pred.size}, truth has {truth.size}")
    ss_tot = float(np.sum((truth - np.mean(truth)) ** 2))
    if ss_tot == 0.0:
        raise ValidationError("truth is constant; R² is undefined")
    ss_res = float(np.sum((pred - truth) ** 2))
    return 1.0 - ss_res / ss_tot


def dtw(a, b) -> float:
    """Dynamic Time Warping distance with |a_i - b_j| local cost."""
    a = _as_sequence("a", a)
    b = _as_sequence("b", b)
    n, m = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.empty((n, m))
    acc[0, :] = np.cumsum(cost[0, :])
    acc[:, 0] = np.cumsum(cost[:, 0])
    for i in range(1, n):
        row = acc[i]
        prev = acc[i - 1]
        for j in range(1, m):
            row[j] = cost[i, j] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[-1, -1])


def adtw(pred_set, truth_set) -> float:
    """Mean DTW over matched output channels."""
    pred_list = [np.asarray(p, dtype=float).ravel() for p in pred_set]
    truth_list = [np.asarray(t, dtype=float).ravel() for t in truth_set]
    if not pred_list or len(pred_list) != len(truth_list):
        raise ValidationError(
            f"channel mismatch: pred has {len(pred_list)}, "
            f"truth has {len(truth_list)}")
    return float(np.mean([dtw(p, t) for p, t in zip(pred_list, truth_list)]))


@dataclass
class MetricReport:
    """Aggregate and per-output MAE, R² and DTW for one prediction set.

    ``adtw`` is the mean of ``per_output_dtw``; aggregate MAE and R² are
    computed on the pooled (flattened) channels.
    """

    mae: float
    r_squared: float
    adtw: float
    per_output_mae: np.ndarray
    per_output_r_squared: np.ndarray
    per_output_dtw: np.ndarray
    output_names: tuple[str, ...]

    def __post_init__(self):
        self.per_output_mae = np.asarray(self.per_output_mae, dtype=float)
        self.per_output_r_squared = np.asarray(
            self.per_output_r_squared, dtype=float)
        self.per_output_dtw = np.asarray(self.per_output_dtw, dtype=float)
        self.output_names = tuple(self.output_names)
        n = len(self.output_names)
        if not (self.per_output_mae.shape == self.per_output_r_squared.shape
                == self.per_output_dtw.shape == (n,)):
            raise ValidationError("per-output arrays must match output_names")
        if self.mae < 0.0 or self.adtw < 0.0 or self.r_squared > 1.0 or \
                np.any(self.per_output_mae < 0.0) or \
                np.any(self.per_output_dtw < 0.0) or \
                np.any(self.per_output_r_squared > 1.0):
            raise ValidationError("metric invariants violated")

    def as_table(self) -> str:
        """Flat fixed-width text table, one row per output plus totals."""
        width = max(len("output"), *(len(n) for n in self.output_names))
        header = (f"{'output':<{width}}  {'mae':>14}  "
                  f"{'r_squared':>14}  {'dtw':>14}")
        lines = [header]
        for i, name in enumerate(self.output_names):
            lines.append(
                f"{name:<{width}}  {self.per_output_mae[i]:>14.6f}  "
                f"{self.per_output_r_squared[i]:>14.6f}  "
                f"{self.per_output_dtw[i]:>14.6f}")
        lines.append(
            f"{'(all)':<{width}}  {self.mae:>14.6f}  "
            f"{self.r_squared:>14.6f}  {self.adtw:>14.6f}")
        return "\n".join(lines) + "\n"

    def as_document(self) -> dict[str, str]:
        """Machine-readable key/value form."""
        doc = {
            "schema": REPORT_SCHEMA,
            "mae": format_float(self.mae),
            "r_squared": format_float(self.r_squared),
            "adtw": format_float(self.adtw),
        }
        for i, name in enumerate(self.output_names):
            doc[f"mae.{name}"] = format_float(float(self.per_output_mae[i]))
            doc[f"r_squared.{name}"] = format_float(
                float(self.per_output_r_squared[i]))
            doc[f"dtw.{name}"] = format_float(float(self.per_output_dtw[i]))
        return doc


def compute_report(pred_set, truth_set, output_names=None) -> MetricReport:
    """Build a MetricReport from (M, Q) prediction/truth arrays."""
    pred = np.atleast_2d(np.asarray(pred_set, dtype=float))
    truth = np.atleast_2d(np.asarray(truth_set, dtype=float))
    if pred.shape != truth.shape:
        raise ValidationError(
            f"shape mismatch: pred {pred.shape}, truth {truth.shape}")
    num_outputs = pred.shape[0]
    if output_names is None:
        output_names = tuple(f"output_{m}" for m in range(num_outputs))
    if len(output_names) != num_outputs:
        raise ValidationError("output_names must match the number of rows")
    per_mae = np.array([mae(pred[m], truth[m]) for m in range(num_outputs)])
    per_r2 = np.array([r_squared(pred[m], truth[m])
                       for m in range(num_outputs)])
    per_dtw = np.array([dtw(pred[m], truth[m]) for m in range(num_outputs)])
    return MetricReport(
        mae=mae(pred.ravel(), truth.ravel()),
        r_squared=r_squared(pred.ravel(), truth.ravel()),
        adtw=float(np.mean(per_dtw)),
        per_output_mae=per_mae,
        per_output_r_squared=per_r2,
        per_output_dtw=per_dtw,
        output_names=tuple(output_names),
    )
