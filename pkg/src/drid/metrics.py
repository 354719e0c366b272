"""Error metrics shared by the trainer, the CLI reports, and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAPE_TRUTH_FLOOR = 1e-3  # entries with |truth| below this are excluded from MAPE


def mae(pred, truth) -> float:
    p, t = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.mean(np.abs(p - t)))


def mape(pred, truth, floor: float = MAPE_TRUTH_FLOOR) -> float:
    """Mean absolute percentage error over entries with |truth| >= floor."""
    p, t = np.asarray(pred, float).ravel(), np.asarray(truth, float).ravel()
    keep = np.abs(t) >= floor
    if not keep.any():
        return float("nan")
    return float(np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep])) * 100.0)


@dataclass
class MetricsRecord:
    mae: float
    mape: float
    std: float | None = None

    def to_dict(self) -> dict:
        out = {"mae": self.mae, "mape": self.mape}
        if self.std is not None:
            out["std"] = self.std
        return out


def series_metrics(pred, truth) -> MetricsRecord:
    return MetricsRecord(mae=mae(pred, truth), mape=mape(pred, truth))
