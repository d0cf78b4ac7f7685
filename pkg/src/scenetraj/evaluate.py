"""Displacement metrics, the linear baseline and metric reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import TrajectoryWindow
from .grid import is_linear_segment

REPORT_FORMAT = "scenetraj-report"
REPORT_VERSION = 1
CSV_COLUMNS = ("config", "scene", "n_windows", "n_nonlinear", "ade", "fde", "nde")


def _check(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim < 2 or pred.shape[-1] != 2:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} must match as (..., T, 2)")
    return pred, truth


def ade(pred, truth) -> float | np.ndarray:
    """Mean Euclidean distance over the predicted steps; per window for batched input."""
    pred, truth = _check(pred, truth)
    return np.linalg.norm(pred - truth, axis=-1).mean(axis=-1)


def fde(pred, truth) -> float | np.ndarray:
    """Euclidean distance at the final predicted step."""
    pred, truth = _check(pred, truth)
    return np.linalg.norm(pred[..., -1, :] - truth[..., -1, :], axis=-1)


def nonlinear_mask(futures: np.ndarray, theta_lin: float) -> np.ndarray:
    """True where a ground-truth future fails the grid's linearity test."""
    return np.array([not is_linear_segment(f, theta_lin) for f in futures], dtype=bool)


def nde(pred, truth, theta_lin: float) -> float | None:
    """ADE over windows whose true future is non-linear; None if there are none."""
    pred, truth = _check(pred, truth)
    mask = nonlinear_mask(truth, theta_lin)
    if not mask.any():
        return None
    return float(ade(pred[mask], truth[mask]).mean())


def linear_baseline(obs: np.ndarray, t_pred: int = 12) -> np.ndarray:
    """Least-squares affine fit of x(t), y(t) over the observations, extrapolated."""
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 2 or obs.shape[1] != 2 or len(obs) < 1:
        raise ValueError("observations must be (T_obs, 2)")
    t = np.arange(len(obs), dtype=float)
    A = np.stack([np.ones_like(t), t], axis=1)
    coef, *_ = np.linalg.lstsq(A, obs, rcond=None)
    t_new = np.arange(len(obs), len(obs) + t_pred, dtype=float)
    return np.stack([np.ones_like(t_new), t_new], axis=1) @ coef


@dataclass
class SceneMetrics:
    n_windows: int
    n_nonlinear: int
    ade: float
    fde: float
    nde: float | None


@dataclass
class MetricsReport:
    config: str
    fingerprint: str
    theta_lin: float
    scenes: dict[str, SceneMetrics] = field(default_factory=dict)

    @property
    def n_windows(self) -> int:
        return sum(s.n_windows for s in self.scenes.values())

    @property
    def n_nonlinear(self) -> int:
        return sum(s.n_nonlinear for s in self.scenes.values())

    def _weighted(self, key: str, weight: str) -> float | None:
        rows = [(getattr(s, key), getattr(s, weight)) for s in self.scenes.values()
                if getattr(s, key) is not None and getattr(s, weight) > 0]
        if not rows:
            return None
        return float(sum(v * w for v, w in rows) / sum(w for _, w in rows))

    @property
    def ade(self) -> float | None:
        return self._weighted("ade", "n_windows")

    @property
    def fde(self) -> float | None:
        return self._weighted("fde", "n_windows")

    @property
    def nde(self) -> float | None:
        return self._weighted("nde", "n_nonlinear")

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT, "version": REPORT_VERSION,
            "config": self.config, "fingerprint": self.fingerprint, "theta_lin": self.theta_lin,
            "scenes": {k: asdict(v) for k, v in sorted(self.scenes.items())},
            "average": {"n_windows": self.n_windows, "n_nonlinear": self.n_nonlinear,
                        "ade": self.ade, "fde": self.fde, "nde": self.nde},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("format") != REPORT_FORMAT or d.get("version") != REPORT_VERSION:
            raise ValueError("not a supported metrics report")
        return cls(d["config"], d["fingerprint"], d["theta_lin"],
                   {k: SceneMetrics(**v) for k, v in d["scenes"].items()})

    def csv_rows(self) -> list[dict]:
        rows = [{"config": self.config, "scene": sid, **asdict(m)}
                for sid, m in sorted(self.scenes.items())]
        rows.append({"config": self.config, "scene": "average", "n_windows": self.n_windows,
                     "n_nonlinear": self.n_nonlinear, "ade": self.ade, "fde": self.fde,
                     "nde": self.nde})
        return rows


def reports_to_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        for row in r.csv_rows():
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                        for k, v in row.items()})
    return buf.getvalue()


def score(label: str, windows: Sequence[TrajectoryWindow], predictions: np.ndarray,
          theta_lin: float, fingerprint: str = "") -> MetricsReport:
    """Per-scene metrics of ``predictions`` (N, T_pred, 2) aligned with ``windows``."""
    if len(windows) != len(predictions):
        raise ValueError("one prediction per window required")
    report = MetricsReport(label, fingerprint, theta_lin)
    by_scene: dict[str, list[int]] = {}
    for k, w in enumerate(windows):
        by_scene.setdefault(w.scene_id, []).append(k)
    for sid, idx in sorted(by_scene.items()):
        truth = np.stack([windows[k].future for k in idx])
        pred = np.asarray(predictions)[idx]
        mask = nonlinear_mask(truth, theta_lin)
        report.scenes[sid] = SceneMetrics(
            len(idx), int(mask.sum()), float(ade(pred, truth).mean()),
            float(fde(pred, truth).mean()),
            float(ade(pred[mask], truth[mask]).mean()) if mask.any() else None)
    return report


def linear_predictions(windows: Sequence[TrajectoryWindow]) -> np.ndarray:
    return np.stack([linear_baseline(w.observed, w.t_pred) for w in windows])
