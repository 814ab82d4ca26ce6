"""Local Outlier Factor novelty detector, fitted on normal-only features.

The detector follows the classical k-nearest-neighbor density-ratio
construction:

* ``k_distance(p)``  -- Euclidean distance to the k-th nearest training
  point.  A query is never its own neighbor: one training point at exactly
  zero distance (the query re-presented) is excluded from the candidates.
* ``neighborhood(p)`` -- every training point within the k-distance, so
  ties can push the neighborhood past k members.
* ``reach_dist(p, o)`` -- max(k_distance(o), d(p, o)).
* ``lrd(p)`` -- |N(p)| / sum of reachability distances, with a LARGE_LRD
  sentinel when every neighbor coincides with p.
* score -- mean neighbor lrd divided by the query's lrd; ~1 for inliers,
  well above 1 for outliers.

Features are z-scored with training statistics before any distance is
taken: the two features (mean IPC around 1, mean cache accesses in the
thousands) live on incomparable scales, and unscaled Euclidean distance
would ignore IPC entirely.

The decision threshold is calibrated on the training set itself: the
configured quantile of the leave-self-out training scores, floored at
1 + MIN_MARGIN.

Batch fitting and scoring run on the kernel backend selected at import
(compiled extension or numpy fallback, see pmuattest._kernels).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from ._kernels import LARGE_LRD
from .trace import FeatureVector

__all__ = [
    "DEFAULT_K",
    "DEFAULT_QUANTILE",
    "LARGE_LRD",
    "MIN_MARGIN",
    "Decision",
    "InsufficientDataError",
    "LofModel",
    "ModelFormatError",
    "StandardizationStats",
    "Verdict",
    "fit",
    "standardize",
]

logger = logging.getLogger(__name__)

DEFAULT_K = 20
DEFAULT_QUANTILE = 0.99
MIN_MARGIN = 0.05

_MODEL_TAG = "LOFMODEL1"


class InsufficientDataError(ValueError):
    """Fewer training features than the neighborhood size requires."""


class ModelFormatError(Exception):
    """Malformed or internally inconsistent model file."""


@dataclass(frozen=True, slots=True)
class StandardizationStats:
    """Per-dimension z-score parameters captured at fit time."""

    mean: tuple[float, float]
    std: tuple[float, float]

    def __post_init__(self):
        if len(self.mean) != 2 or len(self.std) != 2:
            raise ValueError("stats must cover exactly the 2 feature dimensions")
        if any(not math.isfinite(v) for v in (*self.mean, *self.std)):
            raise ValueError("stats must be finite")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be strictly positive")


def standardize(raw: FeatureVector | np.ndarray, stats: StandardizationStats) -> np.ndarray:
    """z-score a feature vector with the model's training statistics."""
    x = raw.as_array() if isinstance(raw, FeatureVector) else np.asarray(raw, dtype=np.float64)
    return (x - np.array(stats.mean)) / np.array(stats.std)


class Decision(Enum):
    NORMAL = "normal"
    ANOMALOUS = "anomalous"


@dataclass(frozen=True, slots=True)
class Verdict:
    """Classifier output; the decision is derived from score vs threshold."""

    score: float
    threshold_used: float

    @property
    def decision(self) -> Decision:
        # Strict inequality: a score exactly at the threshold is Normal.
        return Decision.ANOMALOUS if self.score > self.threshold_used else Decision.NORMAL


class LofModel:
    """Fitted novelty detector.

    Immutable after fit; predict/score are read-only and safe to call from
    multiple threads.
    """

    def __init__(
        self,
        k: int,
        stats: StandardizationStats,
        threshold: float,
        points: np.ndarray,
        train_kdist: np.ndarray,
        train_lrd: np.ndarray,
        train_scores: np.ndarray,
        degenerate_dims: tuple[bool, bool] = (False, False),
    ):
        if k < 1:
            raise ValueError("k must be >= 1")
        if points.shape[0] < k + 1:
            raise InsufficientDataError(f"need at least {k + 1} training points, got {points.shape[0]}")
        if threshold < 1.0:
            raise ValueError("threshold must be >= 1.0")
        self.k = k
        self.stats = stats
        self.threshold = float(threshold)
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.train_kdist = np.asarray(train_kdist, dtype=np.float64)
        self.train_lrd = np.asarray(train_lrd, dtype=np.float64)
        self.train_scores = np.asarray(train_scores, dtype=np.float64)
        self.degenerate_dims = degenerate_dims
        for arr in (self.points, self.train_kdist, self.train_lrd, self.train_scores):
            arr.setflags(write=False)

    @property
    def n_training(self) -> int:
        return self.points.shape[0]

    # -- fine-grained neighborhood operations (p is a standardized vector) --

    def _query_distances(self, p: np.ndarray) -> tuple[np.ndarray, int]:
        p = np.asarray(p, dtype=np.float64)
        diff = self.points - p
        d = np.sqrt((diff * diff).sum(axis=1))
        zero = np.flatnonzero(d == 0.0)
        return d, (int(zero[0]) if zero.size else -1)

    def k_distance(self, p: np.ndarray) -> float:
        d, excluded = self._query_distances(p)
        cand = np.delete(d, excluded) if excluded >= 0 else d
        return float(np.partition(cand, self.k - 1)[self.k - 1])

    def neighborhood(self, p: np.ndarray) -> set[int]:
        d, excluded = self._query_distances(p)
        kq = self.k_distance(p)
        return {int(j) for j in np.flatnonzero(d <= kq) if j != excluded}

    def reach_dist(self, a: np.ndarray, b_index: int) -> float:
        a = np.asarray(a, dtype=np.float64)
        d = float(np.sqrt(((a - self.points[b_index]) ** 2).sum()))
        return max(float(self.train_kdist[b_index]), d)

    def lrd(self, p: np.ndarray) -> float:
        neighbors = self.neighborhood(p)
        total = sum(self.reach_dist(p, j) for j in sorted(neighbors))
        return len(neighbors) / total if total > 0.0 else LARGE_LRD

    # -- scoring --

    def score(self, raw: FeatureVector | np.ndarray) -> float:
        z = standardize(raw, self.stats)
        scores = _kernels.score_queries(
            self.points, self.train_kdist, self.train_lrd, self.k, z[None, :]
        )
        return float(scores[0])

    def score_many(self, raws: np.ndarray) -> np.ndarray:
        z = (np.asarray(raws, dtype=np.float64) - np.array(self.stats.mean)) / np.array(self.stats.std)
        return _kernels.score_queries(self.points, self.train_kdist, self.train_lrd, self.k, z)

    def predict(self, raw: FeatureVector | np.ndarray) -> Verdict:
        return Verdict(score=self.score(raw), threshold_used=self.threshold)

    # -- persistence --

    def save(self, path: str | Path) -> None:
        """Write a versioned text model file (17 significant digits per value)."""
        g = "{:.17g}".format
        lines = [
            _MODEL_TAG,
            f"k {self.k}",
            f"threshold {g(self.threshold)}",
            f"mean {g(self.stats.mean[0])} {g(self.stats.mean[1])}",
            f"std {g(self.stats.std[0])} {g(self.stats.std[1])}",
            f"degenerate {int(self.degenerate_dims[0])} {int(self.degenerate_dims[1])}",
            f"n {self.n_training}",
        ]
        for i in range(self.n_training):
            lines.append(
                f"{g(self.points[i, 0])} {g(self.points[i, 1])} "
                f"{g(self.train_kdist[i])} {g(self.train_lrd[i])} {g(self.train_scores[i])}"
            )
        Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "LofModel":
        text = Path(path).read_bytes().decode("utf-8")
        lines = text.splitlines()
        if not lines or lines[0] != _MODEL_TAG:
            raise ModelFormatError(f"bad model tag (expected {_MODEL_TAG})")

        def _field(idx: int, name: str) -> list[str]:
            if idx >= len(lines):
                raise ModelFormatError(f"missing {name} line")
            parts = lines[idx].split()
            if parts[0] != name:
                raise ModelFormatError(f"expected {name} line, got {lines[idx]!r}")
            return parts[1:]

        try:
            k = int(_field(1, "k")[0])
            threshold = float(_field(2, "threshold")[0])
            mean = tuple(float(v) for v in _field(3, "mean"))
            std = tuple(float(v) for v in _field(4, "std"))
            degenerate = tuple(bool(int(v)) for v in _field(5, "degenerate"))
            n = int(_field(6, "n")[0])
            rows = lines[7:]
            if len(rows) != n:
                raise ModelFormatError(f"expected {n} training rows, found {len(rows)}")
            data = np.array([[float(v) for v in row.split()] for row in rows], dtype=np.float64)
        except (ValueError, IndexError) as e:
            raise ModelFormatError(f"malformed model file: {e}") from None
        if data.size and data.shape[1] != 5:
            raise ModelFormatError("training rows must carry 5 values")
        if not np.all(np.isfinite(data)):
            raise ModelFormatError("non-finite value in training rows")
        lrd = data[:, 3]
        if np.any((lrd <= 0.0) & (lrd != LARGE_LRD)):
            raise ModelFormatError("lrd values must be positive or the LARGE_LRD sentinel")
        return cls(
            k=k,
            stats=StandardizationStats(mean=mean, std=std),
            threshold=threshold,
            points=data[:, :2].copy(),
            train_kdist=data[:, 2].copy(),
            train_lrd=lrd.copy(),
            train_scores=data[:, 4].copy(),
            degenerate_dims=degenerate,  # type: ignore[arg-type]
        )


def fit(
    features: Sequence[FeatureVector] | np.ndarray,
    k: int = DEFAULT_K,
    calibration_quantile: float = DEFAULT_QUANTILE,
    *,
    scale: bool = True,
) -> LofModel:
    """Fit the detector on normal-only features and calibrate its threshold.

    The threshold is the ``calibration_quantile`` quantile (linear
    interpolation) of the leave-self-out LOF scores of the training points,
    floored at 1 + MIN_MARGIN.  ``scale=False`` skips standardization (unit
    stats); useful when features are already on a common scale.

    Raises InsufficientDataError when fewer than k+1 features are given.
    A zero-variance feature dimension is degenerate: its std is replaced by
    1.0 and the dimension is flagged on the returned model.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < calibration_quantile <= 1.0:
        raise ValueError("calibration_quantile must be in (0, 1]")
    if isinstance(features, np.ndarray):
        x = np.asarray(features, dtype=np.float64)
    else:
        x = np.array([f.as_array() for f in features], dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"features must be n x 2, got shape {x.shape}")
    n = x.shape[0]
    if n < k + 1:
        raise InsufficientDataError(f"need at least k+1={k + 1} features, got {n}")

    degenerate = (False, False)
    if scale:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        flags = std == 0.0
        if flags.any():
            degenerate = (bool(flags[0]), bool(flags[1]))
            std = np.where(flags, 1.0, std)
            logger.warning(
                "zero-variance feature dimension(s) %s; std replaced by 1.0",
                [i for i, f in enumerate(flags) if f],
            )
        stats = StandardizationStats(mean=(float(mean[0]), float(mean[1])),
                                     std=(float(std[0]), float(std[1])))
    else:
        stats = StandardizationStats(mean=(0.0, 0.0), std=(1.0, 1.0))

    z = np.ascontiguousarray((x - np.array(stats.mean)) / np.array(stats.std))
    kdist, lrd, scores = _kernels.fit_structures(z, k)
    threshold = max(1.0 + MIN_MARGIN, float(np.quantile(scores, calibration_quantile)))
    return LofModel(
        k=k,
        stats=stats,
        threshold=threshold,
        points=z,
        train_kdist=kdist,
        train_lrd=lrd,
        train_scores=scores,
        degenerate_dims=degenerate,
    )
