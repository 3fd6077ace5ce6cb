"""Annotation reliability, label fusion, and regression metrics.

Multiple annotators rate each video on the 0-3 intensity scale; raters whose
mean pairwise agreement (quadratic-weighted kappa) falls below a threshold
are discarded and the rest are averaged into one label per video.  Model
quality is reported as overall / per-level mean squared error plus Pearson
correlation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audit import note_read
from .errors import (
    DegenerateMarginalsError,
    NoReliableRatersError,
    ParseError,
    UndefinedCorrelationError,
)

NUM_LEVELS = 4
RELIABILITY_THRESHOLD = 0.4

# Video-level numbers reported for the original (non-redistributable)
# 78-subject corpus.  Informative presets only -- nothing here can reproduce
# them without that data; synthetic acceptance checks stand in for them.
REFERENCE_RESULTS = {
    "svr_mse": 0.15,
    "lstm_mse": 0.10,
    "svr_noisy_instance_mse": 0.09,
    "localization_pcc": 0.25,
    "localization_pcc_topk": 0.37,
}


@dataclass
class AnnotationMatrix:
    """Per-video labels from several raters; NaN marks a missing rating."""

    labels: np.ndarray  # (n_videos, n_raters) float64, entries in {0..3} or NaN
    video_ids: list[str]
    rater_ids: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        v, r = self.labels.shape
        if v != len(self.video_ids) or r != len(self.rater_ids):
            raise ValueError("labels grid does not match id lists")
        present = self.labels[~np.isnan(self.labels)]
        if present.size and (
            (present != np.round(present)).any()
            or present.min() < 0
            or present.max() > NUM_LEVELS - 1
        ):
            raise ValueError(f"ratings must be integers in [0, {NUM_LEVELS - 1}]")

    @property
    def n_videos(self):
        return self.labels.shape[0]

    @property
    def n_raters(self):
        return self.labels.shape[1]


@dataclass
class MetricsReport:
    """Everything reported for one prediction run."""

    mse: float
    classwise_mse: dict[int, float | None]
    pcc: float
    class_counts: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "pcc": self.pcc,
            "classwise_mse": {str(k): v for k, v in sorted(self.classwise_mse.items())},
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        raw = json.loads(Path(path).read_text())
        return cls(
            mse=raw["mse"],
            classwise_mse={int(k): v for k, v in raw["classwise_mse"].items()},
            pcc=raw["pcc"],
            class_counts={int(k): v for k, v in raw["class_counts"].items()},
        )


# ---------------------------------------------------------------------------
# agreement


def _as_label_vector(values, num_levels):
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("labels must form a nonempty vector")
    if (arr != np.round(arr)).any() or arr.min() < 0 or arr.max() > num_levels - 1:
        raise ValueError(f"labels must be integers in [0, {num_levels - 1}]")
    return arr.astype(np.int64)


def quadratic_weighted_kappa(a, b, num_levels: int = NUM_LEVELS) -> float:
    """Chance-corrected agreement with (i-j)^2 disagreement weights.

    kappa = 1 - sum(w * O) / sum(w * E) with O the observed joint counts and
    E the outer product of the marginals (same total count).  Two raters who
    are constant and identical agree perfectly by convention.
    """
    if num_levels < 2:
        raise ValueError("need at least 2 levels")
    a = _as_label_vector(a, num_levels)
    b = _as_label_vector(b, num_levels)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")

    observed = np.zeros((num_levels, num_levels))
    np.add.at(observed, (a, b), 1.0)
    grid = np.arange(num_levels, dtype=np.float64)
    weights = (grid[:, None] - grid[None, :]) ** 2 / (num_levels - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / a.size

    denominator = float((weights * expected).sum())
    numerator = float((weights * observed).sum())
    if denominator == 0.0:
        # both raters constant on the same level: no room for disagreement
        if numerator == 0.0:
            return 1.0
        raise DegenerateMarginalsError(
            "expected disagreement is zero but observed disagreement is not"
        )
    return float(1.0 - numerator / denominator)


def rater_reliability(
    annotations: AnnotationMatrix, num_levels: int = NUM_LEVELS
) -> np.ndarray:
    """Mean pairwise kappa of each rater against every other rater.

    Pairs are scored over their jointly rated videos; a rater sharing no
    videos with anyone gets reliability 0.
    """
    labels = annotations.labels
    if annotations.n_raters < 2:
        raise ValueError("reliability needs at least 2 raters")
    present = ~np.isnan(labels)
    out = np.zeros(annotations.n_raters)
    for i in range(annotations.n_raters):
        kappas = []
        for j in range(annotations.n_raters):
            if j == i:
                continue
            joint = present[:, i] & present[:, j]
            if not joint.any():
                continue
            kappas.append(
                quadratic_weighted_kappa(
                    labels[joint, i], labels[joint, j], num_levels
                )
            )
        out[i] = float(np.mean(kappas)) if kappas else 0.0
    return out


def _round_half_away(x: float) -> int:
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


def fuse_labels(
    annotations: AnnotationMatrix,
    reliability_threshold: float = RELIABILITY_THRESHOLD,
) -> tuple[np.ndarray, list[str]]:
    """Per-video consensus labels plus the raters that were discarded.

    Raters with mean pairwise kappa below the threshold are dropped; each
    video's label is the round-half-away-from-zero mean of the remaining
    raters' present ratings.
    """
    reliability = rater_reliability(annotations)
    keep = reliability >= reliability_threshold
    dropped = [annotations.rater_ids[i] for i in np.flatnonzero(~keep)]
    if not keep.any():
        raise NoReliableRatersError(
            f"all {annotations.n_raters} raters fell below {reliability_threshold}"
        )
    kept = annotations.labels[:, keep]
    fused = np.empty(annotations.n_videos, dtype=np.int64)
    for v in range(annotations.n_videos):
        row = kept[v][~np.isnan(kept[v])]
        if row.size == 0:
            raise NoReliableRatersError(
                f"video {annotations.video_ids[v]}: no reliable ratings present"
            )
        fused[v] = _round_half_away(float(row.mean()))
    return fused, dropped


# ---------------------------------------------------------------------------
# regression metrics


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 1 or pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size < 1:
        raise ValueError("need at least one sample")
    return pred, truth


def mse(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def classwise_mse(
    pred, truth, num_levels: int = NUM_LEVELS
) -> dict[int, float | None]:
    """MSE over the samples of each truth level; absent levels map to None."""
    pred, truth = _paired(pred, truth)
    out: dict[int, float | None] = {}
    for level in range(num_levels):
        mask = truth == level
        out[level] = float(np.mean((pred[mask] - level) ** 2)) if mask.any() else None
    return out


def pcc(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    if pred.size < 2:
        raise ValueError("correlation needs at least 2 samples")
    if (pred == pred[0]).all() or (truth == truth[0]).all():
        raise UndefinedCorrelationError("constant input has no defined correlation")
    return float(np.corrcoef(pred, truth)[0, 1])


def compute_report(pred, truth, num_levels: int = NUM_LEVELS) -> MetricsReport:
    pred, truth = _paired(pred, truth)
    counts = {
        level: int((truth == level).sum()) for level in range(num_levels)
    }
    return MetricsReport(
        mse=mse(pred, truth),
        classwise_mse=classwise_mse(pred, truth, num_levels),
        pcc=pcc(pred, truth),
        class_counts=counts,
    )


# ---------------------------------------------------------------------------
# annotation CSV (rows = videos, columns = raters, blank = missing)


def load_annotation_csv(path) -> AnnotationMatrix:
    note_read(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 3:
            raise ParseError(path, 1, "expected video_id plus at least 2 rater columns")
        rater_ids = [h.strip() for h in header[1:]]
        video_ids = []
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(path, lineno, f"expected {len(header)} cells")
            video_ids.append(row[0].strip())
            values = []
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    values.append(np.nan)
                    continue
                try:
                    label = int(cell)
                except ValueError:
                    raise ParseError(path, lineno, f"non-integer rating {cell!r}") from None
                if not 0 <= label <= NUM_LEVELS - 1:
                    raise ParseError(path, lineno, f"rating {label} out of range")
                values.append(float(label))
            rows.append(values)
    if not rows:
        raise ParseError(path, 2, "no annotation rows")
    return AnnotationMatrix(
        labels=np.asarray(rows), video_ids=video_ids, rater_ids=rater_ids
    )


def save_annotation_csv(annotations: AnnotationMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id"] + list(annotations.rater_ids))
        for vid, row in zip(annotations.video_ids, annotations.labels):
            cells = ["" if math.isnan(v) else str(int(v)) for v in row]
            writer.writerow([vid] + cells)
