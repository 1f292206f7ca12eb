"""Image-level decisions from per-tile scores, plus evaluation metrics.

A :class:`TileScores` table carries one row per tile: ids, the true image
label, a hard per-tile prediction, and a per-class score vector. Softmax
probabilities (network route) and neighbor frequencies (kNN route) both fit;
each row's scores are non-negative and sum to 1.

Two aggregation rules:

* ``majority_vote``: plurality over hard tile predictions. A tied count is
  broken by the larger summed score mass for the tied classes across the
  image's tiles, then by the lower class id.
* ``probability_vote``: argmax of the per-class score sum over the image's
  tiles (``mode="mean"`` divides by the tile count, which cannot change the
  argmax; it exists for reporting). Ties go to the lower class id.

Metrics are image-level: accuracy, per-class precision/recall/F1 and their
macro averages, and a confusion matrix with rows = true class, columns =
predicted class. A class never predicted gets precision 0; a class absent
from the truth gets recall 0; F1 is 0 whenever precision + recall is 0.
"""

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .datasets import CLASS_NAMES, NUM_CLASSES
from .errors import DataError

VOTE_MODES = ("sum", "mean")


@dataclass
class TileScores:
    tile_ids: List[str]
    source_ids: List[str]
    labels: np.ndarray          # (N,) true image label per tile
    tile_preds: np.ndarray      # (N,) hard per-tile prediction
    scores: np.ndarray          # (N, NUM_CLASSES)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.tile_preds = np.asarray(self.tile_preds, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = len(self.tile_ids)
        if not (len(self.source_ids) == n and self.labels.shape == (n,)
                and self.tile_preds.shape == (n,)
                and self.scores.shape == (n, NUM_CLASSES)):
            raise DataError("tile score table columns have mismatched lengths")
        if n == 0:
            raise DataError("tile score table is empty")
        if (self.scores < 0).any():
            raise DataError("tile scores must be non-negative")
        for arr, what in ((self.labels, "labels"), (self.tile_preds, "tile predictions")):
            if arr.min() < 0 or arr.max() >= NUM_CLASSES:
                raise DataError(f"{what} must lie in 0..{NUM_CLASSES - 1}")

    def by_source(self) -> Dict[str, np.ndarray]:
        """Source id -> row indices, sources in order of first appearance."""
        groups: Dict[str, List[int]] = {}
        for i, sid in enumerate(self.source_ids):
            groups.setdefault(sid, []).append(i)
        return {sid: np.asarray(rows) for sid, rows in groups.items()}


@dataclass(frozen=True)
class ImagePrediction:
    source_id: str
    label: int
    pred: int
    n_tiles: int
    class_scores: Tuple[float, ...]     # aggregated per-class mass


def _group_label(ts: TileScores, rows: np.ndarray, sid: str) -> int:
    labs = set(ts.labels[rows].tolist())
    if len(labs) != 1:
        raise DataError(f"source {sid} carries conflicting labels {sorted(labs)}")
    return labs.pop()


def majority_vote(ts: TileScores) -> List[ImagePrediction]:
    preds = []
    for sid, rows in ts.by_source().items():
        label = _group_label(ts, rows, sid)
        counts = np.bincount(ts.tile_preds[rows], minlength=NUM_CLASSES)
        mass = ts.scores[rows].sum(axis=0)
        tied = np.flatnonzero(counts == counts.max())
        if len(tied) == 1:
            winner = int(tied[0])
        else:
            tied_mass = mass[tied]
            winner = int(tied[tied_mass == tied_mass.max()][0])
        preds.append(ImagePrediction(sid, label, winner, len(rows), tuple(counts.astype(float))))
    return preds


def probability_vote(ts: TileScores, mode: str = "sum") -> List[ImagePrediction]:
    if mode not in VOTE_MODES:
        raise DataError(f"vote mode must be one of {VOTE_MODES}, got {mode!r}")
    preds = []
    for sid, rows in ts.by_source().items():
        label = _group_label(ts, rows, sid)
        total = ts.scores[rows].sum(axis=0)
        if mode == "mean":
            total = total / len(rows)
        winner = int(total.argmax())    # argmax takes the lowest index on ties
        preds.append(ImagePrediction(sid, label, winner, len(rows), tuple(total)))
    return preds


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_images: int
    accuracy: float
    precision: np.ndarray       # (NUM_CLASSES,)
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray = field(repr=False)   # (C, C) rows true, cols pred


def compute_metrics(preds: Sequence[ImagePrediction]) -> MetricsReport:
    if not preds:
        raise DataError("cannot compute metrics over zero predictions")
    y = np.array([p.label for p in preds])
    yh = np.array([p.pred for p in preds])
    return metrics_from_labels(y, yh)


def metrics_from_labels(y: np.ndarray, yh: np.ndarray) -> MetricsReport:
    """Metrics over parallel true/predicted label arrays (any granularity)."""
    y = np.asarray(y, dtype=np.int64)
    yh = np.asarray(yh, dtype=np.int64)
    if y.shape != yh.shape or y.ndim != 1 or y.size == 0:
        raise DataError("label arrays must be equal-length non-empty vectors")
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(conf, (y, yh), 1)
    tp = np.diag(conf).astype(np.float64)
    pred_tot = conf.sum(axis=0).astype(np.float64)
    true_tot = conf.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2 * precision * recall / np.maximum(pr, 1e-300), 0.0)
    return MetricsReport(
        n_images=int(y.size),
        accuracy=float((y == yh).mean()),
        precision=precision, recall=recall, f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=conf,
    )


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------

PREDICTIONS_HEADER = (["source_id", "class", "pred", "n_tiles"]
                      + [f"score_{name}" for name in CLASS_NAMES])


def save_predictions(preds: Sequence[ImagePrediction], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PREDICTIONS_HEADER)
        for p in preds:
            w.writerow([p.source_id, p.label, p.pred, p.n_tiles]
                       + [f"{s:.6f}" for s in p.class_scores])


def load_predictions(path) -> List[ImagePrediction]:
    preds = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != PREDICTIONS_HEADER:
            raise DataError(f"{path}: unexpected predictions header {header}")
        for row in r:
            preds.append(ImagePrediction(row[0], int(row[1]), int(row[2]), int(row[3]),
                                         tuple(float(v) for v in row[4:])))
    if not preds:
        raise DataError(f"{path}: predictions file is empty")
    return preds


def save_metrics(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["n_images", report.n_images])
        w.writerow(["accuracy", f"{report.accuracy:.6f}"])
        w.writerow(["macro_precision", f"{report.macro_precision:.6f}"])
        w.writerow(["macro_recall", f"{report.macro_recall:.6f}"])
        w.writerow(["macro_f1", f"{report.macro_f1:.6f}"])
        for c, name in enumerate(CLASS_NAMES):
            w.writerow([f"precision_{name}", f"{report.precision[c]:.6f}"])
            w.writerow([f"recall_{name}", f"{report.recall[c]:.6f}"])
            w.writerow([f"f1_{name}", f"{report.f1[c]:.6f}"])


def save_confusion(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["true"] + [f"pred_{name}" for name in CLASS_NAMES])
        for c, name in enumerate(CLASS_NAMES):
            w.writerow([name] + [int(v) for v in report.confusion[c]])


TILE_SCORES_HEADER = (["tile_id", "source_id", "class", "pred"]
                      + [f"score_{name}" for name in CLASS_NAMES])


def save_tile_scores(ts: TileScores, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TILE_SCORES_HEADER)
        for i, tid in enumerate(ts.tile_ids):
            w.writerow([tid, ts.source_ids[i], int(ts.labels[i]), int(ts.tile_preds[i])]
                       + [f"{v:.6f}" for v in ts.scores[i]])


def load_tile_scores(path) -> TileScores:
    tile_ids, source_ids, labels, preds, scores = [], [], [], [], []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != TILE_SCORES_HEADER:
            raise DataError(f"{path}: unexpected tile score header {header}")
        for row in r:
            tile_ids.append(row[0])
            source_ids.append(row[1])
            labels.append(int(row[2]))
            preds.append(int(row[3]))
            scores.append([float(v) for v in row[4:]])
    return TileScores(tile_ids=tile_ids, source_ids=source_ids,
                      labels=np.asarray(labels), tile_preds=np.asarray(preds),
                      scores=np.asarray(scores))
