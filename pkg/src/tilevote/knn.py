"""Exact k-nearest-neighbor classification over embedding vectors.

Brute force by design: every query is compared against every indexed
embedding, so results are exact and the tie-breaking rules below are the
complete story. Distances are Euclidean, accumulated in float64.

Tie rules:
  * equidistant neighbors at the k-th rank: lower training index wins;
  * tied class frequency among the k neighbors: the class whose neighbors
    sit at smaller summed distance wins, then the lower class id.

Per-query scores are neighbor frequencies (counts / k), one per class, so
they sum to 1 and feed the same aggregation path as softmax probabilities.
"""

import csv
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .datasets import NUM_CLASSES
from .errors import DataError


@dataclass(frozen=True)
class EmbeddingIndex:
    embeddings: np.ndarray      # (N, D) float64
    labels: np.ndarray          # (N,) int64
    ids: Tuple[str, ...]        # tile ids, parallel to rows

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_index(embeddings: np.ndarray, labels: Sequence[int],
                ids: Sequence[str]) -> EmbeddingIndex:
    # copy=True: the index must own its rows, not alias the caller's arrays
    emb = np.array(embeddings, dtype=np.float64, copy=True)
    lab = np.array(labels, dtype=np.int64, copy=True)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise DataError(f"embeddings must be a non-empty (N, D) array, got shape {emb.shape}")
    if lab.shape != (emb.shape[0],) or len(ids) != emb.shape[0]:
        raise DataError("embeddings, labels and ids must have matching lengths")
    if lab.min() < 0 or lab.max() >= NUM_CLASSES:
        raise DataError(f"labels must lie in 0..{NUM_CLASSES - 1}")
    if not np.isfinite(emb).all():
        raise DataError("embeddings contain non-finite values")
    return EmbeddingIndex(embeddings=emb, labels=lab, ids=tuple(ids))


@dataclass
class KnnResult:
    pred: np.ndarray            # (Q,) int64
    scores: np.ndarray          # (Q, NUM_CLASSES) neighbor frequencies
    neighbors: np.ndarray       # (Q, k) training indices, nearest first


def classify(index: EmbeddingIndex, queries: np.ndarray, k: int = 5) -> KnnResult:
    """Exact kNN vote for each query row."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != index.dim:
        raise DataError(f"queries must have shape (Q, {index.dim}), got {q.shape}")
    if not 1 <= k <= index.size:
        raise DataError(f"k must lie in 1..{index.size}, got {k}")
    t = index.embeddings
    # |q - t|^2 = |q|^2 - 2 q.t + |t|^2, all in float64
    d2 = (q * q).sum(axis=1)[:, None] - 2.0 * (q @ t.T) + (t * t).sum(axis=1)[None, :]
    np.maximum(d2, 0.0, out=d2)
    # stable sort: equal distances keep ascending training index
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    nq = q.shape[0]
    pred = np.empty(nq, dtype=np.int64)
    scores = np.empty((nq, NUM_CLASSES), dtype=np.float64)
    for i in range(nq):
        nb = order[i]
        nb_labels = index.labels[nb]
        nb_dist = np.sqrt(d2[i, nb])
        counts = np.bincount(nb_labels, minlength=NUM_CLASSES)
        scores[i] = counts / k
        top = counts.max()
        tied = np.flatnonzero(counts == top)
        if len(tied) == 1:
            pred[i] = tied[0]
        else:
            sums = np.array([nb_dist[nb_labels == c].sum() for c in tied])
            pred[i] = tied[sums == sums.min()][0]
    return KnnResult(pred=pred, scores=scores, neighbors=order)


# ---------------------------------------------------------------------------
# Embedding dump files
# ---------------------------------------------------------------------------

def embedding_header(dim: int) -> List[str]:
    return ["tile_id", "class"] + [f"e{i:03d}" for i in range(dim)]


def save_embeddings(path, ids: Sequence[str], labels: Sequence[int],
                    embeddings: np.ndarray) -> None:
    emb = np.asarray(embeddings)
    if emb.ndim != 2 or emb.shape[0] != len(ids) or len(labels) != len(ids):
        raise DataError("ids, labels and embeddings must have matching lengths")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(embedding_header(emb.shape[1]))
        for tid, lab, row in zip(ids, labels, emb):
            # 9 significant digits: float32 values survive the round trip
            w.writerow([tid, int(lab)] + [f"{v:.8e}" for v in row])


def load_embeddings(path) -> Tuple[List[str], np.ndarray, np.ndarray]:
    """Returns (ids, labels, embeddings); embeddings come back float64."""
    ids: List[str] = []
    labels: List[int] = []
    rows: List[List[float]] = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header is None or header[:2] != ["tile_id", "class"]:
            raise DataError(f"{path}: not an embedding dump (header {header})")
        dim = len(header) - 2
        if dim < 1:
            raise DataError(f"{path}: embedding dump has no vector columns")
        for row in r:
            if len(row) != dim + 2:
                raise DataError(f"{path}: row width {len(row)} != {dim + 2}")
            ids.append(row[0])
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    if not ids:
        raise DataError(f"{path}: embedding dump is empty")
    return ids, np.asarray(labels, dtype=np.int64), np.asarray(rows, dtype=np.float64)
