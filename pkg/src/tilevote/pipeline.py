"""Orchestration shared by the CLI and the demo scripts.

Glues the pieces together: normalize tiles with training statistics, score
tiles with either evaluator (network softmax head or kNN over embeddings),
aggregate to image level, and write the standard artifact set. ``run_sweep``
repeats train-plus-eval across a list of grid configurations and tabulates
image-level accuracy for every evaluator/vote combination.
"""

import csv
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .aggregate import (
    ImagePrediction,
    MetricsReport,
    TileScores,
    compute_metrics,
    majority_vote,
    metrics_from_labels,
    probability_vote,
    save_confusion,
    save_metrics,
    save_predictions,
    save_tile_scores,
)
from .datasets import SplitManifest, TileArrays, build_tile_arrays
from .errors import ConfigError, DataError
from .knn import EmbeddingIndex, build_index, classify, save_embeddings
from .layers import EVAL, softmax
from .model import Checkpoint, ModelConfig, TileNet
from .tiling import GridSpec
from .trainer import TrainConfig, TrainResult, normalize, train

EVALUATORS = ("fc", "knn")
VOTES = ("majority", "probability")

# no-tiling baseline first, then the grid ladder from coarse to fine
SWEEP_GRIDS = ("1x1", "1x2", "2x2", "2x3", "3x3", "3x4", "4x4", "4x5", "5x5",
               "5x6", "6x6", "6x7", "7x7", "7x8", "10x10", "12x12")


def embed_tiles(model: TileNet, x_norm: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode embeddings for a stack of normalized tiles; (N, D)."""
    n = x_norm.shape[0]
    out = np.empty((n, model.config.embedding_dim), dtype=model.config.np_dtype)
    for i in range(0, n, batch_size):
        out[i:i + batch_size] = model.forward_batch(x_norm[i:i + batch_size, None], EVAL)[1]
    return out


def fc_scores(model: TileNet, tiles: TileArrays, mean: float, std: float,
              batch_size: int = 64) -> TileScores:
    """Softmax probabilities of the dense head as per-tile scores."""
    x = normalize(tiles.x, mean, std, model.config.np_dtype)
    n = x.shape[0]
    probs = np.empty((n, model.config.num_classes), dtype=np.float64)
    for i in range(0, n, batch_size):
        logits = model.forward_batch(x[i:i + batch_size, None], EVAL)[0]
        probs[i:i + batch_size] = softmax(logits)
    return TileScores(tile_ids=list(tiles.tile_ids), source_ids=list(tiles.source_ids),
                      labels=tiles.labels, tile_preds=probs.argmax(axis=1), scores=probs)


def knn_scores(model: TileNet, index: EmbeddingIndex, tiles: TileArrays,
               mean: float, std: float, k: int = 5) -> TileScores:
    """Neighbor frequencies from the embedding index as per-tile scores."""
    x = normalize(tiles.x, mean, std, model.config.np_dtype)
    emb = embed_tiles(model, x)
    res = classify(index, emb, k=k)
    return TileScores(tile_ids=list(tiles.tile_ids), source_ids=list(tiles.source_ids),
                      labels=tiles.labels, tile_preds=res.pred, scores=res.scores)


def score_tiles(model: TileNet, tiles: TileArrays, mean: float, std: float,
                evaluator: str, index: Optional[EmbeddingIndex] = None,
                k: int = 5) -> TileScores:
    if evaluator == "fc":
        return fc_scores(model, tiles, mean, std)
    if evaluator == "knn":
        if index is None:
            raise DataError("knn evaluator requires a training embedding index")
        return knn_scores(model, index, tiles, mean, std, k=k)
    raise ConfigError(f"evaluator must be one of {EVALUATORS}, got {evaluator!r}")


def vote(ts: TileScores, rule: str, mode: str = "sum") -> List[ImagePrediction]:
    if rule == "majority":
        return majority_vote(ts)
    if rule == "probability":
        return probability_vote(ts, mode=mode)
    raise ConfigError(f"vote must be one of {VOTES}, got {rule!r}")


def write_report(preds: Sequence[ImagePrediction], out_dir: str) -> MetricsReport:
    """predictions.csv + metrics.csv + confusion.csv under out_dir."""
    report = compute_metrics(preds)
    os.makedirs(out_dir, exist_ok=True)
    save_predictions(preds, os.path.join(out_dir, "predictions.csv"))
    save_metrics(report, os.path.join(out_dir, "metrics.csv"))
    save_confusion(report, os.path.join(out_dir, "confusion.csv"))
    return report


def write_tile_report(ts: TileScores, out_dir: str) -> MetricsReport:
    """Per-tile results without aggregation: tile_scores.csv + tile metrics."""
    report = metrics_from_labels(ts.labels, ts.tile_preds)
    os.makedirs(out_dir, exist_ok=True)
    save_tile_scores(ts, os.path.join(out_dir, "tile_scores.csv"))
    save_metrics(report, os.path.join(out_dir, "metrics.csv"))
    save_confusion(report, os.path.join(out_dir, "confusion.csv"))
    return report


def export_train_embeddings(model: TileNet, tiles: TileArrays,
                            mean: float, std: float, path) -> None:
    """Dump training-tile embeddings so later kNN evaluation never needs
    the training images themselves."""
    x = normalize(tiles.x, mean, std, model.config.np_dtype)
    emb = embed_tiles(model, x)
    save_embeddings(path, tiles.tile_ids, tiles.labels, emb)


def index_from_checkpoint_dump(ids, labels, emb) -> EmbeddingIndex:
    return build_index(emb, labels, ids)


def run_cv_summary_line(results, mean_acc: float, std_acc: float) -> str:
    per_fold = "  ".join(f"f{r.fold}={r.val_acc:.3f}" for r in results)
    return (f"cv ({len(results)} folds): acc {mean_acc:.4f} +/- {std_acc:.4f}"
            f"  [{per_fold}]")


# ---------------------------------------------------------------------------
# Grid sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    """One grid's test results: per-tile accuracy plus both vote rules,
    for the dense head and for kNN. Matches the sweep CSV column for column."""

    grid: str
    fc_acc: float           # per-tile, no aggregation
    fc_maj: float
    fc_prob: float
    knn_acc: float          # per-tile, no aggregation
    knn_maj: float
    knn_prob: float
    # in-memory extras, not serialized
    n_train_tiles: int = 0
    best_epoch: int = 0

    @property
    def tiles_per_image(self) -> int:
        g = GridSpec.parse(self.grid)
        return g.rows * g.cols


SWEEP_HEADER = ["grid", "fc_acc", "fc_maj", "fc_prob", "knn_acc", "knn_maj", "knn_prob"]


def save_sweep(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r.grid] + [f"{v:.6f}" for v in
                                   (r.fc_acc, r.fc_maj, r.fc_prob,
                                    r.knn_acc, r.knn_maj, r.knn_prob)])


def load_sweep(path) -> List[SweepRow]:
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != SWEEP_HEADER:
            raise DataError(f"{path}: unexpected sweep header {header}")
        for row in r:
            rows.append(SweepRow(row[0], *(float(v) for v in row[1:])))
    return rows


def run_grid(manifest: SplitManifest, images: Dict[str, np.ndarray], grid: GridSpec,
             model_cfg: ModelConfig, train_cfg: TrainConfig, knn_k: int = 5,
             run_index: int = 0, out_dir: Optional[str] = None,
             quiet: bool = True) -> Tuple[SweepRow, TrainResult]:
    """Train on one grid configuration and evaluate the test split both ways."""
    arrays = build_tile_arrays(manifest, images, grid, model_cfg.input_size)
    tr, va, te = arrays["train"], arrays["val"], arrays["test"]
    res = train(model_cfg, train_cfg, tr, va, out_dir=out_dir,
                run_index=run_index, quiet=quiet)
    model = res.best.to_model()
    mean, std = res.norm_mean, res.norm_std
    xt = normalize(tr.x, mean, std, model_cfg.np_dtype)
    index = build_index(embed_tiles(model, xt), tr.labels, tr.tile_ids)
    accs = {}
    for ev in EVALUATORS:
        ts = score_tiles(model, te, mean, std, ev, index=index, k=knn_k)
        accs[f"{ev}_acc"] = float((ts.tile_preds == ts.labels).mean())
        accs[f"{ev}_maj"] = compute_metrics(vote(ts, "majority")).accuracy
        accs[f"{ev}_prob"] = compute_metrics(vote(ts, "probability")).accuracy
    row = SweepRow(grid=str(grid), n_train_tiles=tr.x.shape[0],
                   best_epoch=res.best_epoch, **accs)
    return row, res


def run_sweep(manifest: SplitManifest, images: Dict[str, np.ndarray],
              grids: Sequence[str], model_cfg: ModelConfig, train_cfg: TrainConfig,
              knn_k: int = 5, out_dir: Optional[str] = None,
              quiet: bool = True) -> List[SweepRow]:
    """One row per grid; rows come back in the order requested."""
    if not grids:
        raise ConfigError("sweep needs at least one grid")
    rows = []
    for gi, gtext in enumerate(grids):
        grid = GridSpec.parse(gtext)
        gdir = os.path.join(out_dir, f"grid_{grid.rows}x{grid.cols}") if out_dir else None
        if gdir:
            os.makedirs(gdir, exist_ok=True)
        row, _ = run_grid(manifest, images, grid, model_cfg, train_cfg,
                          knn_k=knn_k, run_index=gi, out_dir=gdir, quiet=quiet)
        if not quiet:
            print(f"{row.grid:>7s}  fc {row.fc_acc:.3f}/{row.fc_maj:.3f}/{row.fc_prob:.3f}  "
                  f"knn {row.knn_acc:.3f}/{row.knn_maj:.3f}/{row.knn_prob:.3f}")
        rows.append(row)
    if out_dir:
        save_sweep(rows, os.path.join(out_dir, "sweep.csv"))
        plot_sweep(rows, os.path.join(out_dir, "sweep.png"))
    return rows


def plot_sweep(rows: Sequence[SweepRow], path) -> None:
    """Accuracy against tiles per image, one line per evaluator/vote pair."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ordered = sorted(rows, key=lambda r: r.tiles_per_image)
    x = [r.tiles_per_image for r in ordered]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for attr, style in (("fc_acc", ".-"), ("fc_maj", "o-"), ("fc_prob", "s-"),
                        ("knn_acc", ".--"), ("knn_maj", "o--"), ("knn_prob", "s--")):
        ax.plot(x, [getattr(r, attr) for r in ordered], style, label=attr.replace("_", " "))
    ax.set_xscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels([r.grid for r in ordered], rotation=45, fontsize=7)
    ax.set_xlabel("grid (tiles per image, log scale)")
    ax.set_ylabel("image-level accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
