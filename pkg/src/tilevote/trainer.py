"""Training loop: SGD with momentum, dual-metric early stopping, CV folds.

An epoch improves when validation accuracy rises above its best so far OR
validation loss drops below its best so far (strict comparisons, metrics
tracked independently). Improved epochs are checkpoint candidates; the best
checkpoint maximizes validation accuracy, breaking ties by lower validation
loss, then by earlier epoch. Training stops once the count of consecutive
non-improving epochs reaches the patience (a patience of 0 stops at the first
non-improving epoch).

Input tiles arrive as raw [0, 1] grayscale arrays; the trainer computes scalar
mean/std normalization statistics from the training tiles only and stores them
in checkpoint metadata so evaluation applies the identical transform.
"""

import csv
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datasets import FoldAssignment, TileArrays
from .errors import ConfigError, DataError, DivergenceError
from .layers import EVAL, TRAIN, cross_entropy
from .model import Checkpoint, ModelConfig, TileNet, save_checkpoint
from .seeds import INIT_OFFSET, SHUFFLE_OFFSET, rng_for

LOSSES = ("cross_entropy",)
OPTIMIZERS = ("sgd",)

# run_index scales into the seed stream so folds and repeats never share
# shuffle seeds; epoch indices stay below this stride.
_RUN_STRIDE = 1000


@dataclass
class TrainConfig:
    loss: str = "cross_entropy"
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be non-negative")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")
        if self.max_epochs > _RUN_STRIDE:
            raise ConfigError(f"max_epochs above {_RUN_STRIDE} is not supported")


class EarlyStopTracker:
    """Dual-metric stagnation counter with strict-improvement semantics."""

    def __init__(self, patience: int):
        if patience < 0:
            raise ConfigError("patience must be non-negative")
        self.patience = patience
        self.best_acc = -np.inf
        self.best_loss = np.inf
        self.stale = 0

    def update(self, val_loss: float, val_acc: float) -> bool:
        """Record one epoch; returns True when either metric improved."""
        improved = False
        if val_acc > self.best_acc:
            self.best_acc = val_acc
            improved = True
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            improved = True
        if improved:
            self.stale = 0
        else:
            self.stale += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.stale >= max(self.patience, 1)


@dataclass
class EpochLog:
    epoch: int          # 1-based
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    improved: bool


EPOCH_LOG_HEADER = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "improved"]


def save_epoch_log(logs: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPOCH_LOG_HEADER)
        for e in logs:
            w.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.train_acc:.6f}",
                        f"{e.val_loss:.6f}", f"{e.val_acc:.6f}", int(e.improved)])


def load_epoch_log(path) -> List[EpochLog]:
    logs = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != EPOCH_LOG_HEADER:
            raise DataError(f"{path}: unexpected epoch log header {header}")
        for row in r:
            logs.append(EpochLog(int(row[0]), float(row[1]), float(row[2]),
                                 float(row[3]), float(row[4]), bool(int(row[5]))))
    return logs


def best_epoch_index(logs: Sequence[EpochLog]) -> int:
    """Epoch number of the checkpoint :func:`train` retains.

    Candidates are the improved epochs only (a checkpoint is written when a
    metric improves, never otherwise); among them: highest val accuracy, then
    lowest val loss, then the earliest epoch. Batch restatement of the
    trainer's streaming rule, kept separate so the two can be cross-checked.
    """
    cand = [e for e in logs if e.improved]
    if not cand:
        raise ValueError("no improved epoch in log")
    return max(cand, key=lambda e: (e.val_acc, -e.val_loss)).epoch


class SGDMomentum:
    """Classic momentum: v = mu*v + (g + wd*p); p -= lr*v."""

    def __init__(self, params: Dict[str, np.ndarray], cfg: TrainConfig, decayable: set):
        self.params = params
        self.cfg = cfg
        self.decayable = decayable
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        mu, lr, wd = self.cfg.momentum, self.cfg.learning_rate, self.cfg.weight_decay
        for name, p in self.params.items():
            g = grads[name]
            if wd and name in self.decayable:
                g = g + wd * p
            v = self.velocity[name]
            v *= mu
            v += g
            p -= lr * v


def normalization_stats(x: np.ndarray) -> Tuple[float, float]:
    """Scalar mean/std over an entire tile stack; std is floored away from 0.

    Accumulates in float64 so a constant float32 stack reports std exactly 0
    (single-precision accumulation leaves ~1e-8 of rounding noise, which the
    floor would then miss and normalization would blow up by 1e7).
    """
    mean = float(x.mean(dtype=np.float64))
    std = float(x.std(dtype=np.float64))
    if std < 1e-8:
        std = 1.0
    return mean, std


def normalize(x: np.ndarray, mean: float, std: float, dtype=np.float32) -> np.ndarray:
    return ((x - mean) / std).astype(dtype, copy=False)


def evaluate_tiles(model: TileNet, x: np.ndarray, labels: np.ndarray,
                   batch_size: int = 64) -> Tuple[float, float, np.ndarray]:
    """Eval-mode loss, accuracy, and per-tile logits. x is already normalized."""
    n = x.shape[0]
    if n == 0:
        raise DataError("cannot evaluate an empty tile set")
    logits = np.empty((n, model.config.num_classes), dtype=model.config.np_dtype)
    for i in range(0, n, batch_size):
        logits[i:i + batch_size] = model.forward_batch(x[i:i + batch_size, None], EVAL)[0]
    loss, _ = cross_entropy(logits, labels)
    acc = float((logits.argmax(axis=1) == labels).mean())
    return float(loss), acc, logits


@dataclass
class TrainResult:
    best_epoch: int
    best_val_loss: float
    best_val_acc: float
    epochs: List[EpochLog]
    checkpoint_path: Optional[str]
    stopped_early: bool
    norm_mean: float
    norm_std: float
    best: Checkpoint = field(repr=False, default=None)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig,
          train_tiles: TileArrays, val_tiles: TileArrays,
          out_dir: Optional[str] = None, run_index: int = 0,
          quiet: bool = True) -> TrainResult:
    """Train a fresh model; returns the best checkpoint and the epoch log.

    Model init and per-epoch shuffles derive from train_cfg.seed, so a given
    (seed, run_index, data) pair reproduces the run exactly. When out_dir is
    given, writes best.ckpt and epochs.csv there.
    """
    if train_tiles.x.shape[0] == 0 or val_tiles.x.shape[0] == 0:
        raise DataError("training requires non-empty train and val tile sets")
    mean, std = normalization_stats(train_tiles.x)
    dt = model_cfg.np_dtype
    xt = normalize(train_tiles.x, mean, std, dt)
    xv = normalize(val_tiles.x, mean, std, dt)
    yt, yv = train_tiles.labels, val_tiles.labels

    model = TileNet(model_cfg, seed=int(rng_for(train_cfg.seed, INIT_OFFSET, run_index).integers(2**31)))
    opt = SGDMomentum(model.parameters(), train_cfg, model.decayable_names())
    stopper = EarlyStopTracker(train_cfg.patience)
    logs: List[EpochLog] = []
    best_key = None
    best: Optional[Checkpoint] = None
    best_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
    n = xt.shape[0]
    bs = train_cfg.batch_size

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng_for(train_cfg.seed, SHUFFLE_OFFSET, run_index * _RUN_STRIDE + epoch).permutation(n)
        loss_sum = 0.0
        hit = 0
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            xb, yb = xt[idx, None], yt[idx]
            logits, _, _, caches = model.forward_batch(xb, TRAIN)
            loss, dlogits = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
            grads, _ = model.backward_batch(dlogits, caches)
            opt.step(grads)
            loss_sum += float(loss) * len(idx)
            hit += int((logits.argmax(axis=1) == yb).sum())
        train_loss, train_acc = loss_sum / n, hit / n

        val_loss, val_acc, _ = evaluate_tiles(model, xv, yv)
        improved = stopper.update(val_loss, val_acc)
        logs.append(EpochLog(epoch, train_loss, train_acc, val_loss, val_acc, improved))
        if not quiet:
            print(f"epoch {epoch:3d}  train {train_loss:.4f}/{train_acc:.3f}  "
                  f"val {val_loss:.4f}/{val_acc:.3f}{'  *' if improved else ''}")
        if improved:
            # ordering: accuracy desc, loss asc, epoch asc (first wins on ties)
            key = (val_acc, -val_loss)
            if best_key is None or key > best_key:
                best_key = key
                best = Checkpoint.of(model, {
                    "epoch": epoch, "val_loss": val_loss, "val_acc": val_acc,
                    "norm_mean": mean, "norm_std": std,
                    "train_seed": train_cfg.seed, "run_index": run_index,
                })
                if best_path:
                    save_checkpoint(best, best_path)
        if stopper.should_stop:
            break

    stopped_early = logs[-1].epoch < train_cfg.max_epochs
    if out_dir:
        save_epoch_log(logs, os.path.join(out_dir, "epochs.csv"))
    return TrainResult(
        best_epoch=best.metadata["epoch"], best_val_loss=best.metadata["val_loss"],
        best_val_acc=best.metadata["val_acc"], epochs=logs, checkpoint_path=best_path,
        stopped_early=stopped_early, norm_mean=mean, norm_std=std, best=best,
    )


@dataclass
class FoldResult:
    fold: int
    n_train_tiles: int
    n_val_tiles: int
    best_epoch: int
    val_loss: float
    val_acc: float


FOLD_RESULT_HEADER = ["fold", "n_train_tiles", "n_val_tiles", "best_epoch", "val_loss", "val_acc"]


def save_fold_results(results: Sequence[FoldResult], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(FOLD_RESULT_HEADER)
        for r in results:
            w.writerow([r.fold, r.n_train_tiles, r.n_val_tiles, r.best_epoch,
                        f"{r.val_loss:.6f}", f"{r.val_acc:.6f}"])


def run_cv(model_cfg: ModelConfig, train_cfg: TrainConfig, tiles: TileArrays,
           folds: FoldAssignment, out_dir: Optional[str] = None,
           quiet: bool = True) -> Tuple[List[FoldResult], float, float]:
    """K-fold CV over tiles grouped by source image.

    Each round holds out one fold's sources for validation and trains on the
    rest; tiles from one source never straddle the boundary. Returns per-fold
    results plus the mean and sample std of fold validation accuracy.
    """
    known = set(folds.fold_of)
    missing = [s for s in tiles.source_ids if s not in known]
    if missing:
        raise DataError(f"tiles reference sources without a fold: {sorted(set(missing))[:5]}")
    fold_ids = np.array([folds.fold_of[s] for s in tiles.source_ids])
    results: List[FoldResult] = []
    for f in range(folds.k):
        val_mask = fold_ids == f
        if not val_mask.any() or val_mask.all():
            raise DataError(f"fold {f} leaves an empty train or val set")
        sub_train = TileArrays(
            x=tiles.x[~val_mask], labels=tiles.labels[~val_mask],
            source_ids=[s for s, m in zip(tiles.source_ids, val_mask) if not m],
            tile_ids=[t for t, m in zip(tiles.tile_ids, val_mask) if not m],
        )
        sub_val = TileArrays(
            x=tiles.x[val_mask], labels=tiles.labels[val_mask],
            source_ids=[s for s, m in zip(tiles.source_ids, val_mask) if m],
            tile_ids=[t for t, m in zip(tiles.tile_ids, val_mask) if m],
        )
        fold_dir = None
        if out_dir:
            fold_dir = os.path.join(out_dir, f"fold{f}")
            os.makedirs(fold_dir, exist_ok=True)
        res = train(model_cfg, train_cfg, sub_train, sub_val,
                    out_dir=fold_dir, run_index=f, quiet=quiet)
        results.append(FoldResult(
            fold=f, n_train_tiles=sub_train.x.shape[0], n_val_tiles=sub_val.x.shape[0],
            best_epoch=res.best_epoch, val_loss=res.best_val_loss, val_acc=res.best_val_acc,
        ))
    accs = np.array([r.val_acc for r in results])
    mean_acc = float(accs.mean())
    std_acc = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
    if out_dir:
        save_fold_results(results, os.path.join(out_dir, "folds.csv"))
    return results, mean_acc, std_acc
