"""Class-evidence maps from the final convolutional feature maps.

Two methods over the same retained activations:

* ``grad_cam``: channel weights are the spatial means of the class logit's
  gradient w.r.t. each feature map; the weighted sum passes through ReLU.
* ``score_cam``: each feature map, min-max normalized and upsampled, masks
  the input; channel weights are the softmax over channels of the masked
  logits (minus the zero-input baseline logit by default).

Both maps are bilinearly upsampled (corner-aligned) to input resolution and
then min-max normalized to [0, 1]; a constant map normalizes to all zeros.
Overlays alpha-blend the colormapped map onto the grayscale tile.
"""

import csv
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import colormap
from .errors import DataError, ShapeError
from .layers import EVAL
from .model import FINAL_CONV, ActivationTape, TileNet, grad_wrt_activation
from .pngio import save_rgb_png, to_uint8
from .tiling import resize_bilinear

METHODS = ("grad_cam", "score_cam")
BASELINES = ("zero", "none")
OVERLAY_ALPHA = 0.4
TOP_DECILE = 0.9


@dataclass
class SaliencyMap:
    method: str
    class_id: int
    values: np.ndarray      # (S, S) float32 in [0, 1]
    coarse: np.ndarray      # (U, V) float32, pre-upsample weighted sum


def normalize_map(m: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0.0:
        return np.zeros_like(m, dtype=np.float32)
    return ((m - lo) / (hi - lo)).astype(np.float32)


def _finish(weighted: np.ndarray, size: int, method: str, class_id: int) -> SaliencyMap:
    coarse = np.maximum(weighted, 0.0).astype(np.float32)
    up = resize_bilinear(coarse, size, size)
    return SaliencyMap(method=method, class_id=class_id,
                       values=normalize_map(up), coarse=coarse)


def _resolve_class(tape: ActivationTape, class_id: Optional[int]) -> int:
    if class_id is None:
        return int(tape.logits.argmax())
    return class_id


def grad_cam(tape: ActivationTape, class_id: Optional[int] = None) -> SaliencyMap:
    """Gradient-weighted map for a class (default: the predicted class)."""
    cid = _resolve_class(tape, class_id)
    acts = tape.activations[FINAL_CONV]                     # (K, U, V)
    grad = grad_wrt_activation(tape, cid)                   # (K, U, V)
    alpha = grad.mean(axis=(1, 2))                          # (K,)
    weighted = np.tensordot(alpha, acts, axes=1)            # (U, V)
    return _finish(weighted, _input_size_of(tape), "grad_cam", cid)


def _input_size_of(tape: ActivationTape) -> int:
    if tape._model is None:
        raise DataError("tape does not reference its model")
    return tape._model.config.input_size


def score_cam(model: TileNet, img: np.ndarray, class_id: Optional[int] = None,
              baseline: str = "zero", batch_size: int = 16) -> SaliencyMap:
    """Mask-based map: no gradients, only forward passes.

    ``img`` is the normalized (S, S) input, exactly as given to ``forward``.
    """
    if baseline not in BASELINES:
        raise DataError(f"baseline must be one of {BASELINES}, got {baseline!r}")
    img = np.asarray(img)
    s = model.config.input_size
    if img.shape != (s, s):
        raise ShapeError(f"expected input of shape ({s}, {s}), got {img.shape}")
    tape = model.forward(img, EVAL)
    cid = _resolve_class(tape, class_id)
    acts = tape.activations[FINAL_CONV]                     # (K, U, V)
    k = acts.shape[0]
    masks = np.stack([normalize_map(resize_bilinear(acts[c], s, s)) for c in range(k)])
    masked = masks[:, None] * img[None, None]               # (K, 1, S, S)
    logits = np.empty((k, model.config.num_classes), dtype=model.config.np_dtype)
    for i in range(0, k, batch_size):
        logits[i:i + batch_size] = model.forward_batch(masked[i:i + batch_size], EVAL)[0]
    scores = logits[:, cid].astype(np.float64)
    if baseline == "zero":
        base_logits = model.forward_batch(np.zeros((1, 1, s, s)), EVAL)[0]
        scores = scores - float(base_logits[0, cid])
    scores = scores - scores.max()
    weights = np.exp(scores)
    weights /= weights.sum()
    weighted = np.tensordot(weights, acts.astype(np.float64), axes=1)
    return _finish(weighted, s, "score_cam", cid)


# ---------------------------------------------------------------------------
# Rendering and stats
# ---------------------------------------------------------------------------

def render_overlay(gray: np.ndarray, sal: SaliencyMap,
                   alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend the colormapped map over a [0, 1] grayscale tile; (S, S, 3) uint8."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.shape != sal.values.shape:
        raise ShapeError(f"tile shape {gray.shape} != map shape {sal.values.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise DataError("alpha must lie in [0, 1]")
    heat = colormap.apply(sal.values).astype(np.float64) / 255.0
    base = np.repeat(np.clip(gray, 0.0, 1.0)[:, :, None], 3, axis=2)
    return to_uint8((1.0 - alpha) * base + alpha * heat)


def save_overlay_png(gray: np.ndarray, sal: SaliencyMap, path,
                     alpha: float = OVERLAY_ALPHA) -> None:
    save_rgb_png(path, render_overlay(gray, sal, alpha))


@dataclass(frozen=True)
class CamStats:
    tile_id: str
    method: str
    class_id: int
    max_row: int
    max_col: int
    top_decile_fraction: float


def cam_stats(tile_id: str, sal: SaliencyMap) -> CamStats:
    """Peak location (first occurrence, row-major) and high-activation area."""
    r, c = np.unravel_index(int(sal.values.argmax()), sal.values.shape)
    frac = float((sal.values >= TOP_DECILE).mean())
    return CamStats(tile_id=tile_id, method=sal.method, class_id=sal.class_id,
                    max_row=int(r), max_col=int(c), top_decile_fraction=frac)


CAM_STATS_HEADER = ["tile_id", "method", "class", "max_row", "max_col", "top_decile_fraction"]


def save_cam_stats(rows: Sequence[CamStats], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CAM_STATS_HEADER)
        for s in rows:
            w.writerow([s.tile_id, s.method, s.class_id, s.max_row, s.max_col,
                        f"{s.top_decile_fraction:.6f}"])
