"""Accuracy across tiling grids: train once per grid and compare per-tile
accuracy with the two image-level voting rules, for both evaluators.

A reduced version of the `tilevote sweep` command; takes a minute or two.
"""

import numpy as np

from tilevote.datasets import CLASS_NAMES, SynthConfig, stratified_split, synth_image
from tilevote.model import ModelConfig
from tilevote.pipeline import run_sweep
from tilevote.trainer import TrainConfig


def main():
    synth = SynthConfig(images_per_class=14, image_size=(192, 256), seed=2)
    ids_by_class, images = {}, {}
    for c in range(len(CLASS_NAMES)):
        ids = []
        for i in range(synth.images_per_class):
            sid = f"{CLASS_NAMES[c]}_{i:03d}"
            images[sid] = synth_image(synth, c, i).astype(np.float32)
            ids.append(sid)
        ids_by_class[c] = ids
    manifest = stratified_split(ids_by_class, (None, 3, 3), seed=2)

    model_cfg = ModelConfig(input_size=32, stage_widths=(8, 16), blocks_per_stage=1)
    train_cfg = TrainConfig(max_epochs=8, patience=3, batch_size=16,
                            learning_rate=3e-3, seed=2)
    rows = run_sweep(manifest, images, ["1x1", "2x2", "3x4"],
                     model_cfg, train_cfg, knn_k=5)

    print(f"\n{'grid':>5s} {'tiles':>6s}  {'fc tile/maj/prob':>18s}  "
          f"{'knn tile/maj/prob':>18s}")
    for r in rows:
        print(f"{r.grid:>5s} {r.n_train_tiles:6d}  "
              f"{r.fc_acc:.3f}/{r.fc_maj:.3f}/{r.fc_prob:.3f}      "
              f"{r.knn_acc:.3f}/{r.knn_maj:.3f}/{r.knn_prob:.3f}")


if __name__ == "__main__":
    main()
