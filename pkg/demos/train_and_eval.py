"""Train the small residual CNN on synthetic tiles and evaluate the held-out
split with the dense head, aggregating tile votes to image level.

Everything runs in memory at a reduced scale; expect roughly half a minute.
"""

import numpy as np

from tilevote.aggregate import compute_metrics
from tilevote.datasets import (
    CLASS_NAMES,
    SynthConfig,
    build_tile_arrays,
    stratified_split,
    synth_image,
)
from tilevote.model import ModelConfig
from tilevote.pipeline import score_tiles, vote
from tilevote.tiling import GridSpec
from tilevote.trainer import TrainConfig, train


def make_images(cfg):
    ids_by_class, images = {}, {}
    for c in range(len(CLASS_NAMES)):
        ids = []
        for i in range(cfg.images_per_class):
            sid = f"{CLASS_NAMES[c]}_{i:03d}"
            images[sid] = synth_image(cfg, c, i).astype(np.float32)
            ids.append(sid)
        ids_by_class[c] = ids
    return ids_by_class, images


def main():
    synth = SynthConfig(images_per_class=10, image_size=(128, 128), seed=1)
    ids_by_class, images = make_images(synth)
    manifest = stratified_split(ids_by_class, (None, 2, 2), seed=1)

    model_cfg = ModelConfig(input_size=32, stage_widths=(8, 16), blocks_per_stage=1)
    arrays = build_tile_arrays(manifest, images, GridSpec(2, 2), model_cfg.input_size)
    tr, va, te = arrays["train"], arrays["val"], arrays["test"]
    print(f"tiles: train={tr.x.shape[0]} val={va.x.shape[0]} test={te.x.shape[0]}")

    train_cfg = TrainConfig(max_epochs=10, patience=3, batch_size=16,
                            learning_rate=3e-3, seed=1)
    res = train(model_cfg, train_cfg, tr, va)
    print(f"best epoch {res.best_epoch}: val_acc={res.best_val_acc:.3f}")

    model = res.best.to_model()
    ts = score_tiles(model, te, res.norm_mean, res.norm_std, "fc")
    tile_acc = float((ts.tile_preds == ts.labels).mean())
    for rule in ("majority", "probability"):
        report = compute_metrics(vote(ts, rule))
        print(f"test: tile_acc={tile_acc:.3f}  {rule}_vote_acc={report.accuracy:.3f}")


if __name__ == "__main__":
    main()
