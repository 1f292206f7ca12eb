"""Class-evidence maps on a trained model: gradient-weighted and
masking-based variants, rendered as heat overlays over the input tile."""

import os

import numpy as np

from tilevote.datasets import SynthConfig, build_tile_arrays, stratified_split, synth_image
from tilevote.model import ModelConfig
from tilevote.saliency import cam_stats, grad_cam, save_overlay_png, score_cam
from tilevote.tiling import GridSpec
from tilevote.trainer import TrainConfig, normalize, train

OUT = "demo_out"


def quick_model():
    synth = SynthConfig(images_per_class=8, image_size=(96, 96), seed=5)
    ids_by_class, images = {}, {}
    for c in range(4):
        ids = []
        for i in range(synth.images_per_class):
            sid = f"c{c}_{i:02d}"
            images[sid] = synth_image(synth, c, i).astype(np.float32)
            ids.append(sid)
        ids_by_class[c] = ids
    manifest = stratified_split(ids_by_class, (None, 2, 0), seed=5)
    model_cfg = ModelConfig(input_size=32, stage_widths=(8, 16), blocks_per_stage=1)
    arrays = build_tile_arrays(manifest, images, GridSpec(2, 2), model_cfg.input_size,
                               splits=("train", "val"))
    cfg = TrainConfig(max_epochs=8, patience=3, batch_size=16,
                      learning_rate=3e-3, seed=5)
    res = train(model_cfg, cfg, arrays["train"], arrays["val"])
    return res.best.to_model(), res, arrays["val"]


def main():
    os.makedirs(OUT, exist_ok=True)
    model, res, tiles = quick_model()
    print(f"trained to val_acc={res.best_val_acc:.3f}; rendering 4 tiles")
    for i in range(4):
        raw = tiles.x[i]
        xn = normalize(raw, res.norm_mean, res.norm_std, model.config.np_dtype)
        tape = model.forward(xn)
        for sal in (grad_cam(tape), score_cam(model, xn)):
            path = os.path.join(OUT, f"{tiles.tile_ids[i]}_{sal.method}.png")
            save_overlay_png(raw, sal, path)
            st = cam_stats(tiles.tile_ids[i], sal)
            print(f"  {path}: class={sal.class_id} peak=({st.max_row},{st.max_col}) "
                  f"hot_area={st.top_decile_fraction:.2f}")


if __name__ == "__main__":
    main()
