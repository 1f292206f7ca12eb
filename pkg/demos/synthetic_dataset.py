"""Generate the four-class synthetic texture dataset and look at what makes
the classes separable: local contrast rises with the class index while the
texture correlation length falls."""

import os

import numpy as np

from tilevote.datasets import CLASS_NAMES, SynthConfig, synth_image
from tilevote.pngio import save_gray_png

OUT = "demo_out"


def local_std(img, win=20):
    h, w = img.shape
    vals = []
    for y in range(0, h - win, win):
        for x in range(0, w - win, win):
            vals.append(img[y:y + win, x:x + win].std())
    return float(np.median(vals))


def main():
    os.makedirs(OUT, exist_ok=True)
    cfg = SynthConfig(images_per_class=1, image_size=(240, 320), seed=7)
    print(f"{'class':>8s}  {'median local std':>16s}  file")
    for c, name in enumerate(CLASS_NAMES):
        img = synth_image(cfg, c, 0)
        path = os.path.join(OUT, f"synth_{name}.png")
        save_gray_png(path, img)
        print(f"{name:>8s}  {local_std(img):16.4f}  {path}")
    print("\nthe same (seed, class, index) triple always regenerates the "
          "same image:")
    again = synth_image(cfg, 2, 0)
    print("  regenerated class 2 identical:",
          np.array_equal(again, synth_image(cfg, 2, 0)))


if __name__ == "__main__":
    main()
