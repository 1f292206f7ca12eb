"""8-bit grayscale / RGB PNG encode-decode.

Images travel through the pipeline as float arrays in [0, 1]; on disk they are
8-bit PNGs. Writing rounds to the nearest of 256 levels, so values already on
the 1/255 lattice round-trip exactly.
"""

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] float image to uint8, rounding half up and clipping."""
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    return (np.asarray(arr, dtype=np.float64) / 255.0).astype(dtype)


def save_gray_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_gray_png(path, dtype=np.float32) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return from_uint8(arr, dtype)


def save_rgb_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
