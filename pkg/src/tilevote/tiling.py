"""Grid tiling of grayscale images.

An image of shape (height, width) is partitioned into an ``rows x cols`` grid
of equal, non-overlapping tiles. Tile height/width are the floor divisions of
the image dimensions, so remainder pixels that do not fit are discarded from
the right and bottom edges; the retained region is anchored at the top-left
corner. Tiles are enumerated in row-major order and carry positional ids of
the form ``{source_id}_r{row:02d}c{col:02d}``.

Images are plain 2-D float arrays with values in [0, 1]. All operations here
are pure: no I/O, no hidden state, safe to call concurrently.
"""

import re
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple

import numpy as np

from .errors import GridError


class GridSpec(NamedTuple):
    """Grid shape: ``rows`` partition the image height, ``cols`` the width."""

    rows: int
    cols: int

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parse ``"6x7"`` (or ``"6X7"``) into GridSpec(rows=6, cols=7)."""
        m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
        if not m:
            raise GridError(f"cannot parse grid spec {text!r}; expected RxC like '6x7'")
        return cls(rows=int(m.group(1)), cols=int(m.group(2)))

    def __str__(self):
        return f"{self.rows}x{self.cols}"


class TileRect(NamedTuple):
    """Pixel rectangle of one tile: top-left corner (x0, y0), extent (width, height)."""

    row_index: int
    col_index: int
    x0: int
    y0: int
    width: int
    height: int


@dataclass(frozen=True)
class TileRecord:
    """One tile's provenance: source image, grid position, inherited label."""

    source_id: str
    rect: TileRect
    label: int
    tile_id: str


_TILE_ID_RE = re.compile(r"^(?P<src>.+)_r(?P<row>\d+)c(?P<col>\d+)$")


def encode_tile_id(source_id: str, row_index: int, col_index: int) -> str:
    return f"{source_id}_r{row_index:02d}c{col_index:02d}"


def decode_tile_id(tile_id: str) -> Tuple[str, int, int]:
    """Invert :func:`encode_tile_id`; returns (source_id, row_index, col_index)."""
    m = _TILE_ID_RE.match(tile_id)
    if not m:
        raise ValueError(f"not a tile id: {tile_id!r}")
    return m.group("src"), int(m.group("row")), int(m.group("col"))


def compute_grid(height: int, width: int, grid: GridSpec) -> List[TileRect]:
    """Rectangles of the ``grid.rows x grid.cols`` tiling of a height-by-width image.

    Tiles have height ``height // rows`` and width ``width // cols``; any
    remainder stays uncovered along the right/bottom edges. Rectangles are
    returned in row-major order and are pairwise disjoint.
    """
    rows, cols = int(grid.rows), int(grid.cols)
    if rows < 1 or cols < 1:
        raise GridError(f"grid must be at least 1x1, got {rows}x{cols}")
    if rows > height or cols > width:
        raise GridError(
            f"grid {rows}x{cols} does not fit a {height}x{width} image "
            "(each dimension needs at least one pixel per tile)"
        )
    tile_h = height // rows
    tile_w = width // cols
    return [
        TileRect(r, c, x0=c * tile_w, y0=r * tile_h, width=tile_w, height=tile_h)
        for r in range(rows)
        for c in range(cols)
    ]


def tile_image(img: np.ndarray, grid: GridSpec, source_id: str, label: int):
    """Cut ``img`` into labeled tiles.

    Returns a row-major list of ``(TileRecord, tile_pixels)`` pairs where
    ``tile_pixels`` is a verbatim copy of the image crop at the tile's
    rectangle. Every tile inherits ``label`` from the parent image.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise GridError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    out = []
    for rect in compute_grid(h, w, grid):
        crop = img[rect.y0 : rect.y0 + rect.height, rect.x0 : rect.x0 + rect.width].copy()
        rec = TileRecord(
            source_id=source_id,
            rect=rect,
            label=int(label),
            tile_id=encode_tile_id(source_id, rect.row_index, rect.col_index),
        )
        out.append((rec, crop))
    return out


def _axis_coords(n_in: int, n_out: int, dtype):
    """Corner-aligned source coordinates for each output index along one axis."""
    if n_out == 1:
        coords = np.zeros(1, dtype=dtype)
    else:
        coords = np.arange(n_out, dtype=dtype) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(coords).astype(np.intp)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel (i, j) samples the input at
    ``(i * (H-1)/(out_h-1), j * (W-1)/(out_w-1))`` (coordinate 0 when the
    output axis has a single sample), interpolating between the four
    surrounding input pixels. Being a convex combination, output values never
    leave the input's [min, max] range, and constant images stay constant.
    """
    batch = resize_bilinear_batch(np.asarray(img)[None], out_h, out_w)
    return batch[0]


def resize_bilinear_batch(imgs: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Vectorized :func:`resize_bilinear` over a stack of images (N, H, W)."""
    imgs = np.asarray(imgs)
    if imgs.ndim != 3:
        raise GridError(f"expected (N, H, W) image stack, got shape {imgs.shape}")
    n, h, w = imgs.shape
    if h < 1 or w < 1:
        raise GridError("cannot resize an empty image")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    dtype = imgs.dtype if np.issubdtype(imgs.dtype, np.floating) else np.float64
    y_lo, y_hi, wy = _axis_coords(h, out_h, dtype)
    x_lo, x_hi, wx = _axis_coords(w, out_w, dtype)

    top = imgs[:, y_lo, :]  # (N, out_h, W)
    bot = imgs[:, y_hi, :]
    wy = wy[None, :, None]
    rows = top * (1 - wy) + bot * wy  # interpolated along y
    left = rows[:, :, x_lo]
    right = rows[:, :, x_hi]
    wx = wx[None, None, :]
    return (left * (1 - wx) + right * wx).astype(dtype, copy=False)


def stitch_tiles(tiles, rows: int, cols: int) -> np.ndarray:
    """Reassemble row-major ``tiles`` (equal-shaped 2-D arrays) into one image.

    Inverse of :func:`tile_image` restricted to the retained region: stitching
    the tiles of an image reproduces its top-left crop bit-exactly.
    """
    tiles = list(tiles)
    if len(tiles) != rows * cols:
        raise GridError(f"expected {rows * cols} tiles, got {len(tiles)}")
    th, tw = tiles[0].shape
    out = np.empty((rows * th, cols * tw), dtype=tiles[0].dtype)
    for i, tile in enumerate(tiles):
        if tile.shape != (th, tw):
            raise GridError("tiles must share one shape")
        r, c = divmod(i, cols)
        out[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = tile
    return out
