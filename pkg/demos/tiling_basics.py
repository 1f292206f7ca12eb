"""Grid tiling walkthrough: cut an image into tiles, inspect the geometry,
stitch the tiles back together, and resize with bilinear interpolation."""

import numpy as np

from tilevote.tiling import (
    GridSpec,
    compute_grid,
    resize_bilinear,
    stitch_tiles,
    tile_image,
)


def show_geometry():
    grid = GridSpec.parse("6x7")
    rects = compute_grid(1200, 1600, grid)
    print(f"grid {grid.rows}x{grid.cols} on a 1600x1200 image "
          f"-> {len(rects)} tiles of {rects[0].width}x{rects[0].height}")
    covered_w = max(r.x0 + r.width for r in rects)
    covered_h = max(r.y0 + r.height for r in rects)
    print(f"covered {covered_w}x{covered_h}; "
          f"{1600 - covered_w} columns and {1200 - covered_h} rows discarded")
    print("first row of rectangles:")
    for r in rects[:7]:
        print(f"  ({r.row_index},{r.col_index}) at x0={r.x0:4d} y0={r.y0}")


def cut_and_stitch():
    rng = np.random.default_rng(0)
    img = rng.random((90, 120)).astype(np.float32)
    grid = GridSpec(3, 4)
    pairs = tile_image(img, grid, source_id="demo", label=0)
    print(f"\ntiled 120x90 into {len(pairs)} tiles; first id: {pairs[0][0].tile_id}")

    tiles = [pix for _, pix in pairs]
    back = stitch_tiles(tiles, grid.rows, grid.cols)
    print(f"stitched back to {back.shape[1]}x{back.shape[0]}; "
          f"matches the original region: {np.array_equal(back, img[:90, :120])}")


def resize_endpoints():
    ramp = np.array([[0.0, 1.0], [0.0, 1.0]], dtype=np.float32)
    up = resize_bilinear(ramp, 2, 4)
    print("\n2x2 ramp resized to 2x4 (corner-aligned):")
    print(np.round(up, 3))


if __name__ == "__main__":
    show_geometry()
    cut_and_stitch()
    resize_endpoints()
