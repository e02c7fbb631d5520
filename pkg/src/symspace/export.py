"""PGM/PPM export of feasibility fields and partitions.

Grid row 0 sits at y = 0, so images are flipped vertically to put +y up.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .feasibility import FeasibilityField, to_gray8
from .partition import UNLABELED, StateSpace

# Distinct colors for partition locations, cycled when there are more locations.
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (128, 0, 0), (128, 128, 0),
], dtype=np.uint8)
FREE_COLOR = (255, 255, 255)
BLOCKED_COLOR = (0, 0, 0)


def field_image(field: FeasibilityField) -> np.ndarray:
    """8-bit grayscale image where 255 means feasibility 1.0."""
    return np.flipud(to_gray8(field.values))


def partition_image(ss: StateSpace, occ: np.ndarray) -> np.ndarray:
    """RGB image: one palette color per location, white for unlabeled free, black for blocked."""
    g = ss.sym_grid
    rgb = np.empty(g.shape + (3,), dtype=np.uint8)
    rgb[...] = FREE_COLOR
    rgb[occ] = BLOCKED_COLOR
    labeled = g != UNLABELED
    rgb[labeled] = PALETTE[g[labeled] % len(PALETTE)]
    return np.flipud(rgb)


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(gray, dtype=np.uint8), mode="L").save(path, format="PPM")


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PPM")


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)
