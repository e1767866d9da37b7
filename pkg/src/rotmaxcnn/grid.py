"""Image grids on G_lambda and the rotation / padding operators on them.

Images are numpy arrays of shape ``(lam, lam)`` (or ``(n, lam, lam)`` for a
batch).  Array index ``[i-1, j-1]`` holds pixel ``(i, j)``, whose centre in the
unit square ``[-1/2, 1/2]^2`` is::

    ((i - 1/2)/lam - 1/2, (j - 1/2)/lam - 1/2)

so the first coordinate runs along rows.  Row-major pixel enumeration is the
order used for every tie-break in this package.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np


class GridError(ValueError):
    """Raised for out-of-range pixel indices or malformed grids."""


def rotation_matrix(alpha: float) -> np.ndarray:
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s], [s, c]])


def rotate(points: np.ndarray, alpha: float) -> np.ndarray:
    """Rotate points (..., 2) counter-clockwise about the origin."""
    return np.asarray(points, dtype=float) @ rotation_matrix(alpha).T


def pixel_to_coord(i: int, j: int, lam: int) -> tuple[float, float]:
    if lam < 1 or not (1 <= i <= lam and 1 <= j <= lam):
        raise GridError(f"pixel ({i}, {j}) outside a {lam}x{lam} grid")
    return ((i - 0.5) / lam - 0.5, (j - 0.5) / lam - 0.5)


def grid_coords(lam: int) -> np.ndarray:
    """All points of G_lam as an array (lam, lam, 2), indexed like the image."""
    c = (np.arange(1, lam + 1) - 0.5) / lam - 0.5
    u, v = np.meshgrid(c, c, indexing="ij")
    return np.stack([u, v], axis=-1)


def rot90(x: np.ndarray, k: int = 1) -> np.ndarray:
    """Rotate by ``k`` quarter turns: new(i, j) = old(lam - j + 1, i).

    Works on the last two axes, so batches and channel-first stacks pass
    through unchanged in their leading dimensions.
    """
    x = np.asarray(x)
    k %= 4
    for _ in range(k):
        # new[i, j] = old[lam-1-j, i]  ==  transpose of the row-flipped array
        x = np.swapaxes(x[..., ::-1, :], -1, -2)
    return x


def zero_pad(x: np.ndarray, z: int) -> np.ndarray:
    if z < 0:
        raise GridError("padding width must be non-negative")
    x = np.asarray(x)
    pad = [(0, 0)] * (x.ndim - 2) + [(z, z), (z, z)]
    return np.pad(x, pad)


def pad_width(lam: int) -> int:
    """Smallest symmetric padding so that any rotation keeps the image inside."""
    if lam < 1:
        raise GridError("resolution must be positive")
    return math.ceil((math.sqrt(2.0) * lam - lam) / 2.0)


def _nn_rotation_map(alpha: float, lam: int) -> np.ndarray:
    pts = grid_coords(lam).reshape(-1, 2)
    target = rotate(pts, alpha)
    # Nearest grid point per axis; the grid is a product of 1-D grids, so the
    # Euclidean argmin splits into per-axis nearest points.  Ties (exact
    # half-way values) round towards the smaller index.
    m = (target + 0.5) * lam + 0.5  # continuous 1-based pixel index
    idx = np.ceil(m - 0.5).astype(int)
    # exact halves go down: m = k + 0.5 -> ceil(k) = k, the smaller index
    idx = np.clip(idx, 1, lam)
    return (idx[:, 0] - 1) * lam + (idx[:, 1] - 1)


@lru_cache(maxsize=256)
def _cached_map(alpha: float, lam: int) -> np.ndarray:
    out = _nn_rotation_map(alpha, lam)
    out.setflags(write=False)
    return out


def nn_rotation_map(alpha: float, lam: int) -> np.ndarray:
    """Flat row-major source index for every target pixel of G_lam.

    ``out[p]`` is the index of the grid point nearest (Euclidean) to the
    rotation of point ``p`` by ``alpha``; ties go to the smaller index.
    """
    return _cached_map(float(alpha), int(lam))


def rotate_image(x: np.ndarray, alpha: float) -> np.ndarray:
    """Nearest-neighbour rotation of a zero-padded image.

    The output has resolution ``lam + 2 * pad_width(lam)``.  Leading batch
    dimensions are preserved.
    """
    x = np.asarray(x)
    lam = x.shape[-1]
    padded = zero_pad(x, pad_width(lam))
    lp = padded.shape[-1]
    src = nn_rotation_map(alpha, lp)
    flat = padded.reshape(padded.shape[:-2] + (lp * lp,))
    return flat[..., src].reshape(padded.shape)


def rotation_angles(t: int) -> np.ndarray:
    """The t equispaced angles 2*pi*(i-1)/t, i = 1..t."""
    return 2.0 * np.pi * np.arange(t) / t
