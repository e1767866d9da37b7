"""Rotated-squares scenes, their rasterisation, dataset files and MNIST-rot import.

Coordinates follow the grid convention: points are (row, col) pairs in the
unit square C_1 = [-1/2, 1/2]^2.  Each object is a square split into four
axis-aligned (pre-rotation) quarter squares; a square missing a quarter
simply drops one of them.  All geometry is therefore a union of convex
quads, which makes clipping exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rotmaxcnn.grid import rotate

REMOVAL_PROB = 1.0 - 0.5 ** (1.0 / 3.0)
FULL_AREA = (0.02, 0.08)
MISSING_AREA = (0.02, 0.06)
GRAYS = (0.0, 1.0 / 3.0, 2.0 / 3.0)
BACKGROUND = 1.0
MAX_OVERLAP = 0.05
OBJECT_RETRIES = 1000
SCENE_RETRIES = 100

MAGIC = b"RSD1"
# quarter q = 1..4 in (row, col) sign order (-,-), (+,-), (-,+), (+,+)
_QUARTER_SIGNS = ((-1, -1), (1, -1), (-1, 1), (1, 1))


class SceneError(RuntimeError):
    """Placement failed even after regenerating the scene repeatedly."""


class DatasetError(ValueError):
    """Malformed dataset container or input text."""


@dataclass
class SceneObject:
    kind: str  # "full_square" or "square_missing_quarter"
    area: float  # area of the full square before removal
    angle: float
    gray: float
    center: tuple[float, float]
    missing_quarter: int | None = None

    @property
    def side(self) -> float:
        return math.sqrt(self.area)

    @property
    def actual_area(self) -> float:
        return self.area * (0.75 if self.kind == "square_missing_quarter" else 1.0)

    def quads(self) -> list[np.ndarray]:
        """Convex pieces of the object, each a (4, 2) counter-clockwise polygon."""
        h = self.side / 2.0
        out = []
        for q, (sr, sc) in enumerate(_QUARTER_SIGNS, start=1):
            if q == self.missing_quarter:
                continue
            r0, r1 = sorted((0.0, sr * h))
            c0, c1 = sorted((0.0, sc * h))
            local = np.array([[r0, c0], [r1, c0], [r1, c1], [r0, c1]])
            out.append(rotate(local, self.angle) + np.asarray(self.center))
        return out

    def inside_unit_square(self) -> bool:
        pts = np.concatenate(self.quads())
        return bool(np.all(np.abs(pts) <= 0.5))


@dataclass
class Scene:
    objects: list[SceneObject]

    @property
    def label(self) -> int:
        return int(any(o.kind == "square_missing_quarter" for o in self.objects))


# --------------------------------------------------------------------------
# exact convex clipping


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise vertex order)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: the part of ``subject`` inside convex ``clipper``."""
    orient = 1.0 if polygon_area(np.asarray(clipper)) >= 0 else -1.0
    out = [(float(p[0]), float(p[1])) for p in subject]
    clip = [(float(p[0]), float(p[1])) for p in clipper]
    n = len(clip)
    for e in range(n):
        if not out:
            break
        ax, ay = clip[e]
        bx, by = clip[(e + 1) % n]

        def side(p):
            return orient * ((bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax))

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=float).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    s = sp / (sp - sq)
    return (p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1]))


def intersection_area(a: SceneObject, b: SceneObject) -> float:
    # circumscribed circles that do not meet bound the objects apart
    dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    if dist >= (a.side + b.side) / math.sqrt(2.0):
        return 0.0
    return sum(abs(polygon_area(clip_convex(qa, qb))) for qa in a.quads() for qb in b.quads())


def overlap_fraction(a: SceneObject, b: SceneObject) -> float:
    """Fraction of ``a``'s area covered by ``b``."""
    return intersection_area(a, b) / a.actual_area


# --------------------------------------------------------------------------
# sampling


def _draw_object(rng, gray: float) -> SceneObject:
    missing = rng.random() < REMOVAL_PROB
    lo, hi = MISSING_AREA if missing else FULL_AREA
    return SceneObject(
        kind="square_missing_quarter" if missing else "full_square",
        area=float(rng.uniform(lo, hi)),
        angle=float(rng.uniform(0.0, 2.0 * math.pi)),
        gray=float(gray),
        center=(0.0, 0.0),
        missing_quarter=int(rng.integers(1, 5)) if missing else None,
    )


def _place(obj: SceneObject, placed: list[SceneObject], rng) -> bool:
    for _ in range(OBJECT_RETRIES):
        obj.center = (float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.5, 0.5)))
        if not obj.inside_unit_square():
            continue
        if all(overlap_fraction(prev, obj) <= MAX_OVERLAP for prev in placed):
            return True
    return False


def sample_scene(rng: np.random.Generator) -> Scene:
    """Three squares, each independently missing a quarter with prob. 1 - 0.5^(1/3)."""
    for _ in range(SCENE_RETRIES):
        grays = rng.permutation(np.array(GRAYS))
        objects = [_draw_object(rng, g) for g in grays]
        placed: list[SceneObject] = []
        for obj in objects:
            if not _place(obj, placed, rng):
                break
            placed.append(obj)
        else:
            return Scene(objects)
    raise SceneError(f"could not place three objects in {SCENE_RETRIES} scene attempts")


# --------------------------------------------------------------------------
# rasterisation


def _inside_convex(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    orient = 1.0 if polygon_area(poly) >= 0 else -1.0
    mask = np.ones(len(pts), dtype=bool)
    for e in range(len(poly)):
        a, b = poly[e], poly[(e + 1) % len(poly)]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        mask &= orient * cross >= 0
    return mask


def rasterize(scene: Scene, lam: int, ss: int = 8) -> np.ndarray:
    """Mean of ss x ss point samples per pixel; later objects are drawn on top."""
    if ss < 1:
        raise ValueError("supersampling factor must be at least 1")
    fine = lam * ss
    c = (np.arange(fine) + 0.5) / fine - 0.5
    rr, cc = np.meshgrid(c, c, indexing="ij")
    pts = np.stack([rr.ravel(), cc.ravel()], axis=1)
    img = np.full(fine * fine, BACKGROUND)
    for obj in scene.objects:
        quads = obj.quads()
        allp = np.concatenate(quads)
        lo, hi = allp.min(axis=0), allp.max(axis=0)
        box = np.flatnonzero(
            (pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0]) & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1])
        )
        sub = pts[box]
        cover = np.zeros(len(box), dtype=bool)
        for q in quads:
            cover |= _inside_convex(q, sub)
        img[box[cover]] = obj.gray
    return img.reshape(lam, ss, lam, ss).mean(axis=(1, 3))


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # (n, lam, lam)
    labels: np.ndarray  # (n,) integers in {0, 1}

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise DatasetError(f"images must have shape (n, lam, lam), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError("one label per image required")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def lam(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def dataset_bytes(ds: Dataset) -> bytes:
    n, lam = len(ds), ds.lam
    header = MAGIC + struct.pack("<II", lam, n)
    pix = ds.images.astype("<f4").reshape(n, lam * lam)
    rec = np.empty(n, dtype=[("pix", "<f4", lam * lam), ("label", "u1")])
    rec["pix"] = pix
    rec["label"] = ds.labels
    return header + rec.tobytes()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC or len(raw) < 12:
        raise DatasetError(f"{path}: not a dataset container")
    lam, n = struct.unpack("<II", raw[4:12])
    dt = np.dtype([("pix", "<f4", lam * lam), ("label", "u1")])
    if len(raw) != 12 + n * dt.itemsize:
        raise DatasetError(f"{path}: expected {n} records of {dt.itemsize} bytes")
    rec = np.frombuffer(raw, dtype=dt, offset=12)
    return Dataset(rec["pix"].reshape(n, lam, lam).astype(np.float32), rec["label"].copy())


def generate_dataset(n: int, lam: int, seed: int, path=None, ss: int = 8) -> Dataset:
    """n scenes; item i uses its own stream default_rng([seed, i])."""
    if n < 1:
        raise ValueError("n must be at least 1")
    images = np.empty((n, lam, lam), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        scene = sample_scene(np.random.default_rng([seed, i]))
        images[i] = rasterize(scene, lam, ss)
        labels[i] = scene.label
    ds = Dataset(images, labels)
    if path is not None:
        save_dataset(ds, path)
    return ds


def load_mnist_rot(path, keep_classes=(4, 9), transpose: bool = False) -> tuple[Dataset, int]:
    """Parse MNIST-rot text rows (784 pixels then a label).

    The first class in ``keep_classes`` becomes label 0, the second label 1.
    Returns the dataset and the number of rows dropped by the class filter.
    """
    a, b = keep_classes
    images, labels = [], []
    dropped = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 785:
                raise DatasetError(f"{path}:{lineno}: expected 785 values, found {len(parts)}")
            try:
                vals = np.array(parts, dtype=float)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            label = vals[-1]
            if label != int(label):
                raise DatasetError(f"{path}:{lineno}: non-integer label {parts[-1]!r}")
            pix = vals[:784]
            if np.any(pix < 0) or np.any(pix > 1) or not np.all(np.isfinite(pix)):
                raise DatasetError(f"{path}:{lineno}: pixel values must lie in [0, 1]")
            if int(label) not in (a, b):
                dropped += 1
                continue
            img = pix.reshape(28, 28)
            images.append(img.T if transpose else img)
            labels.append(0 if int(label) == a else 1)
    ds = Dataset(np.array(images, dtype=np.float32).reshape(-1, 28, 28), np.array(labels, dtype=np.uint8))
    return ds, dropped
