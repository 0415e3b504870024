"""Synthetic sign-domain generator and PNG I/O.

Twelve desk-scale sign classes rendered procedurally on a 32x32 canvas: one
octagonal stop-like sign, several circular speed-limit-like signs with
numeral glyphs, plus triangle/diamond/circle classes for variety.  Every
rendered sample carries an alpha mask covering exactly the sign polygon.
Generation is a pure function of (specs, ranges, seed).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from . import transforms
from .transforms import SignImage, TransformRanges

CANVAS = 32
SUPERSAMPLE = 4
MANIFEST_FORMAT = "dataset-manifest-v1"

# 3x5 bitmap glyphs, scaled up at render time
_FONT = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "011", "001", "111"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
    "!": ("1", "1", "1", "0", "1"),
    "^": ("010", "111", "010", "010", "010"),
    "/": ("001", "001", "010", "100", "100"),
    "-": ("000", "000", "111", "000", "000"),
}


@dataclass(frozen=True)
class SignSpec:
    class_id: int
    name: str
    shape: str  # octagon | circle | triangle | triangle_down | diamond
    fill_color: tuple
    border_color: tuple
    glyph: str = ""
    glyph_color: tuple = (0.1, 0.1, 0.1)
    canonical_size: int = CANVAS


DEFAULT_SIGNS = (
    SignSpec(0, "stop", "octagon", (0.72, 0.05, 0.08), (0.95, 0.95, 0.95), "-", (0.95, 0.95, 0.95)),
    SignSpec(1, "speed_20", "circle", (0.96, 0.96, 0.96), (0.75, 0.05, 0.08), "20"),
    SignSpec(2, "speed_30", "circle", (0.96, 0.96, 0.96), (0.75, 0.05, 0.08), "30"),
    SignSpec(3, "speed_50", "circle", (0.96, 0.96, 0.96), (0.75, 0.05, 0.08), "50"),
    SignSpec(4, "speed_60", "circle", (0.96, 0.96, 0.96), (0.75, 0.05, 0.08), "60"),
    SignSpec(5, "speed_80", "circle", (0.96, 0.96, 0.96), (0.75, 0.05, 0.08), "80"),
    SignSpec(6, "no_entry", "circle", (0.78, 0.06, 0.10), (0.92, 0.92, 0.92), "-", (0.95, 0.95, 0.95)),
    SignSpec(7, "yield", "triangle_down", (0.96, 0.96, 0.96), (0.78, 0.06, 0.10)),
    SignSpec(8, "warning", "triangle", (0.98, 0.80, 0.10), (0.75, 0.08, 0.08), "!"),
    SignSpec(9, "priority", "diamond", (0.98, 0.83, 0.15), (0.95, 0.95, 0.95)),
    SignSpec(10, "ahead", "circle", (0.10, 0.25, 0.75), (0.92, 0.92, 0.92), "^", (0.95, 0.95, 0.95)),
    SignSpec(11, "end_limits", "circle", (0.93, 0.93, 0.93), (0.55, 0.55, 0.55), "/", (0.35, 0.35, 0.35)),
)

STOP_CLASS = 0
SPEED60_CLASS = 4


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, 3) float32
    labels: np.ndarray  # (N,) int64
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")


def _polygon_vertices(shape: str, n_circle: int = 64) -> np.ndarray:
    """Convex polygon in unit coordinates centered at (0.5, 0.5)."""
    if shape == "octagon":
        ang = np.deg2rad(np.arange(8) * 45.0 + 22.5)
        r = 0.5 / np.cos(np.deg2rad(22.5))  # flat-topped octagon touching the canvas
        pts = np.stack([0.5 + r * np.cos(ang), 0.5 + r * np.sin(ang)], axis=1)
        return np.clip(pts, 0.02, 0.98)
    if shape == "circle":
        ang = np.linspace(0, 2 * np.pi, n_circle, endpoint=False)
        return np.stack([0.5 + 0.48 * np.cos(ang), 0.5 + 0.48 * np.sin(ang)], axis=1)
    if shape == "triangle":
        return np.array([(0.5, 0.03), (0.97, 0.92), (0.03, 0.92)])
    if shape == "triangle_down":
        return np.array([(0.03, 0.08), (0.97, 0.08), (0.5, 0.97)])
    if shape == "diamond":
        return np.array([(0.5, 0.02), (0.98, 0.5), (0.5, 0.98), (0.02, 0.5)])
    raise ValueError(f"unknown shape {shape!r}")


def _inside_convex(points: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Vectorized point-in-convex-polygon test (vertices in consistent order)."""
    inside = np.ones(len(points), dtype=bool)
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        cross = (b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0])
        inside &= cross >= 0
    return inside


def _shrink(verts: np.ndarray, factor: float) -> np.ndarray:
    center = verts.mean(axis=0)
    return center + (verts - center) * factor


def _glyph_bitmap(text: str) -> np.ndarray:
    cols = []
    for i, ch in enumerate(text):
        if ch not in _FONT:
            raise ValueError(f"no glyph for character {ch!r}")
        bm = np.array([[int(c) for c in row] for row in _FONT[ch]], dtype=np.uint8)
        if i:
            cols.append(np.zeros((5, 1), dtype=np.uint8))
        cols.append(bm)
    return np.concatenate(cols, axis=1)


def render_canonical(spec: SignSpec) -> SignImage:
    """Anti-aliased canonical render; background is neutral gray under alpha 0."""
    size = spec.canonical_size
    ss = size * SUPERSAMPLE
    ys, xs = np.meshgrid((np.arange(ss) + 0.5) / ss, (np.arange(ss) + 0.5) / ss, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)

    verts = _polygon_vertices(spec.shape)
    # vertex order must be counter-clockwise in (x, y down) coords for the sign test
    area = np.sum(np.cross(verts, np.roll(verts, -1, axis=0)))
    if area < 0:
        verts = verts[::-1]
    outer = _inside_convex(pts, verts).reshape(ss, ss)
    inner = _inside_convex(pts, _shrink(verts, 0.82)).reshape(ss, ss)

    hi = np.empty((ss, ss, 3), dtype=np.float32)
    hi[:] = 0.5
    hi[outer] = spec.border_color
    hi[inner] = spec.fill_color

    if spec.glyph:
        bm = _glyph_bitmap(spec.glyph)
        gh, gw = bm.shape
        scale = max(1, int(ss * 0.42 / gh))
        big = np.kron(bm, np.ones((scale, scale), dtype=np.uint8))
        top = (ss - big.shape[0]) // 2
        left = (ss - big.shape[1]) // 2
        region = hi[top : top + big.shape[0], left : left + big.shape[1]]
        glyph_mask = (big > 0) & inner[top : top + big.shape[0], left : left + big.shape[1]]
        region[glyph_mask] = spec.glyph_color

    alpha_hi = outer.astype(np.float32)
    # box-filter downsample for soft edges
    rgb = hi.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    alpha = alpha_hi.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    return SignImage(rgb=rgb.astype(np.float32), alpha=alpha.astype(np.float32))


def generate(
    specs: tuple,
    per_class: int,
    ranges: TransformRanges,
    seed: int,
    split: str = "train",
) -> LabeledDataset:
    """Render per_class transformed samples of every spec onto noise backgrounds."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for spec in specs:
        canonical = render_canonical(spec)
        params = transforms.sample_many(ranges, rng, per_class)
        images.append(transforms.apply_many(canonical, params))
        labels.extend([spec.class_id] * per_class)
    return LabeledDataset(
        images=np.concatenate(images, axis=0),
        labels=np.asarray(labels, dtype=np.int64),
        split=split,
    )


def ood_images(n: int, seed: int, size: int = CANVAS) -> np.ndarray:
    """Procedural out-of-domain textures: noise, gradients, stripes, random blobs."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size, 3), dtype=np.float32)
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    for i in range(n):
        kind = rng.integers(0, 4)
        if kind == 0:
            img = rng.random((size, size, 3), dtype=np.float32)
        elif kind == 1:
            c0, c1 = rng.random(3), rng.random(3)
            t = (xs * rng.uniform(-1, 1) + ys * rng.uniform(-1, 1) + 1) / 2
            img = c0[None, None] * t[..., None] + c1[None, None] * (1 - t[..., None])
        elif kind == 2:
            freq = rng.uniform(2, 10)
            phase = rng.uniform(0, np.pi)
            stripe = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xs * np.cos(phase) + ys * np.sin(phase)))
            img = stripe[..., None] * rng.random(3)[None, None]
        else:
            img = np.full((size, size, 3), rng.random(3), dtype=np.float32)
            for _ in range(rng.integers(2, 6)):
                cx, cy, r = rng.random(), rng.random(), rng.uniform(0.08, 0.3)
                blob = (xs - cx) ** 2 + (ys - cy) ** 2 < r**2
                img[blob] = rng.random(3)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def save_image(image: SignImage, path: str) -> None:
    """8-bit PNG; alpha channel included when present."""
    rgb = np.rint(np.clip(image.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    if image.alpha is not None:
        a = np.rint(np.clip(image.alpha, 0.0, 1.0) * 255.0).astype(np.uint8)
        PILImage.fromarray(np.dstack([rgb, a]), mode="RGBA").save(path)
    else:
        PILImage.fromarray(rgb, mode="RGB").save(path)


def load_image(path: str) -> SignImage:
    try:
        with PILImage.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except Exception as exc:
        raise IOError(f"cannot load image {path}: {exc}") from exc
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise IOError(f"{path}: expected an RGB or RGBA image, got shape {arr.shape}")
    rgb = arr[..., :3].astype(np.float32) / 255.0
    alpha = arr[..., 3].astype(np.float32) / 255.0 if arr.shape[2] == 4 else None
    return SignImage(rgb=rgb, alpha=alpha)


def save_dataset(dataset: LabeledDataset, root: str) -> None:
    """class_<id>/img_<n>.png layout plus a versioned manifest.csv."""
    os.makedirs(root, exist_ok=True)
    rows = []
    counters: dict[int, int] = {}
    for img, label in zip(dataset.images, dataset.labels):
        n = counters.get(int(label), 0)
        counters[int(label)] = n + 1
        rel = os.path.join(f"class_{int(label)}", f"img_{n}.png")
        os.makedirs(os.path.join(root, f"class_{int(label)}"), exist_ok=True)
        save_image(SignImage(rgb=img), os.path.join(root, rel))
        rows.append((rel, int(label), dataset.split))
    with open(os.path.join(root, "manifest.csv"), "w", newline="") as fh:
        fh.write(f"# format: {MANIFEST_FORMAT}\n")
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        writer.writerows(rows)


def load_dataset(root: str) -> LabeledDataset:
    manifest = os.path.join(root, "manifest.csv")
    with open(manifest, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# format:"):
            raise IOError(f"{manifest}: missing format tag")
        reader = csv.DictReader(fh)
        images, labels, splits = [], [], []
        for row in reader:
            images.append(load_image(os.path.join(root, row["path"])).rgb)
            labels.append(int(row["label"]))
            splits.append(row["split"])
    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        split=splits[0] if splits else "train",
    )
