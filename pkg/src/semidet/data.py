"""Synthetic multi-class detection scenes, dataset splits, COCO interop.

Scenes are 64x64 RGB images of parametric shape families (one family per
class) over a cluttered background.  Pixel values are quantized to the
255-level grid so PNG caching is lossless.  All randomness flows through
explicit numpy Generators; per-image generators are derived from
(seed, image index) so generation is order-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import Box

# Instance counts of the long-tail 12-class profile (most to least common).
LONG_TAIL_COUNTS = (352, 201, 161, 122, 137, 144, 117, 60, 42, 31, 31, 15)

CLASS_NAMES_12 = (
    "disc", "ring", "cross", "triangle", "bar", "star",
    "diamond", "frame", "tee", "crescent", "checker", "ell",
)

# Distinguishable fill colors, one per shape family.
_PALETTE = np.array([
    [0.85, 0.25, 0.20], [0.95, 0.80, 0.20], [0.30, 0.45, 0.90],
    [0.90, 0.45, 0.75], [0.25, 0.80, 0.80], [0.95, 0.55, 0.15],
    [0.55, 0.30, 0.85], [0.70, 0.85, 0.30], [0.90, 0.90, 0.85],
    [0.20, 0.65, 0.35], [0.60, 0.60, 0.95], [0.80, 0.35, 0.40],
])


@dataclass(frozen=True)
class SceneSpec:
    """Declarative description of the synthetic scene distribution."""

    image_size: int = 64
    class_count: int = 3
    instances_per_image: tuple[int, int] = (1, 6)
    class_frequencies: tuple[float, ...] | None = None  # None = uniform
    clutter_density: float = 10.0
    color_jitter: float = 0.15
    size_range: tuple[float, float] = (6.0, 13.0)

    def __post_init__(self):
        if not 1 <= self.class_count <= 12:
            raise ValueError("class_count must be in 1..12")
        if self.class_frequencies is not None:
            freqs = np.asarray(self.class_frequencies, dtype=np.float64)
            if len(freqs) != self.class_count:
                raise ValueError("class_frequencies length must equal class_count")
            if np.any(freqs <= 0):
                raise ValueError("every class needs nonzero probability")
            if not math.isclose(float(freqs.sum()), 1.0, rel_tol=0, abs_tol=1e-9):
                raise ValueError("class frequencies must sum to 1")

    @property
    def frequencies(self) -> np.ndarray:
        if self.class_frequencies is None:
            return np.full(self.class_count, 1.0 / self.class_count)
        return np.asarray(self.class_frequencies, dtype=np.float64)

    @property
    def class_names(self) -> tuple[str, ...]:
        return CLASS_NAMES_12[: self.class_count]


def three_class_spec(**overrides) -> SceneSpec:
    # Imbalanced on purpose: the rare class is where extra labeled or
    # pseudo-labeled data pays off, mirroring real field-survey datasets.
    return replace(SceneSpec(class_count=3,
                             class_frequencies=(0.70, 0.22, 0.08)),
                   **overrides)


def twelve_class_spec(**overrides) -> SceneSpec:
    counts = np.array(LONG_TAIL_COUNTS, dtype=np.float64)
    freqs = tuple(counts / counts.sum())
    return replace(SceneSpec(class_count=12, class_frequencies=freqs), **overrides)


# ---------------------------------------------------------------------
# shape rendering
# ---------------------------------------------------------------------

def _shape_mask(family: int, xx: np.ndarray, yy: np.ndarray, r: float) -> np.ndarray:
    """Boolean mask of one shape family on rotated, centered coordinates."""
    ax, ay = np.abs(xx), np.abs(yy)
    if family == 0:  # disc
        return xx * xx + yy * yy <= r * r
    if family == 1:  # ring
        d2 = xx * xx + yy * yy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if family == 2:  # cross
        return ((ax <= 0.35 * r) & (ay <= r)) | ((ay <= 0.35 * r) & (ax <= r))
    if family == 3:  # triangle, apex up
        return (yy <= 0.8 * r) & (yy >= -r) & (ax <= 0.9 * (yy + r) / 1.8)
    if family == 4:  # bar
        return (ax <= r) & (ay <= 0.35 * r)
    if family == 5:  # four-point star
        return np.sqrt(ax) + np.sqrt(ay) <= math.sqrt(r)
    if family == 6:  # diamond
        return ax + ay <= r
    if family == 7:  # square frame
        m = np.maximum(ax, ay)
        return (m <= r) & (m >= 0.55 * r)
    if family == 8:  # tee
        return ((yy <= -0.3 * r) & (yy >= -r) & (ax <= r)) | \
               ((ax <= 0.3 * r) & (yy <= r) & (yy >= -r))
    if family == 9:  # crescent
        d2 = xx * xx + yy * yy
        dx = xx - 0.55 * r
        return (d2 <= r * r) & (dx * dx + yy * yy >= (0.75 * r) ** 2)
    if family == 10:  # checker quadrants
        return (np.maximum(ax, ay) <= r) & (xx * yy >= 0)
    if family == 11:  # ell
        return (ax <= r) & (ay <= r) & ((xx <= -0.25 * r) | (yy >= 0.25 * r))
    raise ValueError(f"unknown shape family {family}")


def _render_shape(family: int, cx: float, cy: float, r: float, angle: float,
                  size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    x0 = xs + 0.5 - cx
    y0 = ys + 0.5 - cy
    c, s = math.cos(angle), math.sin(angle)
    xx = c * x0 + s * y0
    yy = -s * x0 + c * y0
    return _shape_mask(family, xx, yy, r)


def _tight_box(mask: np.ndarray, class_id: int) -> Box | None:
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        return None
    y0, y1 = np.argmax(rows), len(rows) - np.argmax(rows[::-1])
    x0, x1 = np.argmax(cols), len(cols) - np.argmax(cols[::-1])
    return Box(float(x0), float(y0), float(x1), float(y1), class_id)


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[Box]]:
    """Render one scene; returns (HxWx3 float image in [0,1], tight boxes).

    Shape masks never overlap each other (placement is rejection-sampled),
    so every returned box is tight around visible shape pixels; boxes may
    still overlap.
    """
    n = spec.image_size
    ys, xs = np.mgrid[0:n, 0:n]

    # Background: muted field tone with a smooth gradient and speckle.
    base = np.array([0.32, 0.38, 0.24])
    img = np.empty((n, n, 3))
    gdir = rng.normal(size=2)
    grad = (gdir[0] * xs + gdir[1] * ys) / n * 0.06
    for ch in range(3):
        img[..., ch] = base[ch] + grad
    img += rng.normal(scale=0.02, size=(n, n, 3))

    # Clutter: distractor blobs in off-palette earth tones.
    n_clutter = int(rng.poisson(spec.clutter_density))
    for _ in range(n_clutter):
        cx, cy = rng.uniform(0, n, size=2)
        rx, ry = rng.uniform(1.0, 3.5, size=2)
        ang = rng.uniform(0, math.pi)
        c, s = math.cos(ang), math.sin(ang)
        x0 = xs + 0.5 - cx
        y0 = ys + 0.5 - cy
        u = (c * x0 + s * y0) / rx
        v = (-s * x0 + c * y0) / ry
        blob = u * u + v * v <= 1.0
        tone = np.array([0.30, 0.30, 0.22]) + rng.uniform(-0.10, 0.14, size=3)
        img[blob] = tone

    # Shapes: one class sample per instance, non-intersecting masks.
    k = int(rng.integers(spec.instances_per_image[0], spec.instances_per_image[1] + 1))
    occupied = np.zeros((n, n), dtype=bool)
    boxes: list[Box] = []
    for _ in range(k):
        cls = int(rng.choice(spec.class_count, p=spec.frequencies))
        placed = None
        for _attempt in range(60):
            r = rng.uniform(*spec.size_range)
            margin = r + 1.0
            cx = rng.uniform(margin, n - margin)
            cy = rng.uniform(margin, n - margin)
            angle = rng.uniform(0, 2 * math.pi)
            mask = _render_shape(cls, cx, cy, r, angle, n)
            if mask.any() and not (mask & occupied).any():
                placed = mask
                break
        if placed is None:
            placed = mask & ~occupied  # crowded scene: keep visible part
        occupied |= placed
        color = np.clip(_PALETTE[cls] + rng.uniform(
            -spec.color_jitter, spec.color_jitter, size=3), 0.0, 1.0)
        img[placed] = color
        box = _tight_box(placed, cls)
        if box is not None:
            boxes.append(box)

    img = np.clip(img, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0  # lossless under 8-bit PNG caching
    return img, boxes


@dataclass
class SceneDataset:
    """In-memory dataset: parallel per-image lists keyed by integer ids."""

    spec: SceneSpec
    ids: list[int]
    images: dict[int, np.ndarray]
    boxes: dict[int, list[Box]]

    @property
    def class_count(self) -> int:
        return self.spec.class_count


def generate_dataset(spec: SceneSpec, count: int, seed: int) -> SceneDataset:
    ids = list(range(count))
    images: dict[int, np.ndarray] = {}
    boxes: dict[int, list[Box]] = {}
    for i in ids:
        rng = np.random.default_rng((seed, i))
        img, bxs = generate_scene(spec, rng)
        images[i] = img
        boxes[i] = bxs
    return SceneDataset(spec, ids, images, boxes)


# ---------------------------------------------------------------------
# splits and label fractions
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    labeled: tuple[int, ...] = ()
    label_fraction: float = 0.0

    @property
    def unlabeled(self) -> tuple[int, ...]:
        labeled = set(self.labeled)
        return tuple(i for i in self.train if i not in labeled)


def split_dataset(ids: list[int], ratios: tuple[float, float, float],
                  seed: int) -> DatasetSplit:
    """Seeded shuffle, then a contiguous train/val/test cut.

    Val and test sizes round up; train takes the remainder (848 ids at
    65/20/15 therefore give 550/170/128).
    """
    if not ids:
        raise ValueError("empty id list")
    if not math.isclose(sum(ratios), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError("ratios must sum to 1")
    n = len(ids)
    n_val = math.ceil(ratios[1] * n)
    n_test = math.ceil(ratios[2] * n)
    n_train = n - n_val - n_test
    if n_train <= 0:
        raise ValueError("ratios leave no training images")
    perm = list(np.random.default_rng(seed).permutation(ids))
    return DatasetSplit(
        train=tuple(int(i) for i in perm[:n_train]),
        val=tuple(int(i) for i in perm[n_train:n_train + n_val]),
        test=tuple(int(i) for i in perm[n_train + n_val:]),
    )


def _stratified_order(perm: list[int], boxes, class_count: int) -> list[int]:
    """Reorder ``perm`` so every prefix holds a roughly proportional share of
    each class's instances (proportional stratification).

    Greedy: track what fraction of each class's total instances the prefix
    already covers, and repeatedly append the earliest remaining image that
    contains the least-covered class.  Ties and images are resolved in
    permutation order, so the result is a pure function of ``perm``.
    """
    totals = np.zeros(class_count)
    for i in perm:
        for b in boxes[i]:
            totals[b.class_id] += 1
    totals = np.maximum(totals, 1.0)
    counts = np.zeros(class_count)
    remaining = list(perm)
    ordered: list[int] = []
    while remaining:
        target = int(np.argmin(counts / totals))
        pick = next((i for i in remaining
                     if any(b.class_id == target for b in boxes[i])),
                    remaining[0])
        remaining.remove(pick)
        ordered.append(pick)
        for b in boxes[pick]:
            counts[b.class_id] += 1
    return ordered


def sample_label_fraction(split: DatasetSplit, fraction: float, seed: int,
                          dataset: SceneDataset | None = None) -> DatasetSplit:
    """Labeled subset = prefix of one seeded ordering of the train ids.

    Prefix sampling makes fraction sets nest under a fixed seed, so sweep
    comparisons across fractions are paired.  When ``dataset`` is given, the
    ordering is class-stratified: every prefix covers a proportional share of
    each class's instances, so rare classes are represented even in small
    labeled sets instead of being left to sampling luck.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n_labeled = round(fraction * len(split.train))
    if n_labeled == 0:
        raise ValueError(f"fraction {fraction} yields zero labeled images")
    perm = list(np.random.default_rng(seed).permutation(list(split.train)))
    if dataset is not None:
        perm = _stratified_order(perm, dataset.boxes, dataset.class_count)
    return replace(split,
                   labeled=tuple(int(i) for i in perm[:n_labeled]),
                   label_fraction=fraction)


# ---------------------------------------------------------------------
# COCO-JSON interop
# ---------------------------------------------------------------------

@dataclass
class CocoDocument:
    images: list[dict]
    annotations: list[dict]
    categories: list[dict]


def dataset_to_coco(dataset: SceneDataset) -> CocoDocument:
    size = dataset.spec.image_size
    images = [{"id": i, "file_name": f"{i:06d}.png", "width": size, "height": size}
              for i in dataset.ids]
    categories = [{"id": c + 1, "name": name}
                  for c, name in enumerate(dataset.spec.class_names)]
    annotations = []
    ann_id = 1
    for i in dataset.ids:
        for b in dataset.boxes[i]:
            x, y, w, h = (round(v, 2) for v in b.to_xywh())
            annotations.append({
                "id": ann_id, "image_id": i, "category_id": b.class_id + 1,
                "bbox": [x, y, w, h], "area": round(w * h, 2), "iscrowd": 0,
            })
            ann_id += 1
    return CocoDocument(images, annotations, categories)


def coco_boxes_by_image(doc: CocoDocument) -> dict[int, list[Box]]:
    out: dict[int, list[Box]] = {img["id"]: [] for img in doc.images}
    for a in doc.annotations:
        x, y, w, h = a["bbox"]
        out[a["image_id"]].append(Box(x, y, x + w, y + h, a["category_id"] - 1))
    return out


def write_coco(doc: CocoDocument, path) -> None:
    """Canonical serialization: sorted keys, fixed 2-decimal geometry."""
    payload = {
        "images": sorted(doc.images, key=lambda d: d["id"]),
        "annotations": [
            {**a, "bbox": [round(float(v), 2) for v in a["bbox"]],
             "area": round(float(a["area"]), 2)}
            for a in sorted(doc.annotations, key=lambda d: d["id"])
        ],
        "categories": sorted(doc.categories, key=lambda d: d["id"]),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, separators=(",", ":"))


def read_coco(path) -> CocoDocument:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise ValueError(f"COCO document missing {key!r}")
    doc = CocoDocument(payload["images"], payload["annotations"], payload["categories"])
    image_ids = {img["id"] for img in doc.images}
    category_ids = {c["id"] for c in doc.categories}
    for a in doc.annotations:
        if a["image_id"] not in image_ids:
            raise ValueError(f"annotation {a['id']} references missing image {a['image_id']}")
        if a["category_id"] not in category_ids:
            raise ValueError(f"annotation {a['id']} references missing category {a['category_id']}")
        if a["bbox"][2] <= 0 or a["bbox"][3] <= 0:
            raise ValueError(f"annotation {a['id']} has non-positive bbox extents")
    return doc


def write_image_cache(dataset: SceneDataset, directory, fmt: str = "npz") -> None:
    """Cache images as lossless PNG files or one raw-float npz archive."""
    import pathlib

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if fmt == "npz":
        np.savez_compressed(directory / "images.npz",
                            **{f"{i:06d}": dataset.images[i] for i in dataset.ids})
    elif fmt == "png":
        from PIL import Image

        for i in dataset.ids:
            arr = np.round(dataset.images[i] * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(directory / f"{i:06d}.png")
    else:
        raise ValueError(f"unknown image cache format {fmt!r}")
