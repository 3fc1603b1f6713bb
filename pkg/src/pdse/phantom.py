"""Synthetic phantom-lesion dataset generator.

Images are smooth noise backgrounds (soft-tissue HU band) with one to three
elliptical lesions whose intensity band identifies the lesion class. The
class HU ranges are pairwise disjoint with at least a 190 HU gap, and all
sit at least 150 HU away from the background band, so classes are
distinguishable by construction. Generation is fully driven by one seeded
generator: a fixed seed yields byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (HU_MAX, HU_MIN, HU_OFFSET, LesionAnnotation, _resize_bilinear,
                   split_dataset, write_annotations_csv, write_manifest, write_slice_png)
from .metrics import LESION_TYPES


@dataclass
class ClassAppearance:
    """Appearance band for one lesion class."""

    hu_range: tuple          # lesion interior intensity (Hounsfield units)
    semi_axis_range: tuple   # ellipse semi-axes in pixels
    texture_hu: float        # interior speckle amplitude


# Intensity ladder spanning the clipped window; gaps >= 190 HU between
# consecutive classes and >= 150 HU from the background band around 0.
DEFAULT_APPEARANCE = {
    1: ClassAppearance((-860, -740), (7.0, 16.0), 20.0),   # lung
    2: ClassAppearance((-560, -440), (7.0, 16.0), 25.0),   # abdomen
    3: ClassAppearance((-310, -190), (7.0, 16.0), 20.0),   # mediastinum
    4: ClassAppearance((240, 360), (7.0, 16.0), 25.0),     # liver
    5: ClassAppearance((490, 610), (7.0, 16.0), 20.0),     # pelvis
    6: ClassAppearance((740, 860), (7.0, 16.0), 30.0),     # soft tissue
    7: ClassAppearance((1090, 1210), (7.0, 16.0), 25.0),   # kidney
    8: ClassAppearance((1540, 1660), (7.0, 16.0), 35.0),   # bone
    9: ClassAppearance((2240, 2360), (7.0, 16.0), 40.0),   # other
}


@dataclass
class PhantomSpec:
    """Generation recipe; fixed seed implies a byte-identical dataset."""

    count: int
    size: int = 128
    seed: int = 0
    lesions_min: int = 1
    lesions_max: int = 3
    background_mean_hu: float = 0.0
    background_noise_hu: float = 40.0
    background_cells: int = 8      # coarse noise grid resolution per side
    fine_noise_hu: float = 12.0
    edge_width: float = 1.5        # soft ellipse boundary, pixels
    aspect_range: tuple = (0.6, 1.7)
    appearance: dict = field(default_factory=lambda: dict(DEFAULT_APPEARANCE))

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("phantom count must be non-negative")
        if self.size % 128 != 0:
            raise ValueError("phantom size must be divisible by 128")
        if not 1 <= self.lesions_min <= self.lesions_max:
            raise ValueError("lesion count range must satisfy 1 <= min <= max")
        if set(self.appearance) != set(range(1, len(LESION_TYPES) + 1)):
            raise ValueError("appearance table must cover class ids 1..9")
        ordered = sorted(self.appearance.values(), key=lambda a: a.hu_range[0])
        for lo, hi in zip(ordered[:-1], ordered[1:]):
            if hi.hu_range[0] <= lo.hu_range[1]:
                raise ValueError("class HU ranges must be pairwise disjoint")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "appearance" in d:
            d["appearance"] = {
                int(k): ClassAppearance(tuple(v["hu_range"]), tuple(v["semi_axis_range"]), float(v["texture_hu"]))
                for k, v in d["appearance"].items()
            }
        return cls(**d)


def _background(rng: np.random.Generator, size: int, spec: PhantomSpec) -> np.ndarray:
    cells = spec.background_cells + 2
    coarse = rng.normal(0.0, 1.0, size=(cells, cells))
    smooth = _resize_bilinear(coarse, size, size)
    fine = rng.normal(0.0, spec.fine_noise_hu, size=(size, size))
    return spec.background_mean_hu + spec.background_noise_hu * smooth + fine


def _draw_lesion(rng: np.random.Generator, hu: np.ndarray, spec: PhantomSpec,
                 class_id: int, existing: list) -> LesionAnnotation | None:
    size = hu.shape[0]
    app = spec.appearance[class_id]
    for _ in range(60):
        a = rng.uniform(*app.semi_axis_range)
        aspect = rng.uniform(*spec.aspect_range)
        b = float(np.clip(a * aspect, app.semi_axis_range[0] * 0.8, app.semi_axis_range[1] * 1.2))
        margin_x = a + 3.0
        margin_y = b + 3.0
        if 2 * margin_x >= size or 2 * margin_y >= size:
            continue
        cx = rng.uniform(margin_x, size - margin_x)
        cy = rng.uniform(margin_y, size - margin_y)
        box = (cx - a, cy - b, cx + a, cy + b)
        if any(_box_iou(box, other.box) > 0.05 for other in existing):
            continue

        yy, xx = np.mgrid[0:size, 0:size]
        r = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
        alpha = np.clip((1.0 - r) * (min(a, b) / spec.edge_width), 0.0, 1.0)
        intensity = rng.uniform(*app.hu_range)
        speckle = rng.normal(0.0, app.texture_hu, size=hu.shape)
        hu *= (1.0 - alpha)
        hu += alpha * (intensity + speckle)
        return LesionAnnotation(box=box, class_id=class_id)
    return None


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def generate_phantoms(spec: PhantomSpec, out_dir) -> dict:
    """Write images, annotations.csv, and manifest.json; returns the manifest.

    Lesion classes are dealt from a shuffled balanced deck, keeping per-class
    counts within one of uniform. Images below ten are all assigned to the
    train split (the 70/15/15 split needs at least ten ids).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    lesion_counts = rng.integers(spec.lesions_min, spec.lesions_max + 1, size=spec.count)
    total = int(lesion_counts.sum())
    n_classes = len(LESION_TYPES)
    deck = np.tile(np.arange(1, n_classes + 1), math.ceil(total / n_classes) if total else 1)
    rng.shuffle(deck)
    deck_pos = 0

    entries = []
    annotations_by_image: dict = {}
    for idx in range(spec.count):
        image_id = f"phantom_{idx:05d}"
        hu = _background(rng, spec.size, spec)
        annotations = []
        for _ in range(int(lesion_counts[idx])):
            class_id = int(deck[deck_pos])
            deck_pos += 1
            ann = _draw_lesion(rng, hu, spec, class_id, annotations)
            if ann is not None:
                annotations.append(ann)
        raw = np.clip(np.rint(np.clip(hu, HU_MIN, HU_MAX)) + HU_OFFSET, 0, 65535).astype(np.uint16)
        path = f"{image_id}.png"
        write_slice_png(out_dir / path, raw)
        entries.append({"image_id": image_id, "path": path})
        annotations_by_image[image_id] = annotations

    ids = [e["image_id"] for e in entries]
    if len(ids) >= 10:
        train, val, test = split_dataset(ids, spec.seed)
    else:
        train, val, test = ids, [], []
    membership = {i: "train" for i in train}
    membership.update({i: "val" for i in val})
    membership.update({i: "test" for i in test})
    for entry in entries:
        entry["split"] = membership[entry["image_id"]]

    write_annotations_csv(out_dir / "annotations.csv", annotations_by_image)
    return write_manifest(out_dir, entries, seed=spec.seed, image_size=spec.size)
