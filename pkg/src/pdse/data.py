"""CT slice ingestion, intensity preprocessing, augmentation, and splits.

Raw slices carry unsigned 16-bit intensities. Preprocessing subtracts 32768
to recover Hounsfield units, clips to [-1024, 3071] (covering lung, soft
tissue, and bone), and rescales that window to [0, 1].
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import LESION_TYPES

RAW_MAGIC = b"PDSERAW1"
HU_MIN = -1024
HU_MAX = 3071
HU_OFFSET = 32768


@dataclass
class LesionAnnotation:
    """Ground-truth box plus lesion type id (1..9)."""

    box: tuple  # (x1, y1, x2, y2) pixels
    class_id: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"annotation box {self.box} must have positive extent")
        if not 1 <= self.class_id <= len(LESION_TYPES):
            raise ValueError(f"annotation class id {self.class_id} outside 1..{len(LESION_TYPES)}")

    @property
    def lesion_type(self) -> str:
        return LESION_TYPES[self.class_id - 1]


@dataclass
class CTSlice:
    """One axial slice: id, raw 16-bit pixels, optional spacing, annotations."""

    image_id: str
    pixels: np.ndarray
    spacing: tuple | None = None
    annotations: list = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint16:
            raise ValueError(f"slice pixels must be uint16, got {self.pixels.dtype}")
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 128:
            raise ValueError(f"slice must be a 2D image of at least 128x128, got {self.pixels.shape}")


def write_slice_raw(path, pixels: np.ndarray) -> None:
    """16-byte header (magic, u32 H, u32 W, little-endian) + u16 pixels."""
    pixels = np.asarray(pixels, dtype=np.uint16)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(np.array([h, w], dtype="<u4").tobytes())
        fh.write(pixels.astype("<u2").tobytes())


def write_slice_png(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint16)
    Image.fromarray(pixels, mode="I;16").save(path, format="PNG")


def load_slice(path, image_id: str | None = None) -> CTSlice:
    """Load a 16-bit slice from PNG or the raw binary format, bit-exactly."""
    path = Path(path)
    if image_id is None:
        image_id = path.stem
    data = path.read_bytes()
    if data[:8] == RAW_MAGIC:
        if len(data) < 16:
            raise ValueError(f"{path}: truncated raw slice header")
        h, w = np.frombuffer(data[8:16], dtype="<u4")
        expected = 16 + 2 * int(h) * int(w)
        if len(data) < expected:
            raise ValueError(f"{path}: truncated raw slice, expected {expected} bytes, got {len(data)}")
        pixels = np.frombuffer(data[16:expected], dtype="<u2").reshape(int(h), int(w)).astype(np.uint16)
        return CTSlice(image_id=image_id, pixels=pixels)

    img = Image.open(io.BytesIO(data))
    if img.mode not in ("I;16", "I;16B", "I"):
        raise ValueError(f"{path}: unsupported bit depth (mode {img.mode}); slices must be 16-bit grayscale")
    arr = np.asarray(img)
    if arr.dtype == np.int32:
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError(f"{path}: pixel values outside the unsigned 16-bit range")
    return CTSlice(image_id=image_id, pixels=arr.astype(np.uint16))


def hu_normalize(slice_or_pixels) -> np.ndarray:
    """Raw 16-bit values to a (1, H, W) float64 map in [0, 1].

    hu = clamp(raw - 32768, -1024, 3071); out = (hu + 1024) / 4095. The map
    is monotone in the raw value; the window endpoints land exactly on 0 and 1.
    """
    pixels = slice_or_pixels.pixels if isinstance(slice_or_pixels, CTSlice) else np.asarray(slice_or_pixels)
    hu = np.clip(pixels.astype(np.float64) - HU_OFFSET, HU_MIN, HU_MAX)
    out = (hu + float(-HU_MIN)) / float(HU_MAX - HU_MIN)
    return out[None, :, :]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2D float array (align-corners=False convention)."""
    h, w = img.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def five_area_augment(
    ct: CTSlice,
    annotations: list | None = None,
    rng: np.random.Generator | None = None,
    out_size: int = 128,
    crop_fraction: float = 0.6,
    min_area_fraction: float = 0.25,
    jitter: int = 0,
) -> list:
    """Divide the slice into five shrunken areas and keep the lesioned ones.

    Candidate windows are the four corners plus the center, each
    ``crop_fraction`` of the image per side, rescaled to ``out_size``. A crop
    survives only if at least one annotation center falls inside it; surviving
    annotations are shifted/scaled into crop coordinates and clipped, and any
    box whose clipped area drops below ``min_area_fraction`` of the original
    is discarded. With ``jitter`` > 0, window origins are perturbed by up to
    that many pixels using ``rng`` (default geometry is deterministic).

    Returns a list of (uint16 image, list[LesionAnnotation]) pairs.
    """
    annotations = ct.annotations if annotations is None else annotations
    h, w = ct.pixels.shape
    ch = int(round(crop_fraction * h))
    cw = int(round(crop_fraction * w))
    origins = [(0, 0), (0, w - cw), (h - ch, 0), (h - ch, w - cw),
               ((h - ch) // 2, (w - cw) // 2)]
    if jitter > 0:
        if rng is None:
            raise ValueError("five_area_augment: jitter requires an rng")
        origins = [
            (int(np.clip(oy + rng.integers(-jitter, jitter + 1), 0, h - ch)),
             int(np.clip(ox + rng.integers(-jitter, jitter + 1), 0, w - cw)))
            for oy, ox in origins
        ]

    sy = out_size / ch
    sx = out_size / cw
    results = []
    for oy, ox in origins:
        kept = []
        for ann in annotations:
            x1, y1, x2, y2 = ann.box
            cx_ = 0.5 * (x1 + x2)
            cy_ = 0.5 * (y1 + y2)
            if not (ox <= cx_ < ox + cw and oy <= cy_ < oy + ch):
                continue
            nx1 = np.clip(x1 - ox, 0, cw)
            ny1 = np.clip(y1 - oy, 0, ch)
            nx2 = np.clip(x2 - ox, 0, cw)
            ny2 = np.clip(y2 - oy, 0, ch)
            clipped_area = max(0.0, nx2 - nx1) * max(0.0, ny2 - ny1)
            if clipped_area < min_area_fraction * (x2 - x1) * (y2 - y1):
                continue
            kept.append(LesionAnnotation(
                box=(nx1 * sx, ny1 * sy, nx2 * sx, ny2 * sy), class_id=ann.class_id))
        if not kept:
            continue
        window = ct.pixels[oy:oy + ch, ox:ox + cw].astype(np.float64)
        resized = np.clip(np.rint(_resize_bilinear(window, out_size, out_size)), 0, 65535).astype(np.uint16)
        results.append((resized, kept))
    return results


def split_dataset(image_ids, seed: int):
    """Seeded disjoint 70/15/15 split: sizes round(0.70 n), round(0.15 n),
    remainder (round = half-up)."""
    ids = list(image_ids)
    if len(ids) < 10:
        raise ValueError(f"split_dataset: need at least 10 ids, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("split_dataset: duplicate image ids")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_train = int(np.floor(0.70 * n + 0.5))
    n_val = int(np.floor(0.15 * n + 0.5))
    return (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])


# -- annotation CSV and dataset manifest --------------------------------------

ANNOTATION_HEADER = ["image_id", "x1", "y1", "x2", "y2", "class_id"]
DETECTION_HEADER = ["image_id", "class_id", "score", "x1", "y1", "x2", "y2"]
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def write_annotations_csv(path, annotations_by_image: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for image_id in sorted(annotations_by_image):
            for ann in annotations_by_image[image_id]:
                x1, y1, x2, y2 = ann.box
                writer.writerow([image_id, f"{x1:.3f}", f"{y1:.3f}", f"{x2:.3f}", f"{y2:.3f}", ann.class_id])


def read_annotations_csv(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ANNOTATION_HEADER:
            raise ValueError(f"{path}: expected header {ANNOTATION_HEADER}, got {header}")
        for row in reader:
            image_id, x1, y1, x2, y2, cid = row
            out.setdefault(image_id, []).append(
                LesionAnnotation(box=(float(x1), float(y1), float(x2), float(y2)), class_id=int(cid)))
    return out


def write_detections_csv(path, detections_by_image: dict) -> None:
    """Detections as `image_id,class_id,score,x1,y1,x2,y2` rows (header always
    written, even for an empty set)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_HEADER)
        for image_id in sorted(detections_by_image):
            for d in detections_by_image[image_id]:
                writer.writerow([image_id, d.class_id, f"{d.score:.6f}",
                                 f"{d.x1:.3f}", f"{d.y1:.3f}", f"{d.x2:.3f}", f"{d.y2:.3f}"])


def read_detections_csv(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DETECTION_HEADER:
            raise ValueError(f"{path}: expected header {DETECTION_HEADER}, got {header}")
        for image_id, cid, score, x1, y1, x2, y2 in reader:
            row = [float(x1), float(y1), float(x2), float(y2), float(score), int(cid)]
            out.setdefault(image_id, []).append(row)
    return {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    digest.update(Path(path).read_bytes())
    return digest.hexdigest()


def write_manifest(dataset_dir, entries: list, seed: int, image_size: int) -> dict:
    """Manifest: file list with split membership plus a dataset content hash
    (hash of per-file hashes in listed order)."""
    dataset_dir = Path(dataset_dir)
    content = hashlib.sha256()
    for entry in entries:
        content.update(file_sha256(dataset_dir / entry["path"]).encode())
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "image_size": image_size,
        "images": entries,
        "content_hash": content.hexdigest(),
    }
    (dataset_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(dataset_dir) -> dict:
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / MANIFEST_NAME).read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('format_version')}")
    ids = [e["image_id"] for e in manifest["images"]]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest lists duplicate image ids")
    return manifest


def load_dataset(dataset_dir) -> tuple:
    """Load (slices_by_id, annotations_by_id, manifest) for a generated set."""
    dataset_dir = Path(dataset_dir)
    manifest = read_manifest(dataset_dir)
    annotations = read_annotations_csv(dataset_dir / "annotations.csv")
    slices = {}
    for entry in manifest["images"]:
        ct = load_slice(dataset_dir / entry["path"], image_id=entry["image_id"])
        ct.annotations = annotations.get(entry["image_id"], [])
        slices[entry["image_id"]] = ct
    return slices, annotations, manifest


def split_ids(manifest: dict) -> dict:
    out = {"train": [], "val": [], "test": []}
    for entry in manifest["images"]:
        out[entry["split"]].append(entry["image_id"])
    return out
