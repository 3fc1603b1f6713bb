"""Detection overlays: 8-bit renderings with class-colored box outlines."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .data import CTSlice, hu_normalize

# One distinct color per lesion class id (1..9).
CLASS_COLORS = {
    1: (66, 135, 245),    # lung
    2: (245, 166, 35),    # abdomen
    3: (126, 211, 33),    # mediastinum
    4: (208, 2, 27),      # liver
    5: (144, 19, 254),    # pelvis
    6: (80, 227, 194),    # soft tissue
    7: (248, 231, 28),    # kidney
    8: (255, 255, 255),   # bone
    9: (189, 16, 224),    # other
}


def render_overlay(ct: CTSlice, detections: list, thickness: int = 2) -> np.ndarray:
    """8-bit RGB image, same extent as the slice, with detection rectangles."""
    gray = (hu_normalize(ct)[0] * 255.0).round().astype(np.uint8)
    img = np.stack([gray, gray, gray], axis=-1)
    h, w = gray.shape
    for det in detections:
        color = np.array(CLASS_COLORS.get(det.class_id, (255, 0, 0)), dtype=np.uint8)
        x1 = int(np.clip(round(det.x1), 0, w - 1))
        y1 = int(np.clip(round(det.y1), 0, h - 1))
        x2 = int(np.clip(round(det.x2), 0, w - 1))
        y2 = int(np.clip(round(det.y2), 0, h - 1))
        t = thickness
        img[y1:min(y1 + t, h), x1:x2 + 1] = color
        img[max(y2 - t + 1, 0):y2 + 1, x1:x2 + 1] = color
        img[y1:y2 + 1, x1:min(x1 + t, w)] = color
        img[y1:y2 + 1, max(x2 - t + 1, 0):x2 + 1] = color
    return img


def write_overlay(ct: CTSlice, detections: list, path) -> None:
    Image.fromarray(render_overlay(ct, detections), mode="RGB").save(path, format="PNG")
