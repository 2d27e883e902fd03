"""68-landmark annotations to 5-class face masks."""
from __future__ import annotations

import json
import logging
from functools import lru_cache
from pathlib import Path

import numpy as np

from .spline import closed_cubic_spline, fill_polygon, polygon_area

log = logging.getLogger(__name__)

REGIONS_FILE = Path(__file__).resolve().parent.parent / "configs" / "landmark_regions.json"
NUM_CLASSES = 5
BACKGROUND, SKIN, EYES, OUTER_MOUTH, INNER_MOUTH = range(5)
MIN_AREA = 1e-9


@lru_cache(maxsize=None)
def _load_default_regions() -> str:
    return REGIONS_FILE.read_text()


def default_regions() -> dict:
    return json.loads(_load_default_regions())


def region_polygons(lm: np.ndarray, regions: dict | None = None, samples_per_segment: int = 8,
                    ) -> list[tuple[int, np.ndarray]]:
    """``(class, dense polygon)`` pairs in paint order."""
    regions = regions or default_regions()
    out = []
    for rname in regions["paint_order"]:
        reg = regions["regions"][rname]
        for contour in reg["contours"]:
            idx = contour["indices"]
            pos = {lid: k for k, lid in enumerate(idx)}
            corners = [pos[c] for c in contour.get("corners", [])]
            pts = lm[idx]
            if len(np.unique(pts, axis=0)) < 3:
                # collapsed contour (e.g. a closed mouth): zero area, skipped by the caller
                poly = np.vstack([pts, pts[:1]])
            else:
                poly = closed_cubic_spline(pts, corners, samples_per_segment)
            out.append((reg["class"], poly))
    return out


def landmarks_to_mask(lm, width: int, height: int, regions: dict | None = None,
                      samples_per_segment: int = 8) -> np.ndarray:
    """Rasterise each region's spline contour into a ``uint8 [height, width]`` class map."""
    if width <= 0 or height <= 0:
        raise ValueError("frame bounds must be positive")
    lm = np.asarray(lm, dtype=np.float64)
    if not np.all(np.isfinite(lm)):
        raise ValueError("landmarks must be finite")
    lm = np.stack([np.clip(lm[:, 0], 0, width), np.clip(lm[:, 1], 0, height)], axis=1)
    mask = np.zeros((height, width), dtype=np.uint8)
    for cls, poly in region_polygons(lm, regions, samples_per_segment):
        if abs(polygon_area(poly)) < MIN_AREA:
            log.warning("class %d polygon has zero area; skipped", cls)
            continue
        mask[fill_polygon(poly, width, height)] = cls
    return mask


def read_pts(path: str | Path) -> np.ndarray:
    """Read a landmark file: 68 ``x y`` lines; a pts-style header/braces are tolerated."""
    rows = []
    for line in Path(path).read_text().splitlines():
        parts = line.strip().split()
        if len(parts) != 2:
            continue
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            continue
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape != (68, 2):
        raise ValueError(f"{path}: expected 68 points, found {len(rows)}")
    return arr


def write_pts(path: str | Path, lm: np.ndarray) -> None:
    lines = ["version: 1", "n_points: 68", "{"]
    lines += [f"{x:.3f} {y:.3f}" for x, y in np.asarray(lm)]
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")
