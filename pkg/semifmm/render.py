"""PNG heatmaps of surfaces on the (theta, phi) grid, nearest-neighbor scaled."""
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .config import logger
from .dataset import SurfaceGrid
from .errors import ValidationError
from .utils import PathLike

# blue - white - red anchors for signed surfaces, dark - yellow for nonnegative ones
DIVERGING = ((0.0, (49, 54, 149)), (0.5, (247, 247, 247)), (1.0, (165, 0, 38)))
SEQUENTIAL = ((0.0, (12, 7, 134)), (0.5, (204, 71, 120)), (1.0, (240, 249, 33)))


def colorize(values: np.ndarray, limits: Tuple[float, float], anchors: Sequence[Tuple[float, Tuple[int, int, int]]]) -> np.ndarray:
    """uint8 RGB image of `values` mapped linearly through the anchor colors."""
    low, high = limits
    span = high - low if high > low else 1.0
    scaled = np.clip((np.asarray(values, dtype=float) - low) / span, 0.0, 1.0)
    positions = [a[0] for a in anchors]
    rgb = np.stack([np.interp(scaled, positions, [a[1][c] for a in anchors]) for c in range(3)], axis=-1)
    return np.round(rgb).astype(np.uint8)


def heatmap(
    surface: np.ndarray,
    grid: SurfaceGrid,
    path: PathLike,
    *,
    scale: int = 4,
    limits: Optional[Tuple[float, float]] = None,
    signed: Optional[bool] = None,
) -> Path:
    """Write one surface (T values or an n_meridional x n_circumferential matrix) as a PNG.

    Rows are theta (top = smallest), columns phi. Signed surfaces get symmetric limits.
    """
    values = np.asarray(surface, dtype=float).reshape(-1)
    if values.size != grid.size:
        raise ValidationError(f"surface has {values.size} values, grid has {grid.size}", code="dimension_mismatch")
    values = values.reshape(grid.shape)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        raise ValidationError("surface has no finite values to render", code="non_finite")
    if signed is None:
        signed = finite.min() < 0 < finite.max()
    if limits is None:
        if signed:
            bound = float(np.abs(finite).max())
            limits = (-bound, bound)
        else:
            limits = (float(finite.min()), float(finite.max()))
    rgb = colorize(np.where(np.isfinite(values), values, limits[0]), limits, DIVERGING if signed else SEQUENTIAL)
    image = Image.fromarray(rgb)
    if scale > 1:
        image = image.resize((grid.n_circumferential * scale, grid.n_meridional * scale), Image.Resampling.NEAREST)
    destination = Path(path)
    destination.parent.mkdir(parents=True, exist_ok=True)
    image.save(destination, format="PNG")
    logger.debug(f"🔧 Wrote heatmap {destination.name} (limits {limits[0]:.3g} .. {limits[1]:.3g})")
    return destination
