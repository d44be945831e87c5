"""Band normalization, cubic resampling, augmentation, band stacking."""

import warnings
from dataclasses import dataclass

import numpy as np

from chromatile.errors import DataError, UsageError

AUGMENT_OPS = ("rot90", "rot180", "rot270", "hflip", "vflip")


def compute_percentiles(values, q: float) -> float:
    """Percentile by linear interpolation at fractional rank q/100*(n-1)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise UsageError("cannot take a percentile of an empty array")
    if not 0.0 <= q <= 100.0:
        raise UsageError(f"percentile q must lie in [0, 100], got {q}")
    return float(np.percentile(values, q))


@dataclass
class NormalizationStats:
    """Per-band (p2, p98) anchors, computed on the training split only."""

    per_band: "dict[str, tuple[float, float]]"

    def for_band(self, band_id: str):
        if band_id not in self.per_band:
            raise DataError(f"no normalization stats for band {band_id!r}")
        return self.per_band[band_id]


def compute_normalization_stats(
    tiles, band_ids, q_low: float = 2.0, q_high: float = 98.0
) -> NormalizationStats:
    """Pool every pixel of every training tile per band, take percentiles."""
    pools = {band_id: [] for band_id in band_ids}
    for tile in tiles:
        for band_id in band_ids:
            pools[band_id].append(tile.band(band_id).grid.ravel())
    per_band = {}
    for band_id, chunks in pools.items():
        if not chunks:
            raise UsageError(f"no pixels pooled for band {band_id!r}")
        merged = np.concatenate(chunks)
        per_band[band_id] = (
            compute_percentiles(merged, q_low),
            compute_percentiles(merged, q_high),
        )
    return NormalizationStats(per_band)


def percentile_normalize(grid, anchors) -> np.ndarray:
    """Map [p2, p98] onto [0, 1], clamping beyond the anchors."""
    lo, hi = anchors
    if lo > hi:
        raise UsageError(f"normalization anchors out of order: {lo} > {hi}")
    grid = np.asarray(grid, dtype=np.float64)
    if lo == hi:
        warnings.warn(
            f"degenerate normalization anchors (p2 == p98 == {lo}); "
            "band maps to all zeros"
        )
        return np.zeros_like(grid)
    return np.clip((grid - lo) / (hi - lo), 0.0, 1.0)


def _catmull_rom_axis(in_len: int, out_len: int):
    """Clamped tap indices (out_len, 4) and weights (out_len, 4) for one axis.

    Pixel-center alignment: output pixel d samples source coordinate
    (d + 0.5) * in/out - 0.5.  Taps outside the grid clamp to the edge.
    """
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    base = np.floor(src).astype(np.int64)
    t = src - base
    t2 = t * t
    t3 = t2 * t
    weights = np.stack(
        [
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ],
        axis=1,
    )
    taps = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, in_len - 1)
    return taps, weights


def resample_cubic(grid, target) -> np.ndarray:
    """Separable Catmull-Rom resampling to ``target = (H', W')``.

    Reproduces constants exactly and affine ramps wherever all four taps
    are interior; at the borders the edge-clamped taps flatten the ramp.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] < 2 or grid.shape[1] < 2:
        raise UsageError("resample_cubic needs a 2-D grid of extent >= 2")
    out_h, out_w = int(target[0]), int(target[1])
    if out_h < 1 or out_w < 1:
        raise UsageError(f"degenerate resample target {target}")
    in_h, in_w = grid.shape
    # width pass, then height pass (order fixed for bit determinism)
    taps_w, weights_w = _catmull_rom_axis(in_w, out_w)
    tmp = (grid[:, taps_w] * weights_w[None, :, :]).sum(axis=2)
    taps_h, weights_h = _catmull_rom_axis(in_h, out_h)
    out = (tmp[taps_h, :] * weights_h[:, :, None]).sum(axis=1)
    return out


def augment(arr, op: str, axes=(-2, -1)) -> np.ndarray:
    """Apply one of the five index-permutation augmentations.

    ``axes`` names the two spatial axes; channels-first stacks use the
    default, channels-last images pass (0, 1).  rot90 is a clockwise
    quarter turn: [[1,2],[3,4]] -> [[3,1],[4,2]].
    """
    arr = np.asarray(arr)
    ax0, ax1 = axes
    if op.startswith("rot") and arr.shape[ax0] != arr.shape[ax1]:
        raise UsageError(f"{op} requires a square spatial extent")
    if op == "rot90":
        out = np.rot90(arr, k=-1, axes=(ax0, ax1))
    elif op == "rot180":
        out = np.rot90(arr, k=2, axes=(ax0, ax1))
    elif op == "rot270":
        out = np.rot90(arr, k=1, axes=(ax0, ax1))
    elif op == "hflip":
        out = np.flip(arr, axis=ax1)
    elif op == "vflip":
        out = np.flip(arr, axis=ax0)
    else:
        raise UsageError(f"unknown augmentation {op!r}")
    return np.ascontiguousarray(out)


def stack_bands(
    tile,
    band_ids,
    extent: int = None,
    stats: NormalizationStats = None,
) -> np.ndarray:
    """Build a (C, H, W) float32 stack in ``band_ids`` order.

    Each band is normalized first (if stats given), then resampled to
    ``extent`` if its native grid differs — the same order the preparation
    pipeline uses end to end.
    """
    planes = []
    for band_id in band_ids:
        grid = tile.band(band_id).grid.astype(np.float64)
        if stats is not None:
            grid = percentile_normalize(grid, stats.for_band(band_id))
        if extent is not None and grid.shape != (extent, extent):
            grid = resample_cubic(grid, (extent, extent))
        planes.append(grid)
    extents = {p.shape for p in planes}
    if len(extents) != 1:
        raise UsageError(
            f"bands have mixed extents {sorted(extents)}; pass a target extent"
        )
    return np.stack(planes).astype(np.float32)
