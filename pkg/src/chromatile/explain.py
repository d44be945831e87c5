"""Class-activation heatmaps over the final encoder stage, plus a scalar
divergence between two heatmaps and 8-bit PGM export.

The heatmap weights each final-stage channel by the spatial mean of the
class-score gradient at that channel, rectifies the weighted channel sum,
upsamples it (nearest neighbour) to the input extent, and normalizes by the
maximum, so values land in [0, 1] with an all-zero map staying all-zero.
"""

from dataclasses import dataclass

import numpy as np

from chromatile.errors import UsageError
from chromatile.numerics import Tape, Tensor, mul, sum_

BRANCH_TAGS = ("rgb", "spectral")


@dataclass(frozen=True)
class Heatmap:
    """Input-resolution attention map for one class of one branch."""

    grid: np.ndarray  # (E, E) floats in [0, 1]
    class_index: int
    branch: str

    def validate(self) -> "Heatmap":
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise UsageError(f"heatmap grid must be square, got {self.grid.shape}")
        if self.branch not in BRANCH_TAGS:
            raise UsageError(f"unknown branch tag {self.branch!r}")
        if self.grid.size and (self.grid.min() < 0.0 or self.grid.max() > 1.0):
            raise UsageError("heatmap values must lie in [0, 1]")
        return self


def gradcam(encoder, head, x, class_index: int, branch: str = "spectral") -> Heatmap:
    """Gradient-weighted activation map for one tile and one class.

    ``x`` is the prepared input, (C, E, E) or (1, C, E, E).  The model runs
    in eval mode; the returned grid has the input extent.
    """
    if branch not in BRANCH_TAGS:
        raise UsageError(f"unknown branch tag {branch!r}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[0] != 1:
        raise UsageError(
            f"gradcam explains one tile: expected (1, C, E, E), got {data.shape}"
        )
    if not 0 <= class_index < head.n_classes:
        raise UsageError(
            f"class index {class_index} outside [0, {head.n_classes})"
        )

    with Tape() as tape:
        maps, bottleneck = encoder.forward(Tensor(data), mode="eval")
        stage_map = maps[-1]
        logits = head.forward(bottleneck)
        mask = np.zeros(logits.shape, logits.data.dtype)
        mask[0, class_index] = 1.0
        score = sum_(mul(logits, mask))
    grads = tape.backward(score, watch=(stage_map,))

    activations = stage_map.data[0]
    gradient = grads.get(stage_map)[0]
    if activations.shape[1] == 0 or activations.shape[2] == 0:
        raise UsageError("gradcam needs a non-empty final feature map")
    alpha = gradient.mean(axis=(1, 2))
    cam = np.maximum((alpha[:, None, None] * activations).sum(axis=0), 0.0)

    extent = data.shape[2]
    factor = extent // cam.shape[0]
    grid = cam.repeat(factor, axis=0).repeat(factor, axis=1)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return Heatmap(grid.astype(np.float64), class_index, branch)


def divergence_score(h1: Heatmap, h2: Heatmap) -> float:
    """1 - cosine similarity of the flattened grids, in [0, 1].

    A single all-zero map is maximally divergent from a nonzero one (1.0);
    two all-zero maps have no defined direction and raise.
    """
    a = np.asarray(h1.grid, dtype=np.float64).ravel()
    b = np.asarray(h2.grid, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise UsageError(
            f"heatmap extents differ: {h1.grid.shape} vs {h2.grid.shape}"
        )
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na == 0.0 and nb == 0.0:
        raise UsageError("divergence of two all-zero heatmaps is undefined")
    if na == 0.0 or nb == 0.0:
        return 1.0
    return min(1.0, max(0.0, 1.0 - float(np.dot(a, b)) / (na * nb)))


def _to_grey(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise UsageError(f"PGM export needs a 2-D grid, got {grid.shape}")
    return np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, grid) -> None:
    """8-bit binary greyscale PGM of a [0, 1] grid."""
    grey = _to_grey(grid)
    header = f"P5\n{grey.shape[1]} {grey.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + grey.tobytes())


def write_composite_pgm(path, preview, heatmap: Heatmap) -> None:
    """Input preview and heatmap side by side, separated by a white column."""
    left = _to_grey(preview)
    right = _to_grey(heatmap.grid)
    if left.shape != right.shape:
        raise UsageError(
            f"composite needs equal extents: preview {left.shape} vs "
            f"heatmap {right.shape}"
        )
    bar = np.full((left.shape[0], 1), 255, np.uint8)
    write_pgm(path, np.concatenate([left, bar, right], axis=1) / 255.0)
