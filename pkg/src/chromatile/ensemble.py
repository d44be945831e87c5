"""Inference-time fusion of an RGB-input branch and a spectral-input branch.

Each branch is a frozen encoder plus linear head over the same label space.
The fused probability is the elementwise mean of the two sigmoid responses,
so fusion needs no additional training.  Branch logits are combined with
``ensemble_predict``; ``run_ensemble`` drives both branches over a batch
that carries one prepared input stack per branch.
"""

from dataclasses import dataclass

import numpy as np

from chromatile.errors import UsageError
from chromatile.numerics import Tensor, sigmoid_array

BRANCH_NAMES = ("rgb", "spectral")


def ensemble_predict(logits_rgb, logits_spec):
    """Elementwise (sigmoid(a) + sigmoid(b)) / 2 of two equal-shape arrays."""
    a = logits_rgb.data if isinstance(logits_rgb, Tensor) else np.asarray(logits_rgb)
    b = logits_spec.data if isinstance(logits_spec, Tensor) else np.asarray(logits_spec)
    if a.shape != b.shape:
        raise UsageError(
            f"ensemble logit shape mismatch: {a.shape} vs {b.shape}"
        )
    return 0.5 * (sigmoid_array(a) + sigmoid_array(b))


@dataclass(frozen=True)
class EnsembleBundle:
    """Two frozen classifier branches sharing one label space."""

    rgb_branch: tuple  # (encoder, head)
    spectral_branch: tuple  # (encoder, head)
    n_classes: int

    def validate(self) -> "EnsembleBundle":
        for name, (encoder, head) in self.branches().items():
            if head.n_classes != self.n_classes:
                raise UsageError(
                    f"{name} branch head emits {head.n_classes} classes, "
                    f"bundle expects {self.n_classes}"
                )
            if head.in_features != encoder.cfg.stage_widths[-1]:
                raise UsageError(
                    f"{name} branch head reads {head.in_features} features, "
                    f"encoder produces {encoder.cfg.stage_widths[-1]}"
                )
        return self

    def branches(self) -> dict:
        return {
            "rgb": self.rgb_branch,
            "spectral": self.spectral_branch,
        }


def branch_logits(encoder, head, x, batch_size: int = 64):
    """Eval-mode class logits for a prepared input stack."""
    rows = []
    for start in range(0, len(x), batch_size):
        _, bottleneck = encoder.forward(Tensor(x[start : start + batch_size]), "eval")
        rows.append(head.forward(bottleneck).data)
    return np.concatenate(rows, axis=0)


def run_ensemble(bundle: EnsembleBundle, views: dict, batch_size: int = 64):
    """Fused probabilities for a batch carrying both branch views.

    ``views`` maps branch name ("rgb", "spectral") to that branch's prepared
    (N, C, E, E) input stack; the two stacks must describe the same N tiles
    in the same order.
    """
    bundle.validate()
    missing = [name for name in BRANCH_NAMES if name not in views]
    if missing:
        raise UsageError(f"ensemble batch is missing views: {', '.join(missing)}")
    n = {name: len(views[name]) for name in BRANCH_NAMES}
    if n["rgb"] != n["spectral"]:
        raise UsageError(
            f"branch views disagree on batch size: rgb {n['rgb']} vs "
            f"spectral {n['spectral']}"
        )
    logits = {
        name: branch_logits(*bundle.branches()[name], views[name], batch_size)
        for name in BRANCH_NAMES
    }
    for name in BRANCH_NAMES:
        if logits[name].shape[1] != bundle.n_classes:
            raise UsageError(
                f"{name} branch produced {logits[name].shape[1]} classes, "
                f"expected {bundle.n_classes}"
            )
    return ensemble_predict(logits["rgb"], logits["spectral"])


def write_predictions_csv(path, tile_ids, probabilities) -> None:
    """tile_id plus per-class probabilities, six decimal places."""
    probabilities = np.asarray(probabilities)
    if probabilities.ndim != 2 or len(tile_ids) != len(probabilities):
        raise UsageError(
            f"predictions need one row per tile: {len(tile_ids)} ids vs "
            f"array {probabilities.shape}"
        )
    header = ["tile_id"] + [
        f"class_{k}" for k in range(probabilities.shape[1])
    ]
    lines = [",".join(header)]
    for tile_id, row in zip(tile_ids, probabilities):
        lines.append(",".join([str(tile_id)] + [f"{p:.6f}" for p in row]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
