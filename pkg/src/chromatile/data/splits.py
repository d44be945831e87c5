"""Dataset manifests, split assignment, and label-budget subsampling."""

from dataclasses import dataclass, replace

import numpy as np

from chromatile.errors import DataError, UsageError
from chromatile.seeding import rng_for

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    tile_path: str
    labels: "tuple[int, ...]"  # positive label indices
    split: str


@dataclass
class DatasetManifest:
    entries: "list[ManifestEntry]"
    seed: int = 0

    def split(self, name: str) -> "list[ManifestEntry]":
        if name not in SPLIT_NAMES:
            raise UsageError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]


def save_manifest(path, manifest: DatasetManifest) -> None:
    """One record per line: tile-path TAB label-indices (comma) TAB split."""
    lines = []
    for entry in manifest.entries:
        labels = ",".join(str(i) for i in entry.labels)
        lines.append(f"{entry.tile_path}\t{labels}\t{entry.split}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    entries = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{line_no}: expected 3 tab-separated fields")
        tile_path, label_field, split = parts
        if split not in SPLIT_NAMES:
            raise DataError(f"{path}:{line_no}: unknown split {split!r}")
        try:
            labels = tuple(
                int(tok) for tok in label_field.split(",") if tok != ""
            )
        except ValueError:
            raise DataError(
                f"{path}:{line_no}: malformed label indices {label_field!r}"
            ) from None
        if any(i < 0 for i in labels):
            raise DataError(f"{path}:{line_no}: negative label index")
        entries.append(ManifestEntry(tile_path, labels, split))
    return DatasetManifest(entries)


def _split_sizes(n: int, fractions) -> "list[int]":
    """Cumulative-floor apportionment: sizes sum to n, deterministic."""
    sizes = []
    prev = 0
    running = 0.0
    for frac in fractions:
        running += frac
        cut = int(np.floor(running * n + 1e-9))
        sizes.append(cut - prev)
        prev = cut
    sizes[-1] += n - prev
    return sizes


def split_dataset(entries, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetManifest:
    """Seeded uniform shuffle, then contiguous train/val/test assignment."""
    if len(fractions) != 3:
        raise UsageError("fractions must cover train/val/test")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"fractions must sum to 1, got {sum(fractions)}")
    if any(f < 0 for f in fractions):
        raise UsageError("fractions must be non-negative")
    entries = list(entries)
    if not entries:
        raise DataError("cannot split an empty dataset")
    order = rng_for(seed, "split/shuffle").permutation(len(entries))
    sizes = _split_sizes(len(entries), fractions)
    out = []
    cursor = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for idx in order[cursor : cursor + size]:
            out.append(replace(entries[idx], split=name))
        cursor += size
    return DatasetManifest(out, seed=seed)


def stratified_holdout(entries, test_fraction: float, seed: int = 0) -> DatasetManifest:
    """Per-class seeded holdout for binary labels.

    Test counts per class use floor(count * fraction); if the floors fall
    short of floor(total * fraction), the shortfall goes to test one entry
    per class, in class order (negatives first).
    """
    if not 0.0 < test_fraction < 1.0:
        raise UsageError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    entries = list(entries)
    if not entries:
        raise DataError("cannot split an empty dataset")
    by_class = {0: [], 1: []}
    for i, entry in enumerate(entries):
        by_class[1 if entry.labels else 0].append(i)
    for cls, members in by_class.items():
        if 0 < len(members) < 2:
            raise DataError(f"class {cls} has fewer than 2 members")
    target_total = int(np.floor(len(entries) * test_fraction))
    counts = {
        cls: int(np.floor(len(members) * test_fraction))
        for cls, members in by_class.items()
    }
    shortfall = target_total - sum(counts.values())
    for cls in sorted(by_class):
        if shortfall <= 0:
            break
        if counts[cls] < len(by_class[cls]):
            counts[cls] += 1
            shortfall -= 1
    test_indices = set()
    for cls in sorted(by_class):
        members = by_class[cls]
        order = rng_for(seed, f"stratify/class/{cls}").permutation(len(members))
        for j in order[: counts[cls]]:
            test_indices.add(members[j])
    out = [
        replace(entry, split="test" if i in test_indices else "train")
        for i, entry in enumerate(entries)
    ]
    return DatasetManifest(out, seed=seed)


def subsample_budget(train_entries, k: int, seed: int = 0) -> "list[ManifestEntry]":
    """Seeded uniform sample without replacement, original order preserved."""
    train_entries = list(train_entries)
    if k > len(train_entries):
        raise UsageError(
            f"budget {k} exceeds the split size {len(train_entries)}"
        )
    if k < 1:
        raise UsageError(f"budget must be at least 1, got {k}")
    chosen = rng_for(seed, "budget/sample").choice(
        len(train_entries), size=k, replace=False
    )
    return [train_entries[i] for i in sorted(chosen)]
