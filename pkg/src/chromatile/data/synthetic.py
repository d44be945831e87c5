"""Deterministic synthetic multispectral datasets.

Each tile is driven by a smooth latent field z in (0,1) (a squashed sum of
seeded Gaussian bumps).  Spectral bands are distinct fixed nonlinear shape
functions of z (plus seeded noise), generated at Sentinel-style native
resolutions (10/20/60 m); band B08 carries z itself, so with zero noise
the chroma below is an exact pixelwise function of that band.  RGB comes
from a fixed colormap of z built directly in Lab space — lightness spans
[42, 70] and the hue sweeps half the chroma circle, staying strictly
inside the sRGB gamut, so the designed chroma survives the
Lab->sRGB->Lab round trip exactly.

Labels (multi-label task): thresholded regional statistics of z, plus two
designated pattern classes —

* class K-2 fires only on a ring-textured patch stamped into band B02
  (invisible in RGB);
* class K-1 fires only on a localized hue rotation in the RGB image
  (spectral bands untouched, so it is invisible to the spectral branch).

Both patterns are designed to survive percentile normalization and to be
separable from natural tile statistics: B02 is otherwise near-flat, so the
full-range rings dominate that band's variance, and the hue rotation
pushes chroma into the half circle the colormap never uses.  (An additive
bump fails both ways: the latent field is itself a sum of Gaussian bumps,
and an out-of-range peak is clamped away by normalization.)  Both patches
land in a seeded random quadrant, recorded per tile, which lets
explanation tests check heatmap placement.

The binary task labels tiles by a dataset-level quantile of mean(z) so the
positive:negative ratio is exact.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from chromatile import config as configmod
from chromatile.colorspace import lab_to_srgb
from chromatile.data.preprocess import resample_cubic
from chromatile.data.splits import (
    DatasetManifest,
    ManifestEntry,
    save_manifest,
    split_dataset,
    stratified_holdout,
)
from chromatile.data.tiles import Band, MultispectralTile, write_tile
from chromatile.errors import DataError, UsageError
from chromatile.seeding import derive_seed, rng_for

# Spectral band ids in canonical order with native resolutions (m/pixel),
# mirroring the non-RGB subset of a Sentinel-2 Level-2A product.
_CANONICAL_BANDS = (
    ("B01", 60.0),
    ("B02", 10.0),
    ("B05", 20.0),
    ("B06", 20.0),
    ("B07", 20.0),
    ("B08", 10.0),
    ("B8A", 20.0),
    ("B09", 60.0),
    ("B11", 20.0),
    ("B12", 20.0),
)
RGB_BAND_IDS = ("R", "G", "B")

_IDENTITY_BAND = "B08"  # carries z itself; anchors chroma learnability
_MARKER_BAND = "B02"  # near-flat carrier for the spectral marker

_L_BASE = 42.0
_L_SPAN = 28.0
_CHROMA_AMPLITUDE = 22.0  # verified in-gamut for L in [40, 82] at any hue
_CHROMA_ARC = np.pi  # natural hue sweeps half the circle
_CHROMA_PHASE = 0.6
_MARKER_LEVEL = 0.5
_MARKER_CONTRAST = 0.45
_MARKER_WAVELENGTH = 1.0 / 4.0  # ring period as a fraction of the extent
_MARKER_SIGMA = 1.0 / 8.0  # patch width as a fraction of the extent
_CARRIER_LEVEL = 0.5
_CARRIER_GAIN = 0.08  # keeps the marker band nearly flat without it


def _chroma_from_angle(angle: np.ndarray) -> np.ndarray:
    """(a, b)/128 chroma at radius _CHROMA_AMPLITUDE, shape (..., 2)."""
    a = _CHROMA_AMPLITUDE * np.cos(angle)
    b = _CHROMA_AMPLITUDE * np.sin(angle)
    return np.stack([a, b], axis=-1) / 128.0


def chroma_of_latent(z: np.ndarray) -> np.ndarray:
    """The designed (a, b)/128 chroma for a latent field z, shape (..., 2)."""
    return _chroma_from_angle(_CHROMA_ARC * z + _CHROMA_PHASE)


def _band_shapes():
    """Fixed nonlinear shape functions of z; the marker band gets identity."""
    return [
        lambda z: 1.0 - z,
        lambda z: z * z,
        lambda z: np.sqrt(z),
        lambda z: np.sin(np.pi * z),
        lambda z: 0.5 + 0.5 * np.cos(2.0 * np.pi * z),
        lambda z: 0.5 + 0.5 * np.sin(2.0 * np.pi * z),
        lambda z: 4.0 * z * (1.0 - z),
        lambda z: z**3,
        lambda z: 1.0 / (1.0 + np.exp(-6.0 * (z - 0.5))),
        lambda z: np.abs(2.0 * z - 1.0),
        lambda z: (1.0 - z) ** 2,
    ]


def _stat_classes():
    """Ordered catalogue of regional-statistic label rules over z."""

    def top(z):
        return z[: z.shape[0] // 2]

    def bottom(z):
        return z[z.shape[0] // 2 :]

    def left(z):
        return z[:, : z.shape[1] // 2]

    def right(z):
        return z[:, z.shape[1] // 2 :]

    def quadrant(z, q):
        h, w = z.shape[0] // 2, z.shape[1] // 2
        r, c = divmod(q, 2)
        return z[r * h : (r + 1) * h, c * w : (c + 1) * w]

    def center(z):
        h, w = z.shape
        return z[h // 4 : 3 * h // 4, w // 4 : 3 * w // 4]

    rules = [
        lambda z: z.mean() > 0.5,
        lambda z: z.std() > 0.13,
        lambda z: top(z).mean() > bottom(z).mean(),
        lambda z: (z > 0.65).mean() > 0.18,
        lambda z: left(z).mean() > right(z).mean(),
        lambda z: z.max() > 0.95,
        lambda z: (z < 0.35).mean() > 0.18,
        lambda z: center(z).mean() > z.mean(),
        lambda z: np.abs(np.diff(z, axis=0)).mean() > 0.018,
        lambda z: np.abs(np.diff(z, axis=1)).mean() > 0.018,
        lambda z: z.min() < 0.05,
    ]
    for q in range(4):
        rules.append(lambda z, q=q: quadrant(z, q).mean() > 0.5)
    for q in range(4):
        rules.append(lambda z, q=q: quadrant(z, q).std() > 0.13)
    return rules


@dataclass
class SyntheticConfig:
    n_tiles: int = 200
    extent: int = 32
    n_spectral_bands: int = 9
    n_classes: int = 7
    noise: float = 0.05
    task: str = "multilabel"  # or "binary"
    marker_prob: float = 0.5
    rgb_marker_prob: float = 0.5
    positive_fraction: float = 526.0 / 1488.0
    mixed_resolution: bool = True
    fractions: "tuple[float, float, float]" = (0.6, 0.2, 0.2)

    def validate(self) -> None:
        if self.extent < 16:
            raise UsageError(f"tile extent must be >= 16, got {self.extent}")
        if self.n_tiles < 1:
            raise UsageError(f"n_tiles must be positive, got {self.n_tiles}")
        if self.n_spectral_bands < 1:
            raise UsageError("need at least one spectral band")
        if self.task not in ("multilabel", "binary"):
            raise UsageError(f"unknown task {self.task!r}")
        if self.task == "multilabel":
            max_classes = len(_stat_classes()) + 2
            if not 3 <= self.n_classes <= max_classes:
                raise UsageError(
                    f"multilabel n_classes must lie in [3, {max_classes}], "
                    f"got {self.n_classes}"
                )
        if self.noise < 0:
            raise UsageError(f"noise level must be >= 0, got {self.noise}")
        if not 0.0 <= self.marker_prob <= 1.0:
            raise UsageError("marker_prob must lie in [0, 1]")
        if not 0.0 <= self.rgb_marker_prob <= 1.0:
            raise UsageError("rgb_marker_prob must lie in [0, 1]")
        if not 0.0 < self.positive_fraction < 1.0:
            raise UsageError("positive_fraction must lie in (0, 1)")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise UsageError("split fractions must sum to 1")

    def spectral_band_table(self):
        """(band_id, resolution) pairs for the configured spectral bands."""
        table = []
        for i in range(self.n_spectral_bands):
            if i < len(_CANONICAL_BANDS):
                band_id, res = _CANONICAL_BANDS[i]
            else:
                band_id, res = f"S{i:02d}", (10.0, 20.0, 60.0)[i % 3]
            if not self.mixed_resolution:
                res = 10.0
            table.append((band_id, res))
        return table

    def marker_band(self) -> str:
        """The near-flat band that carries the spectral marker."""
        table = self.spectral_band_table()
        ids = [band_id for band_id, _ in table]
        if _MARKER_BAND in ids:
            return _MARKER_BAND
        return min(table, key=lambda item: (item[1], table.index(item)))[0]

    def spectral_band_ids(self):
        return [band_id for band_id, _ in self.spectral_band_table()]

    def n_label_classes(self) -> int:
        return 1 if self.task == "binary" else self.n_classes


@dataclass
class TileTruth:
    """Generator-side ground truth for one tile (markers, latent field)."""

    tile_id: str
    labels: "tuple[int, ...]"
    spectral_marker: bool
    spectral_quadrant: int  # -1 when absent
    rgb_marker: bool
    rgb_quadrant: int  # -1 when absent
    latent: np.ndarray = field(repr=False, default=None)


def _native_extent(extent: int, resolution: float) -> int:
    return max(2, int(round(extent * 10.0 / resolution)))


def _latent_field(rng, extent: int) -> np.ndarray:
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    raw = np.zeros((extent, extent))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, extent, 2)
        sigma = rng.uniform(extent / 8.0, extent / 3.0)
        amplitude = rng.uniform(0.4, 1.0) * (1.0 if rng.random() < 0.5 else -1.0)
        raw += amplitude * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2)
        )
    return 1.0 / (1.0 + np.exp(-2.2 * raw))


def _quadrant_marker(rng, extent: int):
    """A ring-textured patch confined to one seeded quadrant.

    Returns (mask, pattern, q): ``mask`` in (0, 1] localizes the patch and
    ``pattern`` is a radial cosine texture inside [0.05, 0.95].  Blending a
    field toward the pattern under the mask keeps every value in range, so
    the texture survives percentile clamping.
    """
    q = int(rng.integers(4))
    r, c = divmod(q, 2)
    half = extent / 2.0
    margin = extent / 8.0
    cy = rng.uniform(r * half + margin, (r + 1) * half - margin)
    cx = rng.uniform(c * half + margin, (c + 1) * half - margin)
    sigma = extent / 12.0
    yy, xx = np.mgrid[0:extent, 0:extent].astype(np.float64)
    rr2 = (yy - cy) ** 2 + (xx - cx) ** 2
    mask = np.exp(-rr2 / (2.0 * sigma**2))
    pattern = _MARKER_LEVEL + _MARKER_CONTRAST * np.cos(
        2.0 * np.pi * np.sqrt(rr2) / (extent * _MARKER_WAVELENGTH)
    )
    return mask, pattern, q


def _generate_tile(cfg: SyntheticConfig, master_seed: int, index: int, attempt: int):
    """Build one tile plus its truth record.  Labels exclude the binary rule
    (applied dataset-wide by the caller)."""
    rng = rng_for(master_seed, f"tile/{index}/try/{attempt}")
    extent = cfg.extent
    z = _latent_field(rng, extent)

    multilabel = cfg.task == "multilabel"
    spec_marker = multilabel and rng.random() < cfg.marker_prob
    rgb_marker = multilabel and rng.random() < cfg.rgb_marker_prob
    spec_mask, spec_rings, spec_q = _quadrant_marker(rng, extent)
    rgb_mask, rgb_rings, rgb_q = _quadrant_marker(rng, extent)

    marker_band = cfg.marker_band()
    shapes = _band_shapes()
    bands = {}
    shape_cursor = 0
    for band_id, resolution in cfg.spectral_band_table():
        if band_id == marker_band:
            base = z.copy()
            if spec_marker:
                base = base * (1.0 - spec_mask) + spec_rings * spec_mask
        else:
            base = shapes[shape_cursor % len(shapes)](z)
            shape_cursor += 1
        native = _native_extent(extent, resolution)
        grid = base if native == extent else resample_cubic(base, (native, native))
        if cfg.noise > 0:
            grid = grid + cfg.noise * rng.standard_normal(grid.shape)
        bands[band_id] = Band(grid.astype(np.float32), resolution)

    lightness_field = z
    if rgb_marker:
        lightness_field = z * (1.0 - rgb_mask) + rgb_rings * rgb_mask
    lightness = _L_BASE + _L_SPAN * lightness_field
    lab = np.concatenate(
        [lightness[..., None], chroma_of_latent(z) * 128.0], axis=-1
    )
    rgb = lab_to_srgb(lab)
    for channel, band_id in enumerate(RGB_BAND_IDS):
        bands[band_id] = Band(rgb[..., channel].astype(np.float32), 10.0)

    if multilabel:
        rules = _stat_classes()[: cfg.n_classes - 2]
        labels = [i for i, rule in enumerate(rules) if rule(z)]
        if spec_marker:
            labels.append(cfg.n_classes - 2)
        if rgb_marker:
            labels.append(cfg.n_classes - 1)
    else:
        labels = []

    tile_id = f"tile_{index:05d}"
    tile = MultispectralTile(tile_id, bands)
    truth = TileTruth(
        tile_id,
        tuple(labels),
        spec_marker,
        spec_q if spec_marker else -1,
        rgb_marker,
        rgb_q if rgb_marker else -1,
        latent=z,
    )
    return tile, truth


def _make_tile(cfg: SyntheticConfig, seed: int, index: int):
    """One finished (tile, truth) pair, retrying label-free multilabel draws.

    Depends only on (cfg, seed, index), so tiles may be built in any order
    or concurrently without changing their bytes.
    """
    for attempt in range(200):
        tile, truth = _generate_tile(cfg, seed, index, attempt)
        if cfg.task == "binary" or truth.labels:
            return tile, truth
    raise DataError(f"tile {index} produced no positive label in 200 attempts")


def generate_tiles(cfg: SyntheticConfig, seed: int, threads: int = 1):
    """Yield (tile, truth) pairs in index order without touching disk.

    Multi-label tiles regenerate under a bumped attempt counter until at
    least one label is positive; binary labels are assigned by the caller.
    With ``threads`` > 1 tiles are synthesized concurrently but still
    yielded in index order, so downstream bytes are identical.
    """
    cfg.validate()
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            yield from pool.map(
                lambda index: _make_tile(cfg, seed, index), range(cfg.n_tiles)
            )
        return
    for index in range(cfg.n_tiles):
        yield _make_tile(cfg, seed, index)


def _binary_labels(truths, positive_fraction: float):
    """Mark the top round(n * fraction) tiles by mean latent as positive."""
    stats = np.array([t.latent.mean() for t in truths])
    n_pos = int(round(len(truths) * positive_fraction))
    n_pos = min(max(n_pos, 1), len(truths) - 1)
    order = np.argsort(-stats, kind="stable")
    positive = set(order[:n_pos].tolist())
    for i, truth in enumerate(truths):
        truth.labels = (0,) if i in positive else ()


@dataclass
class DatasetPaths:
    root: str
    manifest: str
    config: str
    markers: str


def dataset_paths(root) -> DatasetPaths:
    return DatasetPaths(
        root=str(root),
        manifest=os.path.join(str(root), "manifest.tsv"),
        config=os.path.join(str(root), "dataset.cfg"),
        markers=os.path.join(str(root), "markers.tsv"),
    )


def generate_synthetic_dataset(cfg: SyntheticConfig, seed: int, out_dir, threads: int = 1):
    """Generate and persist a dataset; returns (manifest, truths, paths).

    Layout: <out_dir>/tiles/tile_XXXXX.mstl, manifest.tsv (paths relative
    to out_dir), dataset.cfg (key = value), markers.tsv (pattern ground
    truth per tile).  Byte-identical for identical (cfg, seed), whatever
    the thread count (synthesis may be concurrent, writes stay ordered).
    """
    cfg.validate()
    paths = dataset_paths(out_dir)
    os.makedirs(os.path.join(paths.root, "tiles"), exist_ok=True)

    truths = []
    rel_paths = []
    for tile, truth in generate_tiles(cfg, seed, threads=threads):
        rel = os.path.join("tiles", f"{tile.tile_id}.mstl")
        write_tile(os.path.join(paths.root, rel), tile)
        truths.append(truth)
        rel_paths.append(rel)

    if cfg.task == "binary":
        _binary_labels(truths, cfg.positive_fraction)

    entries = [
        ManifestEntry(rel, truth.labels, "train")
        for rel, truth in zip(rel_paths, truths)
    ]
    if cfg.task == "multilabel":
        manifest = split_dataset(
            entries, cfg.fractions, seed=derive_seed(seed, "split")
        )
    else:
        # stratified test holdout, then a stratified validation carve from
        # the remaining train portion so best-epoch retention has a split
        # to evaluate on
        test_frac = cfg.fractions[2]
        held = stratified_holdout(entries, test_frac, seed=derive_seed(seed, "split"))
        train_part = [e for e in held.entries if e.split == "train"]
        test_part = [e for e in held.entries if e.split == "test"]
        val_frac = cfg.fractions[1] / (cfg.fractions[0] + cfg.fractions[1])
        carve = stratified_holdout(
            train_part, val_frac, seed=derive_seed(seed, "val")
        )
        combined = [
            ManifestEntry(e.tile_path, e.labels, "val" if e.split == "test" else "train")
            for e in carve.entries
        ] + test_part
        manifest = DatasetManifest(combined, seed=seed)

    save_manifest(paths.manifest, manifest)

    spectral_ids = ",".join(cfg.spectral_band_ids())
    configmod.save_config(
        paths.config,
        {
            "dataset.task": cfg.task,
            "dataset.n_classes": str(cfg.n_label_classes()),
            "dataset.extent": str(cfg.extent),
            "dataset.n_tiles": str(cfg.n_tiles),
            "dataset.noise": repr(cfg.noise),
            "dataset.seed": str(seed),
            "dataset.spectral_bands": spectral_ids,
            "dataset.rgb_bands": ",".join(RGB_BAND_IDS),
            "dataset.marker_band": cfg.marker_band(),
            "dataset.mixed_resolution": str(cfg.mixed_resolution).lower(),
        },
    )

    marker_lines = ["tile_id\tspectral_marker\tspectral_quadrant\trgb_marker\trgb_quadrant"]
    for truth in truths:
        marker_lines.append(
            f"{truth.tile_id}\t{int(truth.spectral_marker)}\t"
            f"{truth.spectral_quadrant}\t{int(truth.rgb_marker)}\t{truth.rgb_quadrant}"
        )
    with open(paths.markers, "w", encoding="utf-8") as fh:
        fh.write("\n".join(marker_lines) + "\n")

    return manifest, truths, paths


@dataclass
class DatasetBundle:
    root: str
    manifest: DatasetManifest
    info: dict
    truths: "dict[str, TileTruth]"

    def tile_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.tile_path)


def load_dataset(root) -> DatasetBundle:
    """Read a generated dataset directory back (manifest, config, markers)."""
    from chromatile.data.splits import load_manifest

    paths = dataset_paths(root)
    if not os.path.isfile(paths.manifest):
        raise DataError(f"no manifest at {paths.manifest}")
    manifest = load_manifest(paths.manifest)
    info = configmod.load_config(paths.config) if os.path.isfile(paths.config) else {}
    truths = {}
    if os.path.isfile(paths.markers):
        with open(paths.markers, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        for line in lines[1:]:
            if not line.strip():
                continue
            tile_id, sm, sq, rm, rq = line.split("\t")
            truths[tile_id] = TileTruth(
                tile_id, (), bool(int(sm)), int(sq), bool(int(rm)), int(rq)
            )
    return DatasetBundle(str(root), manifest, info, truths)
