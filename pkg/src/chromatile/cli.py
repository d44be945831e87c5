"""Command-line orchestration.

Subcommands: ``gen-data`` (synthetic dataset), ``pretrain`` (chroma
prediction), ``finetune`` (classification sweep cells), ``ensemble``
(two-branch fusion), ``explain`` (heatmaps and divergence), ``report``
(sweep aggregation).  Global flags: ``--seed``, ``--out``, ``--config``,
``--profile {desk,full}``, ``--threads``; the CHROMA_OUT environment
variable supplies the default output root.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every artifact a command writes is byte-identical across re-runs with the
same inputs and seeds; wall-clock timestamps appear only in run.log.
"""

import argparse
import itertools
import os
import sys
from dataclasses import replace
from datetime import datetime

import numpy as np

from chromatile import config as configmod
from chromatile.data import (
    SyntheticConfig,
    compute_normalization_stats,
    generate_synthetic_dataset,
    load_dataset,
    read_tile,
    subsample_budget,
)
from chromatile.ensemble import EnsembleBundle, run_ensemble, write_predictions_csv
from chromatile.errors import ChromatileError, DataError, NumericalError, UsageError
from chromatile.eval import (
    mean_average_precision,
    parse_csv,
    precision_recall_f1,
    render_csv,
    render_table,
)
from chromatile.explain import divergence_score, gradcam, write_composite_pgm, write_pgm
from chromatile.models import (
    EncoderConfig,
    build_decoder,
    build_encoder,
    build_head,
    read_checkpoint,
    restore_matching,
)
from chromatile.seeding import derive_seed
from chromatile.training import (
    REPORT_COLUMNS,
    ColorizationTaskConfig,
    FinetuneTaskConfig,
    classification_probabilities,
    finetune,
    load_classifier_checkpoint,
    load_colorization_checkpoint,
    prepare_classification_arrays,
    prepare_colorization_arrays,
    resume_state,
    train_colorization,
)

PROFILES = ("desk", "full")


class _Parser(argparse.ArgumentParser):
    """argparse maps its own failures to exit code 2; this CLI wants 1."""

    def error(self, message):
        raise UsageError(message)


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument(
        "--out",
        default=None,
        help="output root (default: $CHROMA_OUT)",
    )
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("--profile", choices=PROFILES, default="desk")
    parser.add_argument("--threads", type=int, default=1)


def _out_root(args) -> str:
    out = args.out or os.environ.get("CHROMA_OUT")
    if not out:
        raise UsageError("no output root: pass --out or set CHROMA_OUT")
    return out


def _config_values(args) -> dict:
    return configmod.load_config(args.config) if args.config else {}


def _log(out_root, message: str) -> None:
    os.makedirs(out_root, exist_ok=True)
    stamp = datetime.now().isoformat(timespec="seconds")
    with open(os.path.join(out_root, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(f"[{stamp}] {message}\n")


# ------------------------------------------------------------ configuration


def _synthetic_config(values: dict) -> SyntheticConfig:
    base = SyntheticConfig()
    fractions = configmod.as_str_list(
        values, "synthetic.fractions", list(map(str, base.fractions))
    )
    try:
        fractions = tuple(float(f) for f in fractions)
    except ValueError:
        raise UsageError(
            "config key 'synthetic.fractions' must be three numbers"
        ) from None
    return SyntheticConfig(
        n_tiles=configmod.as_int(values, "synthetic.n_tiles", base.n_tiles),
        extent=configmod.as_int(values, "synthetic.extent", base.extent),
        n_spectral_bands=configmod.as_int(
            values, "synthetic.n_spectral_bands", base.n_spectral_bands
        ),
        n_classes=configmod.as_int(values, "synthetic.n_classes", base.n_classes),
        noise=configmod.as_float(values, "synthetic.noise", base.noise),
        task=configmod.as_str(values, "synthetic.task", base.task),
        marker_prob=configmod.as_float(
            values, "synthetic.marker_prob", base.marker_prob
        ),
        rgb_marker_prob=configmod.as_float(
            values, "synthetic.rgb_marker_prob", base.rgb_marker_prob
        ),
        positive_fraction=configmod.as_float(
            values, "synthetic.positive_fraction", base.positive_fraction
        ),
        mixed_resolution=configmod.as_bool(
            values, "synthetic.mixed_resolution", base.mixed_resolution
        ),
        fractions=fractions,
    )


def _pretrain_config(profile: str, values: dict, seed: int) -> ColorizationTaskConfig:
    if profile == "full":
        base = ColorizationTaskConfig(
            lam=100.0, epochs=50, batch_size=16, lr=0.01, augmentation=True
        )
    else:
        base = ColorizationTaskConfig(
            lam=100.0, epochs=20, batch_size=4, lr=2e-6, augmentation=True
        )
    return ColorizationTaskConfig(
        lam=configmod.as_float(values, "pretrain.lam", base.lam),
        epochs=configmod.as_int(values, "pretrain.epochs", base.epochs),
        batch_size=configmod.as_int(values, "pretrain.batch_size", base.batch_size),
        lr=configmod.as_float(values, "pretrain.lr", base.lr),
        augmentation=configmod.as_bool(
            values, "pretrain.augmentation", base.augmentation
        ),
        seed=seed,
    )


def _finetune_config(
    profile: str, task: str, values: dict, seed: int
) -> FinetuneTaskConfig:
    if profile == "full":
        base = FinetuneTaskConfig(
            task=task,
            epochs=30,
            batch_size=64 if task == "multilabel" else 32,
            lr=0.1 if task == "multilabel" else 0.001,
            lr_drop_epochs=(10, 40) if task == "multilabel" else (25,),
            eval_every=10,
        )
    else:
        base = FinetuneTaskConfig(
            task=task,
            epochs=20,
            batch_size=8,
            lr=0.03,
            lr_drop_epochs=(15,),
            eval_every=10,
        )
    drops = configmod.as_int_list(
        values, "finetune.lr_drop_epochs", list(base.lr_drop_epochs)
    )
    return FinetuneTaskConfig(
        task=task,
        epochs=configmod.as_int(values, "finetune.epochs", base.epochs),
        batch_size=configmod.as_int(values, "finetune.batch_size", base.batch_size),
        lr=configmod.as_float(values, "finetune.lr", base.lr),
        lr_drop_epochs=tuple(drops),
        drop_factor=configmod.as_float(
            values, "finetune.drop_factor", base.drop_factor
        ),
        eval_every=configmod.as_int(values, "finetune.eval_every", base.eval_every),
        seed=seed,
        freeze_encoder=configmod.as_bool(
            values, "finetune.freeze_encoder", base.freeze_encoder
        ),
    )


# ------------------------------------------------------------- dataset access


class _Dataset:
    """A loaded dataset plus lazily cached split tiles and band statistics."""

    def __init__(self, root):
        self.bundle = load_dataset(root)
        info = self.bundle.info
        for key in (
            "dataset.task",
            "dataset.n_classes",
            "dataset.extent",
            "dataset.spectral_bands",
            "dataset.rgb_bands",
        ):
            if key not in info:
                raise DataError(f"{root}: dataset.cfg lacks {key!r}")
        self.task = info["dataset.task"]
        self.n_classes = int(info["dataset.n_classes"])
        self.extent = int(info["dataset.extent"])
        self.spectral_bands = info["dataset.spectral_bands"].split(",")
        self.rgb_bands = info["dataset.rgb_bands"].split(",")
        self._tiles = {}
        self._stats = {}
        self._prepared = {}

    def entries(self, split: str):
        return self.bundle.manifest.split(split)

    def tiles(self, split: str):
        if split not in self._tiles:
            self._tiles[split] = [
                read_tile(self.bundle.tile_path(e)) for e in self.entries(split)
            ]
        return self._tiles[split]

    def stats(self, band_ids):
        key = tuple(band_ids)
        if key not in self._stats:
            self._stats[key] = compute_normalization_stats(self.tiles("train"), key)
        return self._stats[key]

    def band_universe(self):
        return list(self.spectral_bands) + list(self.rgb_bands)

    def resolve_input(self, name: str):
        """Input view name -> band id list."""
        if name == "rgb":
            return list(self.rgb_bands)
        if name == "spectral":
            return list(self.spectral_bands)
        if name.startswith("subset:"):
            bands = [b.strip() for b in name[len("subset:") :].split(",") if b.strip()]
            if not bands:
                raise UsageError("empty band subset")
            universe = set(self.band_universe())
            unknown = [b for b in bands if b not in universe]
            if unknown:
                raise UsageError(
                    f"unknown bands in subset: {', '.join(unknown)} "
                    f"(dataset has {', '.join(sorted(universe))})"
                )
            if len(set(bands)) != len(bands):
                raise UsageError("duplicate bands in subset")
            return bands
        raise UsageError(
            f"unknown input view {name!r} (expected rgb, spectral, or subset:B...)"
        )

    def classification_split(self, split: str, band_ids):
        key = (split, tuple(band_ids))
        if key not in self._prepared:
            entries = self.entries(split)
            self._prepared[key] = prepare_classification_arrays(
                self.tiles(split),
                [e.labels for e in entries],
                band_ids,
                self.extent,
                self.stats(band_ids),
                self.n_classes,
            )
        return self._prepared[key]


def _tile_id(entry) -> str:
    return os.path.splitext(os.path.basename(entry.tile_path))[0]


def _split_views(spec: str) -> "list[str]":
    """Comma list of views; commas inside a subset:... item bind to it."""
    views = []
    for token in spec.split(","):
        token = token.strip()
        if token in ("rgb", "spectral") or token.startswith("subset:") or not views:
            views.append(token)
        else:
            views[-1] += "," + token
    return views


def _encoder_config(profile: str, in_channels: int, extent: int) -> EncoderConfig:
    if profile == "full":
        return EncoderConfig.full(in_channels, extent)
    return EncoderConfig.desk(in_channels, extent)


def _metric_for(task: str, probabilities, labels) -> float:
    if task == "multilabel":
        return float(mean_average_precision(probabilities, labels))
    return float(precision_recall_f1(probabilities, labels).f1[0])


def _metric_name(task: str) -> str:
    return "map" if task == "multilabel" else "f1"


# ----------------------------------------------------------------- gen-data


def _cmd_gen_data(args):
    out = _out_root(args)
    cfg = _synthetic_config(_config_values(args))
    manifest, _, paths = generate_synthetic_dataset(
        cfg, seed=args.seed, out_dir=out, threads=args.threads
    )
    _log(out, f"gen-data seed={args.seed} tiles={cfg.n_tiles} -> {paths.root}")
    sizes = {
        split: len(manifest.split(split)) for split in ("train", "val", "test")
    }
    print(
        f"dataset at {paths.root}: "
        + " ".join(f"{k}={v}" for k, v in sizes.items())
    )


# ----------------------------------------------------------------- pretrain


def _write_report(path, rows, columns, start_epoch: int = 0) -> None:
    """Write (or, on resume, splice) the per-epoch report CSV."""
    if start_epoch > 0 and os.path.isfile(path):
        with open(path, "r", encoding="utf-8") as fh:
            old_rows, _ = parse_csv(fh.read())
        kept = [r for r in old_rows if int(r["epoch"]) <= start_epoch]
        rows = kept + rows
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(render_csv(rows, columns))


def _cmd_pretrain(args):
    out = _out_root(args)
    data = _Dataset(args.data)
    values = _config_values(args)
    task_cfg = _pretrain_config(args.profile, values, args.seed)

    train_set = prepare_colorization_arrays(
        data.tiles("train"),
        data.spectral_bands,
        data.rgb_bands,
        data.extent,
        data.stats(data.spectral_bands),
    )
    val_set = prepare_colorization_arrays(
        data.tiles("val"),
        data.spectral_bands,
        data.rgb_bands,
        data.extent,
        data.stats(data.spectral_bands),
    )

    start_epoch, best = 0, None
    if args.resume:
        last = os.path.join(out, "last.ckpt")
        if not os.path.isfile(last):
            raise DataError(f"cannot resume: no checkpoint at {last}")
        meta, encoder, decoder = load_colorization_checkpoint(last)
        start_epoch, best = resume_state(meta)
    else:
        enc_cfg = _encoder_config(
            args.profile, len(data.spectral_bands), data.extent
        )
        encoder = build_encoder(enc_cfg, seed=derive_seed(args.seed, "pretrain/encoder"))
        decoder = build_decoder(enc_cfg, seed=derive_seed(args.seed, "pretrain/decoder"))

    _log(out, f"pretrain start profile={args.profile} seed={args.seed} "
              f"epoch={start_epoch}")
    report = train_colorization(
        encoder,
        decoder,
        train_set,
        val_set,
        task_cfg,
        out,
        start_epoch=start_epoch,
        best=best,
        extra_metadata={
            "profile": args.profile,
            "input_bands": ",".join(data.spectral_bands),
        },
    )
    _write_report(
        os.path.join(out, "report.csv"), report.rows, list(REPORT_COLUMNS), start_epoch
    )
    _log(out, f"pretrain done best_epoch={report.best_epoch}")
    print(
        f"pretrain finished: best epoch {report.best_epoch} "
        f"(val loss {-report.best_metric!r}), checkpoints in {out}"
    )


# ----------------------------------------------------------------- finetune


def _init_encoder(init: str, enc_cfg: EncoderConfig, seed: int):
    """Encoder per the init spec; returns (encoder, init_name, skipped)."""
    if init == "scratch":
        return build_encoder(enc_cfg, seed=seed), "scratch", []
    for tag, allowed in (("colorization", ("colorization",)),
                         ("surrogate", ("multilabel", "binary"))):
        if init.startswith(tag + ":"):
            path = init[len(tag) + 1 :]
            meta, arrays = read_checkpoint(path)
            if meta.get("task") not in allowed:
                raise DataError(
                    f"{path}: task {meta.get('task')!r} cannot seed a "
                    f"{tag} initialization"
                )
            base = EncoderConfig.from_metadata(meta)
            if base.input_extent != enc_cfg.input_extent:
                raise UsageError(
                    f"checkpoint extent {base.input_extent} does not match "
                    f"dataset extent {enc_cfg.input_extent}"
                )
            if tuple(base.stage_widths) != tuple(enc_cfg.stage_widths):
                raise UsageError(
                    "checkpoint and profile disagree on stage widths: "
                    f"{base.stage_widths} vs {enc_cfg.stage_widths}"
                )
            encoder = build_encoder(enc_cfg, seed=seed)
            _, skipped = restore_matching(encoder, arrays, prefix="encoder.")
            return encoder, tag, skipped
    raise UsageError(
        f"unknown init {init!r} (expected scratch, colorization:PATH, or "
        f"surrogate:PATH)"
    )


FINETUNE_ROW_COLUMNS = ("init", "input", "budget", "seed", "metric", "value")


def _cmd_finetune(args):
    out = _out_root(args)
    data = _Dataset(args.data)
    values = _config_values(args)

    inits = args.init.split(",") if args.init else configmod.as_str_list(
        values, "sweep.inits", ["scratch"]
    )
    inputs = _split_views(args.input) if args.input else configmod.as_str_list(
        values, "sweep.inputs", ["spectral"]
    )
    if args.budget:
        budgets = [int(tok) for tok in args.budget.split(",")]
    else:
        budgets = configmod.as_int_list(values, "sweep.budgets", [])
    budgets = budgets or [None]
    if args.seeds:
        seeds = [int(tok) for tok in args.seeds.split(",")]
    else:
        seeds = configmod.as_int_list(values, "sweep.seeds", [args.seed])

    train_entries = data.entries("train")
    rows = []
    for init, input_name, budget, seed in itertools.product(
        inits, inputs, budgets, seeds
    ):
        bands = data.resolve_input(input_name)
        if budget is None:
            cell_entries = list(train_entries)
        else:
            cell_entries = subsample_budget(train_entries, budget, seed=seed)
        keep = {id(e) for e in cell_entries}
        indices = [i for i, e in enumerate(train_entries) if id(e) in keep]

        full_x, full_y = data.classification_split("train", bands)
        train_set = (full_x[indices], full_y[indices])
        val_set = data.classification_split("val", bands)
        test_x, test_y = data.classification_split("test", bands)

        enc_cfg = _encoder_config(args.profile, len(bands), data.extent)
        encoder, init_name, skipped = _init_encoder(
            init, enc_cfg, seed=derive_seed(seed, "finetune/encoder")
        )
        head = build_head(
            enc_cfg.bottleneck_width(),
            data.n_classes,
            seed=derive_seed(seed, "finetune/head"),
        )
        task_cfg = _finetune_config(args.profile, data.task, values, seed)

        input_tag = input_name.replace("subset:", "subset-").replace(",", "+")
        budget_tag = "all" if budget is None else str(budget)
        tag = f"{init_name}-{input_tag}-b{budget_tag}-s{seed}"
        cell_dir = os.path.join(out, "finetune", tag)
        _log(out, f"finetune start {tag}")
        if skipped:
            print(f"{tag}: reinitialized (no checkpoint match): "
                  + ", ".join(skipped))

        report = finetune(
            encoder,
            head,
            train_set,
            val_set,
            task_cfg,
            cell_dir,
            extra_metadata={
                "profile": args.profile,
                "input_bands": ",".join(bands),
                "init": init_name,
                "budget": budget_tag,
            },
        )
        _write_report(
            os.path.join(cell_dir, "report.csv"), report.rows, list(REPORT_COLUMNS)
        )

        _, best_encoder, best_head = load_classifier_checkpoint(
            os.path.join(cell_dir, "best.ckpt")
        )
        probs = classification_probabilities(best_encoder, best_head, test_x)
        value = _metric_for(data.task, probs, test_y)
        row = {
            "init": init_name,
            "input": input_tag,
            "budget": budget_tag,
            "seed": str(seed),
            "metric": _metric_name(data.task),
            "value": repr(value),
        }
        rows.append(row)
        with open(
            os.path.join(cell_dir, "metrics.csv"), "w", encoding="utf-8", newline=""
        ) as fh:
            fh.write(render_csv([row], list(FINETUNE_ROW_COLUMNS)))
        _log(out, f"finetune done {tag}")
        print(
            f"{tag}: test {row['metric']}={value:.6f} "
            f"(best epoch {report.best_epoch})"
        )
    return rows


# ----------------------------------------------------------------- ensemble


ENSEMBLE_ROW_COLUMNS = ("branch", "budget", "seed", "metric", "value")


def _cmd_ensemble(args):
    out = _out_root(args)
    data = _Dataset(args.data)

    branches = {}
    for name, path in (("rgb", args.rgb), ("spectral", args.spectral)):
        meta, encoder, head = load_classifier_checkpoint(path)
        if "input_bands" not in meta:
            raise DataError(f"{path}: checkpoint does not record its input bands")
        branches[name] = (encoder, head, meta, meta["input_bands"].split(","))
    k_rgb = branches["rgb"][1].n_classes
    k_spec = branches["spectral"][1].n_classes
    if k_rgb != k_spec:
        raise UsageError(
            f"label-space mismatch: rgb branch has {k_rgb} classes, "
            f"spectral branch has {k_spec}"
        )
    if k_rgb != data.n_classes:
        raise UsageError(
            f"label-space mismatch: branches have {k_rgb} classes, "
            f"dataset has {data.n_classes}"
        )

    split = args.split
    entries = data.entries(split)
    views, labels = {}, None
    for name in ("rgb", "spectral"):
        x, labels = data.classification_split(split, branches[name][3])
        views[name] = x

    bundle = EnsembleBundle(
        (branches["rgb"][0], branches["rgb"][1]),
        (branches["spectral"][0], branches["spectral"][1]),
        data.n_classes,
    )
    fused = run_ensemble(bundle, views)
    meta_s = branches["spectral"][2]
    tag = args.tag or (
        f"b{meta_s.get('budget', 'x')}-s{meta_s.get('seed', 'x')}"
    )
    cell_dir = os.path.join(out, "ensemble", tag)
    os.makedirs(cell_dir, exist_ok=True)
    _log(out, f"ensemble start {tag}")

    rows = []
    for branch in ("rgb", "spectral"):
        encoder, head = branches[branch][0], branches[branch][1]
        probs = classification_probabilities(encoder, head, views[branch])
        rows.append(
            {
                "branch": branch,
                "budget": meta_s.get("budget", ""),
                "seed": meta_s.get("seed", ""),
                "metric": _metric_name(data.task),
                "value": repr(_metric_for(data.task, probs, labels)),
            }
        )
    rows.append(
        {
            "branch": "ensemble",
            "budget": meta_s.get("budget", ""),
            "seed": meta_s.get("seed", ""),
            "metric": _metric_name(data.task),
            "value": repr(_metric_for(data.task, fused, labels)),
        }
    )

    write_predictions_csv(
        os.path.join(cell_dir, "predictions.csv"),
        [_tile_id(e) for e in entries],
        fused,
    )
    with open(
        os.path.join(cell_dir, "metrics.csv"), "w", encoding="utf-8", newline=""
    ) as fh:
        fh.write(render_csv(rows, list(ENSEMBLE_ROW_COLUMNS)))
    table = render_table(rows, list(ENSEMBLE_ROW_COLUMNS))
    with open(
        os.path.join(cell_dir, "table.txt"), "w", encoding="utf-8", newline=""
    ) as fh:
        fh.write(table)
    _log(out, f"ensemble done {tag}")
    print(table, end="")
    return rows


# ------------------------------------------------------------------ explain


def _cmd_explain(args):
    out = _out_root(args)
    data = _Dataset(args.data)
    paths = args.checkpoint
    if not paths or len(paths) > 2:
        raise UsageError("explain takes one or two --checkpoint paths")

    branches = []
    for path in paths:
        meta, encoder, head = load_classifier_checkpoint(path)
        if "input_bands" not in meta:
            raise DataError(f"{path}: checkpoint does not record its input bands")
        bands = meta["input_bands"].split(",")
        tag = "rgb" if bands == list(data.rgb_bands) else "spectral"
        branches.append((encoder, head, bands, tag))

    split = args.split
    entries = data.entries(split)
    by_id = {_tile_id(e): i for i, e in enumerate(entries)}
    if args.tiles:
        wanted = [t.strip() for t in args.tiles.split(",") if t.strip()]
        unknown = [t for t in wanted if t not in by_id]
        if unknown:
            raise UsageError(
                f"unknown tile ids in split {split!r}: {', '.join(unknown)}"
            )
        picks = [(t, by_id[t]) for t in wanted]
    else:
        picks = [(_tile_id(e), i) for i, e in enumerate(entries[: args.limit])]

    prepared = [
        data.classification_split(split, bands)[0] for _, _, bands, _ in branches
    ]

    explain_dir = os.path.join(out, "explain")
    os.makedirs(explain_dir, exist_ok=True)
    _log(out, f"explain start tiles={len(picks)} checkpoints={len(branches)}")

    div_rows = []
    for tile_id, index in picks:
        if args.cls == "top":
            stacked = np.mean(
                [
                    classification_probabilities(enc, head, x[index : index + 1])
                    for (enc, head, _, _), x in zip(branches, prepared)
                ],
                axis=0,
            )
            class_index = int(np.argmax(stacked[0]))
        else:
            class_index = int(args.cls)
        heatmaps = []
        for pos, ((encoder, head, _, tag), x) in enumerate(zip(branches, prepared)):
            heatmap = gradcam(encoder, head, x[index], class_index, tag)
            stem = f"{tile_id}-{pos}-{tag}-c{class_index}"
            write_pgm(os.path.join(explain_dir, stem + ".pgm"), heatmap.grid)
            preview = x[index].mean(axis=0)
            spread = preview.max() - preview.min()
            if spread > 0:
                preview = (preview - preview.min()) / spread
            else:
                preview = np.zeros_like(preview)
            write_composite_pgm(
                os.path.join(explain_dir, stem + "-composite.pgm"), preview, heatmap
            )
            heatmaps.append(heatmap)
        if len(heatmaps) == 2:
            div_rows.append(
                {
                    "tile_id": tile_id,
                    "class_index": str(class_index),
                    "divergence": repr(divergence_score(*heatmaps)),
                }
            )

    if div_rows:
        with open(
            os.path.join(explain_dir, "divergence.csv"),
            "w",
            encoding="utf-8",
            newline="",
        ) as fh:
            fh.write(render_csv(div_rows, ["tile_id", "class_index", "divergence"]))
        mean_div = float(np.mean([float(r["divergence"]) for r in div_rows]))
        with open(
            os.path.join(explain_dir, "divergence-summary.txt"),
            "w",
            encoding="utf-8",
            newline="",
        ) as fh:
            fh.write(f"mean_divergence = {mean_div!r}\n")
        print(f"mean divergence over {len(div_rows)} tiles: {mean_div:.6f}")
    _log(out, "explain done")
    print(f"heatmaps in {explain_dir}")


# ------------------------------------------------------------------- report


def _cmd_report(args):
    out = _out_root(args)

    def collect(kind):
        rows = []
        root = os.path.join(out, kind)
        if os.path.isdir(root):
            for name in sorted(os.listdir(root)):
                path = os.path.join(root, name, "metrics.csv")
                if os.path.isfile(path):
                    with open(path, "r", encoding="utf-8") as fh:
                        cell_rows, _ = parse_csv(fh.read())
                    rows.extend(cell_rows)
        return rows

    def sort_key(row, keys):
        out_key = []
        for key in keys:
            value = row.get(key, "")
            out_key.append(
                (0, int(value)) if value.lstrip("-").isdigit() else (1, value)
            )
        return out_key

    finetune_rows = collect("finetune")
    finetune_rows.sort(key=lambda r: sort_key(r, ["init", "input", "budget", "seed"]))

    ensemble_cells = {}
    for row in collect("ensemble"):
        key = (row.get("budget", ""), row.get("seed", ""))
        cell = ensemble_cells.setdefault(
            key, {"budget": key[0], "seed": key[1], "metric": row.get("metric", "")}
        )
        cell[row["branch"]] = row.get("value", "")
    ensemble_rows = sorted(
        ensemble_cells.values(), key=lambda r: sort_key(r, ["budget", "seed"])
    )

    report_dir = os.path.join(out, "report")
    os.makedirs(report_dir, exist_ok=True)
    with open(
        os.path.join(report_dir, "metrics.csv"), "w", encoding="utf-8", newline=""
    ) as fh:
        fh.write(render_csv(finetune_rows, list(FINETUNE_ROW_COLUMNS)))
    ensemble_columns = ["budget", "seed", "metric", "rgb", "spectral", "ensemble"]
    with open(
        os.path.join(report_dir, "ensemble.csv"), "w", encoding="utf-8", newline=""
    ) as fh:
        fh.write(render_csv(ensemble_rows, ensemble_columns))

    text = (
        "fine-tuning sweep\n"
        + render_table(finetune_rows, list(FINETUNE_ROW_COLUMNS))
        + "\nensemble\n"
        + render_table(ensemble_rows, ensemble_columns)
    )
    with open(
        os.path.join(report_dir, "report.txt"), "w", encoding="utf-8", newline=""
    ) as fh:
        fh.write(text)
    _log(out, f"report rows: finetune={len(finetune_rows)} "
              f"ensemble={len(ensemble_rows)}")
    print(
        f"report: {len(finetune_rows)} fine-tuning rows, "
        f"{len(ensemble_rows)} ensemble rows -> {report_dir}"
    )


# -------------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="chromatile", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="chroma-prediction pretraining")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt")
    p.set_defaults(handler=_cmd_pretrain)

    p = sub.add_parser("finetune", help="classification fine-tuning cells")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None,
                   help="comma list: scratch | colorization:PATH | surrogate:PATH")
    p.add_argument("--input", default=None,
                   help="comma list: rgb | spectral | subset:B05,B08")
    p.add_argument("--budget", default=None, help="comma list of label budgets")
    p.add_argument("--seeds", default=None, help="comma list of cell seeds")
    p.set_defaults(handler=_cmd_finetune)

    p = sub.add_parser("ensemble", help="two-branch sigmoid-average fusion")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--rgb", required=True, help="rgb-branch classifier checkpoint")
    p.add_argument("--spectral", required=True,
                   help="spectral-branch classifier checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--tag", default=None, help="output subdirectory name")
    p.set_defaults(handler=_cmd_ensemble)

    p = sub.add_parser("explain", help="heatmaps and branch divergence")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append",
                   help="classifier checkpoint (repeat for divergence)")
    p.add_argument("--tiles", default=None, help="comma list of tile ids")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=8,
                   help="tiles to explain when --tiles is absent")
    p.add_argument("--class", dest="cls", default="top",
                   help="top or an explicit class index")
    p.set_defaults(handler=_cmd_explain)

    p = sub.add_parser("report", help="aggregate sweep metrics")
    _add_common(p)
    p.set_defaults(handler=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "handler"):
            parser.error("missing command")
        args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ChromatileError as exc:  # base-class fallback
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
