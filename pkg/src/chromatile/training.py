"""Losses, the step-decay schedule, and the two training procedures:
chroma-prediction pretraining (encoder + decoder) and classification
fine-tuning (encoder + linear head), with per-epoch validation, best/last
checkpointing, and deterministic seeded shuffling and augmentation.

Reported validation metrics are oriented so that higher is better: the
negative validation chroma loss for pretraining, mAP for multi-label
fine-tuning, F1 for binary fine-tuning.  The report CSV columns are
epoch, lr, train_loss, val_metric (empty when that epoch was not
evaluated), is_best (1 when the evaluation improved the running best).
"""

import os
from dataclasses import dataclass, field

import numpy as np

from chromatile.colorspace import extract_ab_target
from chromatile.data.preprocess import AUGMENT_OPS, augment, resample_cubic, stack_bands
from chromatile.errors import DataError, NumericalError, UsageError
from chromatile.eval import mean_average_precision, precision_recall_f1, render_csv
from chromatile.models import (
    ClassifierHead,
    EncoderConfig,
    build_decoder,
    build_encoder,
    build_head,
    load_arrays_into,
    read_checkpoint,
    save_models_checkpoint,
)
from chromatile.numerics import (
    Tape,
    Tensor,
    abs_,
    mul,
    sgd_step,
    sigmoid_array,
    softplus,
    sub,
    sum_,
)
from chromatile.seeding import rng_for

REPORT_COLUMNS = ("epoch", "lr", "train_loss", "val_metric", "is_best")
_BATCH_OPS = ("identity",) + AUGMENT_OPS


# ------------------------------------------------------------------- losses


def colorization_loss(pred, target, lam: float = 100.0):
    """Batch mean of the per-sample weighted absolute chroma error:
    lam * sum over channels and pixels of |pred - target|."""
    pred_data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred_data.shape != target_data.shape:
        raise UsageError(
            f"chroma loss shape mismatch: {pred_data.shape} vs {target_data.shape}"
        )
    if pred_data.ndim != 4:
        raise UsageError("chroma loss expects (N, 2, H, W) maps")
    n = pred_data.shape[0]
    return mul(sum_(abs_(sub(pred, target))), lam / n)


def multilabel_bce(logits, y):
    """Mean over batch and classes of the stable binary cross-entropy
    softplus(z) - y*z, equal to -[y log sigma(z) + (1-y) log(1-sigma(z))]."""
    logits_data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    y_data = y.data if isinstance(y, Tensor) else np.asarray(y)
    if logits_data.shape != y_data.shape:
        raise UsageError(
            f"BCE shape mismatch: {logits_data.shape} vs {y_data.shape}"
        )
    if logits_data.ndim != 2:
        raise UsageError("BCE expects (N, K) logits")
    if not np.isin(y_data, (0, 1)).all():
        raise UsageError("BCE labels must be 0 or 1")
    n, k = logits_data.shape
    y_tensor = y if isinstance(y, Tensor) else Tensor(
        np.asarray(y_data, dtype=logits_data.dtype)
    )
    per_element = sub(softplus(logits), mul(logits, y_tensor))
    return mul(sum_(per_element), 1.0 / (n * k))


def binary_ce(logit, y):
    """K = 1 specialization of multilabel_bce over (N, 1) inputs."""
    data = logit.data if isinstance(logit, Tensor) else np.asarray(logit)
    if data.ndim != 2 or data.shape[1] != 1:
        raise UsageError("binary cross-entropy expects (N, 1) logits")
    return multilabel_bce(logit, y)


def lr_at_epoch(epoch: int, lr: float, drop_epochs, factor: float) -> float:
    """Piecewise-constant step decay: the rate drops by `factor` after each
    listed epoch completes, so drops (10, 40) give epochs 1-10 the base
    rate, 11-40 one drop, 41+ two."""
    return lr * factor ** sum(1 for d in drop_epochs if epoch > d)


# ------------------------------------------------------------ configuration


@dataclass(frozen=True)
class ColorizationTaskConfig:
    lam: float = 100.0
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.01
    augmentation: bool = True
    seed: int = 0

    def validate(self):
        if self.lam <= 0:
            raise UsageError("lam must be positive")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.lr < 0:
            raise UsageError("lr must be >= 0")


@dataclass(frozen=True)
class FinetuneTaskConfig:
    task: str = "multilabel"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    lr_drop_epochs: tuple = (10, 40)
    drop_factor: float = 0.1
    eval_every: int = 10
    seed: int = 0
    freeze_encoder: bool = False

    def validate(self):
        if self.task not in ("multilabel", "binary"):
            raise UsageError(f"unknown task {self.task!r}")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.lr < 0:
            raise UsageError("lr must be >= 0")
        if any(d < 1 for d in self.lr_drop_epochs):
            raise UsageError("lr drop epochs must be >= 1")
        if not 0 < self.drop_factor <= 1:
            raise UsageError("drop_factor must lie in (0, 1]")
        if self.eval_every < 1:
            raise UsageError("eval_every must be >= 1")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")
    best_checkpoint: str = ""
    last_checkpoint: str = ""

    def csv_text(self) -> str:
        return render_csv(self.rows, REPORT_COLUMNS)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())


def _format(value) -> str:
    return "" if value is None else repr(float(value))


def _report_row(epoch, lr, train_loss, val_metric, is_best):
    return {
        "epoch": str(epoch),
        "lr": _format(lr),
        "train_loss": _format(train_loss),
        "val_metric": _format(val_metric),
        "is_best": "1" if is_best else "0",
    }


class _BestTracker:
    """Online max-retention: an evaluation is best when strictly above all
    earlier ones, so ties keep the earliest epoch."""

    def __init__(self, epoch=-1, metric=float("-inf")):
        self.epoch = epoch
        self.metric = metric

    def observe(self, epoch, metric) -> bool:
        if metric > self.metric:
            self.epoch = epoch
            self.metric = metric
            return True
        return False


def _check_pair(x, y, what):
    x = np.asarray(x)
    y = np.asarray(y)
    if len(x) == 0:
        raise DataError(f"empty {what} split")
    if len(x) != len(y):
        raise UsageError(f"{what} inputs and targets disagree in length")
    return x, y


def _epoch_batches(n, batch_size, shuffle_rng):
    order = shuffle_rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _augment_batch(x_batch, y_batch, aug_rng):
    """Apply one spatial op per sample, jointly to input and target maps."""
    ops = aug_rng.integers(0, len(_BATCH_OPS), size=len(x_batch))
    x_out = np.empty_like(x_batch)
    y_out = np.empty_like(y_batch) if y_batch is not None else None
    for i, op_index in enumerate(ops):
        op = _BATCH_OPS[op_index]
        if op == "identity":
            x_out[i] = x_batch[i]
            if y_out is not None:
                y_out[i] = y_batch[i]
        else:
            x_out[i] = augment(x_batch[i], op)
            if y_out is not None:
                y_out[i] = augment(y_batch[i], op)
    return x_out, y_out


def _require_finite(value, epoch, batch_index):
    if not np.isfinite(value):
        raise NumericalError(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch_index}"
        )


# ----------------------------------------------------- colorization training


def _colorization_val_loss(encoder, decoder, val_x, val_y, lam, batch_size):
    total = 0.0
    for start in range(0, len(val_x), batch_size):
        xb = val_x[start : start + batch_size]
        yb = val_y[start : start + batch_size]
        maps, _ = encoder.forward(Tensor(xb), mode="eval")
        pred = decoder.forward(maps[-1], mode="eval")
        loss = float(colorization_loss(pred, Tensor(yb), lam).data)
        _require_finite(loss, "validation", start // batch_size)
        total += loss * len(xb)
    return total / len(val_x)


def train_colorization(
    encoder,
    decoder,
    train_set,
    val_set,
    cfg: ColorizationTaskConfig,
    out_dir,
    start_epoch: int = 0,
    best: _BestTracker = None,
    extra_metadata: dict = None,
) -> TrainReport:
    """SGD at fixed lr on the chroma-prediction objective.

    Evaluates on the validation split before training (epoch 0) and after
    every epoch; saves `best.ckpt` on improvement and `last.ckpt` every
    epoch.  The reported metric is the negative validation loss.
    """
    cfg.validate()
    train_x, train_y = _check_pair(*train_set, "train")
    val_x, val_y = _check_pair(*val_set, "validation")
    os.makedirs(out_dir, exist_ok=True)
    report = TrainReport()
    best = best or _BestTracker()

    def metadata(epoch):
        return dict(
            encoder.cfg.to_metadata(),
            **(extra_metadata or {}),
            task="colorization",
            epoch=str(epoch),
            seed=str(cfg.seed),
            lam=repr(cfg.lam),
            lr=repr(cfg.lr),
            batch_size=str(cfg.batch_size),
            epochs=str(cfg.epochs),
            augmentation="true" if cfg.augmentation else "false",
            best_epoch=str(best.epoch),
            best_metric=repr(best.metric),
        )

    def save(name, epoch):
        path = os.path.join(out_dir, name)
        save_models_checkpoint(
            path, metadata(epoch), {"encoder": encoder, "decoder": decoder}
        )
        return path

    def evaluate(epoch, train_loss):
        val_loss = _colorization_val_loss(
            encoder, decoder, val_x, val_y, cfg.lam, cfg.batch_size
        )
        metric = -val_loss
        improved = best.observe(epoch, metric)
        if improved:
            report.best_checkpoint = save("best.ckpt", epoch)
        report.rows.append(
            _report_row(
                epoch,
                None if epoch == 0 else cfg.lr,
                train_loss,
                metric,
                improved,
            )
        )

    if start_epoch == 0:
        evaluate(0, None)
        report.last_checkpoint = save("last.ckpt", 0)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        shuffle_rng = rng_for(cfg.seed, f"pretrain/epoch/{epoch}/shuffle")
        aug_rng = rng_for(cfg.seed, f"pretrain/epoch/{epoch}/augment")
        loss_sum = 0.0
        batches = _epoch_batches(len(train_x), cfg.batch_size, shuffle_rng)
        for batch_index, idx in enumerate(batches):
            xb, yb = train_x[idx], train_y[idx]
            if cfg.augmentation:
                xb, yb = _augment_batch(xb, yb, aug_rng)
            with Tape() as tape:
                maps, _ = encoder.forward(Tensor(xb), mode="train")
                pred = decoder.forward(maps[-1], mode="train")
                loss = colorization_loss(pred, Tensor(yb), cfg.lam)
            value = float(loss.data)
            _require_finite(value, epoch, batch_index)
            grads = tape.backward(loss)
            sgd_step(encoder.params, encoder.params.grads(grads), cfg.lr)
            sgd_step(decoder.params, decoder.params.grads(grads), cfg.lr)
            loss_sum += value
        evaluate(epoch, loss_sum / len(batches))
        report.last_checkpoint = save("last.ckpt", epoch)

    report.best_epoch = best.epoch
    report.best_metric = best.metric
    if not report.best_checkpoint:
        report.best_checkpoint = os.path.join(out_dir, "best.ckpt")
    return report


# ------------------------------------------------------ fine-tuning training


def classification_probabilities(encoder, head, x, batch_size: int = 64):
    """Eval-mode sigmoid class probabilities for a prepared input stack."""
    rows = []
    for start in range(0, len(x), batch_size):
        _, bottleneck = encoder.forward(Tensor(x[start : start + batch_size]), "eval")
        logits = head.forward(bottleneck)
        rows.append(sigmoid_array(logits.data))
    return np.concatenate(rows, axis=0)


def _classification_metric(encoder, head, val_x, val_y, task, batch_size):
    probs = classification_probabilities(encoder, head, val_x, batch_size)
    if task == "multilabel":
        return mean_average_precision(probs, val_y)
    return float(precision_recall_f1(probs, val_y).f1[0])


def finetune(
    encoder,
    head: ClassifierHead,
    train_set,
    val_set,
    cfg: FinetuneTaskConfig,
    out_dir,
    start_epoch: int = 0,
    best: _BestTracker = None,
    extra_metadata: dict = None,
) -> TrainReport:
    """Classification fine-tuning under the step-decay schedule.

    Evaluates at epoch 0, every `eval_every` epochs, and at the final
    epoch; the retained metric is mAP (multilabel) or F1 (binary).  With
    `freeze_encoder` the encoder runs in eval mode and only the head is
    updated, otherwise training is end-to-end.
    """
    cfg.validate()
    train_x, train_y = _check_pair(*train_set, "train")
    val_x, val_y = _check_pair(*val_set, "validation")
    if train_y.ndim != 2 or train_y.shape[1] != head.n_classes:
        raise UsageError(
            f"labels have {train_y.shape[1:]} classes, head expects {head.n_classes}"
        )
    os.makedirs(out_dir, exist_ok=True)
    report = TrainReport()
    best = best or _BestTracker()
    loss_fn = multilabel_bce if cfg.task == "multilabel" else binary_ce
    encoder_mode = "eval" if cfg.freeze_encoder else "train"

    def metadata(epoch):
        return dict(
            encoder.cfg.to_metadata(),
            **(extra_metadata or {}),
            **{
                "head.in_features": str(head.in_features),
                "head.n_classes": str(head.n_classes),
            },
            task=cfg.task,
            epoch=str(epoch),
            seed=str(cfg.seed),
            lr=repr(cfg.lr),
            lr_drop_epochs=",".join(str(d) for d in cfg.lr_drop_epochs),
            drop_factor=repr(cfg.drop_factor),
            batch_size=str(cfg.batch_size),
            epochs=str(cfg.epochs),
            eval_every=str(cfg.eval_every),
            freeze_encoder="true" if cfg.freeze_encoder else "false",
            best_epoch=str(best.epoch),
            best_metric=repr(best.metric),
        )

    def save(name, epoch):
        path = os.path.join(out_dir, name)
        save_models_checkpoint(
            path, metadata(epoch), {"encoder": encoder, "head": head}
        )
        return path

    def evaluate(epoch, lr, train_loss):
        metric = _classification_metric(
            encoder, head, val_x, val_y, cfg.task, cfg.batch_size
        )
        improved = best.observe(epoch, metric)
        if improved:
            report.best_checkpoint = save("best.ckpt", epoch)
        report.rows.append(_report_row(epoch, lr, train_loss, metric, improved))

    if start_epoch == 0:
        evaluate(0, None, None)
        report.last_checkpoint = save("last.ckpt", 0)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        lr = lr_at_epoch(epoch, cfg.lr, cfg.lr_drop_epochs, cfg.drop_factor)
        shuffle_rng = rng_for(cfg.seed, f"finetune/epoch/{epoch}/shuffle")
        loss_sum = 0.0
        batches = _epoch_batches(len(train_x), cfg.batch_size, shuffle_rng)
        for batch_index, idx in enumerate(batches):
            with Tape() as tape:
                _, bottleneck = encoder.forward(Tensor(train_x[idx]), encoder_mode)
                logits = head.forward(bottleneck)
                loss = loss_fn(logits, Tensor(train_y[idx]))
            value = float(loss.data)
            _require_finite(value, epoch, batch_index)
            grads = tape.backward(loss)
            if not cfg.freeze_encoder:
                sgd_step(encoder.params, encoder.params.grads(grads), lr)
            sgd_step(head.params, head.params.grads(grads), lr)
            loss_sum += value
        train_loss = loss_sum / len(batches)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            evaluate(epoch, lr, train_loss)
        else:
            report.rows.append(_report_row(epoch, lr, train_loss, None, False))
        report.last_checkpoint = save("last.ckpt", epoch)

    report.best_epoch = best.epoch
    report.best_metric = best.metric
    if not report.best_checkpoint:
        report.best_checkpoint = os.path.join(out_dir, "best.ckpt")
    return report


# ------------------------------------------------- checkpoint reconstruction


def load_colorization_checkpoint(path):
    """Rebuild (metadata, encoder, decoder) from a pretraining checkpoint."""
    meta, arrays = read_checkpoint(path)
    if meta.get("task") != "colorization":
        raise DataError(f"{path}: not a colorization checkpoint")
    cfg = EncoderConfig.from_metadata(meta)
    encoder = build_encoder(cfg, seed=0)
    decoder = build_decoder(cfg, seed=0)
    load_arrays_into(encoder, arrays, prefix="encoder.")
    load_arrays_into(decoder, arrays, prefix="decoder.")
    return meta, encoder, decoder


def load_classifier_checkpoint(path):
    """Rebuild (metadata, encoder, head) from a fine-tuning checkpoint."""
    meta, arrays = read_checkpoint(path)
    if meta.get("task") not in ("multilabel", "binary"):
        raise DataError(f"{path}: not a classifier checkpoint")
    cfg = EncoderConfig.from_metadata(meta)
    encoder = build_encoder(cfg, seed=0)
    head = build_head(
        int(meta["head.in_features"]), int(meta["head.n_classes"]), seed=0
    )
    load_arrays_into(encoder, arrays, prefix="encoder.")
    load_arrays_into(head, arrays, prefix="head.")
    return meta, encoder, head


def resume_state(meta):
    """(start_epoch, tracker) recovering best-retention from metadata."""
    return int(meta["epoch"]), _BestTracker(
        int(meta["best_epoch"]), float(meta["best_metric"])
    )


# ------------------------------------------------------- array preparation


def _rgb_stack(tile, rgb_ids, extent):
    grids = [tile.band(b).grid.astype(np.float64) for b in rgb_ids]
    if any(g.shape != grids[0].shape for g in grids):
        raise DataError(f"tile {tile.tile_id}: RGB bands disagree in extent")
    if grids[0].shape != (extent, extent):
        grids = [resample_cubic(g, (extent, extent)) for g in grids]
    return np.stack(grids, axis=-1)


def prepare_colorization_arrays(tiles, spectral_ids, rgb_ids, extent, stats):
    """(inputs, targets): normalized spectral stacks and chroma maps
    extracted from the raw RGB view."""
    xs, ys = [], []
    for tile in tiles:
        xs.append(stack_bands(tile, spectral_ids, extent=extent, stats=stats))
        ab = extract_ab_target(_rgb_stack(tile, rgb_ids, extent))
        ys.append(ab.transpose(2, 0, 1).astype(np.float32))
    return np.stack(xs), np.stack(ys)


def prepare_classification_arrays(tiles, labels, band_ids, extent, stats, n_classes):
    """(inputs, multi-hot labels) for one view of the dataset.

    `labels` holds one tuple of class indices per tile; with n_classes = 1
    any non-empty tuple marks the positive class (binary task).
    """
    if len(tiles) != len(labels):
        raise UsageError("tiles and labels disagree in length")
    xs = [stack_bands(t, band_ids, extent=extent, stats=stats) for t in tiles]
    y = np.zeros((len(tiles), n_classes), dtype=np.float32)
    for i, tile_labels in enumerate(labels):
        for index in tile_labels:
            if n_classes == 1:
                y[i, 0] = 1.0
            elif 0 <= index < n_classes:
                y[i, index] = 1.0
            else:
                raise DataError(f"label index {index} outside 0..{n_classes - 1}")
    return np.stack(xs), y
