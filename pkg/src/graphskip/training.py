"""Training loop: shuffled augmented batches, validation DSC, checkpoints."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, NumericError
from .losses import supervision_targets, total_loss
from .metrics import binarize, dsc
from .model import ModelConfig, SkipNet
from .optim import Adam, cosine_lr
from .rng import keyed_rng
from .serialization import (load_checkpoint, save_checkpoint, save_tensors,
                            write_manifest)
from .synthdata import AugmentPolicy, augment
from .tensor import Tensor, no_grad

# epoch streams live in a separate key plane from corpus and init streams
EPOCH_STREAM_BASE = 1 << 32

LOG_COLUMNS = ("epoch", "lr", "loss", "iou", "region_bce", "boundary_bce",
               "val_dsc")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-4
    lr_floor: float = 1e-6
    betas: Tuple[float, float] = (0.9, 0.999)
    seed: int = 1
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        if self.lr <= 0.0 or self.lr_floor <= 0.0 or self.lr_floor > self.lr:
            raise ConfigError("need 0 < lr_floor <= lr")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def make_batch(pairs, indices, policy, rng, dtype):
    """Stack augmented samples into one (image, mask) array pair."""
    images, masks = [], []
    for idx in indices:
        image, mask = augment(pairs[idx], policy, rng)
        images.append(image)
        masks.append(mask)
    return (np.stack(images).astype(dtype, copy=False),
            np.stack(masks).astype(np.float64, copy=False))


def validate_dsc(model: SkipNet, pairs, batch_size: int = 8) -> float:
    """Mean DSC of the final-stage region head over un-augmented pairs."""
    scores = []
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            x = np.stack([p[0] for p in chunk]).astype(model.dtype, copy=False)
            outs = model.forward(Tensor(x), "eval")
            region = outs[3][0].data
            for bi, (_, mask) in enumerate(chunk):
                scores.append(dsc(binarize(region[bi, 0]), mask[0]))
    return float(np.mean(scores))


def _dump_bad_batch(out_dir: Path, epoch: int, batch_index: int,
                    images: np.ndarray, masks: np.ndarray, error: str) -> None:
    dump = out_dir / "nan_batch"
    dump.mkdir(parents=True, exist_ok=True)
    save_tensors(dump / "batch.atns", [images.astype(np.float64), masks])
    write_manifest(dump / "manifest.json",
                   {"epoch": epoch, "batch_index": batch_index,
                    "records": ["images", "masks"], "error": error})


def _append_log(path: Path, row: dict) -> None:
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if fresh:
            writer.writeheader()
        writer.writerow(row)


def train(model: SkipNet, train_pairs, val_pairs, config: TrainConfig,
          out_dir, resume: bool = False,
          stop_after: Optional[int] = None) -> dict:
    """Run (or resume) the loop; returns {"best_dsc", "best_epoch", "epochs_run"}.

    stop_after emulates an interruption: the schedule still spans
    config.epochs but the loop halts once that many epochs have finished.
    """
    if not train_pairs or not val_pairs:
        raise ConfigError("training and validation sets must be nonempty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = Adam(model.parameters(), lr=config.lr, betas=config.betas)

    start_epoch = 0
    best_dsc, best_epoch = float("-inf"), -1
    if resume:
        manifest = load_checkpoint(out_dir / "last", model, optimizer)
        start_epoch = int(manifest["epoch"]) + 1
        best_dsc = float(manifest["best_dsc"])
        best_epoch = int(manifest["best_epoch"])

    end_epoch = config.epochs if stop_after is None else min(
        config.epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, end_epoch):
        lr = cosine_lr(epoch, config.epochs, config.lr, config.lr_floor)
        optimizer.lr = lr
        rng = keyed_rng(config.seed, EPOCH_STREAM_BASE + epoch)
        order = rng.permutation(len(train_pairs))
        sums = {"loss": 0.0, "iou": 0.0, "region_bce": 0.0, "boundary_bce": 0.0}
        batches = 0
        for start in range(0, len(order), config.batch_size):
            indices = order[start:start + config.batch_size]
            images, masks = make_batch(train_pairs, indices, config.augment,
                                       rng, model.dtype)
            try:
                targets = supervision_targets(masks)
                outputs = model.forward(Tensor(images), "train")
                parts = {}
                loss = total_loss(outputs, targets, parts)
                model.zero_grad()
                loss.backward()
            except NumericError as err:
                _dump_bad_batch(out_dir, epoch, batches, images, masks, str(err))
                raise NumericError(f"aborted at epoch {epoch} batch {batches}: "
                                   f"{err}") from err
            optimizer.step()
            sums["loss"] += float(loss.data)
            for key in ("iou", "region_bce", "boundary_bce"):
                sums[key] += parts[key]
            batches += 1

        score = validate_dsc(model, val_pairs, config.batch_size)
        row = {"epoch": epoch, "lr": f"{lr:.10g}",
               "val_dsc": f"{score:.6f}"}
        for key in ("loss", "iou", "region_bce", "boundary_bce"):
            row[key] = f"{sums[key] / max(batches, 1):.6f}"
        _append_log(out_dir / "log.csv", row)

        if score > best_dsc:
            best_dsc, best_epoch = score, epoch
            save_checkpoint(out_dir / "best", model,
                            extra={"epoch": epoch, "val_dsc": score})
        save_checkpoint(out_dir / "last", model,
                        extra={"epoch": epoch, "val_dsc": score,
                               "best_dsc": best_dsc, "best_epoch": best_epoch},
                        optimizer=optimizer)

    return {"best_dsc": best_dsc, "best_epoch": best_epoch,
            "epochs_run": end_epoch - start_epoch}
