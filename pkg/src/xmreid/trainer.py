"""SGD training loop: warmup/decay schedule, identity-balanced batches,
per-step loss logging and epoch-level dynamic aggregation.

All stochasticity (batch order, image draws, augmentation) is derived
from (seed, epoch), so a run is reproducible bit-for-bit on one platform
and resuming from a checkpoint continues exactly where the uninterrupted
run would be.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .checkpoint import (load_checkpoint, model_tensors, optimizer_tensors,
                         restore_optimizer, save_checkpoint)
from .config import ExperimentConfig
from .datagen import VISIBLE, load_image, load_manifest
from .errors import (ConfigurationError, ContractError, ModelError,
                     NumericalError, TrainingAbort)
from .losses import dynamic_weight
from .model import build_model
from .sampling import epoch_batches

log = logging.getLogger(__name__)

_NS_AUGMENT = 20
_CROP_PAD = 4
TRAIN_LOG_NAME = "train_log.jsonl"
FINAL_CHECKPOINT = "checkpoint_final.ckpt"


def lr_at(epoch, base_lr, warmup_epochs, lr_decay):
    """Learning rate for a 1-based epoch: linear warmup from 10% of base,
    then base until a decay threshold multiplies it down."""
    if epoch < 1:
        raise ContractError("epoch numbering starts at 1")
    factor = 1.0
    for threshold in sorted(lr_decay):
        if epoch >= threshold:
            factor = lr_decay[threshold]
    if factor == 1.0 and warmup_epochs > 0 and epoch <= warmup_epochs:
        if warmup_epochs == 1:
            factor = 1.0
        else:
            factor = 0.1 + 0.9 * (epoch - 1) / (warmup_epochs - 1)
    return base_lr * factor


def _augment(images, generator):
    """Random horizontal flip (p=0.5) and random crop with 4px zero-padding."""
    count = images.shape[0]
    flips = torch.rand(count, generator=generator) < 0.5
    offsets = torch.randint(0, 2 * _CROP_PAD + 1, (count, 2), generator=generator)
    padded = torch.nn.functional.pad(images, (_CROP_PAD,) * 4)
    height, width = images.shape[2], images.shape[3]
    out = torch.empty_like(images)
    for i in range(count):
        dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
        crop = padded[i, :, dy:dy + height, dx:dx + width]
        out[i] = torch.flip(crop, dims=(2,)) if bool(flips[i]) else crop
    return out


def _normalize(images):
    return (images - 0.5) / 0.5


@dataclass
class FitResult:
    checkpoint_path: Path
    log_path: Path
    out_dir: Path


class Trainer:
    def __init__(self, config: ExperimentConfig, manifest, out_dir):
        if manifest.split is None:
            raise ConfigurationError("manifest has no train/test split")
        self.config = config
        self.manifest = manifest
        self.out_dir = Path(out_dir)
        self.train_records = manifest.records_for(manifest.train_ids)
        if not self.train_records:
            raise ConfigurationError("empty train split")
        self.class_of = {ident: i for i, ident in enumerate(sorted(set(manifest.train_ids)))}
        self.num_classes = len(self.class_of)
        self._cache = None

    def _images(self):
        # one-time load of the train split; infrared replicated to 3 channels
        if self._cache is None:
            cache = []
            for record in self.train_records:
                tensor = load_image(record, self.manifest.root)
                if record.modality != VISIBLE:
                    tensor = tensor.repeat(3, 1, 1)
                cache.append(tensor)
            self._cache = torch.stack(cache)
        return self._cache

    def _assemble(self, batch, generator):
        images = self._images()[torch.tensor(batch.record_indices)]
        images = _augment(images, generator)
        labels = torch.tensor([self.class_of[l] for l in batch.labels], dtype=torch.long)
        mask = torch.tensor(batch.modality_mask, dtype=torch.bool)
        return _normalize(images), labels, mask

    def _build(self, seed):
        cfg = self.config
        backbone_config = BackboneConfig(
            variant=cfg.model.variant,
            stage_channels=tuple(cfg.model.stage_channels),
            shared_from_stage=cfg.model.shared_from_stage,
        )
        model = build_model(
            backbone_config, self.num_classes, cfg.train.mode,
            cfg.model.parts, cfg.model.graph_heads, cfg.model.graph_dim,
            cfg.train.margin, seed=seed,
        )
        optimizer = torch.optim.SGD(model.parameters(), lr=cfg.train.base_lr,
                                    momentum=cfg.train.momentum,
                                    weight_decay=cfg.train.weight_decay)
        return model, optimizer

    def _checkpoint(self, path, model, optimizer, epoch, mean_part_loss):
        header = {
            "config": self.config.to_dict(),
            "epoch": epoch,
            "rng_state": {"seed": self.config.train.seed, "completed_epoch": epoch},
            "num_classes": self.num_classes,
            "running_mean_L_P": mean_part_loss,
        }
        tensors = dict(model_tensors(model))
        tensors.update(optimizer_tensors(model, optimizer))
        save_checkpoint(path, header, tensors)

    def train_epoch(self, model, optimizer, epoch, mean_part_loss_prev, log_file):
        cfg = self.config
        lr = lr_at(epoch, cfg.train.base_lr, cfg.train.warmup_epochs, cfg.train.lr_decay)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batches = epoch_batches(self.train_records, cfg.sampler.n, cfg.sampler.m,
                                cfg.train.seed, epoch)
        generator = torch.Generator()
        generator.manual_seed(int(np.random.SeedSequence(
            (cfg.train.seed, _NS_AUGMENT, epoch)).generate_state(1)[0]))
        part_losses = []
        model.train()
        for step, batch in enumerate(batches, start=1):
            images, labels, mask = self._assemble(batch, generator)
            try:
                total, report = model.compute_losses(images, labels, mask, mean_part_loss_prev)
            except NumericalError as exc:
                raise TrainingAbort(
                    "non-finite values at epoch %d step %d: %s" % (epoch, step, exc),
                    batch_indices=batch.record_indices,
                ) from exc
            if not (report.is_finite() and bool(torch.isfinite(total))):
                raise TrainingAbort(
                    "non-finite loss at epoch %d step %d" % (epoch, step),
                    batch_indices=batch.record_indices, report=report.to_dict(),
                )
            optimizer.zero_grad()
            total.backward()
            if cfg.train.grad_clip_norm:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip_norm)
            optimizer.step()
            part_losses.append(report.L_P)
            record = {"epoch": epoch, "step": step, "lr": lr}
            record.update(report.to_dict())
            log_file.write(json.dumps(record) + "\n")
        mean_part_loss = sum(part_losses) / len(part_losses)
        log_file.write(json.dumps({
            "epoch": epoch,
            "mean_L_P": mean_part_loss,
            "dynamic_weight_next": dynamic_weight(mean_part_loss),
        }) + "\n")
        return mean_part_loss

    def fit(self, resume_from=None) -> FitResult:
        torch.use_deterministic_algorithms(True)
        cfg = self.config
        self.out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(self.out_dir / "config.json")

        if resume_from is not None:
            header, tensors = load_checkpoint(resume_from)
            if header["num_classes"] != self.num_classes:
                raise ModelError("checkpoint was trained with a different identity set")
            model, optimizer = self._build(cfg.train.seed)
            model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim/")})
            restore_optimizer(model, optimizer, tensors)
            start_epoch = header["epoch"] + 1
            mean_part_loss = header["running_mean_L_P"]
            log_mode = "a"
        else:
            model, optimizer = self._build(cfg.train.seed)
            start_epoch = 1
            mean_part_loss = None
            log_mode = "w"

        log_path = self.out_dir / TRAIN_LOG_NAME
        with open(log_path, log_mode) as log_file:
            for epoch in range(start_epoch, cfg.train.epochs + 1):
                mean_part_loss = self.train_epoch(
                    model, optimizer, epoch, mean_part_loss, log_file)
                log.info("epoch %d/%d mean L_P %.4f", epoch, cfg.train.epochs, mean_part_loss)
                if cfg.train.checkpoint_every and epoch % cfg.train.checkpoint_every == 0:
                    self._checkpoint(self.out_dir / ("checkpoint_epoch%04d.ckpt" % epoch),
                                     model, optimizer, epoch, mean_part_loss)
        final = self.out_dir / FINAL_CHECKPOINT
        self._checkpoint(final, model, optimizer, cfg.train.epochs, mean_part_loss)
        return FitResult(final, log_path, self.out_dir)


def fit(config: ExperimentConfig, data_dir, out_dir, resume_from=None) -> FitResult:
    manifest = load_manifest(data_dir)
    return Trainer(config, manifest, out_dir).fit(resume_from=resume_from)
