"""Training and evaluation loops."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.tensor import Tape, Tensor, backward
from .config import ExperimentConfig
from .data import load_samples, read_manifest, split_patients
from .data.patches import PatchSpec, binarize, predict_volume, sample_patch
from .data.split import SplitSpec
from .data.synth import VolumeSample
from .losses import LossWeights, dmtl_loss, inverse_frequency_weights, soft_dice_loss, weighted_cross_entropy
from .metrics import classification_accuracy, dice_score
from .model import DMTLModel, build_model, forward, save_checkpoint
from .optim import AdamState, step_parameters

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "train_loss", "seg_loss", "class_loss", "val_dice", "val_accuracy"]


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    seg_loss: float
    class_loss: float | None
    val_dice: float | None
    val_accuracy: float | None
    wall_time: float = 0.0

    def row(self) -> list[str]:
        def f(v):
            return "" if v is None else repr(float(v))
        return [str(self.epoch), f(self.train_loss), f(self.seg_loss), f(self.class_loss),
                f(self.val_dice), f(self.val_accuracy)]


@dataclass
class EvalResult:
    patient_ids: list[str]
    dice: list[float]
    labels: list[int]
    logits: np.ndarray | None

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")

    @property
    def accuracy(self) -> float | None:
        if self.logits is None:
            return None
        return classification_accuracy(self.logits, self.labels)


@dataclass
class TrainResult:
    model: DMTLModel
    best_model: DMTLModel
    log: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    class_weights: tuple[float, ...] = ()


def evaluate(model: DMTLModel, samples: list[VolumeSample], patch, stride=None,
             threshold: float = 0.5) -> EvalResult:
    """Stitched whole-volume dice per patient plus window-averaged class logits."""
    ids, dice, labels, logits = [], [], [], []
    for s in samples:
        prob, lg = predict_volume(model, s.image, patch, stride)
        ids.append(s.patient_id)
        dice.append(dice_score(binarize(prob, threshold), s.mask))
        labels.append(s.label)
        if lg is not None:
            logits.append(lg)
    return EvalResult(ids, dice, labels, np.stack(logits) if logits else None)


def make_batches(n: int, batch_size: int, patches_per_volume: int, rng: np.random.Generator):
    order = np.concatenate([rng.permutation(n) for _ in range(patches_per_volume)])
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train_step(model: DMTLModel, images: np.ndarray, masks: np.ndarray, labels: np.ndarray,
               weights: LossWeights, adam: AdamState) -> tuple[float, float, float | None]:
    """Forward, combined loss, backward and one Adam update."""
    model.zero_grad()
    tape = Tape()
    out = forward(model, Tensor(images), tape)
    with tape:
        l_seg = soft_dice_loss(out.seg_prob, Tensor(masks.astype(images.dtype)), weights.epsilon_dice)
        l_cls = None
        if out.class_logits is not None:
            l_cls = weighted_cross_entropy(out.class_logits, labels, weights.class_weights)
        loss = dmtl_loss(l_seg, l_cls, weights)
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss {loss.item()}")
    backward(tape, loss)
    step_parameters(model.params, adam)
    return loss.item(), l_seg.item(), None if l_cls is None else l_cls.item()


def train(cfg: ExperimentConfig, out_dir=None, samples=None) -> TrainResult:
    """Run the epoch loop described by ``cfg``; writes outputs when ``out_dir`` is given.

    ``samples`` may carry pre-loaded (train, val) sample lists to skip disk reads.
    """
    cfg.validate()
    if samples is None:
        manifest = read_manifest(cfg.data_root)
        tr_m, va_m, _ = split_patients(manifest, SplitSpec(seed=cfg.split_seed))
        train_s, val_s = load_samples(tr_m), load_samples(va_m)
    else:
        train_s, val_s = samples
    mcfg = cfg.model_config
    spec = PatchSpec(cfg.patch, cfg.patches_per_volume, cfg.tumor_prob, seed=cfg.seed)
    spec.validate(train_s[0].image.shape[1:], mcfg.stages)
    class_weights = cfg.class_weights or inverse_frequency_weights([s.label for s in train_s], mcfg.num_classes)
    weights = LossWeights(cfg.lambda_class, cfg.epsilon_dice, tuple(class_weights))
    model = build_model(mcfg, cfg.seed)
    adam = AdamState(lr=cfg.lr)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(cfg.dumps())

    result = TrainResult(model, model.copy(), class_weights=tuple(class_weights))
    best = -1.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        losses, segs, clss = [], [], []
        for idx in make_batches(len(train_s), cfg.batch_size, cfg.patches_per_volume, rng):
            pairs = [sample_patch(train_s[i], spec, rng) for i in idx]
            images = np.stack([p[0] for p in pairs])
            masks = np.stack([p[1] for p in pairs])
            labels = np.array([train_s[i].label for i in idx])
            lt, ls, lc = train_step(model, images, masks, labels, weights, adam)
            losses.append(lt)
            segs.append(ls)
            if lc is not None:
                clss.append(lc)
        val_dice = val_acc = None
        if val_s and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            ev = evaluate(model, val_s, cfg.patch, cfg.stride, cfg.threshold)
            val_dice, val_acc = ev.mean_dice, ev.accuracy
            if val_dice > best:
                best = val_dice
                result.best_model = model.copy()
                result.best_epoch = epoch
        rec = EpochRecord(epoch, float(np.mean(losses)), float(np.mean(segs)),
                          float(np.mean(clss)) if clss else None, val_dice, val_acc,
                          time.perf_counter() - t0)
        result.log.append(rec)
        log.info("epoch %d loss %.4f seg %.4f val_dice %s (%.1fs)", epoch, rec.train_loss,
                 rec.seg_loss, "-" if val_dice is None else f"{val_dice:.4f}", rec.wall_time)
        if out is not None:
            write_log(result.log, out)
    if result.best_epoch == 0:
        result.best_model = model.copy()
        result.best_epoch = cfg.epochs
    if out is not None:
        save_checkpoint(model, out / "model_final.ckpt")
        save_checkpoint(result.best_model, out / "model_best.ckpt")
    return result


def write_log(records: list[EpochRecord], out_dir) -> None:
    out = Path(out_dir)
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in records:
            w.writerow(r.row())
    # wall-clock times vary run to run, so they live apart from the deterministic log
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "wall_time"])
        for r in records:
            w.writerow([r.epoch, f"{r.wall_time:.3f}"])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
