"""Two-stage training: pixel classifier warm-up, then the full model.

Stage A trains the frontend and confidence head as a plain per-pixel
classifier under mean cross-entropy — these produce the confidence
maps that drive node scheduling.  Stage B adds the Graph LSTM layers
and the final classifier and fine-tunes everything on the
region-broadcast parsing loss, with newly added layers at ``lr_new``
and the pretrained frontend/head at ``lr_pretrained``.

SGD with momentum and weight decay:
    v <- momentum * v - lr * (grad + weight_decay * param)
    param <- param + v
Weight decay skips bias vectors.  Batches average gradients over
independent tapes.  Everything is seeded; two runs with equal inputs
produce bit-identical checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .metrics import ConfusionMatrix, confusion, iou
from .model import (STAGE_A_PARAMS, ParseOutput, ParserConfig, embed_frontend,
                    head_logits, init_params, parse)
from .numerics import ParamStore, Tape, Tensor
from .superpixel import SuperpixelMap, slic
from .toydata import ToySample


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SgdConfig:
    lr_new: float = 0.001
    lr_pretrained: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 2
    epochs_a: int = 30
    epochs_b: int = 30

    def validate(self) -> None:
        if self.lr_new < 0 or self.lr_pretrained < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs_a < 0 or self.epochs_b < 0:
            raise ValueError("bad batch size or epoch counts")


@dataclass
class DataConfig:
    train_n: int = 200
    val_n: int = 50
    image_size: int = 64
    parts: int = 6
    noise_sigma: float = 0.05


@dataclass
class EpochStats:
    epoch: int
    stage: str
    train_loss: float
    val_loss: float
    val_miou: float


def history_csv(history: list[EpochStats]) -> str:
    lines = ["epoch,stage,train_loss,val_loss,val_miou"]
    for row in history:
        lines.append(f"{row.epoch},{row.stage},{row.train_loss:.6f},"
                     f"{row.val_loss:.6f},{row.val_miou:.6f}")
    return "\n".join(lines) + "\n"


def loss(out: ParseOutput, gt: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of the region-broadcast prediction.

    Each pixel's class distribution is the softmax of its region's
    logits, so the loss reduces to a region-by-label weighted sum of
    log-softmax terms with weights = pixel counts / total pixels.
    """
    logits = out.node_logits
    sp = out.superpixels
    n = sp.width * sp.height
    labels = logits.data.shape[1]
    if gt.shape != (sp.height, sp.width):
        raise ValueError("ground truth dims do not match the parse output")
    if gt.min() < 0 or gt.max() >= labels:
        raise ValueError(f"ground-truth label out of range [0, {labels})")
    idx = sp.labels.ravel() * labels + gt.ravel()
    weights = np.bincount(idx, minlength=sp.region_count * labels) \
        .reshape(sp.region_count, labels) / n
    logp = nm.log_softmax_rows(logits)
    return nm.scale(nm.total(nm.mul(logp, Tensor(weights))), -1.0)


def stage_a_loss(sample: ToySample, cfg: ParserConfig, store: ParamStore,
                 tape: Tape | None = None) -> Tensor:
    """Per-pixel cross-entropy of the frontend+head pixel classifier."""
    img = sample.image
    n = img.width * img.height
    logits = head_logits(embed_frontend(img, store, tape), store, tape)
    onehot = np.zeros((n, cfg.labels))
    onehot[np.arange(n), sample.gt.ravel()] = 1.0
    logp = nm.log_softmax_rows(logits)
    return nm.scale(nm.total(nm.mul(logp, Tensor(onehot))), -1.0 / n)


def sgd_step(store: ParamStore, velocity: dict[str, np.ndarray],
             names: list[str], lr: float, momentum: float,
             weight_decay: float) -> None:
    for name in names:
        p = store[name]
        wd = 0.0 if name.rsplit(".", 1)[-1].startswith("b") else weight_decay
        g = p.grad + wd * p.data
        step = -lr * p.lr_mult * g
        v = velocity.get(name)
        v = step if v is None else momentum * v + step
        velocity[name] = v
        p.data += v


def _check_finite(value: float, store: ParamStore, where: str) -> None:
    if math.isfinite(value):
        return
    for p in store:
        if not np.isfinite(p.data).all() or not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite loss at {where}; first "
                                   f"offending parameter: {p.name}")
    raise TrainingDiverged(f"non-finite loss at {where} with finite "
                           f"parameters (bad input?)")


def build_caches(samples: list[ToySample],
                 cfg: ParserConfig) -> list[SuperpixelMap]:
    return [slic(s.image, cfg.superpixel_k, cfg.compactness, cfg.slic_iters)
            for s in samples]


def evaluate(samples: list[ToySample], cfg: ParserConfig, store: ParamStore,
             sps: list[SuperpixelMap] | None = None):
    """Aggregate-confusion metrics and mean loss of the full parser."""
    if sps is None:
        sps = build_caches(samples, cfg)
    cm = ConfusionMatrix(np.zeros((cfg.labels, cfg.labels), dtype=np.int64))
    total_loss = 0.0
    for s, sp in zip(samples, sps):
        out = parse(s.image, cfg, store, sp=sp)
        cm = cm + confusion(out.label_map, s.gt, cfg.labels)
        total_loss += float(loss(out, s.gt).data)
    _, miou = iou(cm)
    return cm, miou, total_loss / max(1, len(samples))


def _pixel_eval(samples: list[ToySample], cfg: ParserConfig,
                store: ParamStore) -> tuple[float, float]:
    """Stage-A validation: per-pixel head argmax, no superpixels."""
    cm = ConfusionMatrix(np.zeros((cfg.labels, cfg.labels), dtype=np.int64))
    total_loss = 0.0
    for s in samples:
        total_loss += float(stage_a_loss(s, cfg, store).data)
        logits = head_logits(embed_frontend(s.image, store), store)
        pred = np.argmax(logits.data, axis=1).reshape(s.gt.shape)
        cm = cm + confusion(pred, s.gt, cfg.labels)
    _, miou = iou(cm)
    return total_loss / max(1, len(samples)), miou


def train_two_stage(train_data: list[ToySample], val_data: list[ToySample],
                    cfg: ParserConfig, sgd: SgdConfig, seed: int,
                    store: ParamStore | None = None,
                    log=None) -> tuple[ParamStore, list[EpochStats]]:
    """Run both training stages and return the final parameters plus
    one history row per epoch."""
    if not train_data:
        raise ValueError("empty training set")
    cfg.validate()
    sgd.validate()
    if store is None:
        store = init_params(cfg, seed)
    shuffle_rng = np.random.default_rng([seed, 0x5EED])
    history: list[EpochStats] = []

    def run_stage(stage: str, epochs: int, names: list[str],
                  step_loss) -> None:
        velocity: dict[str, np.ndarray] = {}
        for e in range(epochs):
            order = shuffle_rng.permutation(len(train_data))
            epoch_loss = 0.0
            for lo in range(0, len(order), sgd.batch_size):
                batch = order[lo:lo + sgd.batch_size]
                store.zero_grads()
                for si in batch:
                    tape = Tape()
                    lv = step_loss(train_data[int(si)], int(si), tape)
                    value = float(lv.data)
                    _check_finite(value, store,
                                  f"stage {stage} epoch {e + 1}")
                    nm.backward(lv)
                    epoch_loss += value
                store.scale_grads(1.0 / len(batch))
                sgd_step(store, velocity, names, sgd.lr_new, sgd.momentum,
                         sgd.weight_decay)
            epoch_loss /= len(train_data)
            if stage == "A":
                val_loss, val_miou = (_pixel_eval(val_data, cfg, store)
                                      if val_data else (math.nan, math.nan))
            else:
                if val_data:
                    _, val_miou, val_loss = evaluate(val_data, cfg, store,
                                                     val_caches)
                else:
                    val_loss = val_miou = math.nan
            history.append(EpochStats(epoch=len(history) + 1, stage=stage,
                                      train_loss=epoch_loss,
                                      val_loss=val_loss, val_miou=val_miou))
            if log:
                log(history[-1])

    run_stage("A", sgd.epochs_a, list(STAGE_A_PARAMS),
              lambda s, si, tape: stage_a_loss(s, cfg, store, tape))

    if cfg.layers > 0 and sgd.epochs_b > 0:
        # pretrained layers continue at the reduced rate
        ratio = (sgd.lr_pretrained / sgd.lr_new) if sgd.lr_new > 0 else 1.0
        for name in STAGE_A_PARAMS:
            store[name].lr_mult = ratio
        train_caches = build_caches(train_data, cfg)
        val_caches = build_caches(val_data, cfg) if val_data else []

        def stage_b_loss(s: ToySample, si: int, tape: Tape) -> Tensor:
            out = parse(s.image, cfg, store, sp=train_caches[si], tape=tape)
            return loss(out, s.gt)

        run_stage("B", sgd.epochs_b, store.names(), stage_b_loss)
    return store, history
