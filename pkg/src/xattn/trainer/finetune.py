"""
Classifier fine-tuning (bitfit or full) on reasoning examples, with the
optional depth-0 curriculum.
"""

from __future__ import annotations
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..autodiff import Tape, cross_entropy
from ..config import TrainConfig
from ..errors import ConfigError, NumericError
from ..evalkit.transfer import evaluate
from ..langgen.examples import ReasoningExample
from ..maskgen.masks import AttentionScheme, masks_for
from ..model.encoder import XattnEncoder
from ..utils.logging import get_logger, log_call
from .metrics import FINETUNE_FIELDS, MetricsLog
from .optim import AdamW
from .prefetch import prefetch, step_rngs
from .protocols import freeze_except, trainable_names
from .schedule import lr_at

log = get_logger("trainer")


@dataclass(frozen=True)
class Phase:
    name: str
    epochs: int
    max_depth: Optional[int] = None  # None -> every item

    def select(self, examples: Sequence[ReasoningExample]) -> List[int]:
        if self.max_depth is None:
            return list(range(len(examples)))
        return [i for i, ex in enumerate(examples) if ex.depth <= self.max_depth]


def curriculum_plan(
    examples: Sequence[ReasoningExample],
    epochs: int,
    curriculum: bool,
    curriculum_epochs: int = 3,
) -> List[Phase]:
    """
    Without curriculum a single phase over everything; with it, depth-0 items
    first for ``curriculum_epochs`` epochs, then the full set for the rest.
    False statements carry depth -1 and count as depth-0 items.
    """
    if not curriculum:
        return [Phase("all", epochs)]
    if not any(ex.depth == 0 for ex in examples):
        raise ConfigError("curriculum enabled but the dataset has no depth-0 items")
    first = min(curriculum_epochs, epochs)
    phases = [Phase("depth0", first, 0)]
    if epochs > first:
        phases.append(Phase("all", epochs - first))
    return phases


@dataclass
class BatchRecord:
    step: int
    phase: str
    depths: Tuple[int, ...]


@dataclass
class TrainResult:
    model: XattnEncoder
    metrics: MetricsLog
    trainable: List[str]
    batches: List[BatchRecord] = field(default_factory=list)
    epoch_accuracy: List[Tuple[str, int, float, Optional[float]]] = field(default_factory=list)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@log_call("train")
def finetune(
    model: XattnEncoder,
    train_set: Sequence[ReasoningExample],
    dev_set: Sequence[ReasoningExample],
    cfg: TrainConfig,
    seed: int,
    metrics_path: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """Trains ``model`` in place; masks are resampled per element per step in training mode."""
    if not train_set:
        raise ConfigError("training dataset is empty")
    if cfg.protocol not in ("bitfit", "full-ft"):
        raise ConfigError(f"finetune runs bitfit or full-ft, got {cfg.protocol!r}")
    cfg.validate()
    scheme = AttentionScheme(cfg.scheme)
    p_mask = cfg.resolved_p_mask()
    key = None
    if scheme.uses_qcross:
        key = cfg.qcross_key
        if key not in model.qcross_keys:
            log.warning("qcross entry missing; installing a copy of the query", extra={"key": key})
            model.install_qcross(key)
        model = model.swap_qcross(key)

    trainable = trainable_names(model, cfg.protocol, key)
    freeze_except(model, trainable)
    opt = AdamW(model.params, trainable, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)

    phases = curriculum_plan(train_set, cfg.epochs, cfg.curriculum, cfg.curriculum_epochs)
    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    schedule: List[Tuple[str, int, np.ndarray]] = []
    for phase in phases:
        pool = np.asarray(phase.select(train_set))
        for epoch in range(phase.epochs):
            for idx in _epoch_batches(len(pool), cfg.batch_size, order_rng):
                schedule.append((phase.name, epoch, pool[idx]))
    total = len(schedule)
    rngs = step_rngs(seed, total, stream=2)

    def prepare(step: int):
        rng = rngs[step]
        batch = []
        for i in schedule[step][2]:
            ex = train_set[int(i)]
            seq = ex.encode()
            batch.append((seq, masks_for(seq, scheme, p_mask, train=True, rng=rng), int(ex.label), ex.depth))
        return batch

    metrics = MetricsLog(FINETUNE_FIELDS, metrics_path)
    result = TrainResult(model, metrics, trainable)
    correct = seen = 0
    jobs = (lambda s=s: prepare(s) for s in range(total))
    for step, batch in enumerate(prefetch(jobs)):
        phase_name, epoch, _ = schedule[step]
        lr = lr_at(step, total, cfg.peak_lr, cfg.warmup_ratio)
        with Tape() as tape:
            logits = model.forward_batch([seq for seq, _, _, _ in batch], [m for _, m, _, _ in batch], scheme, mode="train")
            loss = cross_entropy(logits, [y for _, _, y, _ in batch])
        if not math.isfinite(loss.item()):
            raise NumericError("non-finite loss", step=step)
        tape.backward(loss)
        opt.step(lr)
        opt.zero_grad()

        preds = np.argmax(logits.data, axis=1)
        correct += int(np.sum(preds == np.asarray([y for _, _, y, _ in batch])))
        seen += len(batch)
        result.batches.append(BatchRecord(step, phase_name, tuple(d for _, _, _, d in batch)))
        if step % cfg.log_interval == 0:
            metrics.append(step=step, phase=phase_name, lr=lr, loss=loss.item())
            log.debug("train step", extra={"step": step, "loss": loss.item(), "lr": lr})

        last_of_epoch = step + 1 == total or schedule[step + 1][:2] != (phase_name, epoch)
        if last_of_epoch:
            dev_acc = evaluate(model, dev_set, None, scheme, p_mask, key=key).accuracy if dev_set else None
            train_acc = correct / seen
            metrics.append(step=step, phase=phase_name, lr=lr, loss=loss.item(), dev_accuracy=dev_acc)
            result.epoch_accuracy.append((phase_name, epoch, train_acc, dev_acc))
            log.info(
                f"epoch {epoch} done",
                extra={"epoch": epoch, "phase": phase_name, "accuracy": train_acc, "loss": loss.item()},
            )
            correct = seen = 0
    return result
