"""
Masked-token training: the backbone (all encoder weights, monolingual or
code-switched corpus) and the cross-lingual query (one registry entry,
everything else frozen).
"""

from __future__ import annotations
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ..autodiff import Tape, cross_entropy, token_nll
from ..config import TrainConfig
from ..errors import ConfigError, NumericError
from ..langgen.corpus import MlmItem, mask_for_mlm
from ..maskgen.masks import AttentionScheme, masks_for
from ..model.encoder import SHARED_KEY, XattnEncoder
from ..tokens import TokenSequence
from ..utils.logging import get_logger, log_call
from .metrics import MLM_FIELDS, MetricsLog
from .optim import AdamW
from .prefetch import prefetch, step_rngs
from .protocols import freeze_except, trainable_names
from .schedule import lr_at

log = get_logger("trainer.pretrain")

N_HELDOUT = 32


@dataclass
class MlmResult:
    model: XattnEncoder
    metrics: MetricsLog
    trainable: List[str]
    perplexity: List[Tuple[int, float]] = field(default_factory=list)


def mlm_perplexity(
    model: XattnEncoder,
    items: Sequence[MlmItem],
    scheme: AttentionScheme,
    p_mask: float,
    batch_size: int = 64,
) -> Tuple[float, np.ndarray]:
    """exp(mean NLL) over every masked position, plus the per-token NLLs."""
    nll = []
    for lo in range(0, len(items), batch_size):
        chunk = items[lo : lo + batch_size]
        seqs = [it.sequence for it in chunk]
        masks = [masks_for(s, scheme, p_mask, train=False) for s in seqs]
        logits = model.mlm_forward_batch(seqs, masks, scheme, [it.positions for it in chunk], mode="eval")
        nll.extend(token_nll(logits, [t for it in chunk for t in it.targets]))
    nll = np.asarray(nll)
    return float(np.exp(nll.mean())), nll


def split_heldout(corpus: Sequence[TokenSequence]) -> Tuple[List[TokenSequence], List[TokenSequence]]:
    """
    (held-out, training) sequences: the first quarter of the corpus up to
    N_HELDOUT sequences is never drawn for training. A one-sequence corpus
    is scored on the sequence it trains on.
    """
    n_held = max(1, min(N_HELDOUT, len(corpus) // 4))
    return list(corpus[:n_held]), list(corpus[n_held:] or corpus)


def _mlm_loop(
    model: XattnEncoder,
    corpus: Sequence[TokenSequence],
    trainable: List[str],
    scheme: AttentionScheme,
    p_mask: float,
    iterations: int,
    peak_lr: float,
    cfg: TrainConfig,
    seed: int,
    mlm_rate: float,
    phase: str,
    metrics_path: Optional[Union[str, Path]],
) -> MlmResult:
    if not corpus:
        raise ConfigError(f"{phase}: corpus is empty")
    if iterations < 0:
        raise ConfigError("iterations must be non-negative")
    freeze_except(model, trainable)
    opt = AdamW(model.params, trainable, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)

    held_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    held_seqs, pool = split_heldout(corpus)
    heldout = [mask_for_mlm(seq, held_rng, mlm_rate) for seq in held_seqs]
    metrics = MetricsLog(MLM_FIELDS, metrics_path)
    result = MlmResult(model, metrics, trainable)

    def checkpoint_perplexity(step: int, lr: float, loss: Optional[float]) -> None:
        ppl, _ = mlm_perplexity(model, heldout, scheme, p_mask)
        result.perplexity.append((step, ppl))
        metrics.append(step=step, phase=phase, lr=lr, loss=loss, perplexity=ppl)
        log.info("perplexity", extra={"step": step, "perplexity": ppl, "phase": phase})

    checkpoint_perplexity(0, 0.0, None)
    rngs = step_rngs(seed, iterations, stream=4)

    def prepare(step: int):
        rng = rngs[step]
        batch = []
        for i in rng.integers(len(pool), size=cfg.batch_size):
            item = mask_for_mlm(pool[int(i)], rng, mlm_rate)
            batch.append((item, masks_for(item.sequence, scheme, p_mask, train=True, rng=rng)))
        return batch

    jobs = (lambda s=s: prepare(s) for s in range(iterations))
    for step, batch in enumerate(prefetch(jobs)):
        lr = lr_at(step, iterations, peak_lr, cfg.warmup_ratio)
        with Tape() as tape:
            logits = model.mlm_forward_batch(
                [it.sequence for it, _ in batch], [m for _, m in batch], scheme, [it.positions for it, _ in batch]
            )
            loss = cross_entropy(logits, [t for it, _ in batch for t in it.targets])
        if not math.isfinite(loss.item()):
            raise NumericError("non-finite loss", step=step)
        tape.backward(loss)
        opt.step(lr)
        opt.zero_grad()
        done = step + 1
        if done % cfg.log_interval == 0:
            log.debug("mlm step", extra={"step": done, "loss": loss.item(), "lr": lr})
        if done % cfg.eval_interval == 0 or done == iterations:
            checkpoint_perplexity(done, lr, loss.item())
    return result


@log_call("pretrain")
def pretrain_backbone(
    model: XattnEncoder,
    corpus: Sequence[TokenSequence],
    cfg: TrainConfig,
    seed: int,
    mlm_rate: float = 0.15,
    iterations: Optional[int] = None,
    peak_lr: Optional[float] = None,
    metrics_path: Optional[Union[str, Path]] = None,
) -> MlmResult:
    """
    All-weight masked-token training under standard attention:
    ``backbone-mlm`` on monolingual text, ``cs-baseline`` on parallel
    code-switched text.
    """
    protocol = cfg.protocol if cfg.protocol in ("backbone-mlm", "cs-baseline") else "backbone-mlm"
    trainable = trainable_names(model, protocol)
    return _mlm_loop(
        model, corpus, trainable, AttentionScheme.STANDARD, 0.0,
        cfg.iterations if iterations is None else iterations,
        cfg.peak_lr if peak_lr is None else peak_lr,
        cfg, seed, mlm_rate, protocol, metrics_path,
    )


@log_call("pretrain")
def pretrain_qcross(
    model: XattnEncoder,
    corpus: Sequence[TokenSequence],
    cfg: TrainConfig,
    seed: int,
    mlm_rate: float = 0.15,
    iterations: Optional[int] = None,
    peak_lr: Optional[float] = None,
    metrics_path: Optional[Union[str, Path]] = None,
) -> MlmResult:
    """
    Trains only ``qcross/<cfg.qcross_key>/*`` on parallel text; the entry is
    installed from the query weights first if the registry lacks it.
    """
    key = cfg.qcross_key
    if key not in model.qcross_keys:
        model.install_qcross(key)
    view = model.swap_qcross(key)
    scheme = AttentionScheme.SHARED_QCROSS if key == SHARED_KEY else AttentionScheme.PAIR_QCROSS
    p_mask = cfg.p_mask if cfg.p_mask >= 0 else 1.0
    trainable = trainable_names(view, "pretrain-qcross", key)
    result = _mlm_loop(
        view, corpus, trainable, scheme, p_mask,
        cfg.iterations if iterations is None else iterations,
        cfg.peak_lr if peak_lr is None else peak_lr,
        cfg, seed, mlm_rate, f"pretrain-qcross[{key}]", metrics_path,
    )
    result.model = model
    return result
