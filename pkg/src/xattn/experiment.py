"""
End-to-end transfer experiment. Per seed: backbone pretraining, Q_cross
pretraining (shared and one entry per anchor pair), fine-tuning for every
attention scheme, then the transfer matrix and attention stability.
"""

from __future__ import annotations
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List

import numpy as np

from .config import ModelConfig, RunConfig
from .errors import ConfigError
from .evalkit.stability import StabilityReport, attention_stability
from .evalkit.transfer import SettingKind, TransferReport, enumerate_cells, transfer_matrix
from .langgen.datasets import DatasetBundle, build_datasets, stability_pairs
from .langgen.languages import LanguageRegistry
from .maskgen.masks import AttentionScheme
from .model.encoder import SHARED_KEY, XattnEncoder, pair_key
from .trainer.finetune import finetune
from .trainer.pretrain import pretrain_backbone, pretrain_qcross
from .utils.logging import get_logger, log_call, set_seed

log = get_logger("experiment")

RECIPES = ("mix", "cs-baseline")


def resolve_model_config(model: ModelConfig, registry: LanguageRegistry) -> ModelConfig:
    """Fill a zero vocab_size from the registry; reject one too small for it."""
    need = registry.vocab_size
    if model.vocab_size == 0:
        model = replace(model, vocab_size=need)
    elif model.vocab_size < need:
        raise ConfigError(f"vocab_size {model.vocab_size} is smaller than the {need} tokens in use")
    model.validate()
    return model


def pretrain_backbone_for(cfg: RunConfig, bundle: DatasetBundle, model_cfg: ModelConfig, seed: int, out: Path) -> XattnEncoder:
    langs = cfg.train.backbone_langs or bundle.registry.ids
    mono = [s for s in bundle.mono if s.segment_langs[0] in langs]
    backbone = XattnEncoder.initialize(model_cfg, seed)
    pretrain_backbone(
        backbone, mono, replace(cfg.train, protocol="backbone-mlm"), seed, cfg.data.mlm_rate,
        iterations=cfg.eval.backbone_iterations, peak_lr=cfg.eval.backbone_lr,
        metrics_path=out / "backbone.csv",
    )
    return backbone


def qcross_keys_needed(schemes: List[AttentionScheme], bundle: DatasetBundle) -> List[str]:
    keys = []
    if any(s.uses_qcross for s in schemes):
        keys.append(SHARED_KEY)
    if AttentionScheme.PAIR_QCROSS in schemes:
        keys += sorted(k for k in bundle.parallel if k != SHARED_KEY)
    return keys


@dataclass
class ExperimentResult:
    report: TransferReport
    stability: List[StabilityReport] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)

    def headline(self) -> Dict[str, float]:
        """Mean zero-shot code-switched accuracy per scheme."""
        out: Dict[str, List[float]] = {}
        for r in self.report.rows:
            if r.setting != SettingKind.MONOLINGUAL.value:
                out.setdefault(f"{r.recipe}/{r.scheme}", []).append(r.accuracy)
        return {k: float(np.mean(v)) for k, v in out.items()}


@log_call("transfer")
def run_transfer_experiment(cfg: RunConfig, out: Path) -> ExperimentResult:
    out = Path(out)
    for recipe in cfg.eval.recipes:
        if recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {recipe!r} (expected one of {RECIPES})")
    schemes = [AttentionScheme(s) for s in cfg.eval.schemes]
    bundle = build_datasets(cfg.data, cfg.seed, out / "data", cfg.model.max_seq_len)
    model_cfg = resolve_model_config(cfg.model, bundle.registry)
    cfg.model = model_cfg

    anchor, train_lang = cfg.data.anchor_lang, cfg.data.train_lang
    ids = bundle.registry.ids
    in_language, zero_shot = enumerate_cells(ids, anchor, train_lang, cfg.eval.include_reverse)
    settings = in_language + zero_shot
    train_key = pair_key(anchor, train_lang)
    others = [x for x in ids if x not in (anchor, train_lang)] or [train_lang]
    pairs = stability_pairs(bundle.test_items, bundle.registry, anchor, others, cfg.eval.n_stability_pairs)
    protocol = cfg.train.protocol if cfg.train.protocol in ("bitfit", "full-ft") else "bitfit"

    result = ExperimentResult(TransferReport())
    for seed in cfg.eval.seeds:
        set_seed(seed)
        seed_dir = out / f"seed{seed}"
        backbone = pretrain_backbone_for(cfg, bundle, model_cfg, seed, seed_dir)
        for key in qcross_keys_needed(schemes, bundle):
            pretrain_qcross(
                backbone, bundle.parallel[key],
                replace(cfg.train, protocol="pretrain-qcross", qcross_key=key, p_mask=-1.0),
                seed, cfg.data.mlm_rate, peak_lr=cfg.eval.qcross_lr,
                metrics_path=seed_dir / f"qcross-{key}.csv",
            )

        runs = []
        if "mix" in cfg.eval.recipes:
            runs += [(f"mix-{protocol}", s, backbone) for s in schemes]
        if "cs-baseline" in cfg.eval.recipes:
            cs = backbone.clone()
            pretrain_backbone(
                cs, bundle.parallel[SHARED_KEY], replace(cfg.train, protocol="cs-baseline"), seed,
                cfg.data.mlm_rate, iterations=cfg.eval.backbone_iterations, peak_lr=cfg.eval.backbone_lr,
                metrics_path=seed_dir / "cs-baseline.csv",
            )
            runs.append((f"cs-baseline-{protocol}", AttentionScheme.STANDARD, cs))

        for recipe, scheme, base in runs:
            key = train_key if scheme == AttentionScheme.PAIR_QCROSS else SHARED_KEY
            tcfg = replace(cfg.train, protocol=protocol, scheme=scheme.value, qcross_key=key)
            p_mask = tcfg.resolved_p_mask()
            trained = finetune(
                base.clone(), bundle.train, bundle.dev, tcfg, seed,
                metrics_path=seed_dir / f"{recipe}-{scheme.value}.csv",
            ).model
            result.report.extend(
                transfer_matrix(trained, bundle.eval_cells, settings, scheme, p_mask, seed, recipe, cfg.eval.eval_policy)
            )
            if scheme == AttentionScheme.PAIR_QCROSS:
                swapped = [s for s in zero_shot if s.kind == SettingKind.ANCHOR_X]
                if swapped:
                    result.report.extend(
                        transfer_matrix(
                            trained, bundle.eval_cells, swapped, scheme, p_mask, seed, recipe,
                            cfg.eval.eval_policy, scheme_label=f"{scheme.value}[{train_key}]", key=train_key,
                        )
                    )
            if pairs:
                stab = attention_stability(trained, pairs, scheme, p_mask, cfg.eval.eval_policy)
                result.stability.append(stab)
                result.files.append(stab.save(seed_dir / f"stability-{recipe}-{scheme.value}.json"))

    result.files += [
        result.report.save_json(out / "transfer.json"),
        result.report.save_csv(out / "transfer.csv"),
    ]
    log.info("transfer experiment done", extra={"count": len(result.report.rows)})
    return result
