"""
CLI for xattn experiments.

    python -m src.xattn.cli <verb> [--config PATH] [--set key=value ...] [--seed N] [--out DIR]

Every run writes into <out>/<verb>-<seed>-<timestamp>/ a resolved config.json
and a manifest.json with input hashes; on success one JSON line goes to
stdout, on failure one ``error=<Class> msg=<text>`` line goes to stderr.
"""

from __future__ import annotations
import argparse
import json
import os
import platform
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import scipy

from .autodiff.checkpoint import file_sha256
from .config import RunConfig, parse_config
from .errors import ConfigError, DataError, RegistryKeyError, XattnError
from .evalkit.transfer import EvalSetting, TransferReport, enumerate_cells, eval_masks, evaluate, transfer_matrix
from .experiment import resolve_model_config, run_transfer_experiment
from .langgen.corpus import read_corpus
from .langgen.datasets import build_datasets, load_eval_cells, make_registry
from .langgen.examples import read_jsonl
from .maskgen.masks import AttentionScheme, dump_masks
from .model.encoder import ForwardTrace, XattnEncoder
from .trainer.finetune import finetune
from .trainer.pretrain import pretrain_backbone, pretrain_qcross
from .utils.logging import get_logger, set_command, set_run_id, set_seed, setup_logging

VERBS = ("gen-data", "pretrain-backbone", "pretrain-qcross", "train", "eval", "transfer", "dump-attention")
CHECKPOINT = "model.xatn"


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """
    Parse CLI arguments
    """
    parser = argparse.ArgumentParser(
        description="Structured cross-lingual attention experiments on synthetic reasoning data."
    )
    parser.add_argument("verb", choices=VERBS, help="What to run")
    parser.add_argument("--config", type=Path, default=None, help="Flat JSON config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override one config key (repeatable)",
    )
    parser.add_argument("--seed", type=int, default=None, help="Run seed (overrides the config)")
    parser.add_argument("--out", type=Path, default=Path("runs"), help="Parent directory for run folders")
    parser.add_argument(
        "--log-file",
        type=Path,
        default=None,
        help="Path to write log file (if not set, uses $LOG_FILE or logs/xattn.log)",
    )
    parser.add_argument(
        "--log-level",
        type=int,
        choices=[0, 1, 2],
        default=int(os.environ.get("LOG_LEVEL", "0")),
        help="Verbosity: 0=silent, 1=info, 2=debug (default 0 or $LOG_LEVEL)",
    )
    parser.add_argument("--log-text", action="store_true", help="Use plain text logs instead of JSON Lines")
    parser.add_argument("--run-id", default=None, help="Optional run id to correlate logs across processes")
    return parser.parse_args(argv)


class Run:
    """A run directory plus the inputs and outputs recorded in its manifest."""

    def __init__(self, verb: str, cfg: RunConfig, out: Path):
        stamp = datetime.now().strftime("%Y%m%dT%H%M%S%f")
        self.verb = verb
        self.cfg = cfg
        self.dir = out / f"{verb}-{cfg.seed}-{stamp}"
        self.dir.mkdir(parents=True, exist_ok=False)
        self.inputs: Dict[str, str] = {}
        self.outputs: List[str] = []
        cfg.save(self.dir / "config.json")

    def input(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"input file {path} does not exist")
        self.inputs[str(path)] = file_sha256(path)
        return path

    def output(self, path) -> Path:
        self.outputs.append(str(Path(path).relative_to(self.dir)))
        return Path(path)

    def finish(self) -> None:
        self.cfg.save(self.dir / "config.json")
        manifest = {
            "verb": self.verb,
            "seed": self.cfg.seed,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def _data_dir(cfg: RunConfig) -> Optional[Path]:
    return Path(cfg.data.data_dir) if cfg.data.data_dir else None


def _data_file(run: Run, explicit: str, relative: str) -> Path:
    if explicit:
        return run.input(explicit)
    base = _data_dir(run.cfg)
    if base is None:
        raise ConfigError(f"no data_dir set and no explicit path for {relative}")
    if not (base / relative).is_file():
        raise ConfigError(f"{base / relative} does not exist; run gen-data first")
    return run.input(base / relative)


def _load_model(run: Run, path: str, what: str) -> XattnEncoder:
    if not path:
        raise ConfigError(f"{what} checkpoint path is not set")
    model = XattnEncoder.load(run.input(path))
    run.cfg.model = model.config
    return model


def _fresh_or_loaded(run: Run) -> XattnEncoder:
    cfg = run.cfg
    if cfg.train.backbone_checkpoint:
        return _load_model(run, cfg.train.backbone_checkpoint, "backbone")
    cfg.model = resolve_model_config(cfg.model, make_registry(cfg.data))
    return XattnEncoder.initialize(cfg.model, cfg.seed)


def cmd_gen_data(run: Run) -> dict:
    cfg = run.cfg
    bundle = build_datasets(cfg.data, cfg.seed, run.dir / "data", cfg.model.max_seq_len)
    for f in bundle.files:
        run.output(f)
    return {"train": len(bundle.train), "dev": len(bundle.dev), "cells": len(bundle.eval_cells)}


def cmd_pretrain_backbone(run: Run) -> dict:
    cfg = run.cfg
    if cfg.train.protocol not in ("backbone-mlm", "cs-baseline"):
        cfg.train.protocol = "backbone-mlm"
    default = "corpus/mono.jsonl" if cfg.train.protocol == "backbone-mlm" else "corpus/parallel-shared.jsonl"
    corpus = read_corpus(_data_file(run, cfg.train.corpus_path, default))
    if cfg.train.protocol == "backbone-mlm" and cfg.train.backbone_langs:
        corpus = [s for s in corpus if s.segment_langs[0] in cfg.train.backbone_langs]
    model = _fresh_or_loaded(run)
    res = pretrain_backbone(model, corpus, cfg.train, cfg.seed, cfg.data.mlm_rate,
                            metrics_path=run.output(run.dir / "metrics.csv"))
    model.save(run.output(run.dir / CHECKPOINT))
    run.output(run.dir / "model.json")
    return {"perplexity": res.perplexity[-1][1], "checkpoint": str(run.dir / CHECKPOINT)}


def cmd_pretrain_qcross(run: Run) -> dict:
    cfg = run.cfg
    cfg.train.protocol = "pretrain-qcross"
    if not cfg.train.backbone_checkpoint:
        raise ConfigError("pretrain-qcross needs backbone_checkpoint")
    if not cfg.train.corpus_path and _data_dir(cfg) is None:
        raise ConfigError("pretrain-qcross needs corpus_path or data_dir")
    if not Path(cfg.train.backbone_checkpoint).is_file():
        raise ConfigError(f"backbone checkpoint {cfg.train.backbone_checkpoint} does not exist")
    model = _load_model(run, cfg.train.backbone_checkpoint, "backbone")
    path = _data_file(run, cfg.train.corpus_path, f"corpus/parallel-{cfg.train.qcross_key}.jsonl")
    res = pretrain_qcross(model, read_corpus(path), cfg.train, cfg.seed, cfg.data.mlm_rate,
                          metrics_path=run.output(run.dir / "metrics.csv"))
    model.save(run.output(run.dir / CHECKPOINT))
    run.output(run.dir / "model.json")
    return {
        "initial_perplexity": res.perplexity[0][1],
        "perplexity": res.perplexity[-1][1],
        "checkpoint": str(run.dir / CHECKPOINT),
    }


def cmd_train(run: Run) -> dict:
    cfg = run.cfg
    train = read_jsonl(_data_file(run, cfg.train.train_path, "train.jsonl"))
    dev_path = cfg.train.dev_path or (str(_data_dir(cfg) / "dev.jsonl") if _data_dir(cfg) else "")
    dev = read_jsonl(run.input(dev_path)) if dev_path else []
    model = _fresh_or_loaded(run)
    res = finetune(model, train, dev, cfg.train, cfg.seed, metrics_path=run.output(run.dir / "metrics.csv"))
    res.model.save(run.output(run.dir / CHECKPOINT))
    run.output(run.dir / "model.json")
    train_acc, dev_acc = res.epoch_accuracy[-1][2:] if res.epoch_accuracy else (None, None)
    return {"train_accuracy": train_acc, "dev_accuracy": dev_acc, "checkpoint": str(run.dir / CHECKPOINT)}


def cmd_eval(run: Run) -> dict:
    cfg = run.cfg
    model = _load_model(run, cfg.train.checkpoint, "evaluation")
    scheme = AttentionScheme(cfg.train.scheme)
    p_mask = cfg.train.resolved_p_mask()
    if cfg.eval.eval_path:
        examples = read_jsonl(run.input(cfg.eval.eval_path))
        if not examples:
            raise DataError(f"{cfg.eval.eval_path} holds no examples")
        first = examples[0]
        setting = (
            EvalSetting.mono(first.ctx_lang)
            if first.monolingual
            else EvalSetting.pair(first.ctx_lang, first.stmt_lang, cfg.data.anchor_lang)
        )
        res = evaluate(model, examples, setting, scheme, p_mask, cfg.eval.eval_policy,
                       dump_path=run.output(run.dir / "predictions.jsonl"))
        return {"accuracy": res.accuracy, "correct": res.correct, "total": res.total}

    data_dir = _data_dir(cfg)
    if data_dir is None:
        raise ConfigError("eval needs eval_path or data_dir")
    cells = load_eval_cells(data_dir)
    for p in sorted((data_dir / "eval").glob("*.jsonl")):
        run.input(p)
    langs = sorted({ex.ctx_lang for exs in cells.values() for ex in exs})
    in_language, zero_shot = enumerate_cells(langs, cfg.data.anchor_lang, cfg.data.train_lang, cfg.eval.include_reverse)
    report = TransferReport()
    for seed in cfg.eval.seeds[:1] or [cfg.seed]:
        report.extend(transfer_matrix(model, cells, in_language + zero_shot, scheme, p_mask, seed,
                                      eval_policy=cfg.eval.eval_policy))
    report.save_json(run.output(run.dir / "transfer.json"))
    report.save_csv(run.output(run.dir / "transfer.csv"))
    return {"cells": len(report.rows), "mean_accuracy": float(np.mean([r.accuracy for r in report.rows]))}


def cmd_transfer(run: Run) -> dict:
    result = run_transfer_experiment(run.cfg, run.dir)
    for f in result.files:
        run.output(f)
    return {"cells": len(result.report.rows), "zero_shot": result.headline()}


def cmd_dump_attention(run: Run) -> dict:
    cfg = run.cfg
    model = _load_model(run, cfg.train.checkpoint, "attention dump")
    if not cfg.eval.eval_path:
        raise ConfigError("dump-attention needs eval_path")
    examples = read_jsonl(run.input(cfg.eval.eval_path))
    if not 0 <= cfg.eval.dump_index < len(examples):
        raise DataError(f"dump_index {cfg.eval.dump_index} outside {len(examples)} examples")
    ex = examples[cfg.eval.dump_index]
    scheme = AttentionScheme(cfg.train.scheme)
    p_mask = cfg.train.resolved_p_mask()
    if scheme.uses_qcross:
        model = model.swap_qcross(cfg.train.qcross_key)
    seq = ex.encode()
    masks = eval_masks(seq, scheme, p_mask, cfg.eval.eval_policy)
    trace = ForwardTrace()
    model.forward(seq, masks, scheme, mode="eval", trace=trace)
    payload = {
        "tokens": list(seq.ids),
        "scheme": scheme.value,
        "logits": trace.logits[0].tolist(),
        "attention": [[head.tolist() for head in layer] for layer in trace.attentions],
    }
    path = run.output(run.dir / "attention.json")
    path.write_text(json.dumps(payload), encoding="utf-8")
    if masks is not None:
        dump_masks(run.output(run.dir / "masks.json"), masks, p_mask)
    return {"layers": len(trace.attentions), "tokens": len(seq.ids)}


COMMANDS: Dict[str, Callable[[Run], dict]] = {
    "gen-data": cmd_gen_data,
    "pretrain-backbone": cmd_pretrain_backbone,
    "pretrain-qcross": cmd_pretrain_qcross,
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "dump-attention": cmd_dump_attention,
}


def _exit_code(err: BaseException) -> int:
    if isinstance(err, XattnError):
        return err.exit_code
    if isinstance(err, RegistryKeyError):
        return ConfigError.exit_code
    return 1


def fail(err: BaseException) -> None:
    msg = " ".join(str(err).split())
    print(f"error={type(err).__name__} msg={msg}", file=sys.stderr)
    sys.exit(_exit_code(err))


def main(argv: Optional[List[str]] = None) -> None:
    args = parse_args(argv)

    # Configure the log destination first
    if args.log_file:
        os.environ["LOG_FILE"] = str(args.log_file)
    else:
        os.environ.setdefault("LOG_FILE", "logs/xattn.log")
    os.environ["LOG_LEVEL"] = str(args.log_level)
    setup_logging(level=args.log_level, json_lines=not args.log_text)
    run_id = set_run_id(args.run_id)
    set_command(args.verb)
    log = get_logger("cli")

    start_ns = time.perf_counter_ns()
    log.info("run started", extra={"phase": "run", "function": "main", "run_id": run_id})
    try:
        cfg = parse_config(args.config, args.overrides, args.seed)
        set_seed(cfg.seed)
        run = Run(args.verb, cfg, args.out)
        summary = COMMANDS[args.verb](run)
        run.finish()
    except (XattnError, RegistryKeyError, ValueError) as e:
        log.exception("run failed", extra={"phase": "run"})
        fail(e)
    dur_ms = (time.perf_counter_ns() - start_ns) // 1_000_000
    log.info("run finished", extra={"phase": "run", "function": "main", "latency_ms": dur_ms})
    print(json.dumps({"verb": args.verb, "run_dir": str(run.dir), **summary}, separators=(",", ":")))


if __name__ == "__main__":
    main()
