"""
Transfer evaluation: the in-language and zero-shot cells for a training
pair, per-cell accuracy with exact counts, and the report written as JSON
and CSV.
"""

from __future__ import annotations
import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import max_threads
from ..errors import DataError
from ..langgen.examples import ReasoningExample
from ..maskgen.masks import AttentionScheme, Masks, expected_masks, masks_for, tag_sequence
from ..model.encoder import SHARED_KEY, XattnEncoder, pair_key
from ..tokens import TokenSequence
from ..utils.logging import get_logger, log_call

log = get_logger("evalkit")

EVAL_BATCH = 64


class SettingKind(str, Enum):
    MONOLINGUAL = "monolingual"
    ANCHOR_X = "anchor-X"
    X_ANCHOR = "X-anchor"


@dataclass(frozen=True)
class EvalSetting:
    kind: SettingKind
    ctx_lang: int
    stmt_lang: int

    @classmethod
    def mono(cls, lang: int) -> "EvalSetting":
        return cls(SettingKind.MONOLINGUAL, lang, lang)

    @classmethod
    def pair(cls, ctx_lang: int, stmt_lang: int, anchor: int = 0) -> "EvalSetting":
        if ctx_lang == stmt_lang:
            raise DataError(f"code-switched setting needs two languages, got {ctx_lang}")
        if ctx_lang == anchor:
            return cls(SettingKind.ANCHOR_X, ctx_lang, stmt_lang)
        if stmt_lang == anchor:
            return cls(SettingKind.X_ANCHOR, ctx_lang, stmt_lang)
        raise DataError(f"pair ({ctx_lang}, {stmt_lang}) does not involve anchor {anchor}")

    @property
    def lang_or_pair(self) -> str:
        if self.kind == SettingKind.MONOLINGUAL:
            return str(self.ctx_lang)
        return pair_key(self.ctx_lang, self.stmt_lang)

    @property
    def cell(self) -> str:
        """File stem of the cell's dataset: eval/<cell>.jsonl"""
        return pair_key(self.ctx_lang, self.stmt_lang)


def enumerate_cells(
    languages: Sequence[int],
    anchor: int,
    train_lang: int,
    include_reverse: bool = False,
) -> Tuple[List[EvalSetting], List[EvalSetting]]:
    """(in-language cells, zero-shot cells) for training on mix(anchor, anchor-train_lang)."""
    in_language = [EvalSetting.mono(anchor), EvalSetting.pair(anchor, train_lang, anchor)]
    others = [x for x in languages if x not in (anchor, train_lang)]
    zero_shot = [EvalSetting.mono(x) for x in others]
    zero_shot += [EvalSetting.pair(anchor, x, anchor) for x in others]
    zero_shot += [EvalSetting.pair(x, anchor, anchor) for x in others]
    if include_reverse and train_lang != anchor:
        zero_shot.append(EvalSetting.pair(train_lang, anchor, anchor))
    return in_language, zero_shot


def resolve_eval_key(model: XattnEncoder, setting: Optional[EvalSetting], scheme: AttentionScheme) -> Optional[str]:
    """
    Registry key read for a setting: the setting's own pair when its matrix
    exists, else the shared matrix, else whatever the model was trained with.
    """
    if not scheme.uses_qcross:
        return None
    keys = model.qcross_keys
    if scheme == AttentionScheme.SHARED_QCROSS:
        return SHARED_KEY if SHARED_KEY in keys else model.qcross_key
    if setting is not None and setting.kind != SettingKind.MONOLINGUAL:
        own = pair_key(setting.ctx_lang, setting.stmt_lang)
        if own in keys:
            return own
    if SHARED_KEY in keys:
        return SHARED_KEY
    log.warning("no pair or shared qcross entry; using the trained key", extra={"key": model.qcross_key})
    return model.qcross_key


def eval_masks(seq: TokenSequence, scheme: AttentionScheme, p_mask: float, eval_policy: str = "full-attention") -> Masks:
    if scheme == AttentionScheme.DROPOUT and eval_policy == "expected":
        return expected_masks(tag_sequence(seq), p_mask, scheme, eval_policy)
    return masks_for(seq, scheme, p_mask, train=False)


@dataclass
class EvalResult:
    correct: int
    total: int
    predictions: List[Dict[str, int]] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


def evaluate(
    model: XattnEncoder,
    examples: Sequence[ReasoningExample],
    setting: Optional[EvalSetting],
    scheme: Union[AttentionScheme, str],
    p_mask: float = 0.0,
    eval_policy: str = "full-attention",
    key: Optional[str] = None,
    dump_path: Optional[Union[str, Path]] = None,
) -> EvalResult:
    """
    Accuracy of argmax predictions. ``setting=None`` skips the language check
    (mixed dev sets); ``key`` forces a registry entry instead of resolving one.
    """
    scheme = AttentionScheme(scheme)
    if setting is not None:
        for i, ex in enumerate(examples):
            if (ex.ctx_lang, ex.stmt_lang) != (setting.ctx_lang, setting.stmt_lang):
                raise DataError(
                    f"example {i} is ({ex.ctx_lang}, {ex.stmt_lang}) but cell {setting.cell} expects "
                    f"({setting.ctx_lang}, {setting.stmt_lang})"
                )
    if scheme.uses_qcross:
        model = model.swap_qcross(key or resolve_eval_key(model, setting, scheme))

    correct = 0
    preds = []
    for lo in range(0, len(examples), EVAL_BATCH):
        seqs = [ex.encode() for ex in examples[lo : lo + EVAL_BATCH]]
        masks = [eval_masks(seq, scheme, p_mask, eval_policy) for seq in seqs]
        logits = model.forward_batch(seqs, masks, scheme, mode="eval")
        for i, row in enumerate(logits.data, start=lo):
            pred = int(np.argmax(row))
            label = int(examples[i].label)
            correct += int(pred == label)
            preds.append({"idx": i, "pred": pred, "label": label})

    result = EvalResult(correct, len(examples), preds)
    if dump_path is not None:
        write_predictions(dump_path, preds)
    return result


def write_predictions(path: Union[str, Path], predictions: Sequence[Dict[str, int]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for row in predictions:
            f.write(json.dumps(row, separators=(",", ":")) + "\n")
    return path


@dataclass
class CellResult:
    recipe: str
    scheme: str
    setting: str
    lang_or_pair: str
    seed: int
    accuracy: float
    correct: int
    total: int


CSV_FIELDS = ("recipe", "scheme", "setting", "lang_or_pair", "seed", "accuracy")


@dataclass
class TransferReport:
    rows: List[CellResult] = field(default_factory=list)

    def add(self, row: CellResult) -> None:
        self.rows.append(row)

    def extend(self, other: "TransferReport") -> None:
        self.rows.extend(other.rows)

    @property
    def seeds(self) -> List[int]:
        return sorted({r.seed for r in self.rows})

    def summary(self) -> List[dict]:
        """Mean and population standard deviation over seeds, per cell."""
        groups: Dict[tuple, List[float]] = {}
        for r in self.rows:
            groups.setdefault((r.recipe, r.scheme, r.setting, r.lang_or_pair), []).append(r.accuracy)
        out = []
        for (recipe, scheme, setting, cell), accs in groups.items():
            out.append(
                {
                    "recipe": recipe,
                    "scheme": scheme,
                    "setting": setting,
                    "lang_or_pair": cell,
                    "n_seeds": len(accs),
                    "mean": float(np.mean(accs)),
                    "std": float(np.std(accs)),
                }
            )
        return out

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "rows": [asdict(r) for r in self.rows], "summary": self.summary()}

    def save_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return path

    def save_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_FIELDS)
            for r in self.rows:
                w.writerow([r.recipe, r.scheme, r.setting, r.lang_or_pair, r.seed, f"{r.accuracy:.6f}"])
        return path


@log_call("eval")
def transfer_matrix(
    model: XattnEncoder,
    datasets: Dict[str, List[ReasoningExample]],
    settings: Sequence[EvalSetting],
    scheme: Union[AttentionScheme, str],
    p_mask: float,
    seed: int,
    recipe: str = "mix",
    eval_policy: str = "full-attention",
    scheme_label: Optional[str] = None,
    key: Optional[str] = None,
) -> TransferReport:
    """One row per setting; cells are evaluated concurrently and merged in request order."""
    scheme = AttentionScheme(scheme)
    for s in settings:
        if s.cell not in datasets:
            raise DataError(f"no dataset for cell {s.cell} ({s.kind.value})")

    def run(s: EvalSetting) -> CellResult:
        res = evaluate(model, datasets[s.cell], s, scheme, p_mask, eval_policy, key=key)
        return CellResult(recipe, scheme_label or scheme.value, s.kind.value, s.lang_or_pair, seed,
                          res.accuracy, res.correct, res.total)

    report = TransferReport()
    with ThreadPoolExecutor(max_workers=max_threads()) as pool:
        for row in pool.map(run, settings):
            log.info(
                f"cell {row.lang_or_pair} {row.setting}",
                extra={"scheme": row.scheme, "accuracy": row.accuracy, "count": row.total},
            )
            report.add(row)
    return report
