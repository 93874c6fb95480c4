"""
Attention stability between an in-language input and its code-switched
parallel: per layer and head, 1 - mean Jensen-Shannon divergence (base 2)
over aligned attention rows.
"""

from __future__ import annotations
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy.special import rel_entr

from ..errors import ContractError
from ..langgen.examples import ReasoningExample
from ..maskgen.masks import AttentionScheme
from ..model.encoder import ForwardTrace, XattnEncoder
from ..utils.logging import get_logger, log_call
from .transfer import EvalSetting, eval_masks, resolve_eval_key

log = get_logger("evalkit.stability")

StabilityPair = Tuple[ReasoningExample, ReasoningExample, np.ndarray]


def row_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """1 - mean over rows of JSD(a_i, b_i), base 2."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"attention shapes differ: {a.shape} vs {b.shape}")
    a = a / a.sum(axis=1, keepdims=True)
    b = b / b.sum(axis=1, keepdims=True)
    m = 0.5 * (a + b)
    jsd = 0.5 * (rel_entr(a, m) + rel_entr(b, m)).sum(axis=1) / np.log(2.0)
    return float(1.0 - np.mean(np.clip(jsd, 0.0, 1.0)))


def align(att: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Reorder rows and columns so entry (i, j) refers to the first input's positions."""
    return att[np.ix_(perm, perm)]


@dataclass
class StabilityReport:
    scheme: str
    per_layer_head: np.ndarray  # [layer, head]
    n_pairs: int

    @property
    def aggregate(self) -> float:
        return float(self.per_layer_head.mean())

    def to_json(self) -> dict:
        return {
            "scheme": self.scheme,
            "n_pairs": self.n_pairs,
            "aggregate": self.aggregate,
            "per_layer": [row.tolist() for row in self.per_layer_head],
        }

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")
        return path


def trace_example(
    model: XattnEncoder,
    ex: ReasoningExample,
    scheme: AttentionScheme,
    p_mask: float,
    eval_policy: str = "full-attention",
) -> ForwardTrace:
    setting = EvalSetting.mono(ex.ctx_lang) if ex.monolingual else EvalSetting.pair(ex.ctx_lang, ex.stmt_lang, ex.ctx_lang)
    view = model.swap_qcross(resolve_eval_key(model, setting, scheme)) if scheme.uses_qcross else model
    seq = ex.encode()
    trace = ForwardTrace()
    view.forward(seq, eval_masks(seq, scheme, p_mask, eval_policy), scheme, mode="eval", trace=trace)
    return trace


@log_call("eval")
def attention_stability(
    model: XattnEncoder,
    pairs: Sequence[StabilityPair],
    scheme: Union[AttentionScheme, str],
    p_mask: float = 0.0,
    eval_policy: str = "full-attention",
) -> StabilityReport:
    scheme = AttentionScheme(scheme)
    if not pairs:
        raise ContractError("attention_stability needs at least one pair")
    cfg = model.config
    acc = np.zeros((cfg.n_layers, cfg.n_heads))
    for a, b, perm in pairs:
        if a.n_tokens != b.n_tokens or len(perm) != a.n_tokens:
            raise ContractError(f"pair lengths differ: {a.n_tokens} vs {b.n_tokens}")
        ta = trace_example(model, a, scheme, p_mask, eval_policy)
        tb = trace_example(model, b, scheme, p_mask, eval_policy)
        for l in range(cfg.n_layers):
            for h in range(cfg.n_heads):
                acc[l, h] += row_similarity(ta.attentions[l][h], align(tb.attentions[l][h], perm))
    report = StabilityReport(scheme.value, acc / len(pairs), len(pairs))
    log.info("attention stability", extra={"scheme": scheme.value, "accuracy": report.aggregate, "count": len(pairs)})
    return report
