"""
Small BERT-style encoder whose self-attention mixes a standard query with a
cross-lingual query through a mask pair (M1, M2):

    P = rownorm(M1 * exp(Q K^T / sqrt(d_head)) + M2 * exp(Qc K^T / sqrt(d_head)))

Qc comes from a registry of per-layer matrices keyed by "shared" or a
language pair "a-b"; the active key can be swapped without touching any other
weight.
"""

from __future__ import annotations
import json
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..autodiff import (
    Tensor,
    add,
    block_apply,
    block_scores,
    concat_cols,
    gelu,
    layer_norm,
    linear,
    mixture_softmax,
    no_grad,
    row_softmax,
    scale,
    slice_cols,
    take_rows,
    tanh,
)
from ..autodiff.checkpoint import load_tensors, save_tensors
from ..config import ModelConfig
from ..errors import ContractError, DataError, RegistryKeyError
from ..maskgen.masks import AttentionScheme, MaskPair, Masks, stack_masks
from ..tokens import MASK, N_SPECIAL, PAD, TokenSequence
from ..utils.logging import get_logger

log = get_logger("model")

N_SEGMENTS = 2
SHARED_KEY = "shared"


def pair_key(a: int, b: int) -> str:
    return f"{a}-{b}"


def qcross_name(key: str, layer: int) -> str:
    return f"qcross/{key}/layer{layer}"


def is_bias(name: str) -> bool:
    return name.endswith("/bias")


@dataclass
class AttentionWeights:
    query_w: Tensor
    query_b: Tensor
    key_w: Tensor
    key_b: Tensor
    value_w: Tensor
    value_b: Tensor
    out_w: Tensor
    out_b: Tensor
    ln_w: Tensor
    ln_b: Tensor


@dataclass
class ForwardTrace:
    attentions: List[List[np.ndarray]] = field(default_factory=list)  # [layer][head]
    mask_ids: List[int] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


def dual_query_attention(
    h: Tensor,
    weights: AttentionWeights,
    qcross: Optional[Tensor],
    masks: Masks,
    n_heads: int,
    trace: Optional[ForwardTrace] = None,
    n_blocks: int = 1,
) -> Tensor:
    """
    One attention block (projections, per-head masked mixture, output
    projection, residual and layer norm). ``masks`` is a MaskPair for the
    cross-lingual query, a single mask for the single-query path, or None for
    plain softmax attention.

    ``h`` may hold ``n_blocks`` equal-length sequences stacked row-wise;
    attention stays inside each block and masks are stacked the same way,
    (n_blocks * L) x L.
    """
    n, d = h.shape
    if d % n_heads:
        raise ContractError(f"hidden size {d} not divisible by {n_heads} heads")
    if n_blocks < 1 or n % n_blocks:
        raise ContractError(f"{n} rows do not split into {n_blocks} sequences")
    shape = (n, n // n_blocks)
    m1 = m2 = None
    if isinstance(masks, MaskPair):
        if masks.m1.shape != shape or masks.m2.shape != shape:
            raise ContractError(f"mask pair is {masks.m1.shape} but the sequence needs {shape}")
        if qcross is None:
            raise ContractError("a mask pair needs a cross-lingual query")
        m1, m2 = masks.m1, masks.m2
    elif masks is not None:
        if masks.shape != shape:
            raise ContractError(f"mask is {masks.shape} but the sequence needs {shape}")
        m1 = masks
    if m1 is not None:
        live = m1 > 0 if m2 is None else (m1 > 0) | (m2 > 0)
        if not live.any(axis=1).all():
            raise ContractError("attention mask leaves a row with nothing to attend to")

    q = linear(h, weights.query_w, weights.query_b)
    k = linear(h, weights.key_w, weights.key_b)
    v = linear(h, weights.value_w, weights.value_b)
    qc = linear(h, qcross, weights.query_b) if m2 is not None else None

    dh = d // n_heads
    inv = 1.0 / np.sqrt(dh)
    heads, probs = [], []
    for hd in range(n_heads):
        lo, hi = hd * dh, (hd + 1) * dh
        kh = slice_cols(k, lo, hi)
        s = scale(block_scores(slice_cols(q, lo, hi), kh, n_blocks), inv)
        if m2 is not None:
            sc = scale(block_scores(slice_cols(qc, lo, hi), kh, n_blocks), inv)
            p = mixture_softmax(s, m1, sc, m2)
        elif m1 is not None:
            p = mixture_softmax(s, m1)
        else:
            p = row_softmax(s)
        probs.append(p.data)
        heads.append(block_apply(p, slice_cols(v, lo, hi), n_blocks))
    if trace is not None:
        trace.attentions.append(probs)
        trace.mask_ids.append(id(masks))

    ctx = heads[0] if n_heads == 1 else concat_cols(heads)
    out = linear(ctx, weights.out_w, weights.out_b)
    return layer_norm(add(h, out), weights.ln_w, weights.ln_b)


class XattnEncoder:
    def __init__(
        self,
        config: ModelConfig,
        params: Dict[str, Tensor],
        qcross_key: Optional[str] = None,
    ):
        config.validate()
        self.config = config
        self.params = params
        self.qcross_key = qcross_key
        self.access_log: Optional[List[str]] = None

    # ---- construction ------------------------------------------------------

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "XattnEncoder":
        config.validate()
        rng = np.random.default_rng(seed)
        d, f, std = config.hidden_dim, config.ffn_dim, config.init_std
        shapes: Dict[str, tuple] = {
            "embeddings/token": (config.vocab_size, d),
            "embeddings/position": (config.max_seq_len, d),
            "embeddings/segment": (N_SEGMENTS, d),
            "embeddings/ln/weight": (d,),
            "embeddings/ln/bias": (d,),
        }
        for i in range(config.n_layers):
            for part in ("query", "key", "value", "output"):
                shapes[f"layer{i}/attention/{part}/weight"] = (d, d)
                shapes[f"layer{i}/attention/{part}/bias"] = (d,)
            shapes[f"layer{i}/attention/ln/weight"] = (d,)
            shapes[f"layer{i}/attention/ln/bias"] = (d,)
            shapes[f"layer{i}/ffn/in/weight"] = (d, f)
            shapes[f"layer{i}/ffn/in/bias"] = (f,)
            shapes[f"layer{i}/ffn/out/weight"] = (f, d)
            shapes[f"layer{i}/ffn/out/bias"] = (d,)
            shapes[f"layer{i}/ffn/ln/weight"] = (d,)
            shapes[f"layer{i}/ffn/ln/bias"] = (d,)
        shapes.update(
            {
                "pooler/weight": (d, d),
                "pooler/bias": (d,),
                "classifier/weight": (d, config.n_classes),
                "classifier/bias": (config.n_classes,),
                "mlm/weight": (d, config.vocab_size),
                "mlm/bias": (config.vocab_size,),
            }
        )
        params = {}
        for name, shape in shapes.items():
            if is_bias(name):
                data = np.zeros(shape)
            elif name.endswith("ln/weight"):
                data = np.ones(shape)
            else:
                data = rng.normal(0.0, std, size=shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, params)

    def install_qcross(self, key: str) -> None:
        """Registry entry initialized as a copy of each layer's query weight."""
        for i in range(self.config.n_layers):
            name = qcross_name(key, i)
            src = self.params[f"layer{i}/attention/query/weight"].data
            self.params[name] = Tensor(src.copy(), requires_grad=True, name=name)
        log.info("installed qcross entry", extra={"key": key})

    @property
    def qcross_keys(self) -> List[str]:
        return sorted({n.split("/")[1] for n in self.params if n.startswith("qcross/")})

    def swap_qcross(self, key: str) -> "XattnEncoder":
        """A view sharing every tensor, reading the ``key`` registry entry."""
        if key not in self.qcross_keys:
            raise RegistryKeyError(key, self.qcross_keys)
        return XattnEncoder(self.config, self.params, key)

    def clone(self) -> "XattnEncoder":
        """Deep copy; training mutates its own tensors."""
        params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        return XattnEncoder(self.config, params, self.qcross_key)

    # ---- parameter access ----------------------------------------------------

    def param(self, name: str) -> Tensor:
        if self.access_log is not None:
            self.access_log.append(name)
        return self.params[name]

    def attention_weights(self, layer: int) -> AttentionWeights:
        pre = f"layer{layer}/attention"
        p = self.param
        return AttentionWeights(
            p(f"{pre}/query/weight"), p(f"{pre}/query/bias"),
            p(f"{pre}/key/weight"), p(f"{pre}/key/bias"),
            p(f"{pre}/value/weight"), p(f"{pre}/value/bias"),
            p(f"{pre}/output/weight"), p(f"{pre}/output/bias"),
            p(f"{pre}/ln/weight"), p(f"{pre}/ln/bias"),
        )

    def _qcross(self, layer: int) -> Tensor:
        if self.qcross_key is None:
            raise ContractError("qcross scheme needs an active registry key")
        name = qcross_name(self.qcross_key, layer)
        if name not in self.params:
            raise RegistryKeyError(self.qcross_key, self.qcross_keys)
        return self.param(name)

    # ---- forward ---------------------------------------------------------------

    def _check_length(self, seq: TokenSequence) -> None:
        n = len(seq)
        if n > self.config.max_seq_len:
            raise ContractError(f"sequence length {n} exceeds max_seq_len {self.config.max_seq_len}")
        top = max(seq.ids)
        if top >= self.config.vocab_size:
            raise ContractError(f"token id {top} outside vocabulary of {self.config.vocab_size}")

    def embed(self, seq: TokenSequence) -> Tensor:
        return self._embed_packed([seq])

    def _embed_packed(self, seqs: Sequence[TokenSequence]) -> Tensor:
        """Token, position and segment embeddings of equal-length sequences, stacked row-wise."""
        for seq in seqs:
            self._check_length(seq)
        width = len(seqs[0])
        ids = np.concatenate([s.array() for s in seqs])
        segs = np.minimum(np.concatenate([s.segment_ids() for s in seqs]), N_SEGMENTS - 1)
        x = add(
            add(take_rows(self.param("embeddings/token"), ids),
                take_rows(self.param("embeddings/position"), np.tile(np.arange(width), len(seqs)))),
            take_rows(self.param("embeddings/segment"), segs),
        )
        return layer_norm(x, self.param("embeddings/ln/weight"), self.param("embeddings/ln/bias"))

    def _check_masks(self, seq: TokenSequence, masks: Masks, scheme: AttentionScheme) -> Masks:
        if scheme.uses_qcross:
            if not isinstance(masks, MaskPair):
                raise ContractError(f"scheme {scheme.value} needs a mask pair")
            return masks
        if isinstance(masks, MaskPair):
            raise ContractError(f"scheme {scheme.value} does not take a mask pair")
        if scheme == AttentionScheme.STANDARD and masks is not None:
            raise ContractError("standard scheme takes no mask")
        return masks

    def encode_batch(
        self,
        seqs: Sequence[TokenSequence],
        masks: Sequence[Masks],
        scheme: Union[AttentionScheme, str],
        trace: Optional[ForwardTrace] = None,
    ) -> Tuple[Tensor, int]:
        """
        Hidden states of a packed batch: every sequence right-padded to the
        longest and stacked, (len(seqs) * width) x d, plus that width. Masks
        are given per unpadded sequence; a single sequence that needs no
        padding keeps its mask object.
        """
        scheme = AttentionScheme(scheme)
        if not seqs:
            raise ContractError("encode_batch needs at least one sequence")
        if len(masks) != len(seqs):
            raise ContractError(f"{len(seqs)} sequences but {len(masks)} masks")
        masks = [self._check_masks(s, m, scheme) for s, m in zip(seqs, masks)]
        width = max(len(s) for s in seqs)
        if len(seqs) == 1 and (masks[0] is not None or PAD not in seqs[0].ids):
            packed = masks[0]
        else:
            packed = stack_masks(seqs, masks, width)
        h = self._embed_packed([s.pad_to(width) for s in seqs])
        for i in range(self.config.n_layers):
            qc = self._qcross(i) if scheme.uses_qcross else None
            h = dual_query_attention(
                h, self.attention_weights(i), qc, packed, self.config.n_heads, trace, n_blocks=len(seqs)
            )
            pre = f"layer{i}/ffn"
            f = linear(gelu(linear(h, self.param(f"{pre}/in/weight"), self.param(f"{pre}/in/bias"))),
                       self.param(f"{pre}/out/weight"), self.param(f"{pre}/out/bias"))
            h = layer_norm(add(h, f), self.param(f"{pre}/ln/weight"), self.param(f"{pre}/ln/bias"))
        return h, width

    def encode(
        self,
        seq: TokenSequence,
        masks: Masks,
        scheme: Union[AttentionScheme, str],
        trace: Optional[ForwardTrace] = None,
    ) -> Tensor:
        return self.encode_batch([seq], [masks], scheme, trace)[0]

    @staticmethod
    def _mode(mode: str):
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be train or eval, got {mode!r}")
        return no_grad() if mode == "eval" else nullcontext()

    def forward_batch(
        self,
        seqs: Sequence[TokenSequence],
        masks: Sequence[Masks],
        scheme: Union[AttentionScheme, str],
        mode: str = "eval",
        trace: Optional[ForwardTrace] = None,
    ) -> Tensor:
        """Classifier logits, one row per sequence (len(seqs) x n_classes)."""
        with self._mode(mode):
            h, width = self.encode_batch(seqs, masks, scheme, trace)
            cls_rows = take_rows(h, np.arange(len(seqs)) * width)
            pooled = tanh(linear(cls_rows, self.param("pooler/weight"), self.param("pooler/bias")))
            logits = linear(pooled, self.param("classifier/weight"), self.param("classifier/bias"))
        if trace is not None:
            trace.logits = logits.data.copy()
        return logits

    def forward(
        self,
        seq: TokenSequence,
        masks: Masks,
        scheme: Union[AttentionScheme, str],
        mode: str = "eval",
        trace: Optional[ForwardTrace] = None,
    ) -> Tensor:
        """Classifier logits (1 x n_classes) from the pooled [CLS] state."""
        return self.forward_batch([seq], [masks], scheme, mode, trace)

    def mlm_forward_batch(
        self,
        seqs: Sequence[TokenSequence],
        masks: Sequence[Masks],
        scheme: Union[AttentionScheme, str],
        positions: Sequence[Sequence[int]],
        mode: str = "train",
    ) -> Tensor:
        """Vocabulary logits at every sequence's masked positions, in sequence order."""
        if len(positions) != len(seqs):
            raise ContractError(f"{len(seqs)} sequences but {len(positions)} position lists")
        for seq, pos in zip(seqs, positions):
            if len(pos) == 0:
                raise ContractError("mlm_forward needs at least one masked position")
            for p in pos:
                if p <= 0 or p >= len(seq.ids) or (seq.ids[p] < N_SPECIAL and seq.ids[p] != MASK):
                    raise ContractError(f"position {p} holds a special token")
        with self._mode(mode):
            h, width = self.encode_batch(seqs, masks, scheme)
            rows = [b * width + p for b, pos in enumerate(positions) for p in pos]
            return linear(take_rows(h, rows), self.param("mlm/weight"), self.param("mlm/bias"))

    def mlm_forward(
        self,
        seq: TokenSequence,
        masks: Masks,
        scheme: Union[AttentionScheme, str],
        positions: Sequence[int],
        mode: str = "train",
    ) -> Tensor:
        """Vocabulary logits at ``positions`` (len(positions) x vocab)."""
        return self.mlm_forward_batch([seq], [masks], scheme, [positions], mode)

    # ---- persistence ---------------------------------------------------------

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        save_tensors(path, self.state_dict())
        meta = {"config": asdict(self.config), "qcross_key": self.qcross_key}
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "XattnEncoder":
        path = Path(path)
        meta_path = path.with_suffix(".json")
        if not meta_path.is_file():
            raise DataError(f"checkpoint metadata {meta_path} does not exist")
        tensors = load_tensors(path)
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            config = ModelConfig(**meta["config"])
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{meta_path}: malformed metadata ({e})") from e
        params = {n: Tensor(a, requires_grad=True, name=n) for n, a in tensors.items()}
        return cls(config, params, meta.get("qcross_key"))
