import math
import time

import numpy as np
import pytest

from src.xattn.autodiff import Tensor
from src.xattn.config import ModelConfig, TrainConfig
from src.xattn.errors import ConfigError, ContractError, NumericError
from src.xattn.evalkit import evaluate
from src.xattn.langgen.corpus import generate_mono_corpus, generate_parallel_corpus
from src.xattn.langgen.examples import make_example, make_mix_dataset
from src.xattn.langgen.languages import LanguageRegistry, Lexicon
from src.xattn.langgen.theory import generate_theory
from src.xattn.model import SHARED_KEY, XattnEncoder, qcross_name
from src.xattn.trainer import (
    AdamW,
    Phase,
    curriculum_plan,
    finetune,
    freeze_except,
    group_hash,
    lr_at,
    pretrain_backbone,
    pretrain_qcross,
    trainable_names,
)
from src.xattn.trainer.pretrain import N_HELDOUT, split_heldout
from src.xattn.trainer.metrics import FINETUNE_FIELDS, MetricsLog
from src.xattn.trainer.prefetch import prefetch, step_rngs

LEX = Lexicon(4, 6)
REG = LanguageRegistry.default(LEX, 4)
CFG = ModelConfig(vocab_size=REG.vocab_size, hidden_dim=8, n_layers=1, n_heads=2, ffn_dim=16, max_seq_len=64)


def _items(n, depth=0, start=0):
    out = []
    for seed in range(start, start + n):
        th, stmts = generate_theory(seed, 4, 6, 2, 2, depth, 4)
        out += [(th, s) for s in stmts]
    return out


def _mix(n=6, depth=0):
    return make_mix_dataset(_items(n, depth), REG, 0, 1)


def _train_cfg(**kw):
    base = dict(epochs=1, batch_size=4, peak_lr=1e-3, log_interval=1, eval_interval=1)
    base.update(kw)
    return TrainConfig(**base)


def _model(seed=0, cfg=CFG):
    return XattnEncoder.initialize(cfg, seed)


# ---- schedule ----------------------------------------------------------------


def test_lr_schedule_points():
    assert lr_at(0, 100, 1.0) == 0.0
    assert lr_at(5, 100, 1.0) == pytest.approx(0.5)
    assert lr_at(10, 100, 1.0) == pytest.approx(1.0)
    assert lr_at(55, 100, 1.0) == pytest.approx(0.5)
    assert lr_at(100, 100, 1.0) == 0.0
    assert lr_at(0, 10, 1.0, warmup_ratio=0.0) == pytest.approx(1.0)
    assert lr_at(0, 0, 1.0) == 0.0


def test_lr_schedule_contract():
    with pytest.raises(ContractError):
        lr_at(101, 100, 1.0)
    with pytest.raises(ContractError):
        lr_at(-1, 100, 1.0)
    with pytest.raises(ContractError):
        lr_at(1, 100, 1.0, warmup_ratio=1.0)


# ---- optimizer ---------------------------------------------------------------


def _params(**arrays):
    return {n: Tensor(np.asarray(a, dtype=float), requires_grad=True, name=n) for n, a in arrays.items()}


def test_adamw_single_step_oracle():
    params = _params(**{"w/weight": [1.0], "w/bias": [1.0]})
    for t in params.values():
        t.grad = np.array([0.5])
    AdamW(params, params, (0.9, 0.999), 1e-8, 0.01).step(0.1)
    move = 0.1 * 0.5 / (0.5 + 1e-8)
    assert params["w/weight"].data[0] == pytest.approx(1.0 - 0.1 * 0.01 - move, rel=1e-12)
    assert params["w/bias"].data[0] == pytest.approx(1.0 - move, rel=1e-12)


def test_adamw_zero_gradient_only_decays():
    params = _params(**{"w/weight": [2.0, -4.0]})
    params["w/weight"].grad = np.zeros(2)
    AdamW(params, params, weight_decay=0.1).step(0.5)
    np.testing.assert_allclose(params["w/weight"].data, [2.0 * 0.95, -4.0 * 0.95], rtol=1e-12)


def test_adamw_non_finite_gradient():
    params = _params(**{"w/weight": [1.0, 1.0]})
    params["w/weight"].grad = np.array([1.0, np.nan])
    opt = AdamW(params, params)
    with pytest.raises(NumericError) as err:
        opt.step(0.1)
    assert err.value.step == 1
    np.testing.assert_array_equal(params["w/weight"].data, [1.0, 1.0])


def test_adamw_leaves_frozen_bits_alone():
    rng = np.random.default_rng(0)
    params = _params(**{"a/weight": rng.normal(size=(3, 3)), "b/weight": rng.normal(size=(3, 3))})
    frozen = params["b/weight"].data.copy()
    opt = AdamW(params, ["a/weight"])
    for _ in range(100):
        for t in params.values():
            t.grad = rng.normal(size=(3, 3))
        opt.step(1e-2)
        opt.zero_grad()
    assert params["b/weight"].data.tobytes() == frozen.tobytes()
    assert params["a/weight"].grad is None


def test_adamw_unknown_name():
    with pytest.raises(KeyError):
        AdamW(_params(**{"a/weight": [1.0]}), ["missing"])


# ---- protocols ---------------------------------------------------------------


def test_trainable_sets():
    model = _model()
    model.install_qcross(SHARED_KEY)
    model.install_qcross("0-1")
    names = set(model.params)

    bitfit = set(trainable_names(model, "bitfit"))
    assert "layer0/attention/query/bias" in bitfit and "classifier/weight" in bitfit
    assert "pooler/weight" in bitfit and "embeddings/ln/bias" in bitfit
    assert "layer0/attention/query/weight" not in bitfit and "mlm/bias" not in bitfit
    assert not any(n.startswith("qcross/") for n in bitfit)

    full = set(trainable_names(model, "full-ft", "0-1"))
    assert qcross_name("0-1", 0) in full and qcross_name(SHARED_KEY, 0) not in full
    assert not any(n.startswith("mlm/") for n in full)

    assert trainable_names(model, "pretrain-qcross", SHARED_KEY) == [qcross_name(SHARED_KEY, 0)]

    mlm = set(trainable_names(model, "backbone-mlm"))
    assert mlm == {n for n in names if not n.startswith(("qcross/", "pooler/", "classifier/"))}
    assert set(trainable_names(model, "cs-baseline")) == mlm


def test_trainable_set_errors():
    model = _model()
    with pytest.raises(ConfigError):
        trainable_names(model, "pretrain-qcross", SHARED_KEY)
    with pytest.raises(ConfigError):
        trainable_names(model, "lora")


def test_freeze_except():
    model = _model()
    model.params["pooler/weight"].grad = np.ones((8, 8))
    freeze_except(model, ["pooler/bias"])
    assert model.params["pooler/bias"].requires_grad
    assert not model.params["pooler/weight"].requires_grad
    assert model.params["pooler/weight"].grad is None


def test_group_hash():
    a, b = _model(), _model()
    names = ["pooler/weight", "classifier/bias"]
    assert group_hash(a, names) == group_hash(b, list(reversed(names)))
    b.params["classifier/bias"].data[0] += 1e-9
    assert group_hash(a, names) != group_hash(b, names)


# ---- curriculum --------------------------------------------------------------


def test_curriculum_plan():
    data = _mix(4, depth=1)
    assert curriculum_plan(data, 5, False) == [Phase("all", 5)]
    assert curriculum_plan(data, 5, True, 2) == [Phase("depth0", 2, 0), Phase("all", 3)]
    assert curriculum_plan(data, 2, True, 3) == [Phase("depth0", 2, 0)]
    sel = Phase("depth0", 1, 0).select(data)
    assert all(data[i].depth <= 0 for i in sel)
    assert any(data[i].depth == -1 for i in sel)


def test_curriculum_needs_depth_zero():
    deep = [ex for ex in _mix(6, depth=1) if ex.depth == 1]
    with pytest.raises(ConfigError):
        curriculum_plan(deep, 4, True)


def test_curriculum_batches_follow_phases():
    data = _mix(6, depth=1)
    cfg = _train_cfg(epochs=3, curriculum=True, curriculum_epochs=2)
    result = finetune(_model(), data, [], cfg, seed=0)
    phases = [b.phase for b in result.batches]
    assert phases[0] == "depth0" and phases[-1] == "all"
    assert phases == sorted(phases, key=lambda p: p != "depth0")
    for b in result.batches:
        if b.phase == "depth0":
            assert max(b.depths) <= 0
    assert [(p, e) for p, e, _, _ in result.epoch_accuracy] == [("depth0", 0), ("depth0", 1), ("all", 0)]


def test_mix_split():
    data = make_mix_dataset(_items(7)[:7], REG, 0, 1)
    assert sum(ex.monolingual for ex in data) == math.ceil(7 / 2)
    assert sum(not ex.monolingual for ex in data) == 7 // 2


# ---- fine-tuning -------------------------------------------------------------


def test_finetune_rejects_bad_input():
    with pytest.raises(ConfigError):
        finetune(_model(), [], [], _train_cfg(), seed=0)
    with pytest.raises(ConfigError):
        finetune(_model(), _mix(2), [], _train_cfg(protocol="backbone-mlm"), seed=0)


def test_bitfit_leaves_weights_untouched():
    model = _model()
    cfg = _train_cfg(protocol="bitfit", epochs=2)
    frozen = [n for n in model.params if n not in trainable_names(model, "bitfit")]
    trained = trainable_names(model, "bitfit")
    before_frozen, before_trained = group_hash(model, frozen), group_hash(model, trained)
    result = finetune(model, _mix(4), _mix(2), cfg, seed=0)
    assert group_hash(model, frozen) == before_frozen
    assert group_hash(model, trained) != before_trained
    assert result.trainable == trained


def test_qcross_finetune_installs_missing_entry():
    model = _model()
    cfg = _train_cfg(protocol="full-ft", scheme="pair-qcross", qcross_key="0-1")
    result = finetune(model, _mix(2), [], cfg, seed=0)
    assert model.qcross_keys == ["0-1"]
    assert result.model.qcross_key == "0-1"
    assert qcross_name("0-1", 0) in result.trainable


def test_finetune_is_reproducible():
    cfg = _train_cfg(protocol="full-ft", scheme="shared-qcross", epochs=2)
    data = _mix(4)
    a = finetune(_model(), data, [], cfg, seed=3).model
    b = finetune(_model(), data, [], cfg, seed=3).model
    for name, t in a.params.items():
        np.testing.assert_array_equal(t.data, b.params[name].data)


def test_finetune_metrics(tmp_path):
    cfg = _train_cfg(epochs=2)
    path = tmp_path / "m" / "train.csv"
    result = finetune(_model(), _mix(4), _mix(2), cfg, seed=0, metrics_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(FINETUNE_FIELDS)
    assert len(lines) == 1 + len(result.metrics.rows)
    dev = result.metrics.column("dev_accuracy")
    assert len(dev) == 2 and all(0.0 <= d <= 1.0 for d in dev)
    assert len(result.epoch_accuracy) == 2


def test_loss_falls_on_single_label_set():
    data = [ex for ex in _mix(12) if ex.label][:4]
    cfg = _train_cfg(protocol="bitfit", epochs=30, peak_lr=1e-2)
    losses = finetune(_model(), data, [], cfg, seed=0).metrics.column("loss")
    assert losses[-1] < losses[0]


def test_full_ft_learns_fact_lookup():
    lex = Lexicon(2, 2)
    reg = LanguageRegistry.default(lex, 2)

    def examples(seeds):
        out = []
        for seed in seeds:
            th, stmts = generate_theory(seed, 2, 2, 1, 0, 0, 2)
            out += [make_example(th, s, 0, 0, reg) for s in stmts]
        return out

    train, dev = examples(range(240)), examples(range(1000, 1100))
    cfg = ModelConfig(vocab_size=reg.vocab_size, hidden_dim=16, n_layers=2, n_heads=2, ffn_dim=32, max_seq_len=32)
    model = XattnEncoder.initialize(cfg, 0)
    assert evaluate(model, dev, None, "standard").accuracy < 0.75
    tc = _train_cfg(protocol="full-ft", epochs=30, batch_size=16, peak_lr=3e-3, log_interval=100)
    finetune(model, train, [], tc, seed=0)
    assert evaluate(model, dev, None, "standard").accuracy >= 0.75


def test_non_finite_loss_reports_step():
    model = _model()
    model.params["classifier/weight"].data[:] = np.nan
    with pytest.raises(NumericError) as err:
        finetune(model, _mix(2), [], _train_cfg(), seed=0)
    assert err.value.step == 0


def test_metrics_log_rejects_unknown_column():
    log = MetricsLog(FINETUNE_FIELDS)
    with pytest.raises(KeyError):
        log.append(step=0, accuracy=1.0)


# ---- masked-token training ---------------------------------------------------


def _parallel(n=6, pair=(0, 1)):
    return generate_parallel_corpus(0, n, pair, REG, 2, 1, CFG.max_seq_len)


def test_pretrain_qcross_zero_iterations_is_identity():
    model = _model()
    model.install_qcross(SHARED_KEY)
    before = {n: t.data.copy() for n, t in model.params.items()}
    result = pretrain_qcross(model, _parallel(), _train_cfg(qcross_key=SHARED_KEY), seed=0, iterations=0)
    for n, t in model.params.items():
        assert t.data.tobytes() == before[n].tobytes()
    assert [s for s, _ in result.perplexity] == [0]
    assert result.model is model


def test_pretrain_qcross_updates_only_its_entry():
    model = _model()
    model.install_qcross(SHARED_KEY)
    cfg = _train_cfg(qcross_key="0-1", batch_size=2)
    others = [n for n in model.params]
    before = group_hash(model, others)
    result = pretrain_qcross(model, _parallel(), cfg, seed=0, iterations=3)
    assert model.qcross_keys == ["0-1", SHARED_KEY]
    assert group_hash(model, others) == before
    assert result.trainable == [qcross_name("0-1", 0)]
    assert not np.array_equal(
        model.params[qcross_name("0-1", 0)].data, model.params["layer0/attention/query/weight"].data
    )
    assert [s for s, _ in result.perplexity] == [0, 1, 2, 3]


def test_pretrain_backbone(tmp_path):
    model = _model()
    corpus = generate_mono_corpus(0, 8, [0, 1], REG, 2, 1, CFG.max_seq_len)
    cfg = _train_cfg(batch_size=2, eval_interval=2)
    result = pretrain_backbone(model, corpus, cfg, seed=0, iterations=4, metrics_path=tmp_path / "mlm.csv")
    assert [s for s, _ in result.perplexity] == [0, 2, 4]
    assert all(p > 1.0 for _, p in result.perplexity)
    assert result.perplexity[0][1] == pytest.approx(CFG.vocab_size, rel=0.2)
    assert "mlm/weight" in result.trainable
    assert (tmp_path / "mlm.csv").is_file()


def test_pretrain_qcross_lowers_perplexity():
    model = _model()
    mono = generate_mono_corpus(1, 64, [0, 1], REG, 2, 1, CFG.max_seq_len)
    pretrain_backbone(model, mono, _train_cfg(batch_size=8, eval_interval=1000), seed=0, iterations=100, peak_lr=1e-2)
    cfg = _train_cfg(qcross_key=SHARED_KEY, batch_size=8, eval_interval=50)
    result = pretrain_qcross(model, _parallel(64), cfg, seed=0, iterations=200, peak_lr=1e-2)
    steps = [s for s, _ in result.perplexity]
    assert steps == [0, 50, 100, 150, 200]
    assert result.perplexity[-1][1] < result.perplexity[0][1]


def test_split_heldout():
    corpus = _parallel(40)
    held, pool = split_heldout(corpus)
    assert held == corpus[:10] and pool == corpus[10:]
    assert not set(map(id, held)) & set(map(id, pool))
    held, pool = split_heldout(_parallel(200))
    assert len(held) == N_HELDOUT and len(pool) == 200 - N_HELDOUT
    one = corpus[:1]
    assert split_heldout(one) == (one, one)


def test_pretrain_rejects_empty_corpus():
    with pytest.raises(ConfigError):
        pretrain_backbone(_model(), [], _train_cfg(), seed=0, iterations=1)


# ---- prefetch ----------------------------------------------------------------


def test_prefetch_keeps_order():
    def job(i):
        def run():
            time.sleep(0.002 * ((7 * i) % 5))
            return i

        return run

    assert list(prefetch((job(i) for i in range(20)), lookahead=4, max_workers=4)) == list(range(20))


def test_prefetch_empty():
    assert list(prefetch(iter([]))) == []


def test_step_rngs():
    a = [r.random() for r in step_rngs(5, 4, stream=2)]
    b = [r.random() for r in step_rngs(5, 4, stream=2)]
    c = [r.random() for r in step_rngs(5, 4, stream=3)]
    assert a == b and a != c
    assert len(set(a)) == 4
