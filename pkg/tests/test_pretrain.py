import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fashionsap.core.nn import ParameterStore
from fashionsap.core.autograd import Parameter
from fashionsap.errors import InvalidConfigError, InvalidInputError, InvalidStateError
from fashionsap.model.config import TrainConfig
from fashionsap.model.network import FashionSAPModel
from fashionsap.pretrain import (
    FeatureQueue,
    MomentumPair,
    Pretrainer,
    build_batch,
    corpus_vocabulary,
    make_momentum_pair,
    momentum_update,
    pretrain,
    step_rng,
)
from fashionsap.textpipe import CLS_ID, MASK_ID, NUM_RESERVED

from .conftest import tiny_config


def _store(values: dict[str, np.ndarray]) -> ParameterStore:
    return ParameterStore({k: Parameter(v) for k, v in values.items()})


def _pair(m=0.5, dtype=np.float64):
    online = _store({"w": np.ones((2, 2), dtype=dtype), "b": np.full(3, 2.0, dtype=dtype)})
    momentum = _store({"w": np.zeros((2, 2), dtype=dtype), "b": np.zeros(3, dtype=dtype)})
    return MomentumPair(online, momentum, m)


# -- momentum -----------------------------------------------------------------


def test_momentum_update_formula():
    pair = _pair(m=0.995)
    momentum_update(pair)
    assert np.allclose(pair.momentum["w"].data, 0.005, atol=1e-12)


def test_momentum_m_one_is_fixed_point():
    pair = _pair(m=1.0)
    before = pair.momentum["w"].data.copy()
    for _ in range(5):
        momentum_update(pair)
    assert np.array_equal(pair.momentum["w"].data, before)


def test_momentum_closed_form_exact_dyadic():
    # with m = 0.5 and binary-representable values the EMA recursion is exact
    pair = _pair(m=0.5)
    k = 100
    for _ in range(k):
        momentum_update(pair)
    theta = pair.online["w"].data
    expect = theta + (0.0 - theta) * 0.5**k
    assert np.array_equal(pair.momentum["w"].data, expect)


def test_momentum_closed_form_tight_general():
    pair = _pair(m=0.995)
    k = 100
    for _ in range(k):
        momentum_update(pair)
    expect = 1.0 + (0.0 - 1.0) * 0.995**k
    assert np.allclose(pair.momentum["w"].data, expect, rtol=1e-12)


def test_momentum_pair_validates_names_and_shapes():
    online = _store({"w": np.ones(2)})
    other = _store({"v": np.ones(2)})
    with pytest.raises(InvalidStateError):
        MomentumPair(online, other, 0.5)
    bad = MomentumPair(online, _store({"w": np.ones(2)}), 0.5)
    bad.momentum["w"].data = np.ones(3)
    with pytest.raises(InvalidStateError):
        momentum_update(bad)
    with pytest.raises(InvalidConfigError):
        MomentumPair(online, _store({"w": np.ones(2)}), 0.0)


def test_make_momentum_pair_copies_values():
    a = FashionSAPModel(tiny_config(), seed=0)
    b = FashionSAPModel(tiny_config(), seed=1)
    pair = make_momentum_pair(a, b, 0.9)
    for name, p in pair.online.items():
        assert np.array_equal(p.data, pair.momentum[name].data)
        assert not pair.momentum[name].requires_grad


# -- queue ---------------------------------------------------------------------


def _unit(rows, d=4):
    x = np.asarray(rows, dtype=np.float32).reshape(-1, 1) * np.ones((1, d), dtype=np.float32)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_queue_fifo_overwrite():
    q = FeatureQueue(4, 4)
    for v in range(1, 7):
        sign = 1.0 if v % 2 else -1.0
        vec = _unit([sign * v])
        q.enqueue(vec, vec)
    text, _ = q.snapshot()
    # entries 3..6 remain, oldest first; sign encodes the value
    signs = text[:, 0] > 0
    assert q.occupancy == 4
    assert signs.tolist() == [True, False, True, False]


def test_queue_occupancy_and_candidate_count():
    q = FeatureQueue(8, 4)
    assert q.snapshot()[0].shape == (0, 4)
    q.enqueue(_unit([1, -1]), _unit([1, -1]))
    assert q.occupancy == 2
    m = 2 + q.occupancy  # batch + occupancy
    assert m == 4


def test_queue_rejects_non_unit():
    q = FeatureQueue(4, 4)
    with pytest.raises(InvalidInputError):
        q.enqueue(np.ones((1, 4), dtype=np.float32), np.ones((1, 4), dtype=np.float32) / 2.0)


@settings(max_examples=40)
@given(st.lists(st.integers(min_value=1, max_value=9), min_size=0, max_size=24), st.integers(2, 7))
def test_queue_fifo_property(batches, capacity):
    q = FeatureQueue(capacity, 3)
    pushed = []
    for i, _ in enumerate(batches):
        angle = 0.7 * (i + 1)
        vec = np.array([[np.cos(angle), np.sin(angle), 0.0]], dtype=np.float32)
        q.enqueue(vec, vec)
        pushed.append(vec[0])
    text, image = q.snapshot()
    expect = pushed[-min(capacity, len(pushed)):] if pushed else []
    assert text.shape[0] == min(capacity, len(pushed))
    for got, want in zip(text, expect):
        assert np.allclose(got, want, atol=1e-6)
    assert np.allclose(np.linalg.norm(text, axis=1), 1.0, atol=1e-3) or text.shape[0] == 0


# -- batches ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def trainer(synth_records_module, synth_dir_module, synth_lex_module):
    tc = TrainConfig(steps=4, batch_size=4, seed=7, checkpoint_every=0)
    return Pretrainer(tiny_config(), tc, synth_records_module, synth_dir_module, lex=synth_lex_module)


@pytest.fixture(scope="module")
def synth_dir_module(tmp_path_factory):
    from fashionsap.data_io import SynthSpec, generate_synthetic

    out = tmp_path_factory.mktemp("synth_pre")
    generate_synthetic(SynthSpec(n_items=24, seed=3, image_size=8), out)
    return out


@pytest.fixture(scope="module")
def synth_records_module(synth_dir_module):
    from fashionsap.data_io import load_corpus

    return load_corpus(synth_dir_module / "corpus.jsonl")


@pytest.fixture(scope="module")
def synth_lex_module(synth_dir_module):
    from fashionsap.textpipe import LexicalResource

    return LexicalResource.load(synth_dir_module / "lexicon.json")


def test_build_batch_deterministic(trainer):
    records = trainer.records_for_step(0)
    a = build_batch(records, trainer.vocab, trainer.lex, step_rng(7, 0), trainer.cfg, trainer._load_record_image)
    b = build_batch(records, trainer.vocab, trainer.lex, step_rng(7, 0), trainer.cfg, trainer._load_record_image)
    for field in ("clean_ids", "mlm_ids", "pmt_ids", "trp_ids", "images", "trp_labels"):
        assert np.array_equal(getattr(a, field), getattr(b, field)), field
    assert np.array_equal(a.pmt_targets, b.pmt_targets)


def test_build_batch_variants_layout(trainer):
    records = trainer.records_for_step(1)
    batch = build_batch(records, trainer.vocab, trainer.lex, step_rng(7, 1), trainer.cfg, trainer._load_record_image)
    assert (batch.clean_ids[:, 0] == CLS_ID).all()
    assert ((batch.clean_ids[:, 1] >= 4) & (batch.clean_ids[:, 1] < 13)).all()
    # masked rows alter only supervised positions, which carry [MASK]
    rows, positions = batch.mlm_rows
    for b, p, t in zip(rows, positions, batch.mlm_targets):
        assert batch.mlm_ids[b, p] == MASK_ID
        assert batch.clean_ids[b, p] == t
        assert p >= 2
    # corruption labels match actual changes on the stream region
    rows_t, pos_t = batch.trp_rows
    for b, p, label in zip(rows_t, pos_t, batch.trp_labels):
        assert p >= 2
        changed = batch.trp_ids[b, p] != batch.clean_ids[b, p]
        if label == 0:
            # position may come from the appended attribute value, absent in clean
            if p < batch.clean_mask[b].sum():
                pass
    # blanked prompt targets restore originals
    rows_p, pos_p = batch.pmt_rows
    for b, p, t in zip(rows_p, pos_p, batch.pmt_targets):
        assert batch.pmt_ids[b, p] == 3  # [BLANK]
        assert t >= NUM_RESERVED or t >= 0


def test_build_batch_skips_captionless(trainer, caplog):
    import dataclasses

    records = [dataclasses.replace(trainer.train_records[0], caption="  ", item_id="dupx")] + trainer.records_for_step(0)
    with caplog.at_level("WARNING", logger="fashionsap.pretrain"):
        batch = build_batch(records, trainer.vocab, trainer.lex, step_rng(7, 2), trainer.cfg, trainer._load_record_image)
    assert batch.size == len(records) - 1
    assert any("no caption" in m for m in caplog.messages)


def test_build_batch_no_attributes_gives_empty_prompt_stream(trainer):
    import dataclasses

    bare = [
        dataclasses.replace(r, enum_attrs=[], binary_attrs=[], item_id=f"bare{i}")
        for i, r in enumerate(trainer.records_for_step(0))
    ]
    batch = build_batch(bare, trainer.vocab, trainer.lex, step_rng(7, 3), trainer.cfg, trainer._load_record_image)
    assert batch.pmt_targets.size == 0
    assert np.array_equal(batch.pmt_ids, batch.mlm_ids) or batch.pmt_targets.size == 0


# -- steps ------------------------------------------------------------------------


def test_step_zero_reports_identical_for_same_seed(synth_records_module, synth_dir_module, synth_lex_module):
    tc = TrainConfig(steps=1, batch_size=4, seed=3, checkpoint_every=0)
    reports = []
    for _ in range(2):
        tr = Pretrainer(tiny_config(), tc, synth_records_module, synth_dir_module, lex=synth_lex_module)
        reports.append(tr.step_once())
    assert reports[0] == reports[1]


def test_step_touches_only_training_state(synth_records_module, synth_dir_module, synth_lex_module):
    tc = TrainConfig(steps=2, batch_size=4, seed=5, checkpoint_every=0)
    tr = Pretrainer(tiny_config(), tc, synth_records_module, synth_dir_module, lex=synth_lex_module)
    vocab_before = [tr.vocab.token(i) for i in range(len(tr.vocab))]
    online_before = {n: p.data.copy() for n, p in tr.pair.online.items()}
    momentum_before = {n: p.data.copy() for n, p in tr.pair.momentum.items()}
    tr.step_once()
    assert [tr.vocab.token(i) for i in range(len(tr.vocab))] == vocab_before
    changed_online = sum(
        not np.array_equal(online_before[n], p.data) for n, p in tr.pair.online.items()
    )
    changed_momentum = sum(
        not np.array_equal(momentum_before[n], p.data) for n, p in tr.pair.momentum.items()
    )
    assert changed_online > 0 and changed_momentum > 0
    assert tr.queue.occupancy == tc.batch_size
    assert tr.optimizer.t == 1


def test_momentum_one_keeps_queue_features_constant(synth_records_module, synth_dir_module, synth_lex_module):
    tc = TrainConfig(steps=3, batch_size=4, seed=5, checkpoint_every=0)
    tr = Pretrainer(tiny_config(momentum=1.0), tc, synth_records_module, synth_dir_module, lex=synth_lex_module)
    init_momentum = {n: p.data.copy() for n, p in tr.pair.momentum.items()}
    for _ in range(3):
        tr.step_once()
    for n, p in tr.pair.momentum.items():
        assert np.array_equal(p.data, init_momentum[n])


def test_trainer_rejects_empty_corpus(synth_dir_module, synth_lex_module):
    with pytest.raises(InvalidInputError):
        Pretrainer(tiny_config(), TrainConfig(), [], synth_dir_module, lex=synth_lex_module)


def test_pretrain_missing_corpus_errors_before_output(tmp_path):
    with pytest.raises(OSError):
        pretrain(tiny_config(), TrainConfig(steps=1), tmp_path / "nope.jsonl", out_dir=tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_run_writes_log_and_checkpoints(synth_records_module, synth_dir_module, synth_lex_module, tmp_path):
    tc = TrainConfig(steps=4, batch_size=4, seed=1, checkpoint_every=2)
    tr = Pretrainer(tiny_config(), tc, synth_records_module, synth_dir_module, lex=synth_lex_module)
    final = tr.run(tmp_path)
    assert final.exists()
    assert (tmp_path / "vocab.txt").exists()
    lines = (tmp_path / "loss_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 4
    import json

    first = json.loads(lines[0])
    assert list(first) == ["step", "fsis", "ptp", "trp", "its", "itm", "total"]
    assert (tmp_path / "ckpt_step000002.fsap").exists()


def test_resume_reproduces_next_report(synth_records_module, synth_dir_module, synth_lex_module, tmp_path):
    cfg = tiny_config()
    tc = TrainConfig(steps=5, batch_size=4, seed=9, checkpoint_every=0)

    straight = Pretrainer(cfg, tc, synth_records_module, synth_dir_module, lex=synth_lex_module)
    reports = [straight.step_once() for _ in range(4)]

    half = Pretrainer(cfg, tc, synth_records_module, synth_dir_module, lex=synth_lex_module)
    for _ in range(2):
        half.step_once()
    half.save(tmp_path / "k2.fsap")

    resumed = Pretrainer(cfg, tc, synth_records_module, synth_dir_module, lex=synth_lex_module)
    resumed.resume(tmp_path / "k2.fsap")
    assert resumed.step == 2
    r3 = resumed.step_once()
    assert r3 == reports[2]
    assert resumed.step_once() == reports[3]


def test_vocabulary_covers_prompt_answers(synth_records_module):
    vocab = corpus_vocabulary(synth_records_module)
    for word in ("yes", "no", "the", "image", "attribute", "is", "?"):
        assert word in vocab
