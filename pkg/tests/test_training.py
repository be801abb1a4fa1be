import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from speechengine.downstream import ClassifierHead
from speechengine.errors import (EmptyDevSet, EmptyList, EmptyStore, IncompatibleCheckpoints,
                                 LabelMismatch, NumericError, StepNotReached)
from speechengine.training import (Checkpoint, CheckpointStore, Example, TrainConfig,
                                   apply_checkpoint, average_checkpoints, evaluate_examples,
                                   model_state, select_best_plus_step, select_top_k, train)
from speechengine.upstream import UpstreamConfig, UpstreamModel

TINY = UpstreamConfig(d_feat=6, d_model=8, n_layers=1, heads=2, d_ff=16, num_clusters=5)


def ck(step, metric=None, fp="f", **tensors):
    return Checkpoint(tensors or {"w": np.array([float(step)])}, step, metric, fp)


def store_with(metrics, every=1):
    return CheckpointStore(ck((i + 1) * every, m) for i, m in enumerate(metrics))


def toy_task(rng, n=40, T=12):
    """Two classes that differ in the mean of the first feature."""
    examples = []
    for i in range(n):
        label = i % 2
        x = rng.normal(size=(T, 6))
        x[:, 0] += 3.0 if label else -3.0
        examples.append(Example(x, f"c{label}"))
    return examples


def test_average_arithmetic():
    avg = average_checkpoints([ck(1, w=np.array([0.0, 2.0])), ck(2, w=np.array([2.0, 4.0]))])
    assert avg.tensors["w"].tolist() == [1.0, 3.0]
    assert avg.step == 2 and avg.dev_metric is None


def test_average_errors():
    with pytest.raises(EmptyList):
        average_checkpoints([])
    with pytest.raises(IncompatibleCheckpoints):
        average_checkpoints([ck(1), ck(2, fp="g")])
    with pytest.raises(IncompatibleCheckpoints):
        average_checkpoints([ck(1, w=np.zeros(2)), ck(2, w=np.zeros(3))])
    with pytest.raises(IncompatibleCheckpoints):
        average_checkpoints([ck(1, w=np.zeros(2)), ck(2, v=np.zeros(2))])


finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@given(st.lists(st.lists(finite32, min_size=3, max_size=3), min_size=1, max_size=6),
       st.randoms())
def test_average_identities(rows, random):
    cks = [ck(i + 1, w=np.array(r, dtype=np.float32)) for i, r in enumerate(rows)]
    single = average_checkpoints(cks[:1])
    assert single.equals(cks[0])
    copies = average_checkpoints([cks[0]] * len(cks))
    assert copies.equals(cks[0])
    shuffled = cks[:]
    random.shuffle(shuffled)
    assert average_checkpoints(shuffled).equals(average_checkpoints(cks))


def test_checkpoint_immutable_and_finite():
    c = ck(1, w=np.array([1.0]))
    with pytest.raises(ValueError):
        c.tensors["w"][0] = 2.0
    with pytest.raises(NumericError):
        ck(1, w=np.array([np.nan]))


def test_store_invariants():
    s = CheckpointStore([ck(1)])
    with pytest.raises(ValueError):
        s.append(ck(1))
    with pytest.raises(IncompatibleCheckpoints):
        s.append(ck(2, fp="other"))


def test_top_k():
    s = store_with([0.6, 0.8, 0.8, 0.7])
    assert [c.step for c in select_top_k(s, 1)] == [2]
    assert [c.step for c in select_top_k(s, 2)] == [2, 3]
    assert len(select_top_k(s, 10)) == 4
    with pytest.raises(EmptyStore):
        select_top_k(CheckpointStore(), 1)


def test_best_plus_step():
    s = store_with([0.1 * (i % 7) for i in range(100)], every=100)
    picked = select_best_plus_step(s, 10000)
    assert picked[-1].step == 10000 and len(picked) == 2
    s2 = store_with([0.1, 0.2, 0.9], every=100)
    assert [c.step for c in select_best_plus_step(s2, 300)] == [300]
    assert [c.step for c in select_best_plus_step(s2, 250)] == [300]
    with pytest.raises(StepNotReached):
        select_best_plus_step(store_with([0.5] * 50, every=100), 10000)


def test_frozen_training_leaves_upstream_untouched(rng):
    up = UpstreamModel(TINY, seed=0)
    before = up.state_dict()
    h = ClassifierHead("t", ["c0", "c1"], 8)
    data = toy_task(rng)
    store = train(up, h, data[:30], data[30:], TrainConfig(max_steps=100, eval_every_steps=10,
                                                           patience=100))
    after = up.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert len(store) == 10
    assert all(np.array_equal(c.tensors[k], before[k]) for c in store for k in before)


def test_finetune_changes_upstream_and_lowers_loss(rng):
    up = UpstreamModel(TINY, seed=0)
    before = up.state_dict()
    h = ClassifierHead("t", ["c0", "c1"], 8)
    data = toy_task(rng)
    store = train(up, h, data[:30], data[30:],
                  TrainConfig(mode="finetune", max_steps=40, eval_every_steps=10, batch_size=8,
                              patience=100))
    after = up.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)
    assert np.mean(store.train_loss[-5:]) < np.mean(store.train_loss[:5])


def test_training_is_reproducible(rng):
    data = toy_task(rng)
    finals = []
    for _ in range(2):
        up, h = UpstreamModel(TINY, seed=0), ClassifierHead("t", ["c0", "c1"], 8)
        store = train(up, h, data[:30], data[30:], TrainConfig(max_steps=30, eval_every_steps=10,
                                                               seed=4))
        finals.append(store[-1])
    assert finals[0].equals(finals[1])


def test_recorded_dev_metric_reproduces(rng):
    data = toy_task(rng)
    up, h = UpstreamModel(TINY, seed=0), ClassifierHead("t", ["c0", "c1"], 8)
    store = train(up, h, data[:30], data[30:], TrainConfig(max_steps=50, eval_every_steps=10,
                                                           head_lr=0.003, patience=100))
    for c in store:
        up2, h2 = UpstreamModel(TINY, seed=9), ClassifierHead("t", ["c0", "c1"], 8, seed=9)
        apply_checkpoint(c, up2, h2)
        assert abs(evaluate_examples(up2, h2, data[30:]) - c.dev_metric) < 1e-6


def test_train_errors(rng):
    up, h = UpstreamModel(TINY), ClassifierHead("t", ["c0", "c1"], 8)
    data = toy_task(rng, n=6)
    with pytest.raises(EmptyDevSet):
        train(up, h, data, [], TrainConfig())
    with pytest.raises(LabelMismatch):
        train(up, h, data + [Example(data[0].features, "zzz")], data, TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="joint")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    assert TrainConfig(head_lr=0.02).effective_upstream_lr == pytest.approx(0.002)


def test_model_state_names(rng):
    up, h = UpstreamModel(TINY), ClassifierHead("emo", ["a", "b"], 8)
    names = model_state(up, h)
    assert all(k.startswith(("upstream.", "head.emo.")) for k in names)
