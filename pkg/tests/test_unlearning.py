import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dkvb_unlearn.bottleneck import BottleneckConfig, KeyValueBottleneck, build_model, trace_pairs
from dkvb_unlearn.data import LabeledEmbeddings, SyntheticSpec, generate_synthetic, split_by_classes
from dkvb_unlearn.evaluation import FlopLedger, model_macs
from dkvb_unlearn.training import TrainConfig, train_values
from dkvb_unlearn.unlearning import (
    ActivationCounts,
    record_activations,
    sample_examples,
    unlearn_multi,
    unlearn_via_activations,
    unlearn_via_examples,
)


@pytest.fixture(scope="module")
def trained():
    train, test = generate_synthetic(SyntheticSpec(num_classes=5, dim=16, train_per_class=40, test_per_class=20,
                                                   noise_std=0.7, seed=2))
    cfg = BottleneckConfig(input_dim=16, value_dim=5, num_codebooks=8, pairs_per_codebook=64, top_k=2,
                           key_dim=4, key_init_epochs=3, seed=2)
    model = build_model(cfg, train)
    train_values(model, train, TrainConfig(epochs=5, batch_size=32, seed=2))
    return model, train, test


def _frozen_state(model):
    return {n: getattr(model, n).tobytes() for n in ("keys", "values", "projection", "ema_counts", "ema_sums")}


def _toy_model(keys, top_k=1):
    keys = np.asarray(keys, float)
    c, m, kd = keys.shape
    cfg = BottleneckConfig(input_dim=c * kd, value_dim=2, num_codebooks=c, pairs_per_codebook=m, key_dim=kd,
                           top_k=top_k)
    model = KeyValueBottleneck(cfg)
    model.projection = np.eye(c * kd)
    model.set_keys(keys)
    return model


# ------------------------------------------------------------------ recording

def test_record_simple_count():
    keys = np.zeros((1, 10, 1))
    keys[0, :, 0] = np.arange(10)
    model = _toy_model(keys)
    data = LabeledEmbeddings(np.array([[7.1], [6.9], [7.0]]), np.zeros(3, int), 1)
    assert record_activations(model, data).as_dict() == {(0, 7): 3}


def test_record_disjoint_top2():
    keys = np.zeros((1, 6, 1))
    keys[0, :, 0] = [0, 1, 10, 11, 50, 60]
    model = _toy_model(keys, top_k=2)
    data = LabeledEmbeddings(np.array([[0.4], [10.4]]), np.zeros(2, int), 1)
    assert record_activations(model, data).as_dict() == {(0, 0): 1, (0, 1): 1, (0, 2): 1, (0, 3): 1}


def test_record_total_matches_recount(trained):
    model, train, _ = trained
    counts = record_activations(model, train)
    trace = model.forward(train.features).trace
    per_example = (trace >= 0).sum(axis=(1, 2))
    assert counts.total == int(per_example.sum()) == len(train) * model.num_codebooks * model.config.top_k
    # independent recount, pair by pair
    recount = {}
    for row in trace:
        for c, sel in enumerate(row):
            for j in sel[sel >= 0]:
                recount[(c, int(j))] = recount.get((c, int(j)), 0) + 1
    assert counts.as_dict() == recount


def test_record_empty_and_unchanged(trained):
    model, train, _ = trained
    state = _frozen_state(model)
    mask = model.mask.copy()
    record_activations(model, train)
    assert _frozen_state(model) == state and np.array_equal(model.mask, mask)
    with pytest.raises(ValueError):
        record_activations(model, train.subset(np.array([], dtype=int)))


def test_record_charges_ledger(trained):
    model, train, _ = trained
    ledger = FlopLedger()
    record_activations(model, train, ledger=ledger)
    assert ledger.forward == model_macs(model) * len(train)
    assert ledger.backward == 0


# ------------------------------------------------------------------ via activations

def _counts(d):
    return ActivationCounts.from_dict(d)


def _masked(model):
    return {tuple(p) for p in np.argwhere(model.mask).tolist()}


def test_activations_top_frequency():
    model = _toy_model(np.zeros((2, 10, 1)))
    rep = unlearn_via_activations(model, _counts({(0, 5): 7, (0, 2): 3, (1, 9): 1}), 2)
    assert _masked(model) == {(0, 5), (0, 2)}
    assert rep.pairs_masked == 2 and rep.backward_flops == 0


def test_activations_saturation():
    model = _toy_model(np.zeros((2, 10, 1)))
    counts = _counts({(0, 5): 7, (0, 2): 3, (1, 9): 1})
    unlearn_via_activations(model, counts, 50)
    assert _masked(model) == {(0, 5), (0, 2), (1, 9)}


def test_activations_tie_break():
    model = _toy_model(np.zeros((1, 3, 1)))
    unlearn_via_activations(model, _counts({(0, 1): 2, (0, 0): 2}), 1)
    assert _masked(model) == {(0, 0)}


def test_activations_zero_budget_is_noop(trained):
    model, train, _ = trained
    m = model.copy()
    rep = unlearn_via_activations(m, record_activations(m, train), 0)
    assert rep.pairs_masked == 0 and not m.mask.any()


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.tuples(st.integers(0, 2), st.integers(0, 7)), st.integers(1, 9), min_size=1),
       st.integers(0, 30), st.integers(0, 30))
def test_activations_prefix_property(d, a, b):
    lo, hi = sorted((a, b))
    m1, m2 = _toy_model(np.zeros((3, 8, 1))), _toy_model(np.zeros((3, 8, 1)))
    unlearn_via_activations(m1, _counts(d), lo)
    unlearn_via_activations(m2, _counts(d), hi)
    assert _masked(m1) <= _masked(m2)
    assert len(_masked(m1)) == min(lo, len(d))


def test_activations_saturating_budget_makes_traces_disjoint(trained):
    model, train, test = trained
    m = model.copy()
    forget = train.subset(train.labels == 0)
    before = m.forward(forget.features).trace
    counts = record_activations(m, forget)
    unlearn_via_activations(m, counts, len(counts))
    after = m.forward(forget.features).trace
    for i in range(len(forget)):
        assert trace_pairs(before[i:i + 1]).isdisjoint(trace_pairs(after[i:i + 1]))


# ------------------------------------------------------------------ via examples

def test_examples_zero_is_noop(trained):
    model, train, _ = trained
    m = model.copy()
    z = train.features[:30]
    ref = m.forward(z).logits
    rep = unlearn_via_examples(m, train.subset(train.labels == 1), 0)
    assert rep.pairs_masked == 0 and rep.forward_flops == 0
    assert m.forward(z).logits.tobytes() == ref.tobytes()


def test_examples_full_equals_support(trained):
    model, train, _ = trained
    forget = train.subset(train.labels == 1)
    m = model.copy()
    support = {tuple(p) for p in record_activations(m, forget).pairs.tolist()}
    state = _frozen_state(m)
    rep = unlearn_via_examples(m, forget, len(forget), seed=4)
    assert _masked(m) == support
    assert rep.backward_flops == 0 and _frozen_state(m) == state


def test_examples_too_many(trained):
    model, train, _ = trained
    forget = train.subset(train.labels == 1)
    with pytest.raises(ValueError):
        unlearn_via_examples(model.copy(), forget, len(forget) + 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 1000))
def test_examples_nested_samples_nested_masks(trained, a, b, seed):
    model, train, _ = trained
    forget = train.subset(train.labels == 3)
    lo, hi = sorted((a, b))
    assert set(sample_examples(40, lo, seed)) <= set(sample_examples(40, hi, seed))
    m1, m2 = model.copy(), model.copy()
    unlearn_via_examples(m1, forget, lo, seed=seed)
    unlearn_via_examples(m2, forget, hi, seed=seed)
    assert _masked(m1) <= _masked(m2)


def test_examples_rerun_reaches_fixpoint(trained):
    model, train, _ = trained
    forget = train.subset(train.labels == 2)
    m = model.copy()
    sizes = []
    for _ in range(model.num_codebooks * model.pairs_per_codebook):
        rep = unlearn_via_examples(m, forget, len(forget))
        sizes.append(int(m.mask.sum()))
        if rep.pairs_masked == 0:
            break
    assert sizes == sorted(sizes)
    # the last pass only ever masks what the new traces select
    assert rep.pairs_masked == 0 or m.mask.all()


def test_examples_forward_cost(trained):
    model, train, _ = trained
    ledger = FlopLedger()
    m = model.copy()
    macs = model_macs(m)
    rep = unlearn_via_examples(m, train.subset(train.labels == 0), 12, ledger=ledger)
    assert rep.forward_flops == ledger.forward == 12 * macs
    assert rep.forward_examples_processed == 12


def test_report_json(trained):
    model, train, _ = trained
    rep = unlearn_via_examples(model.copy(), train.subset(train.labels == 0), 5)
    d = json.loads(rep.to_json())
    assert d["backward_flops"] == 0 and len(d["masked_pairs"]) == d["pairs_masked"]


# ------------------------------------------------------------------ multi-class

def _supports(model, train, classes):
    return [{tuple(p) for p in record_activations(model, train.subset(train.labels == c)).pairs.tolist()}
            for c in classes]


@pytest.mark.parametrize("method", ["activations", "examples"])
def test_multi_pairs_masked_is_union(trained, method):
    model, train, test = trained
    bundle = split_by_classes(train, test, {0, 4})
    sa, sb = _supports(model, train, (0, 4))
    m = model.copy()
    budget = 10**6 if method == "activations" else len(bundle.train_forget)
    rep = unlearn_multi(m, bundle, method, budget)
    assert rep.pairs_masked == len(sa | sb) <= len(sa) + len(sb)
    if sa.isdisjoint(sb):
        assert rep.pairs_masked == len(sa) + len(sb)


def test_multi_disjoint_supports_add_up():
    keys = np.zeros((1, 4, 1))
    keys[0, :, 0] = [0, 10, 20, 30]
    model = _toy_model(keys)
    train = LabeledEmbeddings(np.array([[0.1], [9.8], [20.2], [29.9]]), np.array([0, 0, 1, 1]), 2)
    bundle = split_by_classes(train, train, {0, 1})
    rep = unlearn_multi(model, bundle, "activations", 100)
    assert rep.pairs_masked == 2 + 2


def test_multi_single_class_matches_direct(trained):
    model, train, test = trained
    bundle = split_by_classes(train, test, {2})
    a, b = model.copy(), model.copy()
    unlearn_multi(a, bundle, "examples", 20, seed=1)
    unlearn_via_examples(b, bundle.train_forget, 20, seed=1)
    np.testing.assert_array_equal(a.mask, b.mask)
    with pytest.raises(ValueError):
        unlearn_multi(a, bundle, "gradient", 1)
