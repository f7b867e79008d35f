import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dkvb_unlearn.baselines import LinearHead
from dkvb_unlearn.bottleneck import BottleneckConfig, KeyValueBottleneck, build_model
from dkvb_unlearn.data import LabeledEmbeddings, SyntheticSpec, generate_synthetic
from dkvb_unlearn.evaluation import (
    FlopLedger,
    LogisticAttacker,
    MetricsReport,
    backward_flops,
    cmia_evaluate,
    forward_flops,
    loss_gap,
    model_macs,
    parity_search,
    per_example_losses,
    relative_change,
)
from dkvb_unlearn.training import TrainConfig, train_values
from dkvb_unlearn.unlearning import record_activations, unlearn_via_activations, unlearn_via_examples


# ------------------------------------------------------------------ FLOP rules

def test_linear_head_flops():
    head = LinearHead(10, 512)
    assert head.parameter_count() == 5130
    assert forward_flops(head, 1) == 5130
    assert forward_flops(head, 100) == 513000


def test_bottleneck_macs_closed_form():
    cfg = BottleneckConfig(input_dim=20, value_dim=3, num_codebooks=4, pairs_per_codebook=6, key_dim=2, top_k=2)
    model = KeyValueBottleneck(cfg)
    assert model_macs(model) == 4 * 2 * 20 + 4 * 6 * 2 + 4 * 2 * 3
    model.apply_mask([(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (1, 5)])
    # codebook 0 keeps one key, so it averages one value
    assert model_macs(model) == 160 + (1 + 5 + 6 + 6) * 2 + (1 + 2 + 2 + 2) * 3


def test_fully_masked_has_no_distance_term():
    cfg = BottleneckConfig(input_dim=8, value_dim=2, num_codebooks=3, pairs_per_codebook=5, key_dim=2)
    model = KeyValueBottleneck(cfg)
    model.mask[:] = True
    assert model_macs(model) == 3 * 2 * 8


@given(st.integers(0, 10**6), st.integers(0, 10**4))
def test_forward_flops_linear_in_examples(macs, n):
    assert forward_flops(macs, 2 * n) == 2 * forward_flops(macs, n)
    assert forward_flops(macs, n, flops_per_mac=2) == 2 * forward_flops(macs, n)


@pytest.mark.parametrize("p, steps, examples, expected", [
    (1000, 1, 1, 19000),
    (1000, 0, 0, 0),
    (5130, 2, 500, 2749680),
])
def test_backward_flops(p, steps, examples, expected):
    assert backward_flops(p, steps, examples) == expected


# ------------------------------------------------------------------ ledger

def _ledger():
    led = FlopLedger()
    led.add_forward("train", 100, 10)
    led.add_backward("train", 50, 10, 2)
    led.add_forward("unlearn", 7, 3)
    return led


def test_ledger_totals_and_phases():
    led = _ledger()
    assert led.forward == 1021 and led.backward == 500 + 1800
    assert led.total == led.forward + led.backward
    phases = led.by_phase()
    assert phases["unlearn"] == {"forward": 21, "backward": 0}
    assert sum(v["forward"] + v["backward"] for v in phases.values()) == led.total


def test_ledger_replay_matches_live():
    led = _ledger()
    led.encoder_macs = 1000
    led.add_forward("unlearn", 7, 3)
    rep = led.replay()
    assert (rep.forward, rep.backward) == (led.forward, led.backward)


def test_ledger_merge_and_roundtrip():
    a, b = _ledger(), _ledger()
    a.merge(b)
    assert a.forward == 2 * b.forward and len(a.entries) == 2 * len(b.entries)
    back = FlopLedger.from_dict(json.loads(json.dumps(a.to_dict())))
    assert back.to_dict() == a.to_dict()


def test_encoder_macs_added_per_example():
    led = FlopLedger(encoder_macs=40)
    assert led.add_forward("x", 10, 3) == 150


def test_dkvb_unlearning_ledgers_forward_only():
    train, _ = generate_synthetic(SyntheticSpec(num_classes=3, dim=8, train_per_class=20, test_per_class=5))
    model = build_model(BottleneckConfig(input_dim=8, value_dim=3, num_codebooks=4, pairs_per_codebook=16,
                                         key_dim=2, key_init_epochs=1), train)
    forget = train.subset(train.labels == 0)
    led = FlopLedger()
    macs = model_macs(model)
    unlearn_via_examples(model.copy(), forget, 9, ledger=led)
    assert led.backward == 0 and led.forward == 9 * macs
    led2 = FlopLedger()
    unlearn_via_activations(model.copy(), record_activations(model, forget, ledger=led2), 5)
    assert led2.backward == 0 and led2.forward == len(forget) * macs


# ------------------------------------------------------------------ relative change

def test_relative_change_examples():
    assert relative_change(96.50, 0.0) == -100.0
    assert round(relative_change(92.61, 92.94), 2) == 0.36
    assert relative_change(0.7, 0.7) == 0.0
    with pytest.raises(ZeroDivisionError):
        relative_change(0.0, 0.5)


@given(st.floats(1e-6, 1.0))
def test_relative_change_to_zero_is_minus_100(a):
    assert relative_change(a, 0.0) == -100.0


def test_metrics_report_roundtrip_and_rows():
    before = {"train_retain": 0.9, "train_forget": 0.8, "test_retain": 0.9, "test_forget": 0.8}
    after = {"train_retain": 0.9, "train_forget": 0.0, "test_retain": 0.99, "test_forget": 0.0}
    rep = MetricsReport("dkvb-examples", before, after, _ledger(), seed=3, forget_classes=[2],
                        extra={"budget": 40})
    back = MetricsReport.from_dict(json.loads(rep.to_json()))
    assert back.to_dict() == rep.to_dict()
    assert back.extra == {"budget": 40}
    row = rep.accuracy_row()
    assert row["forget_delta_pct"] == -100.0 and row["retain_delta_pct"] == pytest.approx(10.0)
    assert list(rep.flop_row()) == ["method", "forward_flops", "backward_flops"]


def test_relative_is_none_for_zero_baseline():
    zero = {"train_retain": 0.0, "train_forget": 0.5, "test_retain": 0.5, "test_forget": 0.5}
    assert MetricsReport("m", zero, zero, FlopLedger()).relative()["train_retain"] is None


# ------------------------------------------------------------------ attacker

def test_attacker_separable():
    rng = np.random.default_rng(0)
    f = rng.uniform(2, 3, 50)
    h = rng.uniform(0, 1, 50)
    assert cmia_evaluate(f, h, f + 0.1, h - 0.1) == 1.0


def test_attacker_floor_on_separated_1d():
    x = np.concatenate([np.linspace(-3, -0.1, 200), np.linspace(0.1, 3, 200)])
    y = (x > 0).astype(int)
    assert LogisticAttacker().fit(x, y).accuracy(x, y) >= 0.99


def test_attacker_chance_on_identical_distributions():
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a, b, c, d = rng.exponential(1.0, (4, 500))
        accs.append(cmia_evaluate(a, b, c, d))
    assert abs(np.mean(accs) - 0.5) <= 0.05


def test_attacker_empty():
    with pytest.raises(ValueError):
        cmia_evaluate([], [1.0], [1.0], [1.0])


def test_loss_gap_statistics():
    assert loss_gap([1, 2, 9], [1, 1, 1]) == pytest.approx(3.0)
    assert loss_gap([1, 2, 9], [1, 1, 1], "median") == pytest.approx(1.0)


# ------------------------------------------------------------------ parity search

@pytest.fixture(scope="module")
def heldout_task():
    train, test = generate_synthetic(SyntheticSpec(num_classes=4, dim=16, train_per_class=60, test_per_class=30,
                                                   noise_std=0.7, seed=5))
    seen = train.labels != 3
    fit = LabeledEmbeddings(train.features[seen], train.labels[seen], 4)
    model = build_model(BottleneckConfig(input_dim=16, value_dim=4, num_codebooks=8, pairs_per_codebook=32,
                                         key_dim=4, key_init_epochs=2, seed=5), fit)
    train_values(model, fit, TrainConfig(epochs=5, seed=5))
    forget_train = fit.subset(fit.labels == 0)
    forget_val = test.subset(test.labels == 0)
    heldout_val = test.subset(test.labels == 3)
    return model, forget_train, forget_val, heldout_val


def test_parity_gap_positive_at_zero(heldout_task):
    model, _, fv, hv = heldout_task
    f, h = per_example_losses(model, fv), per_example_losses(model, hv)
    assert f.mean() < h.mean() and loss_gap(f, h) > 0


def test_parity_returns_argmin_and_restores_mask(heldout_task):
    model, ft, fv, hv = heldout_task
    mask = model.mask.copy()
    n = len(record_activations(model, ft))
    grid = list(range(0, n + 1, max(1, n // 12)))
    best, gaps = parity_search(model, fv, hv, "activations", grid, forget_train=ft)
    assert np.array_equal(model.mask, mask)
    assert best == grid[int(np.argmin(gaps))]
    assert gaps[0] > gaps.min()


def test_parity_tie_prefers_smaller_budget(heldout_task):
    model, ft, fv, hv = heldout_task
    n = len(record_activations(model, ft))
    # both budgets saturate the recorded pairs, so their gaps are equal
    best, gaps = parity_search(model, fv, hv, "activations", [n + 10, n + 5], forget_train=ft)
    assert gaps[0] == gaps[1] and best == n + 5


def test_parity_examples_deterministic(heldout_task):
    model, ft, fv, hv = heldout_task
    grid = [0, 5, 20, len(ft)]
    a = parity_search(model, fv, hv, "examples", grid, forget_train=ft, seed=2)
    b = parity_search(model, fv, hv, "examples", grid, forget_train=ft, seed=2)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_parity_errors(heldout_task):
    model, ft, fv, hv = heldout_task
    with pytest.raises(ValueError):
        parity_search(model, fv, hv, "activations", [], forget_train=ft)
    with pytest.raises(ValueError):
        parity_search(model, fv, hv, "gradient", [0], forget_train=ft)
