import math

import numpy as np
import pytest

from dkvb_unlearn.baselines import (
    Adam,
    LinearHead,
    LinearTrainConfig,
    ScrubConfig,
    _StopRule,
    finetune_retain,
    kl_divergence,
    kl_grad,
    neggrad_plus,
    retrain_scratch,
    scrub_schedule,
    scrub_unlearn,
    train_linear,
)
from dkvb_unlearn.data import LabeledEmbeddings, SyntheticSpec, generate_synthetic, split_by_classes
from dkvb_unlearn.evaluation import backward_flops
from dkvb_unlearn.training import softmax_ce

from oracles import adam_reference, ce_loss, central_difference


@pytest.fixture(scope="module")
def task():
    train, test = generate_synthetic(SyntheticSpec(num_classes=5, dim=16, train_per_class=100, test_per_class=40,
                                                   noise_std=0.7, seed=1))
    head = LinearHead(5, 16, seed=1)
    train_linear(head, train, LinearTrainConfig(epochs=10, learning_rate=0.01))
    return head, split_by_classes(train, test, {0})


def _fixed(**kw):
    return LinearTrainConfig(early_stop=False, **kw)


def _acc(head, data):
    return float(np.mean(head.predict(data.features) == data.labels))


# ------------------------------------------------------------------ KL

def test_kl_identical_is_zero():
    p = np.array([0.3, -1.2, 2.0])
    assert kl_divergence(p, p) == 0.0


def test_kl_onehot_vs_uniform():
    assert kl_divergence([1000.0, 0.0], [0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-9)


def test_kl_nonnegative_random_pairs():
    rng = np.random.default_rng(0)
    p, q = rng.standard_normal((2, 1000, 6)) * 4
    assert np.all(kl_divergence(p, q) >= 0)


@pytest.mark.parametrize("direction", ["student_teacher", "teacher_student"])
def test_kl_grad_finite_differences(direction):
    rng = np.random.default_rng(3)
    s, t = rng.standard_normal((2, 1, 5))

    def f(x):
        a, b = (x, t[0]) if direction == "student_teacher" else (t[0], x)
        return kl_divergence(a, b)

    kl, g = kl_grad(s, t, direction)
    assert kl[0] == pytest.approx(f(s[0]))
    for i in range(5):
        assert g[0, i] == pytest.approx(central_difference(f, s[0], i, 1e-6), rel=1e-6, abs=1e-10)


# ------------------------------------------------------------------ linear head

def test_train_linear_separable_2d():
    x = np.array([[-2.0, 0.1], [-1.5, -0.3], [-3.0, 0.5], [1.8, 0.2], [2.5, -0.4], [1.2, 0.0]])
    data = LabeledEmbeddings(x, np.array([0, 0, 0, 1, 1, 1]), 2)
    head = LinearHead(2, 2, seed=0)
    res = train_linear(head, data, LinearTrainConfig(epochs=50, learning_rate=0.1, batch_size=2))
    assert res.history[-1]["train_acc"] == 1.0


def test_train_linear_zero_epochs_is_identity(task):
    _, bundle = task
    head = LinearHead(5, 16, seed=7)
    ref = head.copy()
    train_linear(head, bundle.train_retain, LinearTrainConfig(epochs=0))
    assert head.same_as(ref)


def test_linear_gradient_finite_differences():
    rng = np.random.default_rng(5)
    head = LinearHead(3, 4, seed=2)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    _, g = softmax_ce(head.logits(x), y)
    gw, gb = head.gradients(x, g)

    def loss_with(w_flat, b):
        logits = x @ w_flat.reshape(3, 4).T + b
        return np.mean([ce_loss(list(row), int(lbl)) for row, lbl in zip(logits, y)])

    for i in range(12):
        fd = central_difference(lambda w: loss_with(w, head.bias), head.weight.ravel(), i, 1e-6)
        assert gw.ravel()[i] == pytest.approx(fd, rel=1e-5, abs=1e-10)
    for i in range(3):
        fd = central_difference(lambda b: loss_with(head.weight.ravel(), b), head.bias, i, 1e-6)
        assert gb[i] == pytest.approx(fd, rel=1e-5, abs=1e-10)


def test_linear_head_save_load(tmp_path):
    head = LinearHead(4, 3, seed=9)
    head.save(tmp_path / "h.npz")
    assert LinearHead.load(tmp_path / "h.npz").same_as(head)


# ------------------------------------------------------------------ finetune / retrain

def test_finetune_only_pushes_forget_logit_down(task):
    head, bundle = task
    seen = []
    finetune_retain(head.copy(), bundle, _fixed(epochs=3), on_grad=lambda x, g: seen.append(g[:, 0].copy()))
    assert seen and all(np.all(col > 0) for col in seen)


def test_finetune_zero_epochs_is_identity(task):
    head, bundle = task
    res = finetune_retain(head.copy(), bundle, _fixed(epochs=0))
    assert res.head.same_as(head) and res.ledger.total == 0


def test_finetune_reduces_forget_accuracy(task):
    head, bundle = task
    before = _acc(head, bundle.test_forget)
    res = finetune_retain(head.copy(), bundle, _fixed(epochs=10))
    assert res.history[-1]["test_forget_acc"] < before


def test_retrain_forget_row_replays_from_init(task):
    """The forget row only ever sees push-down gradients; replaying them
    through a reference Adam from the seeded init reproduces it exactly."""
    _, bundle = task
    cfg = _fixed(epochs=4, seed=3)
    steps = []
    res = retrain_scratch(bundle, cfg, num_classes=5, on_grad=lambda x, g: steps.append((x.copy(), g[:, 0].copy())))
    assert all(np.all(gf > 0) for _, gf in steps)
    init = LinearHead(5, 16, seed=3)
    row_grads = [np.append(gf @ x / len(x), gf.mean()) for x, gf in steps]
    start = np.append(init.weight[0], init.bias[0])
    replay = adam_reference(start, row_grads, cfg.learning_rate)
    np.testing.assert_allclose(np.append(res.head.weight[0], res.head.bias[0]), replay, rtol=1e-10, atol=1e-14)


def test_retrain_deterministic_and_accurate(task):
    _, bundle = task
    cfg = _fixed(epochs=20, seed=4)
    a = retrain_scratch(bundle, cfg, num_classes=5)
    b = retrain_scratch(bundle, cfg, num_classes=5)
    assert a.head.same_as(b.head)
    assert _acc(a.head, bundle.test_retain) >= 0.95
    assert _acc(a.head, bundle.test_forget) == 0.0


def test_empty_retain_rejected(task):
    head, bundle = task
    empty = split_by_classes(bundle.train_forget, bundle.test_forget, {0})
    with pytest.raises(ValueError):
        finetune_retain(head.copy(), empty, _fixed())


# ------------------------------------------------------------------ NegGrad+

def test_neggrad_beta_one_equals_finetune(task):
    head, bundle = task
    cfg = _fixed(epochs=3, seed=2)
    a = neggrad_plus(head.copy(), bundle, cfg, beta=1.0)
    b = finetune_retain(head.copy(), bundle, cfg)
    assert a.head.same_as(b.head)
    assert a.ledger.total == b.ledger.total


def test_neggrad_beta_zero_step_raises_forget_loss(task):
    head, bundle = task
    # splits small enough for a single step per epoch
    tr, fg = bundle.train_retain, bundle.train_forget
    tiny = LabeledEmbeddings(np.concatenate([tr.features[:50], fg.features[:20]]),
                             np.concatenate([tr.labels[:50], fg.labels[:20]]), 5)
    small = split_by_classes(tiny, bundle.test_retain, {0})
    forget = small.train_forget
    before = float(softmax_ce(head.logits(forget.features), forget.labels)[0].mean())
    res = neggrad_plus(head.copy(), small, _fixed(epochs=1, learning_rate=0.001), beta=0.0)
    after = float(softmax_ce(res.head.logits(forget.features), forget.labels)[0].mean())
    assert after > before


def test_neggrad_suppresses_forget_class(task):
    head, bundle = task
    res = neggrad_plus(head.copy(), bundle, _fixed(epochs=10), beta=0.95)
    assert _acc(res.head, bundle.test_forget) <= 0.05
    with pytest.raises(ValueError):
        neggrad_plus(head.copy(), bundle, _fixed(), beta=1.5)


# ------------------------------------------------------------------ SCRUB

def test_scrub_schedule():
    sched = scrub_schedule(ScrubConfig(msteps=3, epochs=10))
    assert [p for p in sched if p[1] == "max"] == [(1, "max"), (2, "max"), (3, "max")]
    assert len(sched) == 13 and sched[:2] == [(1, "max"), (1, "min")]
    assert all(p == "min" for _, p in scrub_schedule(ScrubConfig(msteps=0, epochs=4)))
    with pytest.raises(ValueError):
        ScrubConfig(msteps=5, epochs=4)


def test_scrub_history_follows_schedule(task):
    head, bundle = task
    cfg = ScrubConfig(msteps=2, epochs=5, early_stop=False)
    res = scrub_unlearn(head, bundle, cfg)
    assert [(r["epoch"], r["phase"]) for r in res.history] == scrub_schedule(cfg)


def test_max_step_increases_forget_kl(task):
    head, bundle = task
    x = bundle.train_forget.features[:32]
    student = head.copy()
    student.weight += np.random.default_rng(0).standard_normal(student.weight.shape) * 0.05
    kl0, g = kl_grad(student.logits(x), head.logits(x))
    opt = Adam(student, 1e-3)
    opt.step(student, student.gradients(x, g), sign=-1.0)
    kl1, _ = kl_grad(student.logits(x), head.logits(x))
    assert kl1.mean() > kl0.mean()


def test_scrub_min_only_keeps_retain_kl_low(task):
    head, bundle = task
    x = bundle.train_retain.features
    res = scrub_unlearn(head, bundle, ScrubConfig(msteps=0, epochs=5, alpha=0.0, early_stop=False))
    # the student starts at the teacher, so the min-step has nothing to move
    assert kl_divergence(res.head.logits(x), head.logits(x)).mean() < 1e-12


def test_scrub_unlearns_forget_class(task):
    head, bundle = task
    res = scrub_unlearn(head, bundle, ScrubConfig(learning_rate=0.03, early_stop=False))
    assert _acc(res.head, bundle.test_forget) <= 0.05
    assert _acc(res.head, bundle.test_retain) >= 0.95


# ------------------------------------------------------------------ stop rule and ledgers

def test_stop_rule():
    rule = _StopRule(tol=0.01, window=2)
    assert not rule(0.5) and not rule(0.4)
    assert rule(0.0)
    plateau = _StopRule(tol=0.01, window=2)
    assert [plateau(a) for a in (0.3, 0.301, 0.302)] == [False, False, True]


def test_early_stop_flag(task):
    head, bundle = task
    res = neggrad_plus(head.copy(), bundle, LinearTrainConfig(epochs=30, early_stop=True))
    assert res.stopped_early and len(res.history) < 30
    assert res.history[-1]["test_forget_acc"] == 0.0


def test_ledgers(task):
    head, bundle = task
    p = head.parameter_count()
    n_r, n_f = len(bundle.train_retain), len(bundle.train_forget)
    runs = {
        "finetune": finetune_retain(head.copy(), bundle, _fixed(epochs=2)),
        "retrain": retrain_scratch(bundle, _fixed(epochs=2), num_classes=5),
        "neggrad": neggrad_plus(head.copy(), bundle, _fixed(epochs=2)),
        "scrub": scrub_unlearn(head, bundle, ScrubConfig(msteps=1, epochs=2, early_stop=False)),
    }
    for res in runs.values():
        assert res.ledger.forward > 0 and res.ledger.backward > 0
    assert runs["finetune"].ledger.forward == 2 * n_r * p
    # SCRUB runs both networks forward: one forget pass plus two retain passes
    assert runs["scrub"].ledger.forward == 2 * p * (n_f + 2 * n_r)
    steps = math.ceil(n_r / 256) * 2
    assert runs["finetune"].ledger.backward == backward_flops(p, steps, 2 * n_r)
