"""Metrics, FLOP accounting and the class-membership inference attack.

FLOP convention: one FLOP per multiply-accumulate in the forward pass.
Backward cost of a gradient method with ``P`` trainable parameters is
``P`` per example that contributes a gradient plus ``18 * P`` per Adam
update. Methods that only run inference have zero backward cost.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

ADAM_OPS_PER_PARAM = 18


# ------------------------------------------------------------------ FLOP rules

def model_macs(model) -> int:
    """Per-example forward multiply-accumulates of a model.

    Linear head: ``K*D + K``. Bottleneck: projection ``C*key_dim*D`` plus
    one MAC per coordinate for every unmasked key's distance plus the adds
    that sum the selected values.
    """
    if hasattr(model, "config") and hasattr(model, "mask"):
        cfg = model.config
        unmasked = model.unmasked_counts()
        projection = cfg.num_codebooks * cfg.key_dim * cfg.input_dim
        distances = int(unmasked.sum()) * cfg.key_dim
        averaging = int(np.minimum(unmasked, cfg.top_k).sum()) * cfg.value_dim
        return int(projection + distances + averaging)
    return int(model.parameter_count())


def forward_flops(model, n_examples: int, flops_per_mac: int = 1) -> int:
    """``model`` is anything :func:`model_macs` understands, or an int MAC count."""
    macs = model if isinstance(model, (int, np.integer)) else model_macs(model)
    return int(macs) * int(n_examples) * flops_per_mac


def backward_flops(params: int, steps: int, grad_examples: int) -> int:
    return int(grad_examples) * int(params) + int(steps) * ADAM_OPS_PER_PARAM * int(params)


@dataclass
class LedgerEntry:
    phase: str
    kind: str            # "forward" | "backward"
    size: int            # MACs per example (forward) or parameter count (backward)
    examples: int
    steps: int = 0
    flops: int = 0


@dataclass
class FlopLedger:
    """Forward/backward FLOP counts with a per-event log.

    Totals are accumulated as events arrive; :meth:`replay` rebuilds them
    from the logged counts alone so the two can be audited against each other.
    """

    flops_per_mac: int = 1
    entries: list = field(default_factory=list)
    forward: int = 0
    backward: int = 0
    # per-example MACs of a frozen encoder that is rerun on every forward pass
    encoder_macs: int = 0

    def add_forward(self, phase: str, model_or_macs, n_examples: int) -> int:
        macs = model_or_macs if isinstance(model_or_macs, (int, np.integer)) else model_macs(model_or_macs)
        macs = int(macs) + self.encoder_macs
        flops = forward_flops(int(macs), n_examples, self.flops_per_mac)
        self.entries.append(LedgerEntry(phase, "forward", int(macs), int(n_examples), 0, flops))
        self.forward += flops
        return flops

    def add_backward(self, phase: str, params: int, grad_examples: int, steps: int) -> int:
        flops = backward_flops(params, steps, grad_examples)
        self.entries.append(LedgerEntry(phase, "backward", int(params), int(grad_examples), int(steps), flops))
        self.backward += flops
        return flops

    @property
    def total(self) -> int:
        return self.forward + self.backward

    def by_phase(self) -> dict:
        out: dict = {}
        for e in self.entries:
            row = out.setdefault(e.phase, {"forward": 0, "backward": 0})
            row[e.kind] += e.flops
        return out

    def replay(self) -> "FlopLedger":
        # logged sizes already include the encoder
        fresh = FlopLedger(self.flops_per_mac)
        for e in self.entries:
            if e.kind == "forward":
                fresh.add_forward(e.phase, e.size, e.examples)
            else:
                fresh.add_backward(e.phase, e.size, e.examples, e.steps)
        return fresh

    def merge(self, other: "FlopLedger") -> None:
        for e in other.entries:
            self.entries.append(LedgerEntry(**asdict(e)))
        self.forward += other.forward
        self.backward += other.backward

    def to_dict(self) -> dict:
        return {
            "flops_per_mac": self.flops_per_mac,
            "encoder_macs": self.encoder_macs,
            "forward_flops": self.forward,
            "backward_flops": self.backward,
            "total_flops": self.total,
            "by_phase": self.by_phase(),
            "entries": [asdict(e) for e in self.entries],
            # gradient ops are charged per contributing example, not per step
            "gradient_accounting": "per-example",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlopLedger":
        led = cls(d.get("flops_per_mac", 1), encoder_macs=d.get("encoder_macs", 0))
        led.entries = [LedgerEntry(**e) for e in d.get("entries", [])]
        led.forward = d["forward_flops"]
        led.backward = d["backward_flops"]
        return led


# ------------------------------------------------------------------ reporting

def relative_change(before: float, after: float) -> float:
    """Percent change of ``after`` relative to ``before``."""
    if before == 0:
        raise ZeroDivisionError("relative change is undefined for a zero baseline")
    return (after - before) / before * 100.0


REPORT_SCHEMA = "dkvb-unlearn/metrics-report/v1"


@dataclass
class MetricsReport:
    method: str
    before: dict             # {"train_retain": acc, "train_forget": ..., "test_retain": ..., "test_forget": ...}
    after: dict
    ledger: FlopLedger
    seed: int = 0
    forget_classes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def relative(self) -> dict:
        return {k: (relative_change(self.before[k], self.after[k]) if self.before[k] > 0 else None)
                for k in self.before}

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "method": self.method,
            "seed": self.seed,
            "forget_classes": sorted(int(c) for c in self.forget_classes),
            "before": self.before,
            "after": self.after,
            "relative_change_pct": self.relative(),
            "flops": self.ledger.to_dict(),
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        known = {"schema", "method", "seed", "forget_classes", "before", "after", "relative_change_pct", "flops"}
        return cls(d["method"], d["before"], d["after"], FlopLedger.from_dict(d["flops"]), d.get("seed", 0),
                   d.get("forget_classes", []), {k: v for k, v in d.items() if k not in known})

    def accuracy_row(self) -> dict:
        rel = self.relative()
        return {"method": self.method, "retain_delta_pct": rel["test_retain"], "forget_delta_pct": rel["test_forget"]}

    def flop_row(self) -> dict:
        return {"method": self.method, "forward_flops": self.ledger.forward, "backward_flops": self.ledger.backward}


# ------------------------------------------------------------------ CMIA

def per_example_losses(model, data) -> np.ndarray:
    from .training import softmax_ce

    loss, _ = softmax_ce(model.forward(data.features).logits if hasattr(model, "mask")
                         else model.logits(data.features), data.labels)
    return np.atleast_1d(loss)


class LogisticAttacker:
    """One-feature logistic regression fitted by full-batch gradient descent."""

    def __init__(self, lr: float = 0.5, iterations: int = 2000):
        self.lr = lr
        self.iterations = iterations
        self.w = 0.0
        self.b = 0.0
        self.mu = 0.0
        self.sd = 1.0

    def fit(self, x, y) -> "LogisticAttacker":
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        if x.size == 0:
            raise ValueError("attacker needs training data")
        self.mu = float(x.mean())
        self.sd = float(x.std()) or 1.0
        u = (x - self.mu) / self.sd
        w = b = 0.0
        for _ in range(self.iterations):
            p = 1.0 / (1.0 + np.exp(-(w * u + b)))
            r = p - y
            w -= self.lr * float(np.mean(r * u))
            b -= self.lr * float(np.mean(r))
        self.w, self.b = w, b
        return self

    def decision(self, x) -> np.ndarray:
        u = (np.asarray(x, dtype=np.float64).ravel() - self.mu) / self.sd
        return self.w * u + self.b

    def predict(self, x) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.int64)

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y).ravel()))


def cmia_evaluate(forget_val, heldout_val, forget_test, heldout_test, **attacker_kw) -> float:
    """Attacker accuracy at telling the unlearned class (label 1) from a
    never-seen class (label 0), trained on validation losses and scored on
    test losses. 0.5 means the attacker cannot tell them apart."""
    for name, arr in (("forget_val", forget_val), ("heldout_val", heldout_val),
                      ("forget_test", forget_test), ("heldout_test", heldout_test)):
        if len(arr) == 0:
            raise ValueError(f"{name} losses are empty")
    x_val = np.concatenate([forget_val, heldout_val])
    y_val = np.concatenate([np.ones(len(forget_val)), np.zeros(len(heldout_val))])
    x_test = np.concatenate([forget_test, heldout_test])
    y_test = np.concatenate([np.ones(len(forget_test)), np.zeros(len(heldout_test))])
    return LogisticAttacker(**attacker_kw).fit(x_val, y_val).accuracy(x_test, y_test)


def loss_gap(forget_losses, heldout_losses, statistic: str = "mean") -> float:
    stat = {"mean": np.mean, "median": np.median}[statistic]
    return float(abs(stat(forget_losses) - stat(heldout_losses)))


def parity_search(model, forget_val, heldout_val, method: str, grid, *, forget_train=None,
                  seed: int = 0, statistic: str = "mean"):
    """Smallest budget on ``grid`` minimizing the forget/held-out loss gap.

    ``method`` is ``"activations"`` (budget = N_a, counts recorded on
    ``forget_train``) or ``"examples"`` (budget = N_e sampled from
    ``forget_train``). The model's mask is restored before returning.
    Returns ``(best_budget, gaps)`` with one gap per grid point.
    """
    from . import unlearning

    grid = [int(b) for b in grid]
    if not grid:
        raise ValueError("empty budget grid")
    if forget_train is None:
        raise ValueError("forget_train is required to record selections")
    counts = unlearning.record_activations(model, forget_train) if method == "activations" else None
    saved = model.mask.copy()
    gaps = []
    try:
        for budget in grid:
            if method == "activations":
                unlearning.unlearn_via_activations(model, counts, budget)
            elif method == "examples":
                unlearning.unlearn_via_examples(model, forget_train, budget, seed=seed)
            else:
                raise ValueError(f"unknown method {method!r}")
            gaps.append(loss_gap(per_example_losses(model, forget_val),
                                 per_example_losses(model, heldout_val), statistic))
            model.mask[...] = saved
    finally:
        model.mask[...] = saved
    gaps = np.asarray(gaps)
    best = min((g, b) for g, b in zip(gaps.tolist(), grid))[1]
    return best, gaps
