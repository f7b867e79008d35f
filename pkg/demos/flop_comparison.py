"""Compare unlearning cost: masking versus gradient baselines on a linear head.

Run: python3 demos/flop_comparison.py
"""
from dataclasses import replace

import numpy as np

from dkvb_unlearn import baselines as bl
from dkvb_unlearn.bottleneck import build_model
from dkvb_unlearn.config import parse_config
from dkvb_unlearn.data import generate_synthetic, split_by_classes
from dkvb_unlearn.evaluation import FlopLedger
from dkvb_unlearn.training import train_values
from dkvb_unlearn.unlearning import record_activations, unlearn_via_activations, unlearn_via_examples

cfg = parse_config("")
train, test = generate_synthetic(cfg.data.synthetic)
bundle = split_by_classes(train, test, {2})
model = build_model(cfg.bottleneck_config(train.dim, train.num_classes, 0), train)
train_values(model, train, cfg.train)
head = bl.LinearHead(train.num_classes, train.dim)
bl.train_linear(head, train, cfg.linear)


def forget_acc(predict):
    return float(np.mean(predict(bundle.test_forget.features) == bundle.test_forget.labels))


rows = []
led = FlopLedger()
m = model.copy()
unlearn_via_examples(m, bundle.train_forget, len(bundle.train_forget), ledger=led)
rows.append(("dkvb via examples", led, forget_acc(m.predict)))
led = FlopLedger()
m = model.copy()
unlearn_via_activations(m, record_activations(m, bundle.train_forget, ledger=led), 10**6)
rows.append(("dkvb via activations", led, forget_acc(m.predict)))
for name, run in (
        ("scrub", lambda led: bl.scrub_unlearn(head, bundle, replace(cfg.scrub, early_stop=False), ledger=led)),
        ("neggrad+", lambda led: bl.neggrad_plus(head.copy(), bundle, replace(cfg.neggrad, early_stop=False),
                                                 cfg.neggrad_beta, ledger=led)),
        ("finetune", lambda led: bl.finetune_retain(head.copy(), bundle, replace(cfg.finetune, early_stop=False),
                                                    ledger=led))):
    led = FlopLedger()
    res = run(led)
    rows.append((name, led, forget_acc(res.head.predict)))

print(f"{'method':22s}{'forward':>14s}{'backward':>14s}  forget acc")
for name, led, acc in rows:
    print(f"{name:22s}{led.forward:>14,}{led.backward:>14,}  {acc:.3f}")
