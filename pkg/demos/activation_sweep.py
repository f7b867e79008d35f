"""Forget accuracy as more of the forget class's most-used pairs are masked.

Run: python3 demos/activation_sweep.py
"""
import numpy as np

from dkvb_unlearn.bottleneck import build_model
from dkvb_unlearn.config import parse_config
from dkvb_unlearn.data import generate_synthetic, split_by_classes
from dkvb_unlearn.training import evaluate, train_values
from dkvb_unlearn.unlearning import record_activations, unlearn_via_activations

cfg = parse_config("")
train, test = generate_synthetic(cfg.data.synthetic)
model = build_model(cfg.bottleneck_config(train.dim, train.num_classes, 0), train)
train_values(model, train, cfg.train)
bundle = split_by_classes(train, test, {3})

counts = record_activations(model, bundle.train_forget)
saved = model.mask.copy()
print("N_a   retain  forget")
for n_a in np.linspace(0, len(counts), 11).round().astype(int):
    model.mask[...] = saved
    unlearn_via_activations(model, counts, int(n_a))
    print(f"{n_a:4d}  {evaluate(model, bundle.test_retain):.3f}   {evaluate(model, bundle.test_forget):.3f}")
