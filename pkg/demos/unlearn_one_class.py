"""Train a key-value bottleneck on the synthetic desk task and forget one class.

Run: python3 demos/unlearn_one_class.py [seed]
"""
import sys

from dkvb_unlearn.bottleneck import build_model
from dkvb_unlearn.config import parse_config
from dkvb_unlearn.data import generate_synthetic, misclassification_counts, select_forget_class, split_by_classes
from dkvb_unlearn.evaluation import FlopLedger
from dkvb_unlearn.training import evaluate, train_values
from dkvb_unlearn.unlearning import unlearn_via_examples

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = parse_config("")
train, test = generate_synthetic(cfg.data.synthetic)
model = build_model(cfg.bottleneck_config(train.dim, train.num_classes, seed), train)
train_values(model, train, cfg.train)

# forget the class the model already gets most right
forget = select_forget_class(misclassification_counts(test.labels, model.predict(test.features), train.num_classes))
bundle = split_by_classes(train, test, {forget})
print(f"forget class {forget}: {len(bundle.train_forget)} training examples")
print(f"before  retain {evaluate(model, bundle.test_retain):.3f}  forget {evaluate(model, bundle.test_forget):.3f}")

ledger = FlopLedger()
rep = unlearn_via_examples(model, bundle.train_forget, len(bundle.train_forget), seed=seed, ledger=ledger)
print(f"after   retain {evaluate(model, bundle.test_retain):.3f}  forget {evaluate(model, bundle.test_forget):.3f}")
print(f"masked {rep.pairs_masked} of {model.mask.size} key-value pairs; "
      f"forward FLOPs {ledger.forward:,}, backward FLOPs {ledger.backward}")
