"""Class unlearning by masking key-value pairs.

Both procedures only run inference on forget-set examples and then set
mask bits; keys, values and the projection are left untouched, so the
backward cost is zero by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bottleneck import KeyValueBottleneck
from .data import DatasetBundle, LabeledEmbeddings
from .evaluation import FlopLedger, model_macs

METHODS = ("activations", "examples")


@dataclass
class ActivationCounts:
    """How often each (codebook, key) pair was selected over a dataset."""

    pairs: np.ndarray    # (P, 2) sorted by (codebook, key)
    counts: np.ndarray   # (P,)
    examples: int = 0
    macs_per_example: int = 0

    @classmethod
    def from_trace(cls, trace: np.ndarray) -> "ActivationCounts":
        n, c, _ = trace.shape
        cb = np.broadcast_to(np.arange(c)[None, :, None], trace.shape)
        keep = trace >= 0
        flat = np.stack([cb[keep], trace[keep]], axis=1)
        if flat.size == 0:
            return cls(np.empty((0, 2), dtype=np.int64), np.empty(0, dtype=np.int64), n)
        pairs, counts = np.unique(flat, axis=0, return_counts=True)
        return cls(pairs.astype(np.int64), counts.astype(np.int64), n)

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def as_dict(self) -> dict:
        return {(int(c), int(j)): int(n) for (c, j), n in zip(self.pairs, self.counts)}

    @classmethod
    def from_dict(cls, d: dict, examples: int = 0) -> "ActivationCounts":
        items = sorted(d.items())
        pairs = np.array([k for k, _ in items], dtype=np.int64).reshape(-1, 2)
        return cls(pairs, np.array([v for _, v in items], dtype=np.int64), examples)

    def ranked(self) -> np.ndarray:
        """Pairs by count descending, then codebook, then key ascending."""
        order = np.lexsort((self.pairs[:, 1], self.pairs[:, 0], -self.counts))
        return self.pairs[order]


@dataclass
class UnlearnReport:
    method: str
    budget: int
    pairs_masked: int
    forward_examples_processed: int
    forward_flops: int
    masked_pairs: np.ndarray = field(repr=False)
    backward_flops: int = 0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "budget": self.budget,
            "pairs_masked": self.pairs_masked,
            "forward_examples_processed": self.forward_examples_processed,
            "forward_flops": self.forward_flops,
            "backward_flops": self.backward_flops,
            "masked_pairs": self.masked_pairs.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def record_activations(model: KeyValueBottleneck, data: LabeledEmbeddings, *,
                       ledger: FlopLedger | None = None, workers: int = 1) -> ActivationCounts:
    if len(data) == 0:
        raise ValueError("cannot record activations on empty data")
    macs = model_macs(model)
    if ledger is not None:
        ledger.add_forward("record", macs, len(data))
    counts = ActivationCounts.from_trace(model.forward(data.features, workers=workers).trace)
    counts.macs_per_example = macs
    return counts


def unlearn_via_activations(model: KeyValueBottleneck, counts: ActivationCounts, n_a: int) -> UnlearnReport:
    """Mask the ``n_a`` most frequently selected pairs.

    No forward pass happens here; the report carries the cost of the pass
    that produced ``counts`` (zero for traces cached during training).
    """
    if n_a < 0:
        raise ValueError("N_a must be non-negative")
    fresh = model.apply_mask(counts.ranked()[:n_a])
    flops = counts.examples * counts.macs_per_example
    return UnlearnReport("activations", int(n_a), len(fresh), counts.examples, flops, fresh)


def sample_examples(n_available: int, n_e: int, seed: int) -> np.ndarray:
    """Seeded sample without replacement. Samples for the same seed are
    nested: a smaller ``n_e`` yields a prefix of a larger one."""
    if n_e < 0 or n_e > n_available:
        raise ValueError(f"N_e={n_e} must lie in [0, {n_available}]")
    return np.random.default_rng([seed, 11]).permutation(n_available)[:n_e]


def unlearn_via_examples(model: KeyValueBottleneck, forget_train: LabeledEmbeddings, n_e: int, *,
                         seed: int = 0, ledger: FlopLedger | None = None, workers: int = 1) -> UnlearnReport:
    """Mask every pair selected by any of ``n_e`` sampled forget examples."""
    idx = sample_examples(len(forget_train), n_e, seed)
    if n_e == 0:
        return UnlearnReport("examples", 0, 0, 0, 0, np.empty((0, 2), dtype=np.int64))
    macs = model_macs(model)
    flops = macs * n_e
    if ledger is not None:
        ledger.add_forward("unlearn", macs, n_e)
    trace = model.forward(forget_train.features[idx], workers=workers).trace
    fresh = model.apply_mask(ActivationCounts.from_trace(trace).pairs)
    return UnlearnReport("examples", int(n_e), len(fresh), int(n_e), flops, fresh)


def unlearn_multi(model: KeyValueBottleneck, bundle: DatasetBundle, method: str, budget: int, *,
                  seed: int = 0, ledger: FlopLedger | None = None, workers: int = 1) -> UnlearnReport:
    """Apply one method to the pooled forget training data of every forget class."""
    data = bundle.train_forget
    if method == "activations":
        counts = record_activations(model, data, ledger=ledger, workers=workers)
        return unlearn_via_activations(model, counts, budget)
    if method == "examples":
        return unlearn_via_examples(model, data, budget, seed=seed, ledger=ledger, workers=workers)
    raise ValueError(f"unknown unlearning method {method!r}")
