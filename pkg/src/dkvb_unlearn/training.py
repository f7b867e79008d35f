"""Value learning for the bottleneck.

Only values selected in a batch receive gradient, and the optimizer only
keeps state for slots that have been touched at least once (lazy Adam with
per-slot step counters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bottleneck import DegenerateModelError, KeyValueBottleneck
from .data import LabeledEmbeddings

NORMALIZATIONS = ("touch", "batch")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    # "touch": divide a slot's summed gradient by how many examples selected it;
    # "batch": divide by the batch size (true gradient of the batch-mean loss).
    normalization: str = "touch"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate positive")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


def softmax_ce(logits, label):
    """Cross-entropy of a softmax and its gradient w.r.t. the logits.

    Works for a single vector with an int label, or a batch ``(N, K)`` with a
    label vector (then the loss is per example).
    """
    logits = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label)
    k = logits.shape[-1]
    if np.any(label < 0) or np.any(label >= k):
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_p = shifted - log_z
    onehot = np.eye(k)[label]
    loss = -(log_p * onehot).sum(axis=-1)
    grad = np.exp(log_p) - onehot
    return (float(loss), grad) if logits.ndim == 1 else (loss, grad)


class SparseAdam:
    """Adam over rows of a (C, M, V) table with per-row state and step counts.

    Rows with ``steps == 0`` have never been updated and carry no state.
    """

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        c, m, v = shape
        self.m = np.zeros((c * m, v))
        self.v = np.zeros((c * m, v))
        self.steps = np.zeros(c * m, dtype=np.int64)

    def has_state(self) -> np.ndarray:
        return self.steps > 0

    def step(self, params: np.ndarray, slots: np.ndarray, grads: np.ndarray) -> None:
        """Update flat ``slots`` (unique) of ``params`` viewed as (C*M, V)."""
        flat = params.reshape(-1, params.shape[-1])
        self.steps[slots] += 1
        t = self.steps[slots][:, None]
        self.m[slots] = self.beta1 * self.m[slots] + (1 - self.beta1) * grads
        self.v[slots] = self.beta2 * self.v[slots] + (1 - self.beta2) * grads * grads
        m_hat = self.m[slots] / (1 - self.beta1 ** t)
        v_hat = self.v[slots] / (1 - self.beta2 ** t)
        flat[slots] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def value_gradients(model: KeyValueBottleneck, logits_grad: np.ndarray, trace: np.ndarray,
                    normalization: str = "touch"):
    """Sparse dLoss/dvalue for one batch.

    Each selected slot of example ``i`` in codebook ``c`` gets
    ``grad_logits_i / (C_eff_i * n_ic)``, where ``n_ic`` is how many keys
    codebook ``c`` selected and ``C_eff_i`` the number of nonempty codebooks.
    Contributions are summed in example order, then divided per the
    normalization. Returns ``(slots, grads, touches)`` with ``slots`` the
    sorted flat indices ``c*M + j``.
    """
    n, c, k = trace.shape
    m = model.pairs_per_codebook
    valid = trace >= 0
    n_sel = valid.sum(axis=-1)
    c_eff = (n_sel > 0).sum(axis=1)
    scale = np.where(valid, 1.0 / np.maximum(c_eff[:, None, None] * n_sel[..., None], 1), 0.0)
    flat = (trace + (np.arange(c) * m)[None, :, None])[valid]
    contrib = (scale[..., None] * logits_grad[:, None, None, :])[valid]
    slots, inverse = np.unique(flat, return_inverse=True)
    grads = np.zeros((slots.size, logits_grad.shape[1]))
    np.add.at(grads, inverse, contrib)
    touches = np.bincount(inverse, minlength=slots.size)
    if normalization == "touch":
        grads /= touches[:, None]
    elif normalization == "batch":
        grads /= n
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return slots, grads, touches


def clip_by_global_norm(grads: np.ndarray, threshold: float | None) -> np.ndarray:
    if threshold is None:
        return grads
    norm = float(np.sqrt(np.sum(grads * grads)))
    return grads * (threshold / norm) if norm > threshold else grads


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    optimizer: SparseAdam | None = None
    # traces recorded during the final epoch, in dataset order
    last_epoch_trace: np.ndarray | None = None
    examples_forwarded: int = 0
    optimizer_steps: int = 0


def train_values(
    model: KeyValueBottleneck,
    data: LabeledEmbeddings,
    cfg: TrainConfig,
    *,
    eval_data: LabeledEmbeddings | None = None,
    workers: int = 1,
    on_epoch=None,
) -> TrainResult:
    """Cross-entropy training of the values with lazy Adam.

    Keys, projection and mask are never modified. ``on_epoch`` receives the
    metrics dict after every epoch.
    """
    if len(data) == 0:
        raise ValueError("cannot train on empty data")
    if not model.keys_initialized:
        raise RuntimeError("initialize keys before training values")
    opt = SparseAdam(model.values.shape, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 7])
    feats = data.features
    result = TrainResult(optimizer=opt)
    last_trace = np.empty((len(data), model.num_codebooks, model.config.top_k), dtype=np.int64)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        total_loss, correct, n_degenerate = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            res = model.forward(feats[idx], workers=workers)
            loss, g = softmax_ce(res.logits, data.labels[idx])
            total_loss += float(loss.sum())
            correct += int(np.sum(np.argmax(res.logits, axis=1) == data.labels[idx]))
            n_degenerate += int(res.degenerate.sum())
            slots, grads, _ = value_gradients(model, g, res.trace, cfg.normalization)
            if slots.size:
                opt.step(model.values, slots, clip_by_global_norm(grads, cfg.grad_clip))
                result.optimizer_steps += 1
            result.examples_forwarded += len(idx)
            if epoch == cfg.epochs:
                last_trace[idx] = res.trace
        if n_degenerate == len(data):
            raise DegenerateModelError("every training example hit a fully masked model")
        row = {
            "epoch": epoch,
            "train_loss": total_loss / len(data),
            "train_acc": correct / len(data),
            "test_acc": evaluate(model, eval_data) if eval_data is not None and len(eval_data) else None,
        }
        result.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if cfg.epochs:
        result.last_epoch_trace = last_trace
    return result


def evaluate(model, data: LabeledEmbeddings, **kw) -> float:
    """Accuracy of argmax predictions (lowest class on ties)."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on empty data")
    return float(np.mean(model.predict(data.features, **kw) == data.labels))
