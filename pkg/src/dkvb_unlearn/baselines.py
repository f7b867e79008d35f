"""Gradient-based unlearning baselines on a linear classification head.

All methods share one training loop shape: seeded shuffles, dense Adam,
optional global-norm clipping, a FLOP ledger entry per batch and an
optional early stop once the forget test accuracy hits zero or stops moving.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetBundle, LabeledEmbeddings
from .evaluation import FlopLedger
from .training import softmax_ce


class LinearHead:
    """``logits = x @ W.T + b`` with ``W`` of shape (K, D)."""

    def __init__(self, num_classes: int, dim: int, seed: int = 0):
        rng = np.random.default_rng([seed, 21])
        bound = 1.0 / np.sqrt(dim)
        self.weight = rng.uniform(-bound, bound, size=(num_classes, dim))
        self.bias = rng.uniform(-bound, bound, size=num_classes)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def parameter_count(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "LinearHead":
        other = LinearHead.__new__(LinearHead)
        other.weight = self.weight.copy()
        other.bias = self.bias.copy()
        return other

    def logits(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weight.T + self.bias

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def gradients(self, x, logits_grad):
        """Parameter gradients of ``mean_i loss_i`` given per-example dloss/dlogits."""
        x = np.asarray(x, dtype=np.float64)
        n = len(x)
        return logits_grad.T @ x / n, logits_grad.sum(axis=0) / n

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, weight=self.weight, bias=self.bias)

    @classmethod
    def load(cls, path) -> "LinearHead":
        with np.load(path) as f:
            head = cls.__new__(cls)
            head.weight = f["weight"].copy()
            head.bias = f["bias"].copy()
        return head

    def same_as(self, other: "LinearHead") -> bool:
        return self.weight.tobytes() == other.weight.tobytes() and self.bias.tobytes() == other.bias.tobytes()


class Adam:
    def __init__(self, head: LinearHead, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(head.weight), np.zeros_like(head.bias)]
        self.v = [np.zeros_like(head.weight), np.zeros_like(head.bias)]

    def step(self, head: LinearHead, grads, sign: float = 1.0) -> None:
        """Descend (``sign=1``) or ascend (``sign=-1``) along ``grads``."""
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip((head.weight, head.bias), grads)):
            g = sign * g
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


def _clip(grads, threshold):
    if threshold is None:
        return grads
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
    if norm <= threshold:
        return grads
    return tuple(g * (threshold / norm) for g in grads)


@dataclass(frozen=True)
class LinearTrainConfig:
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 0.01
    grad_clip: float | None = None
    seed: int = 0
    early_stop: bool = True
    plateau_tol: float = 0.001
    plateau_window: int = 3


@dataclass(frozen=True)
class ScrubConfig:
    msteps: int = 3
    epochs: int = 10
    learning_rate: float = 0.01
    forget_batch_size: int = 256
    retain_batch_size: int = 256
    alpha: float = 1.0
    grad_clip: float | None = None
    # "student_teacher" is KL(student || teacher); "teacher_student" swaps it
    kl_direction: str = "student_teacher"
    seed: int = 0
    early_stop: bool = True
    plateau_tol: float = 0.001
    plateau_window: int = 3

    def __post_init__(self):
        if not 0 <= self.msteps <= self.epochs:
            raise ValueError("msteps must lie in [0, epochs]")
        if self.kl_direction not in ("student_teacher", "teacher_student"):
            raise ValueError("kl_direction must be 'student_teacher' or 'teacher_student'")


@dataclass
class BaselineResult:
    head: LinearHead
    history: list = field(default_factory=list)
    ledger: FlopLedger = field(default_factory=FlopLedger)
    stopped_early: bool = False


def _require(data: LabeledEmbeddings, name: str) -> None:
    if len(data) == 0:
        raise ValueError(f"{name} split is empty")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _ce_step(head, opt, x, y, clip, ledger, phase, scale=1.0, sign=1.0, on_grad=None):
    logits = head.logits(x)
    loss, g = softmax_ce(logits, y)
    if on_grad is not None:
        on_grad(x, g)
    grads = head.gradients(x, scale * g)
    opt.step(head, _clip(grads, clip), sign)
    if ledger is not None:
        p = head.parameter_count()
        ledger.add_forward(phase, p, len(x))
        ledger.add_backward(phase, p, len(x), 1)
    return float(loss.mean())


class _StopRule:
    """Halt when forget test accuracy reaches 0 or moves less than ``tol``
    (absolute) across the last ``window`` epochs."""

    def __init__(self, tol: float, window: int):
        self.tol, self.window = tol, window
        self.seen: list[float] = []

    def __call__(self, forget_acc: float) -> bool:
        self.seen.append(forget_acc)
        if forget_acc == 0.0:
            return True
        if len(self.seen) > self.window:
            recent = self.seen[-(self.window + 1):]
            return max(recent) - min(recent) < self.tol
        return False


def _monitor(head, bundle):
    out = {}
    if bundle is not None:
        if len(bundle.test_retain):
            out["test_retain_acc"] = float(np.mean(head.predict(bundle.test_retain.features) == bundle.test_retain.labels))
        if len(bundle.test_forget):
            out["test_forget_acc"] = float(np.mean(head.predict(bundle.test_forget.features) == bundle.test_forget.labels))
    return out


def _ce_training(head, data, cfg: LinearTrainConfig, *, method, ledger, monitor_bundle=None,
                 eval_data=None, on_grad=None) -> BaselineResult:
    _require(data, "training")
    ledger = ledger if ledger is not None else FlopLedger()
    result = BaselineResult(head, ledger=ledger)
    opt = Adam(head, cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 31])
    stop = _StopRule(cfg.plateau_tol, cfg.plateau_window)
    for epoch in range(1, cfg.epochs + 1):
        losses = [_ce_step(head, opt, data.features[idx], data.labels[idx], cfg.grad_clip, ledger,
                           method, on_grad=on_grad)
                  for idx in _batches(len(data), cfg.batch_size, rng)]
        row = {"epoch": epoch, "method": method, "phase": "min", "train_loss": float(np.mean(losses)),
               "train_acc": float(np.mean(head.predict(data.features) == data.labels)),
               "test_acc": (float(np.mean(head.predict(eval_data.features) == eval_data.labels))
                            if eval_data is not None else None)}
        row.update(_monitor(head, monitor_bundle))
        result.history.append(row)
        if cfg.early_stop and "test_forget_acc" in row and stop(row["test_forget_acc"]):
            result.stopped_early = epoch < cfg.epochs
            break
    return result


def train_linear(head: LinearHead, data: LabeledEmbeddings, cfg: LinearTrainConfig, *,
                 ledger: FlopLedger | None = None, eval_data=None) -> BaselineResult:
    """Plain cross-entropy training (no early stopping)."""
    return _ce_training(head, data, replace(cfg, early_stop=False), method="train", ledger=ledger,
                        eval_data=eval_data)


def finetune_retain(head: LinearHead, bundle: DatasetBundle, cfg: LinearTrainConfig, *,
                    ledger: FlopLedger | None = None, on_grad=None) -> BaselineResult:
    _require(bundle.train_retain, "retain")
    return _ce_training(head, bundle.train_retain, cfg, method="finetune", ledger=ledger,
                        monitor_bundle=bundle, on_grad=on_grad)


def retrain_scratch(bundle: DatasetBundle, cfg: LinearTrainConfig, *, num_classes: int | None = None,
                    ledger: FlopLedger | None = None, on_grad=None) -> BaselineResult:
    """Fresh head seeded from ``cfg.seed`` trained on the retain split only."""
    _require(bundle.train_retain, "retain")
    data = bundle.train_retain
    head = LinearHead(num_classes or data.num_classes, data.dim, seed=cfg.seed)
    return _ce_training(head, data, cfg, method="retrain", ledger=ledger, monitor_bundle=bundle,
                        on_grad=on_grad)


def neggrad_plus(head: LinearHead, bundle: DatasetBundle, cfg: LinearTrainConfig, beta: float = 0.95, *,
                 ledger: FlopLedger | None = None) -> BaselineResult:
    """Descend ``beta*CE(retain) - (1-beta)*CE(forget)``.

    Each step pairs one retain batch with one forget batch; forget batches
    cycle when the forget split is shorter. ``beta=0`` is pure ascent on
    the forget loss.
    """
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    retain, forget = bundle.train_retain, bundle.train_forget
    _require(retain, "retain")
    _require(forget, "forget")
    if beta == 1.0:
        res = finetune_retain(head, bundle, cfg, ledger=ledger)
        for row in res.history:
            row["method"] = "neggrad"
        return res
    ledger = ledger if ledger is not None else FlopLedger()
    result = BaselineResult(head, ledger=ledger)
    opt = Adam(head, cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 31])
    stop = _StopRule(cfg.plateau_tol, cfg.plateau_window)
    p = head.parameter_count()
    for epoch in range(1, cfg.epochs + 1):
        r_batches = _batches(len(retain), cfg.batch_size, rng)
        f_batches = _batches(len(forget), cfg.batch_size, rng)
        losses = []
        for i, r_idx in enumerate(r_batches):
            f_idx = f_batches[i % len(f_batches)]
            xr, yr = retain.features[r_idx], retain.labels[r_idx]
            xf, yf = forget.features[f_idx], forget.labels[f_idx]
            lr_, gr = softmax_ce(head.logits(xr), yr)
            lf_, gf = softmax_ce(head.logits(xf), yf)
            gw_r, gb_r = head.gradients(xr, gr)
            gw_f, gb_f = head.gradients(xf, gf)
            grads = (beta * gw_r - (1 - beta) * gw_f, beta * gb_r - (1 - beta) * gb_f)
            opt.step(head, _clip(grads, cfg.grad_clip))
            losses.append(beta * float(lr_.mean()) - (1 - beta) * float(lf_.mean()))
            ledger.add_forward("neggrad", p, len(r_idx) + len(f_idx))
            ledger.add_backward("neggrad", p, len(r_idx) + len(f_idx), 1)
        row = {"epoch": epoch, "method": "neggrad", "phase": "min", "train_loss": float(np.mean(losses)),
               "train_acc": float(np.mean(head.predict(retain.features) == retain.labels)), "test_acc": None}
        row.update(_monitor(head, bundle))
        result.history.append(row)
        if cfg.early_stop and "test_forget_acc" in row and stop(row["test_forget_acc"]):
            result.stopped_early = epoch < cfg.epochs
            break
    return result


# ------------------------------------------------------------------ SCRUB

def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_divergence(p_logits, q_logits):
    """``KL(softmax(p) || softmax(q))`` per row (scalar for 1-D input)."""
    log_p = _log_softmax(np.asarray(p_logits, dtype=np.float64))
    log_q = _log_softmax(np.asarray(q_logits, dtype=np.float64))
    kl = np.maximum(np.sum(np.exp(log_p) * (log_p - log_q), axis=-1), 0.0)
    return float(kl) if np.ndim(kl) == 0 else kl


def kl_grad(student_logits, teacher_logits, direction="student_teacher"):
    """Per-row KL and its gradient w.r.t. the student logits."""
    log_s = _log_softmax(student_logits)
    log_t = _log_softmax(teacher_logits)
    s = np.exp(log_s)
    if direction == "student_teacher":
        kl = np.sum(s * (log_s - log_t), axis=-1)
        grad = s * (log_s - log_t - kl[:, None])
    else:
        t = np.exp(log_t)
        kl = np.sum(t * (log_t - log_s), axis=-1)
        grad = s - t
    return kl, grad


def scrub_unlearn(teacher: LinearHead, bundle: DatasetBundle, cfg: ScrubConfig, *,
                  ledger: FlopLedger | None = None) -> BaselineResult:
    """Student starts as a copy of the teacher. Epochs ``1..msteps`` run a
    max-step (ascend mean KL to the teacher over the forget split) followed
    by a min-step (descend mean KL + ``alpha`` * CE over the retain split);
    later epochs run the min-step only."""
    retain, forget = bundle.train_retain, bundle.train_forget
    _require(retain, "retain")
    if cfg.msteps:
        _require(forget, "forget")
    ledger = ledger if ledger is not None else FlopLedger()
    student = teacher.copy()
    result = BaselineResult(student, ledger=ledger)
    opt = Adam(student, cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 41])
    stop = _StopRule(cfg.plateau_tol, cfg.plateau_window)
    p = student.parameter_count()

    def kl_pass(data, batch_size, phase, sign, alpha):
        losses = []
        for idx in _batches(len(data), batch_size, rng):
            x, y = data.features[idx], data.labels[idx]
            s_logits = student.logits(x)
            kl, g = kl_grad(s_logits, teacher.logits(x), cfg.kl_direction)
            loss = kl.mean()
            if alpha:
                ce, g_ce = softmax_ce(s_logits, y)
                g = g + alpha * g_ce
                loss = loss + alpha * ce.mean()
            opt.step(student, _clip(student.gradients(x, g), cfg.grad_clip), sign)
            losses.append(float(loss))
            # student and teacher each run a forward pass
            ledger.add_forward(f"scrub-{phase}", p, 2 * len(idx))
            ledger.add_backward(f"scrub-{phase}", p, len(idx), 1)
        return float(np.mean(losses))

    for epoch in range(1, cfg.epochs + 1):
        if epoch <= cfg.msteps:
            loss = kl_pass(forget, cfg.forget_batch_size, "max", -1.0, 0.0)
            result.history.append({"epoch": epoch, "method": "scrub", "phase": "max", "train_loss": loss})
        loss = kl_pass(retain, cfg.retain_batch_size, "min", 1.0, cfg.alpha)
        row = {"epoch": epoch, "method": "scrub", "phase": "min", "train_loss": loss,
               "train_acc": float(np.mean(student.predict(retain.features) == retain.labels)), "test_acc": None}
        row.update(_monitor(student, bundle))
        result.history.append(row)
        if cfg.early_stop and "test_forget_acc" in row and stop(row["test_forget_acc"]):
            result.stopped_early = epoch < cfg.epochs
            break
    return result


def scrub_schedule(cfg: ScrubConfig) -> list[tuple[int, str]]:
    """(epoch, phase) pairs in execution order, ignoring early stopping."""
    out = []
    for e in range(1, cfg.epochs + 1):
        if e <= cfg.msteps:
            out.append((e, "max"))
        out.append((e, "min"))
    return out
