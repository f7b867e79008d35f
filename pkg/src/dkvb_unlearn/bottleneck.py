"""Discrete key-value bottleneck.

An input embedding ``z`` is projected by one frozen random matrix into
``C`` heads of width ``key_dim``. Each head is snapped to its ``top_k``
nearest keys in its own codebook of ``M`` frozen keys; the values paired
with those keys are averaged within the codebook and then across
codebooks, and that average is the logit vector (non-parametric average
pooling decoder).

Masking excludes individual (codebook, key) pairs from selection. A masked
key behaves exactly as if its distance were +inf: selection falls through
to the next-nearest unmasked key.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import LabeledEmbeddings

VALUE_INITS = ("zeros", "gaussian", "uniform")
CHECKPOINT_MAGIC = b"DKVB"
CHECKPOINT_VERSION = 1


class DegenerateModelError(RuntimeError):
    """Every codebook is fully masked, so the model has nothing to say."""


@dataclass(frozen=True)
class BottleneckConfig:
    input_dim: int
    value_dim: int
    num_codebooks: int = 256
    pairs_per_codebook: int = 4096
    top_k: int = 1
    key_dim: int = 8
    value_init: str = "gaussian"
    # N(0, 0.01) -> std 0.1; uniform draws from U(-0.1, 0.1)
    value_init_scale: float = 0.1
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    key_init_epochs: int = 10
    key_init_batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "value_dim", "num_codebooks", "pairs_per_codebook",
                     "top_k", "key_dim", "key_init_epochs", "key_init_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.top_k > self.pairs_per_codebook:
            raise ValueError("top_k cannot exceed pairs_per_codebook")
        if self.value_init not in VALUE_INITS:
            raise ValueError(f"value_init must be one of {VALUE_INITS}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")

    @property
    def head_width(self) -> int:
        return self.num_codebooks * self.key_dim


class ForwardResult(NamedTuple):
    logits: np.ndarray      # (N, value_dim)
    trace: np.ndarray       # (N, C, top_k) key indices, -1 where nothing was selected
    degenerate: np.ndarray  # (N,) bool, True when every codebook was empty


def _rng(config: BottleneckConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stream])


def init_projection(config: BottleneckConfig) -> np.ndarray:
    rng = _rng(config, 1)
    proj = rng.normal(0.0, np.sqrt(1.0 / config.input_dim), size=(config.head_width, config.input_dim))
    proj.setflags(write=False)
    return proj


def init_values(config: BottleneckConfig) -> np.ndarray:
    shape = (config.num_codebooks, config.pairs_per_codebook, config.value_dim)
    if config.value_init == "zeros":
        return np.zeros(shape)
    rng = _rng(config, 2)
    if config.value_init == "gaussian":
        return rng.normal(0.0, config.value_init_scale, size=shape)
    return rng.uniform(-config.value_init_scale, config.value_init_scale, size=shape)


def project_heads(projection: np.ndarray, z: np.ndarray, key_dim: int) -> np.ndarray:
    """Project embeddings into heads.

    ``z`` may be a single vector ``(D,)`` giving ``(C, key_dim)`` or a batch
    ``(N, D)`` giving ``(N, C, key_dim)``. Head ``c`` is rows
    ``[c*key_dim, (c+1)*key_dim)`` of ``projection @ z``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != projection.shape[1]:
        raise ValueError(f"input dim {z.shape[-1]} does not match projection dim {projection.shape[1]}")
    flat = z @ projection.T
    return flat.reshape(*z.shape[:-1], -1, key_dim)


def squared_distances(heads: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """(N, C, k) heads against (C, M, k) keys -> (N, C, M).

    Uses ``|h|^2 - 2 h.k + |k|^2`` with a batched matmul, clamped at 0.
    Identical keys always produce identical distances, so the index
    tie-break stays exact.
    """
    dist = np.matmul(heads.transpose(1, 0, 2), keys.transpose(0, 2, 1))  # (C, N, M)
    dist *= -2.0
    dist += np.einsum("cmk,cmk->cm", keys, keys)[:, None, :]
    dist += np.einsum("nck,nck->cn", heads, heads)[..., None]
    np.maximum(dist, 0.0, out=dist)
    return dist.transpose(1, 0, 2)


def select_top_k(dist: np.ndarray, mask: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the ``top_k`` smallest distances among unmasked keys.

    ``dist`` is (N, C, M), ``mask`` is (C, M) with True meaning excluded.
    Ties go to the lower key index. Slots left over when fewer than
    ``top_k`` keys are unmasked hold -1.
    """
    if mask.any():
        dist = np.where(mask[None], np.inf, dist)
    if top_k == 1:
        sel = np.argmin(dist, axis=-1)[..., None]
    else:
        sel = np.argsort(dist, axis=-1, kind="stable")[..., :top_k]
    cb = np.arange(mask.shape[0])[None, :, None]
    return np.where(mask[cb, sel], -1, sel)


class KeyValueBottleneck:
    """Projection, C codebooks of (key, value, mask) triples and EMA key state."""

    def __init__(self, config: BottleneckConfig):
        self.config = config
        c, m, k = config.num_codebooks, config.pairs_per_codebook, config.key_dim
        self.projection = init_projection(config)
        self.keys = np.zeros((c, m, k))
        self.ema_counts = np.ones((c, m))
        self.ema_sums = np.zeros((c, m, k))
        self.values = init_values(config)
        self.mask = np.zeros((c, m), dtype=bool)
        self.keys_initialized = False
        self.keys_frozen = False

    # -- bookkeeping -------------------------------------------------------

    @property
    def num_codebooks(self) -> int:
        return self.config.num_codebooks

    @property
    def pairs_per_codebook(self) -> int:
        return self.config.pairs_per_codebook

    def set_keys(self, keys: np.ndarray) -> None:
        """Place keys directly and reset EMA state to (count 1, sum = key)."""
        if self.keys_frozen:
            raise RuntimeError("keys are frozen")
        keys = np.asarray(keys, dtype=np.float64)
        if keys.shape != self.keys.shape:
            raise ValueError(f"keys must have shape {self.keys.shape}")
        self.keys = keys.copy()
        self.ema_counts = np.ones(keys.shape[:2])
        self.ema_sums = keys.copy()
        self.keys_initialized = True

    def freeze_keys(self) -> None:
        self.keys.setflags(write=False)
        self.keys_frozen = True

    def copy(self) -> "KeyValueBottleneck":
        other = KeyValueBottleneck.__new__(KeyValueBottleneck)
        other.config = self.config
        other.projection = self.projection
        other.keys = self.keys.copy()
        other.ema_counts = self.ema_counts.copy()
        other.ema_sums = self.ema_sums.copy()
        other.values = self.values.copy()
        other.mask = self.mask.copy()
        other.keys_initialized = self.keys_initialized
        other.keys_frozen = self.keys_frozen
        if self.keys_frozen:
            other.keys.setflags(write=False)
        return other

    def heads(self, z: np.ndarray) -> np.ndarray:
        return project_heads(self.projection, z, self.config.key_dim)

    def unmasked_counts(self) -> np.ndarray:
        return self.pairs_per_codebook - self.mask.sum(axis=1)

    def parameter_count(self) -> int:
        return int(self.values.size)

    # -- selection and forward --------------------------------------------

    def quantize(self, heads: np.ndarray) -> np.ndarray:
        """Top-k selection for heads of shape (N, C, key_dim) or (C, key_dim)."""
        if not self.keys_initialized:
            raise RuntimeError("keys have not been initialized")
        single = heads.ndim == 2
        h = heads[None] if single else heads
        sel = select_top_k(squared_distances(h, self.keys), self.mask, self.config.top_k)
        return sel[0] if single else sel

    def _forward_chunk(self, z: np.ndarray) -> ForwardResult:
        trace = self.quantize(self.heads(z))
        valid = trace >= 0
        cb = np.arange(self.num_codebooks)[None, :, None]
        picked = self.values[cb, np.where(valid, trace, 0)] * valid[..., None]
        n_sel = valid.sum(axis=-1)                       # (N, C)
        nonempty = n_sel > 0
        per_codebook = picked.sum(axis=2) / np.maximum(n_sel, 1)[..., None]
        c_eff = nonempty.sum(axis=1)
        logits = per_codebook.sum(axis=1) / np.maximum(c_eff, 1)[:, None]
        return ForwardResult(logits, trace, c_eff == 0)

    def forward(self, z: np.ndarray, *, chunk_size: int = 256, workers: int = 1) -> ForwardResult:
        """Logits, selection trace and degeneracy flags.

        A single vector returns unbatched arrays. Results do not depend on
        ``chunk_size`` or ``workers``.
        """
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            res = self._forward_chunk(z[None])
            return ForwardResult(res.logits[0], res.trace[0], res.degenerate[0])
        chunks = [z[i:i + chunk_size] for i in range(0, len(z), chunk_size)] or [z]
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(self._forward_chunk, chunks))
        else:
            parts = [self._forward_chunk(c) for c in chunks]
        return ForwardResult(
            np.concatenate([p.logits for p in parts]),
            np.concatenate([p.trace for p in parts]),
            np.concatenate([p.degenerate for p in parts]),
        )

    def predict(self, z: np.ndarray, **kw) -> np.ndarray:
        return np.argmax(self.forward(z, **kw).logits, axis=-1)

    # -- masking -----------------------------------------------------------

    def apply_mask(self, pairs) -> np.ndarray:
        """Exclude (codebook, key) pairs. Returns the pairs that were newly masked."""
        pairs = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
        pairs = pairs.reshape(-1, 2)
        if pairs.size:
            c, j = pairs[:, 0], pairs[:, 1]
            if c.min() < 0 or c.max() >= self.num_codebooks or j.min() < 0 or j.max() >= self.pairs_per_codebook:
                raise IndexError("mask pair out of range")
            pairs = np.unique(pairs, axis=0)
            fresh = pairs[~self.mask[pairs[:, 0], pairs[:, 1]]]
            self.mask[fresh[:, 0], fresh[:, 1]] = True
            return fresh
        return pairs


def trace_pairs(trace: np.ndarray) -> set[tuple[int, int]]:
    """Distinct (codebook, key) pairs in a trace of shape (..., C, top_k)."""
    t = trace.reshape(-1, trace.shape[-2], trace.shape[-1])
    cb = np.broadcast_to(np.arange(t.shape[1])[None, :, None], t.shape)
    keep = t >= 0
    return set(zip(cb[keep].tolist(), t[keep].tolist()))


# ------------------------------------------------------------ key initialization

def seed_keys_from_data(model: KeyValueBottleneck, data: LabeledEmbeddings) -> None:
    """Start every codebook's keys at heads of the first M examples of a
    seeded shuffle of the data (wrapping around when N < M)."""
    if len(data) == 0:
        raise ValueError("cannot initialize keys from empty data")
    rng = _rng(model.config, 3)
    order = rng.permutation(len(data))
    m = model.pairs_per_codebook
    idx = order[np.arange(m) % len(order)]
    model.set_keys(model.heads(data.features[idx]).transpose(1, 0, 2))


def key_init_ema(
    model: KeyValueBottleneck,
    data: LabeledEmbeddings,
    epochs: int | None = None,
    decay: float | None = None,
    *,
    batch_size: int | None = None,
    freeze: bool = True,
) -> None:
    """EMA (k-means style) refinement of the keys on unlabeled heads.

    Each head is assigned to its nearest key (masking ignored). Per batch
    and key: ``count <- decay*count + (1-decay)*n``,
    ``sum <- decay*sum + (1-decay)*s``, ``key <- sum / max(count, eps)``.
    Values are never touched.
    """
    cfg = model.config
    epochs = cfg.key_init_epochs if epochs is None else epochs
    decay = cfg.ema_decay if decay is None else decay
    batch_size = cfg.key_init_batch_size if batch_size is None else batch_size
    if len(data) == 0:
        raise ValueError("cannot initialize keys from empty data")
    if model.keys_frozen:
        raise RuntimeError("keys are frozen")
    if not model.keys_initialized:
        seed_keys_from_data(model, data)
    c, m, k = model.keys.shape
    no_mask = np.zeros((c, m), dtype=bool)
    offsets = (np.arange(c) * m)[None, :]
    rng = _rng(cfg, 4)
    heads_all = model.heads(data.features)
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            heads = heads_all[order[start:start + batch_size]]
            nearest = select_top_k(squared_distances(heads, model.keys), no_mask, 1)[..., 0]
            flat = (nearest + offsets).ravel()
            counts = np.bincount(flat, minlength=c * m).reshape(c, m)
            hv = heads.reshape(-1, k)
            sums = np.stack(
                [np.bincount(flat, weights=hv[:, d], minlength=c * m) for d in range(k)], axis=-1
            ).reshape(c, m, k)
            model.ema_counts = decay * model.ema_counts + (1 - decay) * counts
            model.ema_sums = decay * model.ema_sums + (1 - decay) * sums
            model.keys = model.ema_sums / np.maximum(model.ema_counts, cfg.ema_eps)[..., None]
    if freeze:
        model.freeze_keys()


def build_model(config: BottleneckConfig, data: LabeledEmbeddings) -> KeyValueBottleneck:
    """Fresh model with keys seeded from and EMA-fitted to ``data``, then frozen."""
    model = KeyValueBottleneck(config)
    key_init_ema(model, data)
    return model


# ------------------------------------------------------------------ checkpoints

_ARRAYS = ("projection", "keys", "ema_counts", "ema_sums", "values", "mask")
_DTYPES = {"<f8": 0, "|b1": 1}


def save_checkpoint(model: KeyValueBottleneck, path) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    flags = int(model.keys_initialized) | (int(model.keys_frozen) << 1)
    out = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, flags, len(cfg)), cfg]
    for name in _ARRAYS:
        arr = getattr(model, name)
        arr = np.ascontiguousarray(arr, dtype=bool if arr.dtype == bool else "<f8")
        out.append(struct.pack("<II", _DTYPES[arr.dtype.str], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


def load_checkpoint(path) -> KeyValueBottleneck:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a DKVB checkpoint")
    version, flags, n = struct.unpack_from("<III", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    config = BottleneckConfig(**json.loads(buf[pos:pos + n].decode("utf-8")))
    pos += n
    model = KeyValueBottleneck.__new__(KeyValueBottleneck)
    model.config = config
    codes = {v: k for k, v in _DTYPES.items()}
    for name in _ARRAYS:
        code, ndim = struct.unpack_from("<II", buf, pos)
        pos += 8
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dtype = np.dtype(codes[code])
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
        pos += count * dtype.itemsize
        setattr(model, name, arr)
    if pos != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    model.projection.setflags(write=False)
    model.keys_initialized = bool(flags & 1)
    model.keys_frozen = False
    if flags & 2:
        model.freeze_keys()
    return model


def models_identical(a: KeyValueBottleneck, b: KeyValueBottleneck) -> bool:
    if a.config != b.config:
        return False
    return all(
        getattr(a, n).dtype == getattr(b, n).dtype
        and getattr(a, n).shape == getattr(b, n).shape
        and getattr(a, n).tobytes() == getattr(b, n).tobytes()
        for n in _ARRAYS
    )
