"""Global cross-attention memory: bank, write/read operations, negative mining.

The bank is written only from teacher features (no gradients ever flow
through a write) and read with student queries to produce one strong
positive per query plus a set of least-attended negatives. Reads never
modify the bank; writes return a new bank rather than mutating.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import backend
from .numerics import EPS_NORM, DegenerateVectorError, as_matrix

log = logging.getLogger(__name__)

BANK_MAGIC = b"MEMX"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sIQQ")


@dataclass
class MemoryBank:
    """N unit-norm memory rows of width dim.

    The constructor takes ownership of the array and marks it read-only;
    updates happen by constructing a new bank (see write).
    """

    items: np.ndarray

    def __post_init__(self):
        items = as_matrix(self.items, "memory items")
        if items.shape[0] < 1 or items.shape[1] < 1:
            raise ValueError(f"memory bank needs at least one row and column, got {items.shape}")
        items.flags.writeable = False
        self.items = items

    @property
    def n_items(self) -> int:
        return self.items.shape[0]

    @property
    def dim(self) -> int:
        return self.items.shape[1]


@dataclass
class ProjectionSet:
    """Square projections: key/value for the write path, query for the read path."""

    key_proj: np.ndarray
    value_proj: np.ndarray
    query_proj: np.ndarray

    def __post_init__(self):
        for name in ("key_proj", "value_proj", "query_proj"):
            w = as_matrix(getattr(self, name), name)
            if w.shape[0] != w.shape[1]:
                raise ValueError(f"{name} must be square, got {w.shape}")
            setattr(self, name, w)
        if not (self.key_proj.shape == self.value_proj.shape == self.query_proj.shape):
            raise ValueError("projection shapes disagree")

    @property
    def dim(self) -> int:
        return self.query_proj.shape[0]


@dataclass
class ReadResult:
    """Output of a memory read for one feature batch.

    positives: one attention-weighted combination of bank rows per query.
    attention: the row-stochastic query/bank attention map.
    negative_indices: per query, the least-attended bank rows, ascending
    by attention (ties by index).
    query_proj: the projection that produced the queries, kept so loss
    gradients can be chained back through the attention path.
    """

    positives: np.ndarray
    attention: np.ndarray
    negative_indices: np.ndarray
    query_proj: np.ndarray


def init_bank(n_items: int, dim: int, seed: int) -> MemoryBank:
    """Seeded random unit rows; deterministic for a fixed seed."""
    if n_items < 1 or dim < 1:
        raise ValueError(f"bank sizes must be positive, got n_items={n_items}, dim={dim}")
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n_items, dim))
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms <= EPS_NORM):
        raise DegenerateVectorError("drew a zero-norm memory row, try another seed")
    return MemoryBank(rows / norms[:, None])


def init_projections(dim: int, seed: int, noise_scale: float = 0.01) -> ProjectionSet:
    """Identity plus small seeded noise, so step 0 preserves feature geometry."""
    if dim < 1:
        raise ValueError(f"projection dim must be positive, got {dim}")
    rng = np.random.default_rng(seed)
    eye = np.eye(dim)
    return ProjectionSet(
        key_proj=eye + noise_scale * rng.standard_normal((dim, dim)),
        value_proj=eye + noise_scale * rng.standard_normal((dim, dim)),
        query_proj=eye + noise_scale * rng.standard_normal((dim, dim)),
    )


def write(bank: MemoryBank, teacher_feats, proj: ProjectionSet) -> MemoryBank:
    """Cross-attention write: project features to keys/values, attend each
    key over the bank, add the attention-weighted values to every row and
    renormalize.

    All row updates are computed from the pre-write bank, so the result
    does not depend on memory-item ordering. An empty feature set returns
    the bank unchanged. Rows whose update cancels to (near) zero norm are
    kept at their old value and logged. No gradients flow through this
    operation; the caller only ever passes detached teacher features.
    """
    feats = as_matrix(teacher_feats, "teacher features")
    if feats.shape[0] == 0:
        return bank
    if feats.shape[1] != bank.dim:
        raise ValueError(f"feature dim {feats.shape[1]} != bank dim {bank.dim}")
    if proj.dim != bank.dim:
        raise ValueError(f"projection dim {proj.dim} != bank dim {bank.dim}")
    keys = feats @ proj.key_proj.T
    values = feats @ proj.value_proj.T
    new_items, skipped = backend.bank_write(bank.items, keys, values, EPS_NORM)
    if skipped.size:
        log.warning("memory write skipped %d degenerate row(s): %s", skipped.size, skipped.tolist())
    return MemoryBank(new_items)


def read(bank: MemoryBank, student_feats, proj: ProjectionSet, neg_ratio: float) -> ReadResult:
    """Cross-attention read: project features to queries, attend over the
    bank, return the attention-weighted positives plus mined negatives.

    The bank is never modified by a read.
    """
    feats = as_matrix(student_feats, "student features")
    if feats.shape[0] == 0:
        raise ValueError("read needs at least one student feature")
    if feats.shape[1] != bank.dim:
        raise ValueError(f"feature dim {feats.shape[1]} != bank dim {bank.dim}")
    if not 0 < neg_ratio <= 1:
        raise ValueError(f"neg_ratio must be in (0, 1], got {neg_ratio}")
    queries = feats @ proj.query_proj.T
    attention, positives = backend.bank_read(bank.items, queries)
    n_neg = max(1, int(neg_ratio * bank.n_items))
    negative_indices = np.argsort(attention, axis=1, kind="stable")[:, :n_neg]
    return ReadResult(
        positives=positives,
        attention=attention,
        negative_indices=negative_indices.astype(np.int64),
        query_proj=proj.query_proj,
    )


def mine_negatives(attention_row, neg_ratio: float) -> np.ndarray:
    """Indices of the max(1, floor(neg_ratio * n)) least-attended items.

    Ascending by attention value, ties broken by ascending index.
    """
    row = np.asarray(attention_row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError(f"attention row must be 1-D, got shape {row.shape}")
    if not 0 < neg_ratio <= 1:
        raise ValueError(f"neg_ratio must be in (0, 1], got {neg_ratio}")
    if abs(row.sum() - 1.0) > 1e-6:
        raise ValueError("attention row does not sum to 1")
    n_neg = max(1, int(neg_ratio * row.size))
    return np.argsort(row, kind="stable")[:n_neg].astype(np.int64)


def bank_to_bytes(bank: MemoryBank) -> bytes:
    header = _BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.n_items, bank.dim)
    return header + bank.items.astype("<f8", copy=False).tobytes(order="C")


def bank_from_bytes(buf: bytes, offset: int = 0) -> tuple[MemoryBank, int]:
    """Parse a bank block starting at offset; returns (bank, next offset)."""
    if len(buf) - offset < _BANK_HEADER.size:
        raise ValueError("truncated memory bank block")
    magic, version, n_items, dim = _BANK_HEADER.unpack_from(buf, offset)
    if magic != BANK_MAGIC:
        raise ValueError(f"bad memory bank magic {magic!r}")
    if version != BANK_VERSION:
        raise ValueError(f"unsupported memory bank format version {version}")
    start = offset + _BANK_HEADER.size
    nbytes = n_items * dim * 8
    if len(buf) - start < nbytes:
        raise ValueError("truncated memory bank payload")
    rows = np.frombuffer(buf, dtype="<f8", count=n_items * dim, offset=start)
    bank = MemoryBank(rows.reshape(n_items, dim).astype(np.float64))
    return bank, start + nbytes


def save_bank(bank: MemoryBank, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bank_to_bytes(bank))


def load_bank(path) -> MemoryBank:
    with open(path, "rb") as fh:
        buf = fh.read()
    bank, end = bank_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"trailing bytes after memory bank block ({len(buf) - end})")
    return bank
