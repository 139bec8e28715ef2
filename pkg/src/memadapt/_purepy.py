"""Pure NumPy implementations of the hot kernels.

Mirror of the compiled module in `_kernels.pyx`; same signatures, same
semantics. Inputs are assumed validated (C-contiguous float64, finite).
"""

import numpy as np

NAME = "pure"


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_attention(queries: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Row-softmax of the query/item dot-product scores: (n_q, n_items)."""
    return softmax_rows(queries @ items.T)


def bank_write(
    bank: np.ndarray, keys: np.ndarray, values: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray]:
    """Attention-weighted bank update followed by row renormalization.

    Every row update is computed from the pre-write bank. Rows whose
    updated norm is at or below eps keep their old value; their indices
    are returned so the caller can log the event.
    """
    attn = cross_attention(keys, bank)
    updated = bank + attn.T @ values
    norms = np.linalg.norm(updated, axis=1)
    degenerate = norms <= eps
    safe = np.where(degenerate, 1.0, norms)
    out = updated / safe[:, None]
    if degenerate.any():
        out[degenerate] = bank[degenerate]
    return out, np.nonzero(degenerate)[0].astype(np.int64)


def bank_read(bank: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention over bank rows and the attention-weighted positives.

    Returns (attention (n_q, n_items), positives (n_q, dim)); the bank is
    not modified.
    """
    attn = cross_attention(queries, bank)
    return attn, attn @ bank
