"""Loss functions and their analytic gradients.

The contrastive memory loss is the only piece with a nontrivial backward
pass: gradients reach the student features both directly (the anchor term)
and through the attention-weighted positive, which also makes the query
projection trainable. Memory items, and therefore the mined negatives, are
constants everywhere (stop-gradient); the bank is updated only by writes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import MemoryBank, ReadResult
from .numerics import EPS_NORM, DegenerateVectorError, as_matrix, check_finite

MEMCLR_FORMS = ("log-mean", "mean-log")


@dataclass
class LossValue:
    """Total online objective and its named components."""

    total: float
    components: dict[str, float]


@dataclass
class LossGradients:
    """Gradients of the total objective w.r.t. every trained parameter."""

    d_encoder: np.ndarray
    d_classifier: np.ndarray
    d_query_proj: np.ndarray


def _row_norms(x: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms <= EPS_NORM):
        raise DegenerateVectorError(f"{name} contains a (near-)zero row, cannot normalize")
    return norms


def memclr_loss(
    student_feats,
    read_result: ReadResult,
    bank: MemoryBank,
    temperature: float = 1.0,
    normalize_features: bool = True,
    form: str = "log-mean",
):
    """Memory-guided contrastive loss with analytic gradients.

    Per anchor i with positive p_i and mined negatives m_n:

        ratio_i = exp(<f_i, p_i>/tau) / (exp(<f_i, p_i>/tau) + sum_n exp(<f_i, m_n>/tau))

    form "log-mean" (default): L = -log(mean_i ratio_i), the log taken
    outside the average over anchors. form "mean-log": L = -mean_i log(ratio_i),
    the usual InfoNCE averaging, exposed for comparison.

    With normalize_features on, every vector entering a dot product is first
    scaled to unit norm (cosine similarity), which keeps exp() in range for
    unnormalized features.

    Returns (loss, d_feats, d_query_proj). d_feats combines the direct
    anchor term with the chain through the attention read (positive ->
    attention -> query -> feature); d_query_proj comes from the same chain.
    """
    feats = as_matrix(student_feats, "student features")
    n = feats.shape[0]
    if n == 0:
        raise ValueError("memclr_loss needs at least one anchor feature")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if form not in MEMCLR_FORMS:
        raise ValueError(f"unknown form {form!r}, expected one of {MEMCLR_FORMS}")
    positives = read_result.positives
    attention = read_result.attention
    neg_idx = read_result.negative_indices
    if positives.shape != feats.shape:
        raise ValueError("read result does not match the given features")
    if neg_idx.ndim != 2 or neg_idx.shape[0] != n or neg_idx.shape[1] == 0:
        raise ValueError("every anchor needs at least one mined negative")
    if attention.shape != (n, bank.n_items):
        raise ValueError("read result does not match the given bank")
    if neg_idx.min() < 0 or neg_idx.max() >= bank.n_items:
        raise ValueError("negative index out of bank range")
    items = bank.items
    negatives = items[neg_idx]

    if normalize_features:
        f_norms = _row_norms(feats, "student features")
        p_norms = _row_norms(positives, "positives")
        m_norms = _row_norms(negatives, "negatives")
        f_hat = feats / f_norms[:, None]
        p_hat = positives / p_norms[:, None]
        m_hat = negatives / m_norms[:, :, None]
    else:
        f_hat, p_hat, m_hat = feats, positives, negatives

    pos_sim = np.einsum("ic,ic->i", f_hat, p_hat) / temperature
    neg_sim = np.einsum("ic,inc->in", f_hat, m_hat) / temperature

    # per-anchor max subtraction keeps every exp() in range
    shift = np.maximum(pos_sim, neg_sim.max(axis=1))
    e_pos = np.exp(pos_sim - shift)
    e_neg = np.exp(neg_sim - shift[:, None])
    denom = e_pos + e_neg.sum(axis=1)
    ratio = e_pos / denom
    neg_weight = e_neg / denom[:, None]

    if form == "log-mean":
        mean_ratio = float(ratio.mean())
        loss = -np.log(mean_ratio)
        # dL/dratio_i is shared: -1 / (n * mean_ratio)
        d_ratio = -1.0 / (n * mean_ratio)
        d_pos_sim = d_ratio * ratio * (1.0 - ratio)
        d_neg_sim = -d_ratio * ratio[:, None] * neg_weight
    else:
        loss = float(-np.log(ratio).mean())
        d_pos_sim = (ratio - 1.0) / n
        d_neg_sim = neg_weight / n

    # gradients w.r.t. the (possibly normalized) vectors in the dot products
    g_f_hat = (d_pos_sim[:, None] * p_hat + np.einsum("in,inc->ic", d_neg_sim, m_hat)) / temperature
    g_p_hat = d_pos_sim[:, None] * f_hat / temperature

    if normalize_features:
        # Jacobian of x -> x/|x|: (g - (g.xhat) xhat) / |x|
        g_feats_direct = (g_f_hat - np.einsum("ic,ic->i", g_f_hat, f_hat)[:, None] * f_hat) / f_norms[:, None]
        g_positives = (g_p_hat - np.einsum("ic,ic->i", g_p_hat, p_hat)[:, None] * p_hat) / p_norms[:, None]
    else:
        g_feats_direct = g_f_hat
        g_positives = g_p_hat

    # positive = attention @ items; attention = softmax(queries @ items.T);
    # queries = feats @ query_proj.T
    g_attention = g_positives @ items.T
    g_scores = attention * (g_attention - np.einsum("ij,ij->i", g_attention, attention)[:, None])
    g_queries = g_scores @ items
    d_query_proj = g_queries.T @ feats
    g_feats_attn = g_queries @ read_result.query_proj

    d_feats = g_feats_direct + g_feats_attn
    check_finite("memclr loss", np.asarray(loss))
    check_finite("memclr feature gradient", d_feats)
    check_finite("memclr query projection gradient", d_query_proj)
    return float(loss), d_feats, d_query_proj


def simclr_loss(anchor_feats, positive_feats) -> float:
    """Augmented-view contrastive loss over a batch of feature pairs.

    The 2N views of the batch are scored against each other with cosine
    similarity; each view's positive is its counterpart and every other
    view is a negative. Diagnostic baseline only, no gradient path.
    """
    anchors = as_matrix(anchor_feats, "anchor features")
    positives = as_matrix(positive_feats, "positive features")
    if anchors.shape != positives.shape:
        raise ValueError(f"shape mismatch: anchors {anchors.shape}, positives {positives.shape}")
    n = anchors.shape[0]
    if n == 0:
        raise ValueError("simclr_loss needs at least one pair")
    views = np.vstack([anchors, positives])
    norms = _row_norms(views, "views")
    views = views / norms[:, None]
    sims = views @ views.T
    np.fill_diagonal(sims, -np.inf)
    partner = np.concatenate([np.arange(n) + n, np.arange(n)])
    # -log(e^pos / sum_{l != i} e^sim_il), stabilized per row
    mx = sims.max(axis=1)
    lse = mx + np.log(np.exp(sims - mx[:, None]).sum(axis=1))
    per_view = lse - sims[np.arange(2 * n), partner]
    return float(per_view.mean())


def pseudo_label_loss(student_logits, label_indices, label_classes):
    """Mean cross-entropy over the confidently pseudo-labeled instances.

    label_indices/label_classes are parallel arrays naming the retained
    instance rows and their assigned classes. An empty label set yields
    loss 0 with a zero gradient so the online loop never stalls. Returns
    (loss, gradient w.r.t. the logits).
    """
    logits = as_matrix(student_logits, "student logits")
    idx = np.asarray(label_indices, dtype=np.int64).reshape(-1)
    cls = np.asarray(label_classes, dtype=np.int64).reshape(-1)
    if idx.shape != cls.shape:
        raise ValueError("label index and class arrays differ in length")
    n_rows, n_classes = logits.shape
    if idx.size == 0:
        return 0.0, np.zeros_like(logits)
    if idx.min() < 0 or idx.max() >= n_rows:
        raise ValueError("label index out of range")
    if cls.min() < 0 or cls.max() >= n_classes:
        raise ValueError("label class out of range")
    mx = logits.max(axis=1)
    lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
    per_label = lse[idx] - logits[idx, cls]
    loss = float(per_label.mean())
    probs = np.exp(logits - lse[:, None])
    d_logits = np.zeros_like(logits)
    np.add.at(d_logits, idx, probs[idx] / idx.size)
    np.subtract.at(d_logits, (idx, cls), 1.0 / idx.size)
    return loss, d_logits


def total_loss(pl: float, memclr: float) -> LossValue:
    """Unweighted sum of the two online objective components."""
    value = LossValue(total=pl + memclr, components={"pl": float(pl), "memclr": float(memclr)})
    check_finite("total loss", np.asarray(value.total))
    return value
