"""Contrastive objectives over unit projection vectors, with exact gradients.

All objectives act on a multiviewed batch: 2N views, two per origin sample,
each with per-attribute binary labels. Every loss decomposes into one term
per anchor view; the wrappers below (top-k averaging, per-sample weighting)
reweight those anchor terms, so the shared machinery computes, per anchor i:

    term_i = logsumexp_{a != i}(s_ia) - mean_{p in P(i)} s_ip
    R_ia   = softmax_{a != i}(s_i.)_a - [a in P(i)] / |P(i)|

with s = Z Z^T / temperature. For any anchor weights w, the scalar is
sum_i w_i * term_i and its gradient in Z is ((diag(w) R) + (diag(w) R)^T) Z
/ temperature. Positives P(i) are the other views sharing the anchor's
label; the denominator always ranges over every other view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateBatchError
from .network import GradientBundle, ModelParams, backward, forward_features, head_forward

_UNIT_TOL = 1e-5


@dataclass
class LossConfig:
    temperature: float = 0.1
    topk_count: int = 16
    topk_enabled: bool = False

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.topk_count < 1:
            raise ConfigError(f"topk_count must be >= 1, got {self.topk_count}")


class MultiviewedBatch:
    """2N unit views, two per origin, with per-view per-attribute labels.

    ``origins[i]`` names the sample a view came from; every origin appears
    exactly twice and both of its views must carry identical labels (this is
    checked unless ``strict=False``, which tests use to build degenerate
    batches on purpose).
    """

    def __init__(
        self,
        views: np.ndarray,
        origins: np.ndarray,
        labels: np.ndarray,
        strict: bool = True,
    ):
        self.views = np.asarray(views, dtype=np.float64)
        self.origins = np.asarray(origins, dtype=np.int64)
        labels = np.asarray(labels)
        if labels.ndim == 1:
            labels = labels[:, None]
        self.labels = labels.astype(np.int64)
        if self.views.ndim != 2:
            raise DataError("views must be a 2-D array")
        m = self.views.shape[0]
        if m % 2 != 0 or m == 0:
            raise DataError(f"multiviewed batch needs an even, positive view count, got {m}")
        if self.origins.shape != (m,) or self.labels.shape[0] != m:
            raise DataError("origins/labels do not match the view count")
        norms = np.linalg.norm(self.views, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise DataError("views must be unit vectors")
        uniq, counts = np.unique(self.origins, return_counts=True)
        if np.any(counts != 2):
            raise DataError("every origin must contribute exactly two views")
        # pair index: the other view with the same origin
        order = np.argsort(self.origins, kind="stable")
        pair = np.empty(m, dtype=np.int64)
        pair[order[0::2]] = order[1::2]
        pair[order[1::2]] = order[0::2]
        self._pair = pair
        if strict and np.any(self.labels != self.labels[pair]):
            raise DataError("the two views of one origin must carry identical labels")

    @property
    def num_views(self) -> int:
        return self.views.shape[0]

    @property
    def num_origins(self) -> int:
        return self.views.shape[0] // 2

    @property
    def num_attributes(self) -> int:
        return self.labels.shape[1]

    def pair_index(self) -> np.ndarray:
        return self._pair.copy()


def _scaled_similarities(Z: np.ndarray, temperature: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (s, logsumexp over a != i, softmax q with zero diagonal)."""
    s = (Z @ Z.T) / temperature
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    row_max = masked.max(axis=1)
    ex = np.exp(masked - row_max[:, None])
    np.fill_diagonal(ex, 0.0)
    denom = ex.sum(axis=1)
    lse = row_max + np.log(denom)
    q = ex / denom[:, None]
    return s, lse, q


def _anchor_stats(
    s: np.ndarray, lse: np.ndarray, q: np.ndarray, pos_mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor terms and the coefficient matrix R described in the module
    docstring, for a given positives mask (diagonal must be False)."""
    counts = pos_mask.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DegenerateBatchError(f"anchor {empty[0]} has no positive in the batch")
    terms = (np.where(pos_mask, lse[:, None] - s, 0.0)).sum(axis=1) / counts
    R = q - pos_mask / counts[:, None]
    np.fill_diagonal(R, 0.0)
    return terms, R


def _grad_from_coeffs(Z: np.ndarray, R_weighted: np.ndarray, temperature: float) -> np.ndarray:
    return (R_weighted + R_weighted.T) @ Z / temperature


def contrastive_loss(batch: MultiviewedBatch, temperature: float) -> tuple[float, np.ndarray]:
    """Pairwise-only objective: each anchor's sole positive is its paired view.

    Requires at least two origins so that negatives exist.
    """
    if batch.num_origins < 2:
        raise DegenerateBatchError("contrastive loss needs at least two origins")
    s, lse, q = _scaled_similarities(batch.views, temperature)
    pair = batch.pair_index()
    m = batch.num_views
    pos_mask = np.zeros((m, m), dtype=bool)
    pos_mask[np.arange(m), pair] = True
    terms, R = _anchor_stats(s, lse, q, pos_mask)
    loss = float(terms.sum())
    return loss, _grad_from_coeffs(batch.views, R, temperature)


def _positives_for_attribute(batch: MultiviewedBatch, attribute: int) -> np.ndarray:
    col = batch.labels[:, attribute]
    pos = col[:, None] == col[None, :]
    np.fill_diagonal(pos, False)
    return pos


def supcon_anchor_stats(
    batch: MultiviewedBatch, attribute: int, temperature: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor terms and coefficient matrix for one attribute's labels."""
    s, lse, q = _scaled_similarities(batch.views, temperature)
    pos_mask = _positives_for_attribute(batch, attribute)
    return _anchor_stats(s, lse, q, pos_mask)


def supcon_loss(
    batch: MultiviewedBatch, attribute: int, temperature: float
) -> tuple[float, np.ndarray]:
    """Label-aware contrastive objective: positives are all views sharing the
    anchor's label for the given attribute."""
    terms, R = supcon_anchor_stats(batch, attribute, temperature)
    return float(terms.sum()), _grad_from_coeffs(batch.views, R, temperature)


def multi_attribute_anchor_stats(
    batch: MultiviewedBatch, attributes: list[int], temperature: float
) -> tuple[np.ndarray, list[np.ndarray], list[int]]:
    """Anchor terms averaged over usable attributes, plus per-attribute
    coefficient matrices.

    Attributes for which some anchor has no positive are dropped; if none
    survive, the batch is degenerate. Returns (terms, R list, included
    attribute indices).
    """
    if not attributes:
        raise ConfigError("multi-attribute loss needs at least one attribute")
    s, lse, q = _scaled_similarities(batch.views, temperature)
    terms_list = []
    R_list = []
    included = []
    for attr in attributes:
        pos_mask = _positives_for_attribute(batch, attr)
        try:
            terms, R = _anchor_stats(s, lse, q, pos_mask)
        except DegenerateBatchError:
            continue
        terms_list.append(terms)
        R_list.append(R)
        included.append(attr)
    if not included:
        raise DegenerateBatchError("every attribute leaves some anchor without positives")
    mean_terms = np.mean(terms_list, axis=0)
    return mean_terms, R_list, included


def weighted_grad_from_stats(
    Z: np.ndarray, R_list: list[np.ndarray], anchor_weights: np.ndarray, temperature: float
) -> np.ndarray:
    """Gradient in Z of sum_i anchor_weights[i] * mean_over_attributes(term_i)."""
    w = np.asarray(anchor_weights, dtype=np.float64)[:, None]
    acc = np.zeros_like(Z)
    for R in R_list:
        acc += _grad_from_coeffs(Z, w * R, temperature)
    return acc / len(R_list)


def multi_attribute_supcon(
    batch: MultiviewedBatch, attributes: list[int], temperature: float
) -> tuple[float, np.ndarray]:
    """Mean of the per-attribute label-aware losses over usable attributes."""
    terms, R_list, _ = multi_attribute_anchor_stats(batch, attributes, temperature)
    weights = np.ones(batch.num_views)
    grad = weighted_grad_from_stats(batch.views, R_list, weights, temperature)
    return float(terms.sum()), grad


def topk_average(values: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    """Mean of the k largest entries, computed in the hinge form
    (1/k) sum_i max(v_i - lam, 0) + lam with lam the k-th largest value.

    Returns the scalar and a boolean mask of the k contributing entries;
    ties at lam resolve to the lower index.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if not 1 <= k <= v.size:
        raise ConfigError(f"k={k} out of range for {v.size} values")
    lam = np.partition(v, v.size - k)[v.size - k]
    result = float(np.maximum(v - lam, 0.0).sum() / k + lam)
    order = np.argsort(-v, kind="stable")
    mask = np.zeros(v.size, dtype=bool)
    mask[order[:k]] = True
    return result, mask


def _cross_entropy_rows(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row softmax cross entropy and d/d logits (before any weighting)."""
    shift = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - shift)
    denom = ex.sum(axis=1, keepdims=True)
    log_probs = (logits - shift) - np.log(denom)
    n = logits.shape[0]
    ce = -log_probs[np.arange(n), targets]
    d = ex / denom
    d[np.arange(n), targets] -= 1.0
    return ce, d


def validation_topk_loss(
    params: ModelParams, val_x: np.ndarray, val_y: np.ndarray, k: int
) -> tuple[float, GradientBundle]:
    """Mean of the k largest per-sample classification losses on a held-out
    set, with its exact parameter gradient.

    Only the k contributing samples carry gradient. With k equal to the
    sample count this is the ordinary mean cross entropy.
    """
    X = np.atleast_2d(np.asarray(val_x, dtype=np.float64))
    y = np.asarray(val_y, dtype=np.int64).ravel()
    if X.shape[0] == 0:
        raise DataError("validation batch is empty")
    if y.shape[0] != X.shape[0]:
        raise DataError("validation labels do not match the sample count")
    if not 1 <= k <= X.shape[0]:
        raise ConfigError(f"k={k} out of range for {X.shape[0]} validation samples")
    features, tape = forward_features(params, X)
    logits = head_forward(params, features)
    ce, d_logits = _cross_entropy_rows(logits, y)
    loss, mask = topk_average(ce, k)
    d_logits *= (mask.astype(np.float64) / k)[:, None]
    bundle = backward(params, tape, d_logits=d_logits)
    return loss, bundle
