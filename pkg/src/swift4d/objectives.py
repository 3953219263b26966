"""Supervised losses and the two contrastive pre-training objectives.

The contrastive score between two representations is ``h(u, v) =
exp(cos(u, v) / temperature)``; temperature defaults to 1. Both contrastive
losses keep the positive pair *out* of the denominator:

    instance:     -log h(f_i1, f_i2) / sum_{j != i} [h(f_i1, f_j1) + h(f_i1, f_j2)]
    local-local:  -sum_p log h(f_p, g_p) / sum_{q != p} [h(f_p, f_q) + h(f_p, g_q)]

where ``g`` is the same sub-sequence under a different augmentation. Batch
losses are means over subjects.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor
from .tensor import functional as F


def _check_binary(labels: np.ndarray) -> None:
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError(f"labels must be 0 or 1, got {np.unique(labels)}")


def bce_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits, via a stable log-sigmoid."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    _check_binary(y)
    per_item = -(y * F.log_sigmoid(logits) + (1.0 - y) * F.log_sigmoid(-logits))
    return per_item.mean()


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    return (diff * diff).mean()


def combined_pretrain_loss(ic, ll):
    """The pre-training objective is the plain sum of the two contrastive terms."""
    return ic + ll


# --------------------------------------------------------------------- cosine
def _unit_rows(x: Tensor) -> Tensor:
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1))
    if np.any(norms == 0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return x / F.sqrt((x * x).sum(axis=-1, keepdims=True))


def cos_exp(u, v, temperature: float = 1.0) -> Tensor:
    """exp(cos(u, v) / temperature) for two vectors."""
    u, v = _unit_rows(as_tensor(u)), _unit_rows(as_tensor(v))
    return F.exp((u * v).sum(axis=-1) / temperature)


def _log_scores(a: Tensor, b: Tensor, temperature: float) -> Tensor:
    """log h between every row of ``a`` and every row of ``b`` (batched on leading axes).

    The constant 1/temperature is subtracted so exp() never exceeds 1; it
    cancels in every score ratio used below.
    """
    return (a @ F.swap_last(b) - 1.0) / temperature


def _contrast(anchor: Tensor, positive: Tensor, temperature: float) -> Tensor:
    """Per-anchor -log(h(a_p, pos_p) / sum_{q != p} [h(a_p, a_q) + h(a_p, pos_q)]).

    ``anchor`` and ``positive`` are (..., N, E) unit rows; returns (..., N).
    """
    n = anchor.shape[-2]
    off_diag = 1.0 - np.eye(n, dtype=anchor.dtype)
    s_aa = _log_scores(anchor, anchor, temperature)
    s_ap = _log_scores(anchor, positive, temperature)
    idx = np.arange(n)
    log_pos = s_ap[..., idx, idx]
    denom = ((F.exp(s_aa) + F.exp(s_ap)) * off_diag).sum(axis=-1)
    return F.log(denom) - log_pos


def instance_contrastive_loss(
    first, second, temperature: float = 1.0, symmetric: bool = False
) -> Tensor:
    """Cross-subject contrast: ``first[i]`` anchors, ``second[i]`` is its positive.

    ``first``/``second`` are (B, E): one representation per subject for each
    of two sub-sequences. Negatives are both sub-sequences of every other
    subject. ``symmetric`` also lets ``second`` anchor and averages the two.
    """
    first, second = as_tensor(first), as_tensor(second)
    if first.ndim != 2 or first.shape != second.shape:
        raise ValueError(f"expected two (B, E) batches of equal shape, got {first.shape} and {second.shape}")
    if first.shape[0] < 2:
        raise ValueError("instance contrast needs at least two subjects")
    a, b = _unit_rows(first), _unit_rows(second)
    loss = _contrast(a, b, temperature).mean()
    if symmetric:
        loss = 0.5 * (loss + _contrast(b, a, temperature).mean())
    return loss


def local_local_loss(views, other_views, temperature: float = 1.0) -> Tensor:
    """Within-subject temporal contrast over N sub-sequences.

    ``views`` and ``other_views`` are (N, E) for one subject or (S, N, E) for
    S subjects; ``other_views[p]`` is sub-sequence p under a second
    augmentation. Terms are summed over p and averaged over subjects.
    """
    f, g = as_tensor(views), as_tensor(other_views)
    if f.shape != g.shape or f.ndim not in (2, 3):
        raise ValueError(f"expected matching (N, E) or (S, N, E) inputs, got {f.shape} and {g.shape}")
    if f.shape[-2] < 2:
        raise ValueError("local-local contrast needs at least two sub-sequences per subject")
    if f.ndim == 2:
        f, g = f.reshape((1,) + f.shape), g.reshape((1,) + g.shape)
    per_subject = _contrast(_unit_rows(f), _unit_rows(g), temperature).sum(axis=-1)
    return per_subject.mean()
