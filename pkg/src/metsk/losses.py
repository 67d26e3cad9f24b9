"""Training objectives: graph contrastive loss, cross-entropy, combined loss.

The contrastive loss follows the printed formula exactly: the denominator
for subject n sums exp(sim(n, m)/tau) over the *other* subjects' second
views only, excluding the positive pair.  Because of that exclusion the
loss can be negative; it is left unclamped so gradients stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two embeddings, in [-1, 1]."""
    return T.cosine_sim(u, v)


@dataclass
class ContrastiveBatch:
    view1: Tensor  # (N, E) embeddings of each subject's first sub-sequence
    view2: Tensor  # (N, E) embeddings of the second sub-sequence
    tau: float

    def __post_init__(self):
        if self.view1.ndim != 2 or self.view1.shape != self.view2.shape:
            raise ValueError(
                f"views must be matching N x E matrices, got {self.view1.shape} and {self.view2.shape}"
            )
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


def contrastive_loss(batch: ContrastiveBatch) -> Tensor:
    """Mean over subjects of -log( exp(s_nn/tau) / sum_{m != n} exp(s_nm/tau) ).

    s_nm is the cosine similarity between subject n's first view and
    subject m's second view.  Needs N >= 2 or the denominator is empty.
    """
    N = batch.view1.shape[0]
    if N < 2:
        raise ValueError(f"contrastive loss needs at least 2 subjects, got {N}")
    inv_tau = 1.0 / batch.tau
    terms = []
    for n in range(N):
        u = batch.view1[n]
        s_pos = cosine_sim(u, batch.view2[n]) * inv_tau
        negatives = []
        for m in range(N):
            if m == n:
                continue
            negatives.append((cosine_sim(u, batch.view2[m]) * inv_tau).reshape(1))
        log_denom = T.concat(negatives).exp().sum().log()
        terms.append((log_denom - s_pos).reshape(1))
    return T.concat(terms).mean()


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Computed as logsumexp(logits) - logits[label] with a constant max
    shift, which keeps the value exact for saturated logits and
    non-negative in floating point.
    """
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"logits must be (B, 2), got {logits.shape}")
    labels = np.asarray(labels)
    B = logits.shape[0]
    if labels.shape != (B,):
        raise ValueError(f"labels must have shape ({B},), got {labels.shape}")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    row_max = logits.data.max(axis=1, keepdims=True)  # constant shift
    shifted = logits - Tensor(row_max)
    lse = shifted.exp().sum(axis=1).log()  # (B,), >= 0 since max attains exp(0)=1
    onehot = np.zeros((B, 2))
    onehot[np.arange(B), labels] = 1.0
    picked = (logits * Tensor(onehot)).sum(axis=1)  # (B,)
    slack = Tensor(row_max[:, 0]) - picked  # constant max minus true logit, >= 0
    return (lse + slack).mean()


def meta_loss(source_loss: Tensor, target_loss: Tensor, lam: float) -> Tensor:
    """Combined objective: source term plus lam times the target term."""
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    return source_loss + target_loss * lam
