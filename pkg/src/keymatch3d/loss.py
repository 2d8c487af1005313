"""Contrastive and score losses with analytic gradients.

All functions return the scalar loss together with gradients of that loss
with respect to their array inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import DomainError

SCORE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda_c: float = 1.0
    lambda_s: float = 1.0
    margin: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_s, self.gamma) < 0:
            raise DomainError("loss weights and gamma must be >= 0")
        if not self.margin > 0:
            raise DomainError("margin must be > 0")


def contrastive_loss(f0, f1, labels, margin: float, n_pos=None, n_neg=None):
    """Class-normalized contrastive loss over descriptor pairs.

    Positives contribute ``|f0 - f1|^2 / (2 n_pos)``, negatives
    ``max(0, margin - |f0 - f1|)^2 / (2 n_neg)``. An empty class contributes 0.
    ``n_pos``/``n_neg`` default to the label counts; the sampling layer passes
    larger ``n_neg`` when unpaired keypoints are counted as negatives.

    Returns ``(loss, df0, df1)``.
    """
    f0 = np.asarray(f0, dtype=np.float64)
    f1 = np.asarray(f1, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if f0.shape != f1.shape or f0.ndim != 2 or len(labels) != len(f0):
        raise DomainError(f"contrastive loss shape mismatch: {f0.shape}, {f1.shape}, {labels.shape}")
    n_pos = int(labels.sum()) if n_pos is None else int(n_pos)
    n_neg = int((~labels).sum()) if n_neg is None else int(n_neg)
    diff = f0 - f1
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    loss = 0.0
    g = np.zeros_like(diff)
    if n_pos > 0 and labels.any():
        loss += np.sum(dist[labels] ** 2) / (2.0 * n_pos)
        g[labels] = diff[labels] / n_pos
    neg = ~labels
    if n_neg > 0 and neg.any():
        hinge = np.maximum(0.0, margin - dist[neg])
        loss += np.sum(hinge**2) / (2.0 * n_neg)
        active = (hinge > 0) & (dist[neg] > 0)  # direction undefined at zero distance
        idx = np.flatnonzero(neg)[active]
        g[idx] = -(hinge[active] / (n_neg * dist[idx]))[:, None] * diff[idx]
    return float(loss), g, -g


def score_loss(scores, labels, n_pos: int, gamma: float):
    """``1/(1+N_pos) - gamma * sum(l_i log s_i) / (1+N_pos)``.

    ``n_pos`` is a count and carries no gradient. Scores are clamped to
    ``[1e-7, 1 - 1e-7]`` inside the log. Returns ``(loss, dscores)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    l = np.asarray(labels, dtype=np.float64)
    if s.shape != l.shape:
        raise DomainError(f"scores {s.shape} and labels {l.shape} differ in shape")
    if np.any(~(s > 0)) or np.any(~(s < 1)):
        raise DomainError("scores must lie strictly inside (0, 1)")
    norm = 1.0 + n_pos
    sc = np.clip(s, SCORE_EPS, 1.0 - SCORE_EPS)
    loss = 1.0 / norm - gamma * np.sum(l * np.log(sc)) / norm
    inside = (s >= SCORE_EPS) & (s <= 1.0 - SCORE_EPS)
    grad = np.where(inside, -gamma * l / (norm * sc), 0.0)
    return float(loss), grad


@dataclass
class LossOutput:
    total: float
    contrastive: float
    score0: float
    score1: float
    ddesc0: np.ndarray
    ddesc1: np.ndarray
    dscore0: np.ndarray
    dscore1: np.ndarray


def multitask_loss(batch, desc0, desc1, scores0, scores1, cfg: LossConfig = LossConfig()) -> LossOutput:
    """``lambda_c * L_c + lambda_s * (L_s0 + L_s1)`` for one sampled pair batch.

    ``desc*``/``scores*`` are per-keypoint arrays aligned with the keypoint
    sets the batch indexes into.
    """
    desc0 = np.asarray(desc0, dtype=np.float64)
    desc1 = np.asarray(desc1, dtype=np.float64)
    i, j = batch.pairs[:, 0], batch.pairs[:, 1]
    lc, g0, g1 = contrastive_loss(desc0[i], desc1[j], batch.pair_labels, cfg.margin, batch.n_pos, batch.n_neg)
    dd0 = np.zeros_like(desc0)
    dd1 = np.zeros_like(desc1)
    np.add.at(dd0, i, cfg.lambda_c * g0)
    np.add.at(dd1, j, cfg.lambda_c * g1)
    ls0, ds0 = score_loss(scores0, batch.labels0, batch.n_pos, cfg.gamma)
    ls1, ds1 = score_loss(scores1, batch.labels1, batch.n_pos, cfg.gamma)
    total = cfg.lambda_c * lc + cfg.lambda_s * (ls0 + ls1)
    return LossOutput(total, lc, ls0, ls1, dd0, dd1, cfg.lambda_s * ds0, cfg.lambda_s * ds1)
