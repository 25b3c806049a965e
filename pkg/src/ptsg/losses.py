"""Intra/inter-sample contrastive losses, the partial-label grounding hinge and their sum.

Every loss takes batched ``B x D`` tensors (a single ``D`` vector is treated as
a batch of one) and returns a batch-mean scalar tensor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

LOSS_NAMES = ("raml", "raun", "erml", "erun")

# loss subsets of the ablation rows
ABLATIONS = {
    "A1": ("raml",),
    "A2": ("raml", "raun"),
    "A3": ("raml", "erml"),
    "A4": ("raml", "raun", "erml"),
    "A5": ("raml", "erml", "erun"),
    "A6": ("raml", "raun", "erml", "erun"),
}


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.2
    lam: float = 1.0
    tau: float = 0.5
    gamma: float = 5.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if min(self.alpha, self.beta, self.lam, self.gamma) < 0:
            raise ValueError("alpha, beta, lam and gamma must be non-negative")


def _batched(x) -> Tensor:
    x = tc.as_tensor(x)
    return x.reshape(1, x.shape[0]) if len(x.shape) == 1 else x


def l_raml(v_ev, v_vd, q, alpha: float) -> Tensor:
    """Event must beat the whole-video reference in similarity to the query by ``alpha``."""
    v_ev, v_vd, q = _batched(v_ev), _batched(v_vd), _batched(q)
    return tc.relu(tc.cosine(v_vd, q) - tc.cosine(v_ev, q) + alpha).mean()


def l_raun(v_ev, v_bg, v_vd, beta: float) -> Tensor:
    v_ev, v_bg, v_vd = _batched(v_ev), _batched(v_bg), _batched(v_vd)
    return tc.relu(tc.cosine(v_ev, v_bg) - tc.cosine(v_ev, v_vd) + beta).mean()


@dataclass(frozen=True)
class ContrastSets:
    """Boolean B x B masks; row i marks sample i's positives / negatives."""
    pos_multi: np.ndarray
    neg_multi: np.ndarray
    pos_uni: np.ndarray
    neg_uni: np.ndarray

    def positives(self, i, uni=False) -> set[int]:
        return set(np.flatnonzero((self.pos_uni if uni else self.pos_multi)[i]).tolist())

    def negatives(self, i, uni=False) -> set[int]:
        return set(np.flatnonzero((self.neg_uni if uni else self.neg_multi)[i]).tolist())


def build_contrast_sets(cluster_ids, require_uni: bool = True) -> ContrastSets:
    """Same cluster tag -> positive, different -> negative.

    The multi-modal sets keep each sample's own pairing as a positive; the
    uni-modal sets exclude it, so every tag needs at least two members when
    ``require_uni`` is set.
    """
    c = np.asarray(cluster_ids)
    same = c[:, None] == c[None, :]
    eye = np.eye(len(c), dtype=bool)
    pos_uni = same & ~eye
    if require_uni and not np.all(pos_uni.any(axis=1)):
        lonely = np.flatnonzero(~pos_uni.any(axis=1)).tolist()
        raise ValueError(f"samples {lonely} have no same-cluster peer in the batch")
    return ContrastSets(same, ~same, pos_uni, ~same)


def _infonce(anchor, others, pos, neg, tau) -> Tensor:
    a = tc.l2_normalize(_batched(anchor))
    b = tc.l2_normalize(_batched(others))
    logits = (a @ b.T) * (1.0 / tau)
    denom = pos | neg
    return (tc.logsumexp(logits, mask=denom) - tc.logsumexp(logits, mask=pos)).mean()


def l_erml(v_ev, q, sets: ContrastSets, tau: float) -> Tensor:
    """Each event against all batch queries; same-cluster queries are the positives."""
    return _infonce(v_ev, q, sets.pos_multi, sets.neg_multi, tau)


def l_erun(v_ev, sets: ContrastSets, tau: float) -> Tensor:
    """Each event against the other batch events; self excluded from both sides."""
    return _infonce(v_ev, v_ev, sets.pos_uni, sets.neg_uni, tau)


def l_grnd(start, end, clip_start, clip_end) -> Tensor:
    """Zero exactly when [clip_start, clip_end] lies inside [start, end]."""
    start, end = tc.as_tensor(start), tc.as_tensor(end)
    cs = tc.Tensor(np.asarray(clip_start, dtype=np.float64).reshape(start.shape))
    ce = tc.Tensor(np.asarray(clip_end, dtype=np.float64).reshape(end.shape))
    return tc.relu(tc.maximum(ce - end, start - cs)).mean()


def total_implicit_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """(raml + raun) + lam (erml + erun) + gamma grnd over whichever parts are present."""
    total = tc.constant(0.0)
    for name in ("raml", "raun"):
        if name in parts:
            total = total + parts[name]
    for name in ("erml", "erun"):
        if name in parts:
            total = total + parts[name] * weights.lam
    if "grnd" in parts:
        total = total + parts["grnd"] * weights.gamma
    return total
