"""Regularization and in-batch contrastive energies and their blend."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import DimensionError, PreconditionError


@dataclass
class LossConfig:
    alpha: float = 0.5
    tau: float = 0.07
    symmetric_cl: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise PreconditionError(f"alpha={self.alpha} outside [0, 1]")
        if self.tau <= 0:
            raise PreconditionError(f"tau={self.tau} must be positive")


@dataclass
class LossReport:
    l_reg: float
    l_cl: float
    total: float
    mi_lower_bound: float
    batch_size: int


def _check_pair(pred, target, op):
    if pred.shape != target.shape:
        raise DimensionError(f"{op}: prediction {pred.shape} vs target {target.shape}")


def reg_loss(pred, target):
    """Mean over the batch of the squared L2 distance to the target."""
    pred, target = nm.as_narray(pred), nm.as_narray(target)
    _check_pair(pred, target, "reg_loss")
    if pred.ndim == 1:
        return nm.sq_l2(pred, target)
    return nm.mean(nm.sq_l2(pred, target, axis=-1))


def contrastive_loss(pred, target, cfg: LossConfig):
    """InfoNCE with the other targets in the batch as negatives.

    Row ``i`` of the similarity matrix scores prediction ``i`` against every
    target; the positive sits on the diagonal. With ``symmetric_cl`` the
    column direction (targets as queries) is averaged in.
    """
    pred, target = nm.as_narray(pred), nm.as_narray(target)
    _check_pair(pred, target, "contrastive_loss")
    if pred.ndim != 2 or pred.shape[0] < 2:
        raise PreconditionError("contrastive_loss needs a batch of at least 2 rows")
    logits = nm.mul(nm.cosine_matrix(pred, target), 1.0 / cfg.tau)
    pos = nm.diagonal(logits)
    loss = nm.mean(nm.sub(nm.logsumexp(logits, axis=1), pos))
    if cfg.symmetric_cl:
        back = nm.mean(nm.sub(nm.logsumexp(logits, axis=0), pos))
        loss = nm.mul(nm.add(loss, back), 0.5)
    return loss


def total_loss(l_reg, l_cl, cfg: LossConfig):
    if not 0.0 <= cfg.alpha <= 1.0:
        raise PreconditionError(f"alpha={cfg.alpha} outside [0, 1]")
    return nm.add(nm.mul(l_reg, cfg.alpha), nm.mul(l_cl, 1.0 - cfg.alpha))


def pair_energy(pred_a, pred_b, target, cfg: LossConfig):
    """Per-pair alignment energy; zero for a perfect match, lower is better."""
    pred_a, pred_b, target = (nm.as_narray(v) for v in (pred_a, pred_b, target))
    _check_pair(pred_a, target, "pair_energy")
    _check_pair(pred_b, target, "pair_energy")
    dist = nm.sq_l2(pred_b, target)
    return nm.add(nm.mul(dist, cfg.alpha),
                  nm.mul(nm.sub(1.0, nm.cosine_sim(pred_a, target)), 1.0 - cfg.alpha))


def energy_matrix(pred_a, pred_b, candidates, alpha):
    """Energies of each query against every candidate, as a plain array."""
    pred_a = np.atleast_2d(pred_a)
    pred_b = np.atleast_2d(pred_b)
    cand = np.asarray(candidates)
    cos = (pred_a / np.linalg.norm(pred_a, axis=1, keepdims=True)) @ (
        cand / np.linalg.norm(cand, axis=1, keepdims=True)).T
    dist = ((pred_b[:, None, :] - cand[None, :, :]) ** 2).sum(axis=-1)
    return alpha * dist + (1.0 - alpha) * (1.0 - cos)


def mi_bound(l_cl, batch_size):
    """InfoNCE lower bound on the mutual information, ``ln(B) - L_cl``."""
    if batch_size < 2:
        raise PreconditionError("mi_bound needs B >= 2")
    return math.log(batch_size) - float(l_cl)


def evaluate_losses(out_a, out_b, target, cfg: LossConfig):
    """Forward both terms and the blend; returns (total NArray, LossReport)."""
    l_reg = reg_loss(out_b, target)
    l_cl = contrastive_loss(out_a, target, cfg)
    total = total_loss(l_reg, l_cl, cfg)
    b = out_a.shape[0]
    report = LossReport(float(l_reg.data), float(l_cl.data), float(total.data),
                        mi_bound(float(l_cl.data), b), b)
    return total, report
