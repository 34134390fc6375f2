"""Adversarial, l1, Gaussian-KL and node-strength losses and their weighted sum.

Graph arguments may be ConnectivityMatrix / arrays (float results) or
tensors of shape ``[n, n]`` / ``[B, n, n]``.  Batched tensor losses return
one value per subject, shape ``[B]``, so callers can sum over subjects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffengine as de
from .diffengine import ContractError, DimensionError, Tensor
from .graphcore import SIGMA_FLOOR, ConnectivityMatrix, node_strength, node_weight_stats

LOG_EPS = 1e-7
VARIANTS = ("full", "no_kl", "no_kl_plus_topology")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 2.0
    lambda2: float = 2.0
    lambda3: float = 0.001
    variant: str = "full"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


def _graph(g):
    if isinstance(g, Tensor):
        return g
    if isinstance(g, ConnectivityMatrix):
        return g.weights
    return np.asarray(g, dtype=np.float64)


def _check_pair(a, b, name: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{name}: graph shapes differ, {list(a.shape)} vs {list(b.shape)}")


def _per_subject(t: Tensor) -> Tensor:
    """Sum everything but the leading batch axis: ``[B, ...] -> [B]``."""
    if t.ndim == 1:
        return t
    B = t.shape[0]
    return de.reshape(de.reshape(t, (B, t.size // B)).sum(axis=-1), (B,))


def _reduce(t: Tensor, batched: bool):
    return _per_subject(t) if batched else t.sum()


def _safe_log_score(score, complement: bool = False):
    s = de.clamp(de.as_tensor(score), LOG_EPS, 1.0 - LOG_EPS)
    if complement:
        s = 1.0 - s
    return de.log(s)


def adversarial_loss_d(score_real, score_fake) -> Tensor:
    """``-log D(real) - log(1 - D(fake))``, elementwise over subjects."""
    return -(_safe_log_score(score_real) + _safe_log_score(score_fake, complement=True))


def adversarial_loss_g(score_fake) -> Tensor:
    """Non-saturating generator loss ``-log D(fake)``."""
    return -_safe_log_score(score_fake)


def l1_loss(predicted, target):
    """Entrywise l1 distance over the full (symmetric) matrix."""
    p, t = _graph(predicted), _graph(target)
    _check_pair(p, t, "l1_loss")
    if isinstance(p, Tensor) or isinstance(t, Tensor):
        p, t = de.as_tensor(p), de.as_tensor(t)
        return _reduce(de.abs(p - t), p.ndim == 3)
    return float(np.abs(p - t).sum())


def kl_gaussian(mu_p, sigma_p, mu_q, sigma_q, sigma_floor: float = SIGMA_FLOOR):
    """Closed-form KL(N(mu_p, sigma_p) || N(mu_q, sigma_q)), summed over entries.

    Float arguments give a float; tensor arguments give a differentiable
    ``[1]`` tensor.
    """
    args = (mu_p, sigma_p, mu_q, sigma_q)
    for name, s in (("sigma_p", sigma_p), ("sigma_q", sigma_q)):
        vals = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
        if np.any(vals < sigma_floor * (1.0 - 1e-12)):
            raise ContractError(f"kl_gaussian: {name} below floor {sigma_floor}")
    if not any(isinstance(a, Tensor) for a in args):
        mp, sp, mq, sq = (np.asarray(a, dtype=np.float64) for a in args)
        kl = np.log(sq / sp) + (sp**2 + (mp - mq) ** 2) / (2.0 * sq**2) - 0.5
        return float(np.sum(kl))
    return _kl_terms(*(de.as_tensor(a) for a in args)).sum()


def _kl_terms(mu_p: Tensor, sigma_p: Tensor, mu_q: Tensor, sigma_q: Tensor) -> Tensor:
    var_q2 = de.scalar_mul(de.square(sigma_q), 2.0)
    spread = de.square(sigma_p) + de.square(mu_p - mu_q)
    return de.log(sigma_q) - de.log(sigma_p) + spread / var_q2 - 0.5


def kl_loss(predicted, target, sigma_floor: float = SIGMA_FLOOR):
    """Sum over nodes of KL(p_k || q_k); p from ``predicted``, q from ``target``."""
    p, t = _graph(predicted), _graph(target)
    _check_pair(p, t, "kl_loss")
    if isinstance(p, Tensor) or isinstance(t, Tensor):
        p, t = de.as_tensor(p), de.as_tensor(t)
        sp, sq = node_weight_stats(p, sigma_floor), node_weight_stats(t, sigma_floor)
        terms = _kl_terms(sp.mu, sp.sigma, sq.mu, sq.sigma)
        return _reduce(terms, p.ndim == 3)
    sp, sq = node_weight_stats(p, sigma_floor), node_weight_stats(t, sigma_floor)
    return kl_gaussian(sp.mu, sp.sigma, sq.mu, sq.sigma, sigma_floor)


def topology_loss(predicted, target):
    """Euclidean distance between node-strength vectors."""
    p, t = _graph(predicted), _graph(target)
    _check_pair(p, t, "topology_loss")
    if isinstance(p, Tensor) or isinstance(t, Tensor):
        p, t = de.as_tensor(p), de.as_tensor(t)
        diff = node_strength(p) - node_strength(t)
        return de.sqrt(_reduce(de.square(diff), p.ndim == 3))
    return float(np.linalg.norm(node_strength(p) - node_strength(t)))


@dataclass
class StageLosses:
    """Generator-side terms for one predicted timepoint.

    ``l1`` and ``reg`` hold one value per training subject (a ``[B]`` tensor or
    a sequence); ``reg`` is the KL or topology term depending on the variant.
    """

    adv: Tensor | float
    l1: Tensor | Sequence
    reg: Tensor | Sequence | None = None


def _subject_total(values):
    if isinstance(values, Tensor):
        return values.sum(), values.size
    values = list(values)
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total, len(values)


def stage_total(stage: StageLosses, weights: LossWeights, n_s: int):
    """``lambda1*adv + lambda2/n_s * sum(l1) + lambda3/n_s * sum(reg)`` for one stage."""
    l1_sum, n_l1 = _subject_total(stage.l1)
    if n_l1 != n_s:
        raise ContractError(f"l1 terms cover {n_l1} subjects, expected n_s={n_s}")
    total = weights.lambda1 * stage.adv + (weights.lambda2 / n_s) * l1_sum
    if weights.variant != "no_kl":
        if stage.reg is None:
            raise ContractError(f"variant {weights.variant} needs a regulariser term")
        reg_sum, n_reg = _subject_total(stage.reg)
        if n_reg != n_s:
            raise ContractError(f"regulariser terms cover {n_reg} subjects, expected n_s={n_s}")
        total = total + (weights.lambda3 / n_s) * reg_sum
    return total


def full_loss(stages: Sequence[StageLosses], weights: LossWeights, n_s: int, m: int):
    """Weighted objective summed over the ``m`` predicted timepoints."""
    if len(stages) != m:
        raise ContractError(f"got losses for {len(stages)} timepoints, expected m={m}")
    total = stage_total(stages[0], weights, n_s)
    for stage in stages[1:]:
        total = total + stage_total(stage, weights, n_s)
    return total
