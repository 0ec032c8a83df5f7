"""The four training objectives, each returning (scalar loss, dloss/dpred).

All pairwise objectives run over every unordered within-batch pair. Inputs
are 1-D float vectors per axis; the axis_mean_loss wrapper reduces a
predictions-by-axes matrix to the uniform mean of the four per-axis losses.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError

LOSS_KINDS = ("Con", "UT", "DCQ", "CCC")


@dataclass
class LossConfig:
    kind: str = "UT"
    margin: float = 0.5  # contrastive margin on the score scale
    clip_tau: float = 0.25  # clipped-MSE dead zone half-width
    ut_con_weight: float = 0.5  # fixed by the combined objective's definition
    dcq_dev_weight: float = 1.0
    dcq_rank_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.margin < 0 or self.clip_tau < 0:
            raise ConfigError("margin and clip_tau must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "margin": self.margin,
            "clip_tau": self.clip_tau,
            "ut_con_weight": self.ut_con_weight,
            "dcq_dev_weight": self.dcq_dev_weight,
            "dcq_rank_weight": self.dcq_rank_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def _as_vector(name: str, x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ConfigError(f"{name} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"non-finite values in {name}")
    return v


def _pair_diffs(v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Upper-triangle index arrays (i, j) with i < j, and v_i - v_j per pair."""
    n = v.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    return iu, ju, v[iu] - v[ju]


def contrastive_loss(
    pred, label, margin: float = 0.5
) -> tuple[float, np.ndarray]:
    """Mean over pairs of max(0, |(p_i-p_j) - (l_i-l_j)| - margin)."""
    p = _as_vector("pred", pred)
    l = _as_vector("label", label)
    if p.shape != l.shape:
        raise ConfigError(f"pred/label shape mismatch: {p.shape} vs {l.shape}")
    if p.size < 2:
        raise DomainError("contrastive loss needs at least 2 samples")
    iu, ju, dp = _pair_diffs(p)
    _, _, dl = _pair_diffs(l)
    e = dp - dl
    hinge = np.abs(e) - margin
    npairs = e.size
    loss = float(np.maximum(hinge, 0.0).sum() / npairs)
    s = np.where(hinge > 0, np.sign(e), 0.0) / npairs
    grad = np.zeros_like(p)
    np.add.at(grad, iu, s)
    np.add.at(grad, ju, -s)
    return loss, grad


def clipped_mse(pred, label, tau: float = 0.25) -> tuple[float, np.ndarray]:
    """MSE with a dead zone: errors with |e| <= tau contribute nothing."""
    p = _as_vector("pred", pred)
    l = _as_vector("label", label)
    if p.shape != l.shape:
        raise ConfigError(f"pred/label shape mismatch: {p.shape} vs {l.shape}")
    e = p - l
    active = np.abs(e) > tau
    n = p.size
    loss = float((e[active] ** 2).sum() / n)
    grad = np.where(active, 2.0 * e / n, 0.0)
    return loss, grad


def utmos_loss(pred, label, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Clipped MSE plus 0.5 x contrastive."""
    lm, gm = clipped_mse(pred, label, cfg.clip_tau)
    lc, gc = contrastive_loss(pred, label, cfg.margin)
    return lm + cfg.ut_con_weight * lc, gm + cfg.ut_con_weight * gc


def dcq_loss(pred, label, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Deviation + rank hinge over pairs with unequal labels.

    dev  = mean |(p_i-p_j) - (l_i-l_j)|
    rank = mean max(0, -(p_i-p_j) * sign(l_i-l_j))
    Both terms are symmetric under swapping i and j, so unordered pairs carry
    the full definition.
    """
    p = _as_vector("pred", pred)
    l = _as_vector("label", label)
    if p.shape != l.shape:
        raise ConfigError(f"pred/label shape mismatch: {p.shape} vs {l.shape}")
    if p.size < 2:
        raise DomainError("dcq loss needs at least 2 samples")
    iu, ju, dp = _pair_diffs(p)
    _, _, dl = _pair_diffs(l)
    keep = dl != 0.0
    if not keep.any():
        warnings.warn("dcq loss: all labels equal, no informative pairs", stacklevel=2)
        return 0.0, np.zeros_like(p)
    iu, ju, dp, dl = iu[keep], ju[keep], dp[keep], dl[keep]
    npairs = dp.size
    e = dp - dl
    s = np.sign(dl)
    dev = float(np.abs(e).sum() / npairs)
    rank_terms = -dp * s
    rank = float(np.maximum(rank_terms, 0.0).sum() / npairs)
    loss = cfg.dcq_dev_weight * dev + cfg.dcq_rank_weight * rank

    per_pair = cfg.dcq_dev_weight * np.sign(e) / npairs
    per_pair += cfg.dcq_rank_weight * np.where(rank_terms > 0, -s, 0.0) / npairs
    grad = np.zeros_like(p)
    np.add.at(grad, iu, per_pair)
    np.add.at(grad, ju, -per_pair)
    return loss, grad


def ccc_loss(pred, label) -> tuple[float, np.ndarray]:
    """1 - concordance correlation, with population (1/N) moments."""
    p = _as_vector("pred", pred)
    l = _as_vector("label", label)
    if p.shape != l.shape:
        raise ConfigError(f"pred/label shape mismatch: {p.shape} vs {l.shape}")
    n = p.size
    if n < 2:
        raise DomainError("ccc loss needs at least 2 samples")
    mp, ml = p.mean(), l.mean()
    cp, cl = p - mp, l - ml
    vp = float((cp**2).mean())
    vl = float((cl**2).mean())
    cov = float((cp * cl).mean())
    denom = vp + vl + (mp - ml) ** 2
    if denom == 0.0:
        raise DomainError("ccc loss undefined: zero variance and zero mean gap")
    ccc = 2.0 * cov / denom
    # d cov / dp_i = cl_i / n ; d vp / dp_i = 2 cp_i / n ; d denom adds the mean-gap path
    dcov = cl / n
    ddenom = 2.0 * cp / n + 2.0 * (mp - ml) / n
    grad = -(2.0 * dcov * denom - 2.0 * cov * ddenom) / denom**2
    return 1.0 - ccc, grad


def single_axis_loss(pred, label, cfg: LossConfig) -> tuple[float, np.ndarray]:
    if cfg.kind == "Con":
        return contrastive_loss(pred, label, cfg.margin)
    if cfg.kind == "UT":
        return utmos_loss(pred, label, cfg)
    if cfg.kind == "DCQ":
        return dcq_loss(pred, label, cfg)
    if cfg.kind == "CCC":
        return ccc_loss(pred, label)
    raise ConfigError(f"unknown loss kind {cfg.kind!r}")


def axis_mean_loss(
    preds: np.ndarray, labels: np.ndarray, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Uniform mean of the per-axis losses over the columns of (N x axes)."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.ndim != 2 or preds.shape != labels.shape:
        raise ConfigError(
            f"expected matching (N x axes) matrices, got {preds.shape} vs {labels.shape}"
        )
    naxes = preds.shape[1]
    total = 0.0
    grad = np.zeros_like(preds)
    for a in range(naxes):
        la, ga = single_axis_loss(preds[:, a], labels[:, a], cfg)
        total += la
        grad[:, a] = ga / naxes
    return total / naxes, grad
