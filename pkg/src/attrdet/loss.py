"""Bipartite matching and the mask + classification training loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .decoder import StageOutput, TextInstanceSet
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_cls_matched: float = 0.4
    lambda_cls_unmatched: float = 0.02
    points_k: int = 1024
    aux_loss: bool = True
    aux_weight: float = 1.0
    importance_ratio: float = 0.75
    oversample: int = 3
    dice_eps: float = 1.0
    # "sum" weighs the mask terms by K against the classifier and starves it
    bce_points: str = "mean"

    @classmethod
    def from_config(cls, cfg) -> "LossConfig":
        return cls(cfg.lambda_cls_matched, cfg.lambda_cls_unmatched, cfg.points_k, cfg.aux_loss,
                   bce_points=cfg.bce_points)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched: list[int]

    @property
    def queries(self) -> np.ndarray:
        return np.array([t for t, _ in self.pairs], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def matched_mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.queries] = True
        return m


# -- point sampling ----------------------------------------------------------

def sample_point_indices(logits: np.ndarray, k: int, rng: np.random.Generator, importance_ratio: float = 0.75,
                         oversample: int = 3, uniform_only: bool = False) -> np.ndarray:
    """Indices of ``k`` positions: the given share with the smallest |logit|
    among ``oversample`` times as many random candidates, the rest uniform.
    Draws with replacement only when ``k`` exceeds the grid size."""
    n = len(logits)
    if uniform_only:
        return rng.permutation(n)[:k] if k <= n else rng.integers(0, n, size=k)
    n_imp = int(round(importance_ratio * k))
    n_cand = oversample * n_imp
    cand = rng.permutation(n)[:n_cand] if n_cand <= n else rng.integers(0, n, size=n_cand)
    order = np.argsort(np.abs(logits[cand]), kind="stable")
    imp = cand[order[:n_imp]]
    n_uni = k - n_imp
    uni = rng.permutation(n)[:n_uni] if n_uni <= n else rng.integers(0, n, size=n_uni)
    return np.concatenate([imp, uni])


def sample_points(mask_logits_t: Tensor, gt_mask_g: np.ndarray, k: int, rng: np.random.Generator,
                  **kwargs) -> tuple[Tensor, np.ndarray]:
    """Predicted logits and ground-truth labels at the sampled positions."""
    idx = sample_point_indices(mask_logits_t.data, k, rng, **kwargs)
    return mask_logits_t[idx], np.asarray(gt_mask_g, dtype=np.float64)[idx]


# -- loss terms ----------------------------------------------------------------

def _row_mean(per_row: Tensor, n_queries: int | None) -> Tensor:
    if per_row.ndim == 0:
        return per_row
    return per_row.sum() * (1.0 / (n_queries or per_row.shape[0]))


def loss_bce(logits: Tensor, y, n_queries: int | None = None, points: str = "sum") -> Tensor:
    """Point-wise BCE reduced over points (last axis) by ``points``: "sum" or "mean".

    Rows are summed and divided by ``n_queries`` (default: the row count),
    so unmatched queries count as zero-loss rows.
    """
    y = np.asarray(y, dtype=logits.dtype)
    per_point = T.softplus(logits) - logits * y
    per_row = per_point.sum(axis=-1) if points == "sum" else per_point.mean(axis=-1)
    return _row_mean(per_row, n_queries)


def loss_dice(logits: Tensor, y, eps: float = 1.0, n_queries: int | None = None) -> Tensor:
    """Set-level dice per row, normalised like ``loss_bce``."""
    y = np.asarray(y, dtype=logits.dtype)
    p = T.sigmoid(logits)
    num = (p * y).sum(axis=-1) * 2.0 + eps
    den = p.sum(axis=-1) + y.sum(axis=-1) + eps
    return _row_mean(1.0 - num / den, n_queries)


def loss_cls(class_logits: Tensor, matched: np.ndarray, lambda_matched: float = 0.4,
             lambda_unmatched: float = 0.02) -> Tensor:
    """Per-query BCE against l_t = matched, weighted by match status, mean over queries."""
    labels = np.asarray(matched, dtype=bool)
    weights = np.where(labels, lambda_matched, lambda_unmatched).astype(class_logits.dtype)
    bce = T.softplus(class_logits) - class_logits * labels.astype(class_logits.dtype)
    return (bce * weights).mean()


# -- matching ----------------------------------------------------------------

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def matching_cost(mask_logits: np.ndarray, class_logits: np.ndarray, gt_masks: np.ndarray, points: np.ndarray,
                  cfg: LossConfig = LossConfig()) -> np.ndarray:
    """(N, G) cost on shared sample points: cls + summed BCE + dice."""
    x = np.asarray(mask_logits, dtype=np.float64)[:, points]
    y = np.asarray(gt_masks, dtype=np.float64)[:, points]
    bce = _softplus(x).sum(axis=1)[:, None] - x @ y.T
    if cfg.bce_points == "mean":
        bce = bce / len(points)
    p = 1.0 / (1.0 + np.exp(-x))
    dice = 1.0 - (2.0 * p @ y.T + cfg.dice_eps) / (p.sum(1)[:, None] + y.sum(1)[None, :] + cfg.dice_eps)
    neg_log_p = _softplus(-np.asarray(class_logits, dtype=np.float64))
    return cfg.lambda_cls_matched * neg_log_p[:, None] + bce + dice


def assign(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost one-to-one assignment of queries (rows) to targets."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape[1] == 0:
        return MatchResult([], list(range(n)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    used = {t for t, _ in pairs}
    return MatchResult(pairs, [t for t in range(n) if t not in used])


def hungarian_match(stage: StageOutput, gt_masks: np.ndarray, rng: np.random.Generator,
                    cfg: LossConfig = LossConfig()) -> MatchResult:
    hw = stage.mask_logits.shape[1]
    if len(gt_masks) == 0:
        return MatchResult([], list(range(stage.mask_logits.shape[0])))
    points = sample_point_indices(stage.mask_logits.data[0], cfg.points_k, rng, uniform_only=True) \
        if cfg.points_k < hw else np.arange(hw)
    cost = matching_cost(stage.mask_logits.data, stage.class_logits.data, gt_masks, points, cfg)
    return assign(cost)


# -- total ---------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict = field(default_factory=dict)


def stage_loss(stage: StageOutput, gt_masks: np.ndarray, rng: np.random.Generator,
               cfg: LossConfig = LossConfig()) -> tuple[Tensor, dict]:
    match = hungarian_match(stage, gt_masks, rng, cfg)
    n = stage.mask_logits.shape[0]
    cls = loss_cls(stage.class_logits, match.matched_mask(n), cfg.lambda_cls_matched, cfg.lambda_cls_unmatched)
    if not match.pairs:
        return cls, {"bce": 0.0, "dice": 0.0, "cls": float(cls.data)}
    tq, tg = match.queries, match.targets
    pts = np.stack([
        sample_point_indices(stage.mask_logits.data[t], cfg.points_k, rng, cfg.importance_ratio, cfg.oversample)
        for t in tq
    ])
    logits = stage.mask_logits[tq[:, None], pts]
    y = np.asarray(gt_masks, dtype=np.float64)[tg[:, None], pts]
    bce = loss_bce(logits, y, n, cfg.bce_points)
    dice = loss_dice(logits, y, cfg.dice_eps, n)
    return bce + dice + cls, {"bce": float(bce.data), "dice": float(dice.data), "cls": float(cls.data)}


def loss_total(instances: TextInstanceSet, gt_masks: np.ndarray, rng: np.random.Generator,
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Final-stage loss plus, when enabled, the same loss on every earlier stage."""
    stages = instances.stages if cfg.aux_loss else instances.stages[-1:]
    total = None
    terms = {}
    for i, stage in enumerate(stages):
        loss, parts = stage_loss(stage, gt_masks, rng, cfg)
        final = i == len(stages) - 1
        if not final:
            loss = loss * cfg.aux_weight
        total = loss if total is None else total + loss
        if final:
            terms = parts
    return LossBreakdown(total, terms)
