"""Pairwise sigmoid loss, softmax contrastive loss, gradients and negative masks.

Sign convention: ``logit_ij = t * <x_i, y_j> + b`` and each pair contributes
``-log_sigmoid(z_ij * logit_ij)`` with ``z_ij = +1`` on the diagonal and
``-1`` elsewhere. The loss is always divided by the batch size ``n``, also
when negatives are masked out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    as_matrix,
    log_sigmoid,
    matmul,
    ordered_sum,
    row_log_softmax,
    row_norms,
    sigmoid,
    transpose,
)
from .errors import InvalidRatio, NotNormalized, ShapeMismatch

NORM_TOL = 1e-6
MASK_STRATEGIES = ("none", "random", "hard", "easy")


@dataclass
class LossParams:
    t_prime: float = math.log(10.0)
    bias: float = -10.0

    @property
    def t(self) -> float:
        return math.exp(self.t_prime)


@dataclass
class LossOutput:
    value: float
    pair_losses: np.ndarray
    positive_logit_mean: float
    negative_logit_mean: float


@dataclass
class LossGrads:
    d_zimg: np.ndarray
    d_ztxt: np.ndarray
    d_t_prime: float
    d_bias: float


@dataclass(frozen=True)
class MaskSpec:
    """Which negatives to keep.

    ``negatives_per_positive`` is the ``r`` of a ``1:r`` positive:negative
    ratio; ``None`` only makes sense with ``strategy="none"``.
    """

    strategy: str = "none"
    negatives_per_positive: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in MASK_STRATEGIES:
            raise InvalidRatio(f"unknown mask strategy {self.strategy!r}")
        if self.strategy != "none":
            if self.negatives_per_positive is None or not self.negatives_per_positive >= 1:
                raise InvalidRatio("mask ratio must be at least 1:1")

    @classmethod
    def parse(cls, strategy: str, ratio: str | float | None, seed: int = 0) -> "MaskSpec":
        """Build from a ratio written either as ``"1:16"`` or as ``16``."""
        if strategy == "none":
            return cls("none", None, seed)
        if ratio is None or ratio == "":
            raise InvalidRatio(f"mask strategy {strategy!r} needs a ratio")
        if isinstance(ratio, str) and ":" in ratio:
            pos, neg = ratio.split(":", 1)
            value = float(neg) / float(pos)
        else:
            value = float(ratio)
        return cls(strategy, value, seed)

    def kept_negatives(self, n: int) -> int:
        if self.strategy == "none":
            return n * n - n
        if self.negatives_per_positive > n - 1:
            raise InvalidRatio(
                f"1:{self.negatives_per_positive:g} exceeds the 1:{n - 1} available at batch {n}"
            )
        return int(round(n * self.negatives_per_positive))


def pair_labels(n: int) -> np.ndarray:
    """+1 on the diagonal, -1 elsewhere."""
    return 2.0 * np.eye(n) - np.ones((n, n))


def check_batch(zimg, ztxt) -> tuple[np.ndarray, np.ndarray]:
    zimg = as_matrix(zimg)
    ztxt = as_matrix(ztxt)
    if zimg.shape != ztxt.shape:
        raise ShapeMismatch(f"image batch {zimg.shape} vs text batch {ztxt.shape}")
    for name, z in (("image", zimg), ("text", ztxt)):
        dev = np.abs(row_norms(z) - 1.0)
        if np.any(dev > NORM_TOL):
            raise NotNormalized(f"{name} row {int(np.argmax(dev))} is not unit norm")
    return zimg, ztxt


@dataclass
class BlockTerms:
    """Raw per-block sums; callers scale by t and n when finalizing."""

    dots: np.ndarray
    logits: np.ndarray
    pair_losses: np.ndarray
    loss_sum: float
    gx: np.ndarray  # G @ Y_block, rows belong to the image block
    gy: np.ndarray  # G^T @ X_block, rows belong to the text block
    bias_sum: float
    tprime_sum: float  # sum(G * dots), still to be multiplied by t


def sigmoid_block(x_blk, y_blk, t, b, n, row0=0, col0=0, keep=None) -> BlockTerms:
    """All sigmoid-loss quantities for one (image block, text block) pair.

    ``row0``/``col0`` are the global offsets of the blocks, used to place
    the positive labels; ``keep`` is the matching slice of a boolean mask.
    """
    dots = matmul(x_blk, transpose(y_blk))
    logits = dots * t + b
    rows = np.arange(row0, row0 + dots.shape[0])[:, None]
    cols = np.arange(col0, col0 + dots.shape[1])[None, :]
    labels = np.where(rows == cols, 1.0, -1.0)
    pair = -log_sigmoid(labels * logits)
    g = -(labels * sigmoid(-labels * logits)) / n
    if keep is not None:
        pair = np.where(keep, pair, 0.0)
        g = np.where(keep, g, 0.0)
    return BlockTerms(
        dots=dots,
        logits=logits,
        pair_losses=pair,
        loss_sum=ordered_sum(pair),
        gx=matmul(g, y_blk),
        gy=matmul(transpose(g), x_blk),
        bias_sum=ordered_sum(g),
        tprime_sum=ordered_sum(g * dots),
    )


def _logit_means(logits: np.ndarray) -> tuple[float, float]:
    n = logits.shape[0]
    diag = np.diag(logits)
    pos = ordered_sum(diag) / n
    if n == 1:
        return pos, float("nan")
    off = ordered_sum(logits) - ordered_sum(diag)
    return pos, off / (n * n - n)


def _sigmoid_terms(zimg, ztxt, params, mask) -> BlockTerms:
    zimg, ztxt = check_batch(zimg, ztxt)
    n = zimg.shape[0]
    if mask is not None and np.shape(mask) != (n, n):
        raise ShapeMismatch(f"mask shape {np.shape(mask)} for batch {n}")
    return sigmoid_block(zimg, ztxt, params.t, params.bias, n, keep=mask)


def sigmoid_loss(zimg, ztxt, params: LossParams, mask=None) -> LossOutput:
    terms = _sigmoid_terms(zimg, ztxt, params, mask)
    n = terms.dots.shape[0]
    pos, neg = _logit_means(terms.logits)
    return LossOutput(terms.loss_sum / n, terms.pair_losses, pos, neg)


def finalize_sigmoid_grads(gx, gy, bias_sum, tprime_sum, t) -> LossGrads:
    return LossGrads(d_zimg=t * gx, d_ztxt=t * gy, d_t_prime=t * tprime_sum, d_bias=bias_sum)


def sigmoid_loss_grads(zimg, ztxt, params: LossParams, mask=None) -> LossGrads:
    """Gradients with respect to the normalized embeddings, t' and b.

    ``mask`` may be a boolean keep-matrix or a :class:`MaskSpec`; a spec is
    resolved against the current pair losses.
    """
    if isinstance(mask, MaskSpec):
        mask = build_mask(sigmoid_loss(zimg, ztxt, params).pair_losses, mask)
    terms = _sigmoid_terms(zimg, ztxt, params, mask)
    return finalize_sigmoid_grads(terms.gx, terms.gy, terms.bias_sum, terms.tprime_sum, params.t)


def sigmoid_loss_and_grads(zimg, ztxt, params: LossParams, mask=None):
    terms = _sigmoid_terms(zimg, ztxt, params, mask)
    n = terms.dots.shape[0]
    pos, neg = _logit_means(terms.logits)
    out = LossOutput(terms.loss_sum / n, terms.pair_losses, pos, neg)
    grads = finalize_sigmoid_grads(terms.gx, terms.gy, terms.bias_sum, terms.tprime_sum, params.t)
    return out, grads


def _softmax_parts(zimg, ztxt, t_prime):
    zimg, ztxt = check_batch(zimg, ztxt)
    t = math.exp(t_prime)
    dots = matmul(zimg, transpose(ztxt))
    logits = dots * t
    lsm_i2t = row_log_softmax(logits)
    lsm_t2i = row_log_softmax(transpose(logits))
    return zimg, ztxt, t, dots, logits, lsm_i2t, lsm_t2i


def softmax_loss_and_grads(zimg, ztxt, t_prime: float):
    zimg, ztxt, t, dots, logits, lsm_i2t, lsm_t2i = _softmax_parts(zimg, ztxt, t_prime)
    n = dots.shape[0]
    # per-pair contribution of the image->text and text->image terms, both
    # indexed (image i, text j)
    pair = -(np.eye(n) * (lsm_i2t + transpose(lsm_t2i))) / 2.0
    value = -(ordered_sum(np.diag(lsm_i2t)) + ordered_sum(np.diag(lsm_t2i))) / (2 * n)
    pos, neg = _logit_means(logits)
    out = LossOutput(value, pair, pos, neg)

    eye = np.eye(n)
    dlogits = ((np.exp(lsm_i2t) - eye) + transpose(np.exp(lsm_t2i) - eye)) / (2 * n)
    grads = LossGrads(
        d_zimg=t * matmul(dlogits, ztxt),
        d_ztxt=t * matmul(transpose(dlogits), zimg),
        d_t_prime=t * ordered_sum(dlogits * dots),
        d_bias=0.0,
    )
    return out, grads


def softmax_loss(zimg, ztxt, t_prime: float) -> LossOutput:
    return softmax_loss_and_grads(zimg, ztxt, t_prime)[0]


def softmax_loss_grads(zimg, ztxt, t_prime: float) -> LossGrads:
    return softmax_loss_and_grads(zimg, ztxt, t_prime)[1]


def build_mask(pair_losses, spec: MaskSpec) -> np.ndarray:
    """Boolean keep-matrix: every positive plus the selected negatives.

    Hard keeps the highest-loss negatives, easy the lowest, random a seeded
    uniform sample. Equal losses are ordered by (row, col).
    """
    losses = as_matrix(pair_losses)
    n = losses.shape[0]
    if losses.shape != (n, n):
        raise ShapeMismatch(f"pair losses must be square, got {losses.shape}")
    if spec.strategy == "none":
        return np.ones((n, n), dtype=bool)
    k = spec.kept_negatives(n)
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    vals = losses[rows, cols]
    if spec.strategy == "random":
        rng = np.random.default_rng(spec.seed)
        chosen = rng.choice(rows.size, size=k, replace=False)
    elif spec.strategy == "hard":
        chosen = np.lexsort((cols, rows, -vals))[:k]
    else:
        chosen = np.lexsort((cols, rows, vals))[:k]
    keep = np.eye(n, dtype=bool)
    keep[rows[chosen], cols[chosen]] = True
    return keep
