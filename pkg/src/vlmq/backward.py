"""Block loss, attention-block backward pass, and token importance factors.

The block is the attention stream ``Attn(X) = X + o @ MHSA(RMSNorm(X))``.
The loss compares the full-precision branch against the quantized-path
branch, both run with the layer's current weights:

    L = || Attn(X) - Attn(X_hat) ||^2        (plain sum of squares)

Gradients are taken with respect to the *outputs* of the q/k/v/o projections
on the quantized-path branch, so the RMSNorm Jacobian is never needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib import vision_mask
from .errors import InvalidRatio, ShapeMismatch, ValidationError
from .model import ATTN_LINEARS, LayerWeights, ModelSpec, apply_rope, attention_cache

IMPORTANCE_FLOOR = 1e-6
NORM_KINDS = ("l1", "l2")


@dataclass
class BlockLoss:
    value: float
    target: np.ndarray
    actual: np.ndarray


@dataclass
class ProjectionGradients:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in ATTN_LINEARS:
            raise KeyError(name)
        return getattr(self, name)

    def items(self):
        return ((n, getattr(self, n)) for n in ATTN_LINEARS)


@dataclass
class ImportanceFactors:
    diag: np.ndarray
    norm_kind: str = "l1"
    source: str = "gradient"

    def __len__(self) -> int:
        return self.diag.size


def _check_pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"branch shapes differ: {x.shape} vs {x_hat.shape}")
    return x, x_hat


def block_loss(x, x_hat, weights: LayerWeights, spec: ModelSpec) -> BlockLoss:
    x, x_hat = _check_pair(x, x_hat)
    target = attention_cache(x, weights, spec).out
    actual = attention_cache(x_hat, weights, spec).out
    diff = target - actual
    return BlockLoss(float(np.sum(diff * diff)), target, actual)


def block_backward(x, x_hat, weights: LayerWeights, spec: ModelSpec) -> ProjectionGradients:
    """dL/dZ for Z in {q, k, v, o} projection outputs of the quantized-path branch."""
    x, x_hat = _check_pair(x, x_hat)
    target = attention_cache(x, weights, spec).out
    c = attention_cache(x_hat, weights, spec)
    hd = spec.head_dim
    scale = 1.0 / np.sqrt(hd)

    # out = x_hat + zo, the residual path does not depend on any projection
    d_zo = 2.0 * (c.out - target)
    d_ctx = weights.o.T @ d_zo

    d_qrot = np.empty_like(c.q_rot)
    d_krot = np.empty_like(c.k_rot)
    d_zv = np.empty_like(c.zv)
    for h in range(spec.num_heads):
        rows = slice(h * hd, (h + 1) * hd)
        p = c.probs[h]
        d_c = d_ctx[rows]
        # ctx = V @ P^T
        d_zv[rows] = d_c @ p
        d_p = d_c.T @ c.zv[rows]
        # row-wise softmax Jacobian; masked entries have p == 0 and drop out
        d_s = p * (d_p - np.sum(p * d_p, axis=1, keepdims=True))
        # S = Q^T K * scale
        d_qrot[rows] = c.k_rot[rows] @ d_s.T * scale
        d_krot[rows] = c.q_rot[rows] @ d_s * scale

    d_zq = apply_rope(d_qrot, spec, inverse=True)
    d_zk = apply_rope(d_krot, spec, inverse=True)
    return ProjectionGradients(q=d_zq, k=d_zk, v=d_zv, o=d_zo)


def floor_importance(g: np.ndarray, eps: float = IMPORTANCE_FLOOR) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    mean = float(np.mean(g)) if g.size else 0.0
    if mean <= 0.0:
        # all-zero gradients carry no ranking; fall back to uniform importance
        return np.ones_like(g)
    return np.maximum(g, eps * mean)


def gradients_to_importance(p, norm_kind: str = "l1") -> ImportanceFactors:
    """Per-token importance from a (C_out, N) gradient matrix.

    l1: mean absolute value of each column; l2: root-mean-square of each column.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeMismatch("gradient matrix must be 2-D")
    if not np.all(np.isfinite(p)):
        raise ValidationError("gradient matrix has non-finite entries")
    if norm_kind == "l1":
        g = np.mean(np.abs(p), axis=0)
    elif norm_kind == "l2":
        g = np.sqrt(np.mean(p * p, axis=0))
    else:
        raise ValidationError(f"norm_kind must be one of {NORM_KINDS}")
    return ImportanceFactors(floor_importance(g), norm_kind, "gradient")


def manual_importance(roles, li_ratio: float, li_value: float, seed: int = 0) -> ImportanceFactors:
    """Mark a random floor(li_ratio * N_v) subset of vision tokens as low-importance."""
    if not 0.0 <= li_ratio <= 1.0:
        raise InvalidRatio(f"li_ratio must be in [0, 1], got {li_ratio}")
    if not li_value > 0:
        raise ValidationError("li_value must be positive")
    vis = np.flatnonzero(vision_mask(roles))
    count = int(np.floor(li_ratio * vis.size + 1e-9))
    g = np.ones(np.asarray(roles).size)
    if count:
        rng = np.random.default_rng(seed)
        g[rng.choice(vis, size=count, replace=False)] = li_value
    return ImportanceFactors(g, "l1", "manual")
