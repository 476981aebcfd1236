"""Hessian accumulation and the GPTQ / GPTAQ / VLMQ column-update solvers.

Notation (one weight row ``w``; columns are input channels):

    X_hat  quantized-path input of the layer, (C_i, N)
    X_fp   full-precision input of the same layer, (C_i, N)
    G      diagonal token importance (all ones for GPTQ/GPTAQ)
    H      = X_hat G X_hat^T
    R      = (X_fp - X_hat) G X_hat^T       so that  r G X_hat^T = w R

Quantizing column q with the remaining columns F free solves

    min || (dw X_hat - r) sqrt(G) ||^2   s.t.  dw_q = w_hat_q - w_q

whose minimizer is

    dw = (w_hat_q - w_q) / [H^-1]_qq * [H^-1]_q,:  +  r G X_hat^T [H_-q]^-1

with every inverse taken over the not-yet-quantized coordinates. The lazy
solver realizes this with the upper Cholesky factor U of H^-1: row q of
[H_S^-1] is U_qq * U_q,:, and the residual term is folded into
P = triu(R U^T, 1) U, applied as ``w_q * P_q,:`` when column q is quantized.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import (
    InvalidConfig,
    MissingCrossTerm,
    ShapeMismatch,
    SingularSystem,
    ZeroHessian,
)
from .linalg import cholesky, inverse_spd, top_principal_components
from .quant import GroupQuantizer, quantize_column_groupwise


class Method(str, Enum):
    GPTQ = "gptq"
    GPTAQ = "gptaq"
    VLMQ = "vlmq"


PRECURSORS = (Method.GPTQ, Method.GPTAQ)


@dataclass(frozen=True)
class SolveConfig:
    method: Method = Method.GPTAQ
    precursor: Method = Method.GPTAQ
    bits: int | None = 3  # None disables quantization (passthrough)
    group_size: int | None = None  # None: per-channel
    act_order: bool = True
    damp: float = 0.01
    lazy_block: int = 128

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "precursor", Method(self.precursor))
        if self.precursor not in PRECURSORS:
            raise InvalidConfig("precursor must be gptq or gptaq")
        if not self.damp > 0:
            raise InvalidConfig(f"damp must be > 0, got {self.damp}")
        if self.lazy_block < 1:
            raise InvalidConfig("lazy_block must be >= 1")
        if self.group_size is not None and self.group_size < 1:
            object.__setattr__(self, "group_size", None)
        if self.bits is not None and not 2 <= self.bits <= 8:
            raise InvalidConfig(f"bits must be in [2, 8], got {self.bits}")

    @property
    def passthrough(self) -> bool:
        return self.bits is None

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "precursor": self.precursor.value,
            "bits": self.bits,
            "group_size": self.group_size,
            "act_order": self.act_order,
            "damp": self.damp,
            "lazy_block": self.lazy_block,
        }


@dataclass
class HessianState:
    H: np.ndarray
    R: np.ndarray | None = None
    H_unit: np.ndarray | None = None  # unweighted X_hat X_hat^T, kept for error reporting
    weighted: bool = False
    n_tokens: int = 0

    @classmethod
    def empty(cls, dim: int, residual: bool = True, weighted: bool = False) -> "HessianState":
        return cls(
            H=np.zeros((dim, dim)),
            R=np.zeros((dim, dim)) if residual else None,
            H_unit=np.zeros((dim, dim)) if weighted else None,
            weighted=weighted,
        )

    @property
    def dim(self) -> int:
        return self.H.shape[0]


def accumulate_hessian(state: HessianState, x_hat, x_fp=None, g=None) -> HessianState:
    """H += X_hat G X_hat^T and, when X_fp is given, R += (X_fp - X_hat) G X_hat^T."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x_hat.ndim != 2 or x_hat.shape[0] != state.dim:
        raise ShapeMismatch(f"expected ({state.dim}, N) activations, got {x_hat.shape}")
    n = x_hat.shape[1]
    if g is None:
        g = np.ones(n)
    g = np.asarray(getattr(g, "diag", g), dtype=np.float64)
    if g.shape != (n,):
        raise ShapeMismatch(f"importance length {g.size} does not match {n} tokens")

    xg = x_hat * g
    state.H += xg @ x_hat.T
    state.H = (state.H + state.H.T) / 2.0
    if state.H_unit is not None:
        state.H_unit += x_hat @ x_hat.T
        state.H_unit = (state.H_unit + state.H_unit.T) / 2.0
    if x_fp is not None:
        x_fp = np.asarray(x_fp, dtype=np.float64)
        if x_fp.shape != x_hat.shape:
            raise ShapeMismatch("full-precision and quantized-path inputs differ in shape")
        if state.R is None:
            state.R = np.zeros_like(state.H)
        state.R += ((x_fp - x_hat) * g) @ x_hat.T
    state.n_tokens += n
    return state


def dampen(h, damp: float) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    mean = float(np.mean(np.diag(h)))
    if not mean > 0:
        raise ZeroHessian("Hessian has zero mean diagonal; no calibration signal")
    return h + damp * mean * np.eye(h.shape[0])


@dataclass
class QuantizedLayerResult:
    weight: np.ndarray
    codes: np.ndarray | None = None
    scales: np.ndarray | None = None
    zeros: np.ndarray | None = None
    g_idx: np.ndarray | None = None
    perm: np.ndarray | None = None
    bits: int | None = None
    group_size: int | None = None
    err_weighted: np.ndarray = field(default_factory=lambda: np.zeros(0))
    err_unweighted: np.ndarray = field(default_factory=lambda: np.zeros(0))


def column_order(h: np.ndarray, act_order: bool) -> np.ndarray:
    n = h.shape[0]
    if not act_order:
        return np.arange(n)
    # descending diagonal, ties by ascending index
    return np.lexsort((np.arange(n), -np.diag(h)))


def _row_errors(delta: np.ndarray, state: HessianState) -> tuple[np.ndarray, np.ndarray]:
    weighted = np.einsum("ij,jk,ik->i", delta, state.H, delta)
    h_unit = state.H_unit if state.H_unit is not None else state.H
    unweighted = np.einsum("ij,jk,ik->i", delta, h_unit, delta)
    return weighted, unweighted


def _finish(w, q, quantizer: GroupQuantizer, perm, cfg: SolveConfig, state) -> QuantizedLayerResult:
    inv = np.argsort(perm)
    weight = q[:, inv]
    g_idx = np.empty(perm.size, dtype=np.int64)
    g_idx[perm] = np.arange(perm.size) // quantizer.group_size
    ew, eu = _row_errors(weight - w, state)
    return QuantizedLayerResult(
        weight=weight,
        codes=quantizer.codes[:, inv],
        scales=quantizer.scales.copy(),
        zeros=quantizer.zeros.copy(),
        g_idx=g_idx,
        perm=perm.copy(),
        bits=cfg.bits,
        group_size=cfg.group_size,
        err_weighted=ew,
        err_unweighted=eu,
    )


def _passthrough(w, state) -> QuantizedLayerResult:
    w = np.array(w, dtype=np.float64)
    z = np.zeros(w.shape[0])
    return QuantizedLayerResult(weight=w, err_weighted=z, err_unweighted=z.copy())


def _prepare(w, state: HessianState, cfg: SolveConfig, residual: bool):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != state.dim:
        raise ShapeMismatch(f"weight {w.shape} does not match Hessian dim {state.dim}")
    perm = column_order(state.H, cfg.act_order)
    hd = dampen(state.H, cfg.damp)[np.ix_(perm, perm)]
    r = None
    if residual:
        if state.R is None:
            raise MissingCrossTerm("residual solver needs the cross-term accumulator")
        if np.any(state.R):
            r = state.R[np.ix_(perm, perm)]
    return w, perm, hd, r


def _solve_lazy(w, state: HessianState, cfg: SolveConfig, residual: bool) -> QuantizedLayerResult:
    if cfg.passthrough:
        return _passthrough(w, state)
    w0, perm, hd, r = _prepare(w, state, cfg, residual)
    rows, cols = w0.shape
    u = cholesky(inverse_spd(hd)).upper()
    p = np.triu(r @ u.T, 1) @ u if r is not None else None

    W = w0[:, perm].copy()
    Q = np.zeros_like(W)
    quantizer = GroupQuantizer(rows, cols, cfg.bits, cfg.group_size)
    block = cfg.lazy_block

    for i1 in range(0, cols, block):
        i2 = min(i1 + block, cols)
        W1 = W[:, i1:i2].copy()
        err1 = np.zeros_like(W1)
        pre1 = np.zeros_like(W1)  # column values at the moment they were quantized
        for i in range(i2 - i1):
            col = i1 + i
            if quantizer.is_group_head(col):
                g = quantizer.group_of(col)
                start, stop = quantizer.group_span(g)
                inside = W1[:, i:min(stop, i2) - i1]
                values = inside
                if stop > i2:
                    tail = W[:, i2:stop] - err1[:, :i] @ u[i1:col, i2:stop]
                    if p is not None:
                        tail = tail + pre1[:, :i] @ p[i1:col, i2:stop]
                    values = np.concatenate([inside, tail], axis=1)
                quantizer.fit_group(g, values)
            wc = W1[:, i].copy()
            qc = quantizer.quantize_column(col, wc)
            Q[:, col] = qc
            e = (wc - qc) / u[col, col]
            upd = np.outer(e, u[col, col:i2])
            if p is not None:
                upd -= np.outer(wc, p[col, col:i2])
            W1[:, i:] -= upd
            err1[:, i] = e
            pre1[:, i] = wc
        if i2 < cols:
            tail_upd = err1 @ u[i1:i2, i2:]
            if p is not None:
                tail_upd -= pre1 @ p[i1:i2, i2:]
            W[:, i2:] -= tail_upd

    return _finish(w0, Q, quantizer, perm, cfg, state)


def quantize_layer_gptq(w, state: HessianState, cfg: SolveConfig) -> QuantizedLayerResult:
    return _solve_lazy(w, state, cfg, residual=False)


def quantize_layer_gptaq(w, state: HessianState, cfg: SolveConfig) -> QuantizedLayerResult:
    return _solve_lazy(w, state, cfg, residual=True)


def quantize_layer_vlmq(w, state: HessianState, cfg: SolveConfig) -> QuantizedLayerResult:
    """Importance-weighted update; ``state`` must be accumulated with G."""
    return _solve_lazy(w, state, cfg, residual=cfg.precursor is Method.GPTAQ)


def quantize_layer(w, state: HessianState, cfg: SolveConfig, method: Method | None = None):
    method = Method(method or cfg.method)
    if method is Method.GPTQ:
        return quantize_layer_gptq(w, state, cfg)
    if method is Method.GPTAQ:
        return quantize_layer_gptaq(w, state, cfg)
    return quantize_layer_vlmq(w, state, cfg)


def quantize_layer_naive(w, state: HessianState, cfg: SolveConfig, residual: bool = True):
    """Reference solver: re-inverts the remaining Hessian block at every column.

    Used only to validate the lazy/Cholesky path.
    """
    if cfg.passthrough:
        return _passthrough(w, state)
    w0, perm, hd, r = _prepare(w, state, cfg, residual)
    rows, cols = w0.shape
    W = w0[:, perm].copy()
    Q = np.zeros_like(W)
    quantizer = GroupQuantizer(rows, cols, cfg.bits, cfg.group_size)
    for k in range(cols):
        wc = W[:, k].copy()
        qc = quantize_column_groupwise(W, k, quantizer)
        Q[:, k] = qc
        hinv = inverse_spd(hd[k:, k:])
        coef = (qc - wc)
        delta = np.zeros((rows, cols - k))
        if r is not None:
            bh = r[k, k:] @ hinv
            coef = coef - wc * bh[0]
            delta += np.outer(wc, bh)
        delta += np.outer(coef / hinv[0, 0], hinv[0])
        W[:, k:] += delta
        W[:, k] = qc
    return _finish(w0, Q, quantizer, perm, cfg, state)


def closed_form_update(w, h, rx, q: int, w_hat_q: float, active=None) -> np.ndarray:
    """Single-column update in the two-term form.

    dw = (w_hat_q - w_q)/[H^-1]_qq * [H^-1]_q,:  +  rx [H_-q]^-1

    ``h`` is the (importance-weighted, possibly dampened) Hessian, ``rx`` the
    row vector r G X^T, ``active`` the not-yet-quantized coordinates (all by
    default, must contain q). Coordinates outside ``active`` stay fixed.
    """
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    n = w.size
    active = np.arange(n) if active is None else np.asarray(sorted(active))
    pos = int(np.flatnonzero(active == q)[0])
    hinv = inverse_spd(h[np.ix_(active, active)])
    dw = np.zeros(n)
    dw[active] = (w_hat_q - w[q]) / hinv[pos, pos] * hinv[pos]
    rest = active[active != q]
    if rest.size:
        dw[rest] += rx[rest] @ inverse_spd(h[np.ix_(rest, rest)])
    return dw


def kkt_oracle(w, x_hat, x_fp, g, q: int, w_hat_q: float, fixed=(), ridge: float = 0.0) -> np.ndarray:
    """Brute-force constrained weighted least squares.

    Minimizes ||(dw X_hat - r) sqrt(G)||^2 + ridge ||dw||^2 with dw_q pinned to
    w_hat_q - w_q and dw_j = 0 for j in ``fixed``, by solving the dense normal
    equations over the free coordinates.
    """
    w = np.asarray(w, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x_fp = np.asarray(x_fp, dtype=np.float64)
    g = np.asarray(getattr(g, "diag", g), dtype=np.float64)
    n = w.size
    r = w @ x_fp - w @ x_hat
    delta_q = w_hat_q - w[q]
    free = np.array([j for j in range(n) if j != q and j not in set(fixed)], dtype=int)
    dw = np.zeros(n)
    dw[q] = delta_q
    if free.size == 0:
        return dw
    a = x_hat[free]  # (|F|, N)
    target = r - delta_q * x_hat[q]
    lhs = (a * g) @ a.T + ridge * np.eye(free.size)
    rhs = (a * g) @ target
    if np.linalg.cond(lhs) > 1e14:
        raise SingularSystem("normal equations are numerically singular")
    dw[free] = np.linalg.solve(lhs, rhs)
    return dw


def weighted_objective(dw, x_hat, r, g, ridge: float = 0.0) -> float:
    res = (np.asarray(dw) @ x_hat - r) * np.sqrt(g)
    return float(res @ res + ridge * np.dot(dw, dw))


def hessian_pca_export(state: HessianState, activations, roles, g=None, seed: int = 0) -> list[dict]:
    """Project token columns onto the top-2 principal directions of H."""
    from .calib import vision_mask

    x = np.asarray(activations, dtype=np.float64)
    roles = np.asarray(roles)
    if x.shape[0] != state.dim or x.shape[1] != roles.size:
        raise ShapeMismatch("activations/roles do not match the Hessian")
    g = np.ones(roles.size) if g is None else np.asarray(getattr(g, "diag", g), dtype=np.float64)
    basis = top_principal_components(state.H, 2, seed=seed)
    proj = basis.T @ x
    vis = vision_mask(roles)
    return [
        {
            "pc1": float(proj[0, n]),
            "pc2": float(proj[1, n]),
            "modality": "vision" if vis[n] else "text",
            "importance": float(g[n]),
        }
        for n in range(roles.size)
    ]


def with_method(cfg: SolveConfig, method: Method) -> SolveConfig:
    return replace(cfg, method=method)
