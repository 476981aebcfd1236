"""Toy decoder-only backbone used as the calibration target.

Activations are column-major in the token sense: ``X`` has shape
(d_model, N), one column per token. Each decoding layer is

    A = X + o @ MHSA(RMSNorm(X))              (attention stream)
    Y = A + down @ (silu(gate @ n) * (up @ n)),  n = RMSNorm(A)
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpec, ShapeMismatch

ATTN_LINEARS = ("q", "k", "v", "o")
FFN_LINEARS = ("up", "gate", "down")
LINEARS = ATTN_LINEARS + FFN_LINEARS


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    d_model: int
    num_heads: int
    d_ff: int
    norm_eps: float = 1e-6
    rope_enabled: bool = False
    rope_base: float = 10000.0
    causal: bool = True
    seed: int = 0
    head_dim: int | None = None

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise InvalidSpec(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise InvalidSpec(
                f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}"
            )
        hd = self.d_model // self.num_heads
        if self.head_dim is not None and self.head_dim != hd:
            raise InvalidSpec(f"head_dim must equal d_model / num_heads = {hd}")
        object.__setattr__(self, "head_dim", hd)
        if self.rope_enabled and hd % 2:
            raise InvalidSpec("RoPE needs an even head_dim")
        if not self.norm_eps > 0:
            raise InvalidSpec("norm_eps must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidSpec(f"unknown spec fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc


@dataclass
class LayerWeights:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    up: np.ndarray
    gate: np.ndarray
    down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    def linear(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def replace(self, **changes) -> "LayerWeights":
        return dataclasses.replace(self, **changes)

    def check(self, spec: ModelSpec) -> None:
        ci, ff = spec.d_model, spec.d_ff
        shapes = {
            "q": (ci, ci), "k": (ci, ci), "v": (ci, ci), "o": (ci, ci),
            "up": (ff, ci), "gate": (ff, ci), "down": (ci, ff),
            "attn_norm": (ci,), "ffn_norm": (ci,),
        }
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeMismatch(f"{name} has non-finite entries")


@dataclass
class ActivationTrace:
    """Inputs seen by each linear during one captured forward pass."""

    inputs: dict = field(default_factory=dict)
    attn_out: np.ndarray | None = None
    layer_out: np.ndarray | None = None
    branch: str = "fp"


@dataclass
class AttentionCache:
    xn: np.ndarray
    zq: np.ndarray
    zk: np.ndarray
    zv: np.ndarray
    q_rot: np.ndarray
    k_rot: np.ndarray
    probs: np.ndarray  # (heads, N, N), probs[h, i, j] = weight of key j for query i
    ctx: np.ndarray
    zo: np.ndarray
    out: np.ndarray


def generate_model(spec: ModelSpec) -> list[LayerWeights]:
    rng = np.random.default_rng(spec.seed)
    ci, ff = spec.d_model, spec.d_ff

    def proj(rows, cols):
        return rng.standard_normal((rows, cols)) / np.sqrt(cols)

    layers = []
    for _ in range(spec.num_layers):
        layers.append(
            LayerWeights(
                q=proj(ci, ci), k=proj(ci, ci), v=proj(ci, ci), o=proj(ci, ci),
                up=proj(ff, ci), gate=proj(ff, ci), down=proj(ci, ff),
                attn_norm=np.ones(ci), ffn_norm=np.ones(ci),
            )
        )
    return layers


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=0, keepdims=True) + eps) * gain[:, None]


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rope_angles(spec: ModelSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    half = spec.head_dim // 2
    inv_freq = spec.rope_base ** (-np.arange(half) / half)
    theta = np.outer(inv_freq, np.arange(n))  # (half, N)
    return np.cos(theta), np.sin(theta)


def apply_rope(z: np.ndarray, spec: ModelSpec, inverse: bool = False) -> np.ndarray:
    """Rotate-half RoPE applied per head to a stacked (d_model, N) projection."""
    if not spec.rope_enabled:
        return z
    hd, half = spec.head_dim, spec.head_dim // 2
    cos, sin = _rope_angles(spec, z.shape[1])
    if inverse:
        sin = -sin
    out = np.empty_like(z)
    for h in range(spec.num_heads):
        a = z[h * hd: h * hd + half]
        b = z[h * hd + half: (h + 1) * hd]
        out[h * hd: h * hd + half] = a * cos - b * sin
        out[h * hd + half: (h + 1) * hd] = b * cos + a * sin
    return out


def _check_input(x: np.ndarray, spec: ModelSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != spec.d_model:
        raise ShapeMismatch(f"expected activations of shape ({spec.d_model}, N), got {x.shape}")
    return x


def attention_cache(x, w: LayerWeights, spec: ModelSpec, perturb: dict | None = None) -> AttentionCache:
    """Full attention-stream forward keeping every intermediate.

    ``perturb`` maps a projection name to an additive offset on that
    projection's output (used by gradient checks).
    """
    x = _check_input(x, spec)
    perturb = perturb or {}
    n = x.shape[1]
    hd = spec.head_dim
    xn = rms_norm(x, w.attn_norm, spec.norm_eps)
    zq = w.q @ xn + perturb.get("q", 0.0)
    zk = w.k @ xn + perturb.get("k", 0.0)
    zv = w.v @ xn + perturb.get("v", 0.0)
    q_rot = apply_rope(zq, spec)
    k_rot = apply_rope(zk, spec)

    mask = np.triu(np.ones((n, n), dtype=bool), 1) if spec.causal else None
    probs = np.empty((spec.num_heads, n, n))
    ctx = np.empty_like(zv)
    for h in range(spec.num_heads):
        rows = slice(h * hd, (h + 1) * hd)
        scores = q_rot[rows].T @ k_rot[rows] / np.sqrt(hd)
        if mask is not None:
            scores = np.where(mask, -np.inf, scores)
        scores = scores - scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=1, keepdims=True)
        probs[h] = p
        ctx[rows] = zv[rows] @ p.T
    zo = w.o @ ctx + perturb.get("o", 0.0)
    return AttentionCache(xn, zq, zk, zv, q_rot, k_rot, probs, ctx, zo, x + zo)


def attn_forward(x, w: LayerWeights, spec: ModelSpec, capture: bool = False, branch: str = "fp"):
    cache = attention_cache(x, w, spec)
    trace = ActivationTrace(branch=branch)
    if capture:
        trace.inputs = {"q": cache.xn, "k": cache.xn, "v": cache.xn, "o": cache.ctx}
    trace.attn_out = cache.out
    return cache.out, trace


def mlp_forward(x, w: LayerWeights, spec: ModelSpec, capture: bool = False, branch: str = "fp"):
    x = _check_input(x, spec)
    xn = rms_norm(x, w.ffn_norm, spec.norm_eps)
    hidden = silu(w.gate @ xn) * (w.up @ xn)
    out = x + w.down @ hidden
    trace = ActivationTrace(branch=branch)
    if capture:
        trace.inputs = {"up": xn, "gate": xn, "down": hidden}
    return out, trace


def layer_forward(x, w: LayerWeights, spec: ModelSpec, capture: bool = False, branch: str = "fp"):
    a, t_attn = attn_forward(x, w, spec, capture, branch)
    y, t_mlp = mlp_forward(a, w, spec, capture, branch)
    trace = ActivationTrace({**t_attn.inputs, **t_mlp.inputs}, a, y, branch)
    return y, trace


def model_forward(x, layers: list[LayerWeights], spec: ModelSpec) -> np.ndarray:
    for w in layers:
        x, _ = layer_forward(x, w, spec)
    return x
