"""Synthetic calibration batches with text/vision role structure."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import InvalidRatio, ShapeMismatch, ValidationError


class TokenRole(IntEnum):
    SYS = 0
    IMG = 1
    INS = 2
    ANS = 3

    @property
    def is_vision(self) -> bool:
        return self is TokenRole.IMG


def vision_mask(roles) -> np.ndarray:
    return np.asarray(roles) == TokenRole.IMG


@dataclass
class CalibrationSample:
    embeddings: np.ndarray  # (d_model, N)
    roles: np.ndarray  # uint8 role codes, length N

    def __post_init__(self):
        self.roles = np.asarray(self.roles, dtype=np.uint8)
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] != self.roles.size:
            raise ShapeMismatch("roles length must match the number of token columns")

    @property
    def n_tokens(self) -> int:
        return self.roles.size

    @property
    def n_vision(self) -> int:
        return int(vision_mask(self.roles).sum())

    @property
    def n_text(self) -> int:
        return self.n_tokens - self.n_vision


@dataclass
class CalibrationBatch:
    samples: list

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def d_model(self) -> int:
        return self.samples[0].embeddings.shape[0]

    @property
    def total_tokens(self) -> int:
        return sum(s.n_tokens for s in self.samples)

    def concat_roles(self) -> np.ndarray:
        return np.concatenate([s.roles for s in self.samples])


def cluster_count(redundancy: float, n_vision: int) -> int:
    # small slack so e.g. (1 - 0.75) * 100 is not pushed past 25 by rounding
    return max(1, math.ceil((1.0 - redundancy) * n_vision - 1e-9))


def _text_blocks(n_text: int) -> tuple[int, int, int]:
    sys_n = n_text // 3
    ins_n = n_text // 3
    return sys_n, ins_n, n_text - sys_n - ins_n


def generate_batch(
    d_model,
    num_samples: int,
    n_text: int,
    n_vision: int,
    redundancy: float,
    seed: int = 0,
    jitter: float = 0.01,
) -> CalibrationBatch:
    """Embedded sequences laid out as [sys | img | ins | ans].

    Text tokens are i.i.d. standard normal. Vision tokens are drawn around
    ``ceil((1 - redundancy) * n_vision)`` cluster centres with isotropic jitter,
    so high redundancy yields near-duplicate vision tokens. ``d_model`` may be
    an int or anything with a ``d_model`` attribute.
    """
    d = int(getattr(d_model, "d_model", d_model))
    if not 0.0 <= redundancy <= 1.0:
        raise InvalidRatio(f"redundancy must be in [0, 1], got {redundancy}")
    if n_text < 0 or n_vision < 0 or n_text + n_vision == 0:
        raise ValidationError("need a positive number of tokens per sample")
    if num_samples < 1:
        raise ValidationError("num_samples must be >= 1")

    rng = np.random.default_rng(seed)
    vision_offset = rng.standard_normal(d)
    sys_n, ins_n, ans_n = _text_blocks(n_text)
    samples = []
    for _ in range(num_samples):
        text = rng.standard_normal((d, n_text))
        if n_vision:
            k = cluster_count(redundancy, n_vision)
            centers = vision_offset[:, None] + rng.standard_normal((d, k))
            assign = np.concatenate([np.arange(k), rng.integers(0, k, n_vision - k)])
            rng.shuffle(assign)
            vision = centers[:, assign] + jitter * rng.standard_normal((d, n_vision))
        else:
            vision = np.zeros((d, 0))
        emb = np.concatenate(
            [text[:, :sys_n], vision, text[:, sys_n:sys_n + ins_n], text[:, sys_n + ins_n:]], axis=1
        )
        roles = np.concatenate(
            [
                np.full(sys_n, TokenRole.SYS),
                np.full(n_vision, TokenRole.IMG),
                np.full(ins_n, TokenRole.INS),
                np.full(ans_n, TokenRole.ANS),
            ]
        ).astype(np.uint8)
        samples.append(CalibrationSample(emb, roles))
    return CalibrationBatch(samples)


def split_modality(x, roles) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    roles = np.asarray(roles)
    if x.ndim != 2 or x.shape[1] != roles.size:
        raise ShapeMismatch(f"{roles.size} roles for {x.shape[-1]} token columns")
    vis = vision_mask(roles)
    return x[:, ~vis], x[:, vis]
