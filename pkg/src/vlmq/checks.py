"""Self-verification suites replayed by ``vlmq check``.

Each suite runs seeded instances against an independent oracle and returns
pass/fail counts per property.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward import block_backward, block_loss
from .model import ATTN_LINEARS, ModelSpec, attention_cache, generate_model
from .quant import fit_params, quant_dequant
from .solver import (
    HessianState,
    SolveConfig,
    accumulate_hessian,
    closed_form_update,
    kkt_oracle,
    quantize_layer_gptaq,
    quantize_layer_gptq,
    quantize_layer_naive,
    quantize_layer_vlmq,
)

SUITES = ("quant", "solver", "backward")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: int
    total: int

    @property
    def ok(self) -> bool:
        return self.passed == self.total


def _quant_suite(seeds: int) -> list[CheckResult]:
    rng = np.random.default_rng(0)
    out = []
    for bits in (2, 3, 4, 8):
        bounded = idem = 0
        for _ in range(seeds):
            v = rng.standard_normal(1000) * rng.uniform(0.1, 10)
            p = fit_params(v, bits)
            _, deq = quant_dequant(v, p)
            bounded += bool(np.all(np.abs(v - deq) <= p.scale / 2 * (1 + 1e-12)))
            idem += bool(np.array_equal(quant_dequant(deq, p)[1], deq))
        out.append(CheckResult("quant", f"bounded_error_b{bits}", bounded, seeds))
        out.append(CheckResult("quant", f"idempotence_b{bits}", idem, seeds))
        const = 0
        for _ in range(seeds):
            c = float(rng.standard_normal() * 10 ** rng.uniform(-3, 3))
            v = np.full(7, c)
            const += bool(np.array_equal(quant_dequant(v, fit_params(v, bits))[1], v))
        out.append(CheckResult("quant", f"constant_rows_b{bits}", const, seeds))
    return out


def _random_instance(rng, ci, n, noise=0.1):
    x_hat = rng.standard_normal((ci, n))
    x_fp = x_hat + noise * rng.standard_normal((ci, n))
    g = rng.uniform(0.01, 10.0, n)
    return x_hat, x_fp, g


def _solver_suite(seeds: int) -> list[CheckResult]:
    rng = np.random.default_rng(1)
    kkt_ok = 0
    for _ in range(seeds):
        ci, n = int(rng.integers(3, 9)), int(rng.integers(4, 17))
        x_hat, x_fp, g = _random_instance(rng, ci, n)
        w = rng.standard_normal(ci)
        h = (x_hat * g) @ x_hat.T
        ridge = 0.01 * np.mean(np.diag(h))
        rx = ((w @ x_fp - w @ x_hat) * g) @ x_hat.T
        q = int(rng.integers(ci))
        target = float(np.round(w[q] * 2) / 2)
        ours = closed_form_update(w, h + ridge * np.eye(ci), rx, q, target)
        ref = kkt_oracle(w, x_hat, x_fp, g, q, target, ridge=ridge)
        kkt_ok += bool(np.linalg.norm(ours - ref) <= 1e-6 * max(np.linalg.norm(ref), 1e-300))

    naive_ok = red_ok = 0
    for _ in range(seeds):
        ci, n, co = int(rng.integers(2, 9)), int(rng.integers(4, 17)), 3
        x_hat, x_fp, g = _random_instance(rng, ci, n)
        w = rng.standard_normal((co, ci))
        cfg = SolveConfig(bits=3, group_size=int(rng.integers(1, ci + 1)), lazy_block=int(rng.integers(1, 5)))
        st = accumulate_hessian(HessianState.empty(ci, weighted=True), x_hat, x_fp, g)
        lazy = quantize_layer_vlmq(w, st, cfg)
        naive = quantize_layer_naive(w, st, cfg)
        naive_ok += bool(np.max(np.abs(lazy.weight - naive.weight)) <= 1e-8)

        unit = accumulate_hessian(HessianState.empty(ci), x_hat, x_fp)
        a = quantize_layer_vlmq(w, unit, cfg)
        b = quantize_layer_gptaq(w, unit, cfg)
        c = quantize_layer_vlmq(w, unit, SolveConfig(**{**cfg.to_dict(), "precursor": "gptq"}))
        d = quantize_layer_gptq(w, unit, cfg)
        red_ok += bool(np.array_equal(a.weight, b.weight) and np.array_equal(c.weight, d.weight))
    return [
        CheckResult("solver", "kkt_oracle_equivalence", kkt_ok, seeds),
        CheckResult("solver", "lazy_vs_naive", naive_ok, seeds),
        CheckResult("solver", "reduction_identity", red_ok, seeds),
    ]


def fd_projection_gradients(x, x_hat, w, spec, step: float = 1e-4) -> dict:
    """Central finite differences of the block loss w.r.t. each projection output."""
    target = attention_cache(x, w, spec).out
    base = attention_cache(x_hat, w, spec)

    def loss(name, offset):
        out = attention_cache(x_hat, w, spec, perturb={name: offset}).out
        return float(np.sum((target - out) ** 2))

    grads = {}
    for name in ATTN_LINEARS:
        shape = getattr(base, "z" + name).shape
        grad = np.zeros(shape)
        for idx in np.ndindex(shape):
            e = np.zeros(shape)
            e[idx] = step
            grad[idx] = (loss(name, e) - loss(name, -e)) / (2 * step)
        grads[name] = grad
    return grads


def first_order_ratio(x, x_hat, w, spec, name, direction, t: float) -> float:
    """Residual ratio R(t)/R(t/2) with R(t) = L(z + t d) - L(z) - t <d, P>."""
    p = block_backward(x, x_hat, w, spec)[name]
    base = block_loss(x, x_hat, w, spec).value
    target = attention_cache(x, w, spec).out

    def resid(tt):
        out = attention_cache(x_hat, w, spec, perturb={name: tt * direction}).out
        return float(np.sum((target - out) ** 2)) - base - tt * float(np.sum(direction * p))

    return resid(t) / resid(t / 2)


def _backward_suite(seeds: int) -> list[CheckResult]:
    rng = np.random.default_rng(2)
    fd_ok = ratio_ok = 0
    for s in range(seeds):
        heads = int(rng.choice([1, 2]))
        spec = ModelSpec(num_layers=1, d_model=4 * heads, num_heads=heads, d_ff=8, seed=s)
        w = generate_model(spec)[0]
        n = int(rng.integers(2, 7))
        x = rng.standard_normal((spec.d_model, n))
        x_hat = x + 0.1 * rng.standard_normal(x.shape)
        fd = fd_projection_gradients(x, x_hat, w, spec)
        an = block_backward(x, x_hat, w, spec)
        fd_ok += all(np.max(np.abs(fd[k] - an[k])) <= 1e-5 for k in ATTN_LINEARS)
        ratios = [
            first_order_ratio(x, x_hat, w, spec, k, rng.standard_normal(an[k].shape), 1e-2)
            for k in ATTN_LINEARS
        ]
        ratio_ok += all(3.5 <= r <= 4.5 for r in ratios)
    return [
        CheckResult("backward", "finite_difference", fd_ok, seeds),
        CheckResult("backward", "first_order_ratio", ratio_ok, seeds),
    ]


def run_suite(suite: str = "all", seeds: int = 20) -> list[CheckResult]:
    names = SUITES if suite == "all" else (suite,)
    runners = {"quant": _quant_suite, "solver": _solver_suite, "backward": _backward_suite}
    results = []
    for name in names:
        if name not in runners:
            raise ValueError(f"unknown suite {name!r}")
        results.extend(runners[name](seeds))
    return results
