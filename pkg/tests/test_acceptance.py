"""Exit criteria. Each test registers one PASS/FAIL line shown in the terminal summary."""

import json
import time

import numpy as np
import pytest

from vlmq.backward import block_backward, block_loss, manual_importance
from vlmq.calib import TokenRole, generate_batch
from vlmq.cli import main
from vlmq.model import ATTN_LINEARS, ModelSpec, attention_cache, generate_model
from vlmq.pipeline import PipelineConfig, quantize_model, quantized_tensors
from vlmq.quant import fit_rows, quantize_array
from vlmq.solver import (
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

pytestmark = pytest.mark.acceptance

TOY = ModelSpec(num_layers=2, d_model=16, num_heads=2, d_ff=32, seed=0)


def toy_batch(spec, seed):
    # 8 text + 40 vision = 48 tokens per sample
    return generate_batch(spec, num_samples=8, n_text=8, n_vision=40, redundancy=0.9, seed=seed)


def quantize(spec, layers, batch, **kw):
    solve = kw.pop("solve", {})
    return quantize_model(spec, layers, batch, PipelineConfig(solve=SolveConfig(**solve), **kw))


def tensors_identical(a, b):
    ta, tb = quantized_tensors(a), quantized_tensors(b)
    return list(ta) == list(tb) and all(
        ta[k].dtype == tb[k].dtype and ta[k].tobytes() == tb[k].tobytes() for k in ta
    )


def test_kkt_oracle_equivalence(record_criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        ci = int(rng.integers(3, 9))
        n = int(rng.integers(4, 17))
        x_hat = rng.standard_normal((ci, n))
        x_fp = x_hat + 0.1 * rng.standard_normal((ci, n))
        g = rng.uniform(0.01, 10.0, n)
        w = rng.standard_normal(ci)
        # a random prefix of coordinates is already quantized (fixed)
        order = rng.permutation(ci)
        k = int(rng.integers(0, ci))
        fixed, active = order[:k], np.sort(order[k:])
        q = int(rng.choice(active))
        target = float(np.round(w[q] * 4) / 4)
        h = (x_hat * g) @ x_hat.T
        # N < Ci leaves H singular; both sides solve the same ridge-regularized problem
        ridge = 0.01 * float(np.mean(np.diag(h)))
        rx = ((w @ x_fp - w @ x_hat) * g) @ x_hat.T
        ours = closed_form_update(w, h + ridge * np.eye(ci), rx, q, target, active=active)
        ref = kkt_oracle(w, x_hat, x_fp, g, q, target, fixed=tuple(fixed), ridge=ridge)
        worst = max(worst, np.linalg.norm(ours - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10
    record_criterion(1, "KKT-oracle equivalence", ok, f"max rel err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_reduction_identities(record_criterion):
    t0 = time.perf_counter()
    layers = generate_model(TOY)
    batch = toy_batch(TOY, seed=11)
    assert batch.samples[0].n_tokens == 48
    unit = dict(importance_source="manual", li_ratio=0.0, li_value=1.0)
    vlmq_a, _ = quantize(TOY, layers, batch, solve={"method": "vlmq", "precursor": "gptaq"}, **unit)
    gptaq, _ = quantize(TOY, layers, batch, solve={"method": "gptaq"})
    vlmq_q, _ = quantize(TOY, layers, batch, solve={"method": "vlmq", "precursor": "gptq"}, **unit)
    gptq, _ = quantize(TOY, layers, batch, solve={"method": "gptq"})
    same_a = tensors_identical(vlmq_a, gptaq)
    same_q = tensors_identical(vlmq_q, gptq)
    elapsed = time.perf_counter() - t0
    ok = same_a and same_q and elapsed < 30
    record_criterion(2, "reduction identities", ok,
                     f"VLMQ(G=I)==GPTAQ {same_a}, VLMQ(GPTQ,G=I)==GPTQ {same_q}, {elapsed:.2f}s")
    assert ok


def test_uniform_scale_invariance(record_criterion):
    layers = generate_model(TOY)
    batch = toy_batch(TOY, seed=12)
    base, _ = quantize(TOY, layers, batch, solve={"method": "vlmq"})
    same = {}
    for c in (0.01, 3.0, 1000.0):
        scaled, _ = quantize(TOY, layers, batch, solve={"method": "vlmq"}, importance_scale=c)
        same[c] = all(
            np.array_equal(base.results[l][n].codes, scaled.results[l][n].codes)
            and np.array_equal(base.results[l][n].weight, scaled.results[l][n].weight)
            for l in range(TOY.num_layers)
            for n in base.results[l]
        )
    ok = all(same.values())
    record_criterion(3, "uniform-scale invariance", ok, ", ".join(f"c={c:g}: {v}" for c, v in same.items()))
    assert ok


def _perturbed_loss(x, x_hat, w, spec, name, offset, target):
    out = attention_cache(x_hat, w, spec, perturb={name: offset}).out
    return float(np.sum((target - out) ** 2))


def test_gradient_validation(record_criterion):
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    worst_fd, ratios = 0.0, []
    step = 1e-4
    for s in range(20):
        ci = int(rng.choice([4, 8, 12, 16]))
        heads = int(rng.choice([h for h in (1, 2, 4) if ci % h == 0 and (ci // h) % 2 == 0]))
        spec = ModelSpec(1, ci, heads, 2 * ci, rope_enabled=bool(s % 2), seed=s)
        w = generate_model(spec)[0]
        n = int(rng.integers(2, 9))
        x = rng.standard_normal((ci, n))
        x_hat = x + 0.1 * rng.standard_normal(x.shape)
        target = attention_cache(x, w, spec).out
        grads = block_backward(x, x_hat, w, spec)
        base = block_loss(x, x_hat, w, spec).value
        for name in ATTN_LINEARS:
            p = grads[name]
            for idx in np.ndindex(p.shape):
                e = np.zeros(p.shape)
                e[idx] = step
                fd = (_perturbed_loss(x, x_hat, w, spec, name, e, target)
                      - _perturbed_loss(x, x_hat, w, spec, name, -e, target)) / (2 * step)
                worst_fd = max(worst_fd, abs(fd - p[idx]))
            d = rng.standard_normal(p.shape)

            def resid(t):
                return _perturbed_loss(x, x_hat, w, spec, name, t * d, target) - base - t * float(np.sum(d * p))

            ratios.append(resid(1e-2) / resid(5e-3))
    elapsed = time.perf_counter() - t0
    ok = worst_fd <= 1e-5 and all(3.5 <= r <= 4.5 for r in ratios) and elapsed < 60
    record_criterion(4, "gradient validation", ok,
                     f"max FD err {worst_fd:.2e}, ratio range [{min(ratios):.3f}, {max(ratios):.3f}], {elapsed:.2f}s")
    assert ok


def test_quantizer_contract(record_criterion):
    rng = np.random.default_rng(5)
    details, ok = [], True
    for bits in (2, 3, 4, 8):
        v = rng.standard_normal((100, 1000)) * rng.uniform(0.01, 100, (100, 1))
        s, z = fit_rows(v, bits)
        _, deq = quantize_array(v, s[:, None], z[:, None], bits)
        bounded = bool(np.all(np.abs(v - deq) <= s[:, None] / 2))
        idem = np.array_equal(quantize_array(deq, s[:, None], z[:, None], bits)[1], deq)
        c = rng.standard_normal(2000) * 10.0 ** rng.uniform(-6, 6, 2000)
        rows = np.repeat(c[:, None], 5, axis=1)
        sc, zc = fit_rows(rows, bits)
        const = np.array_equal(quantize_array(rows, sc[:, None], zc[:, None], bits)[1], rows)
        ok &= bounded and idem and const
        details.append(f"B={bits} bounded={bounded} idempotent={idem} constants={const}")
    record_criterion(5, "quantizer contract", ok, "; ".join(details))
    assert ok


def test_cholesky_path_equivalence(record_criterion):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        ci = int(rng.integers(1, 9))
        n = int(rng.integers(2, 20))
        x_hat = rng.standard_normal((ci, n))
        x_fp = x_hat + 0.1 * rng.standard_normal((ci, n))
        g = rng.uniform(0.01, 10.0, n)
        w = rng.standard_normal((int(rng.integers(1, 6)), ci))
        gs = int(rng.integers(1, ci + 1)) if seed % 3 else None
        cfg = SolveConfig(method="vlmq", bits=int(rng.choice([2, 3, 4])), group_size=gs,
                          act_order=bool(seed % 2), lazy_block=int(rng.integers(1, 5)))
        state = accumulate_hessian(HessianState.empty(ci, weighted=True), x_hat, x_fp, g)
        for residual in (True, False):
            c = SolveConfig(**{**cfg.to_dict(), "precursor": "gptaq" if residual else "gptq"})
            lazy = quantize_layer_vlmq(w, state, c)
            naive = quantize_layer_naive(w, state, c, residual=residual)
            worst = max(worst, float(np.max(np.abs(lazy.weight - naive.weight))))
    ok = worst <= 1e-8
    record_criterion(6, "Cholesky-path equivalence", ok, f"max abs diff {worst:.2e} over 50 seeds")
    assert ok


def test_asymmetric_objective_benefit(record_criterion):
    rng = np.random.default_rng(7)
    wins = 0
    for _ in range(200):
        # one output row of a Ci=4 layer, N=8 tokens
        w = rng.standard_normal((1, 4))
        x_fp = rng.standard_normal((4, 8))
        x_hat = x_fp + 0.05 * rng.standard_normal(x_fp.shape)
        state = accumulate_hessian(HessianState.empty(4), x_hat, x_fp)
        cfg = SolveConfig(bits=3)
        a = quantize_layer_gptaq(w, state, cfg).weight
        b = quantize_layer_gptq(w, state, cfg).weight
        wins += np.sum((a @ x_hat - w @ x_fp) ** 2) <= np.sum((b @ x_hat - w @ x_fp) ** 2)
    ok = wins >= 180
    record_criterion(7, "asymmetric-objective benefit", ok, f"GPTAQ <= GPTQ in {wins}/200 trials")
    assert ok


def test_redundancy_benefit(record_criterion, tmp_path):
    per_seed = []
    for seed in range(20):
        spec = ModelSpec(num_layers=2, d_model=16, num_heads=2, d_ff=32, seed=seed)
        layers = generate_model(spec)
        batch = toy_batch(spec, seed=1000 + seed)
        _, rv = quantize(spec, layers, batch, solve={"method": "vlmq", "bits": 3}, seed=seed)
        _, rg = quantize(spec, layers, batch, solve={"method": "gptq", "bits": 3}, seed=seed)
        # the precursor alone, for context only
        _, ra = quantize(spec, layers, batch, solve={"method": "gptaq", "bits": 3}, seed=seed)
        per_seed.append({"seed": seed, "vlmq": rv["total_block_loss"], "gptq": rg["total_block_loss"],
                         "gptaq": ra["total_block_loss"]})
    wins = sum(r["vlmq"] <= r["gptq"] for r in per_seed)
    report = {"criterion": "redundancy benefit", "redundancy": 0.9, "bits": 3, "wins": wins, "per_seed": per_seed}
    (tmp_path / "redundancy_report.json").write_text(json.dumps(report, indent=2))
    ok = wins >= 14
    vs_gptaq = sum(r["vlmq"] <= r["gptaq"] for r in per_seed)
    lines = [f"seed {r['seed']:2d}: vlmq {r['vlmq']:.5f}  gptq {r['gptq']:.5f}  (gptaq {r['gptaq']:.5f})"
             for r in per_seed]
    record_criterion(8, "redundancy benefit", ok,
                     f"VLMQ <= GPTQ in {wins}/20 seeds (VLMQ <= GPTAQ in {vs_gptaq}/20, informational)", lines)
    assert ok


def test_pilot_study_mechanics(record_criterion):
    rng = np.random.default_rng(9)
    exact_counts, worst = True, 0.0
    for n_v in (1, 7, 40, 101, 256):
        roles = np.array([TokenRole.SYS] * 5 + [TokenRole.IMG] * n_v + [TokenRole.ANS] * 6, dtype=np.uint8)
        g = manual_importance(roles, 0.5, 0.01, seed=n_v).diag
        marked = np.flatnonzero(g == 0.01)
        exact_counts &= marked.size == n_v // 2 and bool(np.all(roles[marked] == TokenRole.IMG))
        x = rng.standard_normal((8, roles.size))
        h = accumulate_hessian(HessianState.empty(8, weighted=True), x, None, g).H
        direct = np.zeros((8, 8))
        for i in range(roles.size):
            direct += g[i] * np.outer(x[:, i], x[:, i])
        worst = max(worst, float(np.max(np.abs(h - direct))))
    ok = exact_counts and worst <= 1e-10
    record_criterion(9, "pilot-study mechanics", ok, f"exact counts {exact_counts}, max |H - direct| {worst:.2e}")
    assert ok


def test_cli_determinism(record_criterion, tmp_path, monkeypatch):
    spec = '{"num_layers": 2, "d_model": 16, "num_heads": 2, "d_ff": 32}'
    assert main(["gen-model", "--spec", spec, "--out", str(tmp_path / "m"), "--seed", "4"]) == 0
    assert main(["gen-calib", "--model", str(tmp_path / "m"), "--out", str(tmp_path / "c"), "--samples", "8",
                 "--text", "8", "--vision", "40", "--redundancy", "0.9", "--seed", "5"]) == 0
    outputs = []
    for threads in ("1", "8"):
        monkeypatch.setenv("VLMQ_THREADS", threads)
        for run in range(2):
            out = tmp_path / f"q{threads}_{run}"
            code = main(["quantize", "--model", str(tmp_path / "m"), "--calib", str(tmp_path / "c"),
                         "--method", "vlmq", "--bits", "3", "--seed", "3",
                         "--out", str(out), "--report", str(out) + ".json"])
            assert code == 0
            outputs.append(tuple((out / f).read_bytes() for f in ("manifest.json", "data.bin"))
                           + (open(str(out) + ".json", "rb").read(),))
    ok = all(o == outputs[0] for o in outputs)
    record_criterion(10, "determinism", ok, f"{len(outputs)} runs (VLMQ_THREADS 1 and 8) byte-identical: {ok}")
    assert ok
