"""Layer-by-layer calibration of the toy decoder.

For each decoding layer, two branches are propagated: the full-precision
model (X) and the model whose earlier layers are already quantized (X_hat).
When the method is VLMQ, one block backward per layer produces per-projection
token importance before any of the layer's linears are touched. Attention
linears are then calibrated in two stages (q/k/v, re-forward, o), and FFN
linears likewise (up/gate, re-forward, down).
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backward import (
    NORM_KINDS,
    block_backward,
    gradients_to_importance,
    manual_importance,
)
from .calib import CalibrationBatch, vision_mask
from .container import write_container
from .errors import InvalidConfig, ShapeMismatch, VLMQError
from .model import (
    ATTN_LINEARS,
    LINEARS,
    LayerWeights,
    ModelSpec,
    attention_cache,
    layer_forward,
    mlp_forward,
    rms_norm,
    silu,
)
from .solver import (
    HessianState,
    Method,
    QuantizedLayerResult,
    SolveConfig,
    accumulate_hessian,
    hessian_pca_export,
    quantize_layer,
)

IMPORTANCE_SOURCES = ("gradient", "manual")


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("VLMQ_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


@dataclass(frozen=True)
class PipelineConfig:
    solve: SolveConfig = field(default_factory=SolveConfig)
    bias_layers: frozenset = frozenset(ATTN_LINEARS)
    norm_kind: str = "l1"
    importance_source: str = "gradient"
    li_ratio: float = 0.0
    li_value: float = 1.0
    importance_scale: float = 1.0  # uniform rescaling of G; the result must not depend on it
    seed: int = 0
    threads: int | None = None
    timings: bool = False
    pca: bool = False

    def __post_init__(self):
        object.__setattr__(self, "bias_layers", frozenset(self.bias_layers))
        if not self.bias_layers <= set(ATTN_LINEARS):
            raise InvalidConfig("bias_layers must be a subset of {q, k, v, o}")
        if self.norm_kind not in NORM_KINDS:
            raise InvalidConfig(f"norm_kind must be one of {NORM_KINDS}")
        if self.importance_source not in IMPORTANCE_SOURCES:
            raise InvalidConfig(f"importance_source must be one of {IMPORTANCE_SOURCES}")
        if not self.importance_scale > 0:
            raise InvalidConfig("importance_scale must be positive")

    def method_for(self, name: str) -> Method:
        m = self.solve.method
        if m is Method.VLMQ:
            return Method.VLMQ if name in self.bias_layers else self.solve.precursor
        return m

    def needs_residual(self, name: str) -> bool:
        m = self.method_for(name)
        return m is Method.GPTAQ or (m is Method.VLMQ and self.solve.precursor is Method.GPTAQ)

    def uses_importance(self) -> bool:
        return self.solve.method is Method.VLMQ and bool(self.bias_layers)

    def to_dict(self) -> dict:
        return {
            "solve": self.solve.to_dict(),
            "bias_layers": "".join(n for n in ATTN_LINEARS if n in self.bias_layers),
            "norm_kind": self.norm_kind,
            "importance_source": self.importance_source,
            "li_ratio": self.li_ratio,
            "li_value": self.li_value,
            "importance_scale": self.importance_scale,
            "seed": self.seed,
        }


@dataclass
class QuantizedModel:
    spec: ModelSpec
    layers: list
    results: list  # per layer: {linear name: QuantizedLayerResult}
    config: dict


def normalize_importance(g: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Rescale to unit mean and round to float32 precision.

    The rounding makes the output identical for any uniform rescaling of the
    input, so Hessians built from G and cG agree bit for bit.
    """
    g = np.asarray(g, dtype=np.float64) * scale
    g = g / np.mean(g)
    return g.astype(np.float32).astype(np.float64)


class _Mapper:
    def __init__(self, threads: int):
        self.threads = threads

    def __call__(self, fn, items):
        items = list(items)
        if self.threads <= 1 or len(items) <= 1:
            return [fn(*it) for it in items]
        with ThreadPoolExecutor(max_workers=min(self.threads, len(items))) as pool:
            return list(pool.map(lambda it: fn(*it), items))


def _check_inputs(spec: ModelSpec, layers, batch: CalibrationBatch):
    if len(layers) != spec.num_layers:
        raise ShapeMismatch(f"spec has {spec.num_layers} layers, model has {len(layers)}")
    for w in layers:
        w.check(spec)
    if batch.d_model != spec.d_model:
        raise ShapeMismatch(f"calibration width {batch.d_model} != d_model {spec.d_model}")


def _importance_stats(g: np.ndarray, roles: np.ndarray) -> dict:
    vis = vision_mask(roles)
    return {
        "min": float(g.min()),
        "mean": float(g.mean()),
        "max": float(g.max()),
        "text_mean": float(g[~vis].mean()) if (~vis).any() else None,
        "vision_mean": float(g[vis].mean()) if vis.any() else None,
    }


def _layer_importance(l, w, spec, xs_fp, xs_q, batch, cfg, mapper) -> dict:
    """Per-projection normalized importance over the concatenated batch."""
    if cfg.importance_source == "manual":
        g = np.concatenate(
            [
                manual_importance(s.roles, cfg.li_ratio, cfg.li_value, seed=(cfg.seed, i)).diag
                for i, s in enumerate(batch.samples)
            ]
        )
        g = normalize_importance(g, cfg.importance_scale)
        return {name: g for name in ATTN_LINEARS}
    grads = mapper(lambda x, xq: block_backward(x, xq, w, spec), zip(xs_fp, xs_q))
    out = {}
    for name in ATTN_LINEARS:
        p = np.concatenate([gr[name] for gr in grads], axis=1)
        g = gradients_to_importance(p, cfg.norm_kind).diag
        out[name] = normalize_importance(g, cfg.importance_scale)
    return out


def _calibrate(names, w_fp, inputs_fp, inputs_q, g_all, offsets, cfg, l, errors_out):
    """Accumulate Hessians and quantize a set of linears sharing one input."""
    results = {}
    for name in names:
        weighted = cfg.method_for(name) is Method.VLMQ
        g = g_all.get(name) if weighted else None
        dim = inputs_q[0].shape[0]
        state = HessianState.empty(dim, residual=cfg.needs_residual(name), weighted=weighted)
        for s, (xf, xq) in enumerate(zip(inputs_fp, inputs_q)):
            gs = g[offsets[s]:offsets[s + 1]] if g is not None else None
            accumulate_hessian(state, xq, xf if state.R is not None else None, gs)
        weight = w_fp.linear(name)
        try:
            res = quantize_layer(weight, state, cfg.solve, cfg.method_for(name))
        except VLMQError as exc:
            raise type(exc)(f"layer {l}, linear {name}: {exc}") from exc
        results[name] = res

        unweighted = weighted_err = 0.0
        for s, (xf, xq) in enumerate(zip(inputs_fp, inputs_q)):
            diff = res.weight @ xq - weight @ xf
            col = np.sum(diff * diff, axis=0)
            unweighted += float(col.sum())
            gs = g[offsets[s]:offsets[s + 1]] if g is not None else None
            weighted_err += float(col @ gs) if gs is not None else float(col.sum())
        errors_out[name] = {
            "method": cfg.method_for(name).value,
            "unweighted_error": unweighted,
            "weighted_error": weighted_err,
        }
    return results


def quantize_model(spec: ModelSpec, layers: list[LayerWeights], batch: CalibrationBatch, cfg: PipelineConfig):
    _check_inputs(spec, layers, batch)
    mapper = _Mapper(resolve_threads(cfg.threads))
    roles = batch.concat_roles()
    offsets = np.concatenate([[0], np.cumsum([s.n_tokens for s in batch.samples])])
    xs_fp = [s.embeddings.astype(np.float64) for s in batch.samples]
    xs_q = [x.copy() for x in xs_fp]
    timings = {"forward": 0.0, "backward": 0.0, "solve": 0.0}

    q_layers, all_results, layer_reports = [], [], []
    for l, w in enumerate(layers):
        report = {"layer": l, "linears": {}}

        t0 = time.perf_counter()
        g_all = {}
        if cfg.uses_importance():
            g_all = _layer_importance(l, w, spec, xs_fp, xs_q, batch, cfg, mapper)
            report["importance"] = {n: _importance_stats(g_all[n], roles) for n in ATTN_LINEARS}
        timings["backward"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        c_fp = mapper(lambda x: attention_cache(x, w, spec), ((x,) for x in xs_fp))
        c_q = mapper(lambda x: attention_cache(x, w, spec), ((x,) for x in xs_q))
        timings["forward"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        res = _calibrate(
            ("q", "k", "v"), w, [c.xn for c in c_fp], [c.xn for c in c_q],
            g_all, offsets, cfg, l, report["linears"],
        )
        timings["solve"] += time.perf_counter() - t0

        if cfg.pca:
            name = "k"
            state = HessianState.empty(spec.d_model, residual=False)
            gk = g_all.get(name) if cfg.method_for(name) is Method.VLMQ else None
            for s, c in enumerate(c_q):
                accumulate_hessian(state, c.xn, None, gk[offsets[s]:offsets[s + 1]] if gk is not None else None)
            report["pca"] = {
                "linear": name,
                "points": hessian_pca_export(
                    state, np.concatenate([c.xn for c in c_q], axis=1), roles, gk, seed=cfg.seed
                ),
            }

        t0 = time.perf_counter()
        w_qkv = w.replace(q=res["q"].weight, k=res["k"].weight, v=res["v"].weight)
        c_q2 = mapper(lambda x: attention_cache(x, w_qkv, spec), ((x,) for x in xs_q))
        timings["forward"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        res.update(
            _calibrate(("o",), w, [c.ctx for c in c_fp], [c.ctx for c in c_q2], g_all, offsets, cfg, l, report["linears"])
        )
        timings["solve"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        w_attn = w_qkv.replace(o=res["o"].weight)
        a_fp = [c.out for c in c_fp]
        a_q = [x + w_attn.o @ c.ctx for x, c in zip(xs_q, c_q2)]
        report["block_loss"] = float(sum(np.sum((a - b) ** 2) for a, b in zip(a_fp, a_q)))

        n_fp = [rms_norm(a, w.ffn_norm, spec.norm_eps) for a in a_fp]
        n_q = [rms_norm(a, w.ffn_norm, spec.norm_eps) for a in a_q]
        timings["forward"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        res.update(_calibrate(("up", "gate"), w, n_fp, n_q, {}, offsets, cfg, l, report["linears"]))
        timings["solve"] += time.perf_counter() - t0

        h_fp = [silu(w.gate @ n) * (w.up @ n) for n in n_fp]
        h_q = [silu(res["gate"].weight @ n) * (res["up"].weight @ n) for n in n_q]
        t0 = time.perf_counter()
        res.update(_calibrate(("down",), w, h_fp, h_q, {}, offsets, cfg, l, report["linears"]))
        timings["solve"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        w_q = w_attn.replace(up=res["up"].weight, gate=res["gate"].weight, down=res["down"].weight)
        xs_fp = [mlp_forward(a, w, spec)[0] for a in a_fp]
        xs_q = [mlp_forward(a, w_q, spec)[0] for a in a_q]
        timings["forward"] += time.perf_counter() - t0

        q_layers.append(w_q)
        all_results.append(res)
        layer_reports.append(report)

    final = _final_metrics(xs_fp, xs_q)
    report = {
        "config": cfg.to_dict(),
        "layers": layer_reports,
        "total_block_loss": float(sum(r["block_loss"] for r in layer_reports)),
        "final": final,
    }
    if cfg.timings:
        report["timings_s"] = timings
    qmodel = QuantizedModel(spec, q_layers, all_results, cfg.to_dict())
    return qmodel, report


def _final_metrics(ys_fp, ys_q) -> dict:
    diff2 = sum(float(np.sum((a - b) ** 2)) for a, b in zip(ys_fp, ys_q))
    ref2 = sum(float(np.sum(a * a)) for a in ys_fp)
    count = sum(a.size for a in ys_fp)
    return {
        "mse": diff2 / count,
        "relative_error": float(np.sqrt(diff2 / ref2)) if ref2 > 0 else 0.0,
    }


def eval_reconstruction(spec: ModelSpec, fp_layers, q_layers, batch: CalibrationBatch) -> dict:
    """Block losses, per-linear output errors, and final-output error of a quantized model."""
    _check_inputs(spec, fp_layers, batch)
    _check_inputs(spec, q_layers, batch)
    xs_fp = [s.embeddings.astype(np.float64) for s in batch.samples]
    xs_q = [x.copy() for x in xs_fp]
    layers = []
    for l, (wf, wq) in enumerate(zip(fp_layers, q_layers)):
        entry = {"layer": l, "block_loss": 0.0, "linears": {n: 0.0 for n in LINEARS}}
        nxt_fp, nxt_q = [], []
        for x, xq in zip(xs_fp, xs_q):
            y, tf = layer_forward(x, wf, spec, capture=True)
            yq, tq = layer_forward(xq, wq, spec, capture=True, branch="quantized")
            entry["block_loss"] += float(np.sum((tf.attn_out - tq.attn_out) ** 2))
            for n in LINEARS:
                d = wq.linear(n) @ tq.inputs[n] - wf.linear(n) @ tf.inputs[n]
                entry["linears"][n] += float(np.sum(d * d))
            nxt_fp.append(y)
            nxt_q.append(yq)
        xs_fp, xs_q = nxt_fp, nxt_q
        layers.append(entry)
    return {
        "layers": layers,
        "total_block_loss": float(sum(e["block_loss"] for e in layers)),
        "final": _final_metrics(xs_fp, xs_q),
    }


def layer_diagnostics(
    spec: ModelSpec,
    fp_layers,
    batch: CalibrationBatch,
    layer: int,
    q_layers=None,
    proj: str = "k",
    norm_kind: str = "l1",
    seed: int = 0,
) -> list[dict]:
    """Token projections onto the top-2 directions of one attention linear's weighted Hessian.

    The quantized-path branch runs through ``q_layers`` (the FP model when not
    given, in which case gradients vanish and importance is uniform).
    """
    if proj not in ATTN_LINEARS:
        raise InvalidConfig(f"proj must be one of {ATTN_LINEARS}")
    if not 0 <= layer < spec.num_layers:
        raise InvalidConfig(f"layer must be in [0, {spec.num_layers})")
    q_layers = fp_layers if q_layers is None else q_layers
    _check_inputs(spec, fp_layers, batch)
    _check_inputs(spec, q_layers, batch)
    xs_fp = [s.embeddings.astype(np.float64) for s in batch.samples]
    xs_q = [x.copy() for x in xs_fp]
    for l in range(layer):
        xs_fp = [layer_forward(x, fp_layers[l], spec)[0] for x in xs_fp]
        xs_q = [layer_forward(x, q_layers[l], spec)[0] for x in xs_q]
    w = fp_layers[layer]
    p = np.concatenate([block_backward(x, xq, w, spec)[proj] for x, xq in zip(xs_fp, xs_q)], axis=1)
    g = normalize_importance(gradients_to_importance(p, norm_kind).diag)
    caches = [attention_cache(x, w, spec) for x in xs_q]
    acts = np.concatenate([c.ctx if proj == "o" else c.xn for c in caches], axis=1)
    state = accumulate_hessian(HessianState.empty(spec.d_model, residual=False, weighted=True), acts, None, g)
    return hessian_pca_export(state, acts, batch.concat_roles(), g, seed=seed)


def quantized_tensors(qmodel: QuantizedModel) -> dict:
    tensors = {}
    for l, (w, res) in enumerate(zip(qmodel.layers, qmodel.results)):
        for name in LINEARS:
            tensors[f"layers.{l}.{name}"] = w.linear(name)
            r: QuantizedLayerResult = res[name]
            if r.codes is not None:
                tensors[f"layers.{l}.{name}.codes"] = r.codes.astype(np.uint8)
                tensors[f"layers.{l}.{name}.scales"] = r.scales
                tensors[f"layers.{l}.{name}.zeros"] = r.zeros.astype(np.int32)
                tensors[f"layers.{l}.{name}.g_idx"] = r.g_idx.astype(np.int32)
                tensors[f"layers.{l}.{name}.perm"] = r.perm.astype(np.int32)
        tensors[f"layers.{l}.attn_norm"] = w.attn_norm
        tensors[f"layers.{l}.ffn_norm"] = w.ffn_norm
    return tensors


def save_quantized(path, qmodel: QuantizedModel, meta: dict | None = None) -> None:
    write_container(
        path,
        quantized_tensors(qmodel),
        {"kind": "quantized_model", "spec": qmodel.spec.to_dict(), "config": qmodel.config, **(meta or {})},
    )
