"""Command-line front end: ``vlmq <subcommand> ...``.

Exit codes: 0 ok, 2 validation, 3 numerical failure, 4 IO.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .calib import generate_batch
from .checks import SUITES, run_suite
from .container import dumps_json, ensure_parent, load_batch, load_model, save_batch, save_model
from .errors import ContainerError, InvalidConfig, InvalidSpec, VLMQError
from .model import ATTN_LINEARS, ModelSpec, generate_model
from .pipeline import (
    PipelineConfig,
    eval_reconstruction,
    layer_diagnostics,
    quantize_model,
    save_quantized,
)
from .solver import SolveConfig

EXIT_OK, EXIT_FAIL, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4
BIAS_CHOICES = {"qkvo": "qkvo", "qkv": "qkv", "none": ""}


def _digest(path) -> str:
    """SHA-256 over a container's manifest and payload."""
    h = hashlib.sha256()
    for part in ("manifest.json", "data.bin"):
        h.update((Path(path) / part).read_bytes())
    return h.hexdigest()


def _write_report(path, report: dict) -> None:
    ensure_parent(path)
    Path(path).write_text(dumps_json(report))


def _load_spec(text: str) -> ModelSpec:
    p = Path(text)
    raw = p.read_text() if p.is_file() else text
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"spec is neither a readable file nor valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidSpec("spec JSON must be an object")
    return ModelSpec.from_dict(data)


def _parse_manual_li(text: str) -> tuple[float, float]:
    try:
        ratio, value = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise InvalidConfig(f"--manual-li expects 'ratio,value', got {text!r}") from exc
    return ratio, value


def cmd_gen_model(args) -> int:
    spec = _load_spec(args.spec)
    if args.seed is not None:
        spec = ModelSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    save_model(args.out, spec, generate_model(spec))
    return EXIT_OK


def cmd_gen_calib(args) -> int:
    spec, _ = load_model(args.model)
    batch = generate_batch(spec, args.samples, args.text, args.vision, args.redundancy, seed=args.seed)
    meta = {
        "generator": {
            "samples": args.samples,
            "text": args.text,
            "vision": args.vision,
            "redundancy": args.redundancy,
            "seed": args.seed,
        }
    }
    save_batch(args.out, batch, meta)
    return EXIT_OK


def build_config(args) -> PipelineConfig:
    bits = None if args.bits == 16 else args.bits
    solve = SolveConfig(
        method=args.method,
        precursor=args.precursor,
        bits=bits,
        group_size=None if args.group_size < 1 else args.group_size,
        act_order=args.act_order,
        damp=args.damp,
    )
    source, ratio, value = "gradient", 0.0, 1.0
    if args.manual_li is not None:
        source = "manual"
        ratio, value = _parse_manual_li(args.manual_li)
    return PipelineConfig(
        solve=solve,
        bias_layers=frozenset(BIAS_CHOICES[args.bias_layers]),
        norm_kind=args.importance_norm,
        importance_source=source,
        li_ratio=ratio,
        li_value=value,
        seed=args.seed,
        timings=args.timings,
        pca=args.pca,
    )


def cmd_quantize(args) -> int:
    cfg = build_config(args)
    spec, layers = load_model(args.model)
    batch = load_batch(args.calib)
    qmodel, report = quantize_model(spec, layers, batch, cfg)
    save_quantized(args.out, qmodel)
    report = {
        "command": "quantize",
        "inputs": {
            "model": {"path": args.model, "sha256": _digest(args.model)},
            "calib": {"path": args.calib, "sha256": _digest(args.calib)},
        },
        **report,
    }
    if args.report:
        _write_report(args.report, report)
    return EXIT_OK


def cmd_eval_recon(args) -> int:
    spec, fp_layers = load_model(args.fp)
    q_spec, q_layers = load_model(args.quant)
    if q_spec.to_dict() != spec.to_dict():
        raise InvalidSpec("fp and quantized models have different specs")
    batch = load_batch(args.calib)
    report = {
        "command": "eval-recon",
        "inputs": {k: {"path": p, "sha256": _digest(p)} for k, p in (("fp", args.fp), ("quant", args.quant), ("calib", args.calib))},
        **eval_reconstruction(spec, fp_layers, q_layers, batch),
    }
    _write_report(args.report, report)
    return EXIT_OK


def cmd_diag(args) -> int:
    spec, fp_layers = load_model(args.model)
    q_layers = load_model(args.quant)[1] if args.quant else None
    batch = load_batch(args.calib)
    rows = layer_diagnostics(
        spec, fp_layers, batch, args.layer, q_layers, proj=args.proj, norm_kind=args.importance_norm, seed=args.seed
    )
    ensure_parent(args.out)
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["pc1", "pc2", "modality", "importance"], lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "pc1": repr(r["pc1"]), "pc2": repr(r["pc2"]), "importance": repr(r["importance"])})
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_suite(args.suite, seeds=args.seeds)
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.suite}.{r.name}: {r.passed}/{r.total}")
    failed = sum(not r.ok for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlmq", description="Importance-weighted Hessian PTQ on a toy decoder")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="generate a seeded toy decoder")
    p.add_argument("--spec", required=True, help="spec JSON file or inline JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the seed in the model spec JSON")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-calib", help="generate a synthetic multimodal calibration batch")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--text", type=int, default=8)
    p.add_argument("--vision", type=int, default=40)
    p.add_argument("--redundancy", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_calib)

    p = sub.add_parser("quantize", help="calibrate and quantize a model")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--method", choices=["gptq", "gptaq", "vlmq"], default="vlmq")
    p.add_argument("--precursor", choices=["gptaq", "gptq"], default="gptaq")
    p.add_argument("--bits", type=int, default=3, help="2..8, or 16 to leave weights unquantized")
    p.add_argument("--group-size", type=int, default=-1, help="-1 for per-channel")
    p.add_argument("--act-order", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--damp", type=float, default=0.01)
    p.add_argument("--bias-layers", choices=sorted(BIAS_CHOICES), default="qkvo")
    p.add_argument("--importance-norm", choices=["l1", "l2"], default="l1")
    p.add_argument("--manual-li", default=None, metavar="RATIO,VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timings", action="store_true", help="add wall-clock timings to the report")
    p.add_argument("--pca", action=argparse.BooleanOptionalAction, default=True,
                   help="include per-layer Hessian PCA point sets in the report")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval-recon", help="reconstruction metrics of a quantized model")
    p.add_argument("--fp", required=True)
    p.add_argument("--quant", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("diag", help="Hessian PCA point set as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--quant", default=None, help="quantized model driving the X_hat branch")
    p.add_argument("--proj", choices=list(ATTN_LINEARS), default="k")
    p.add_argument("--importance-norm", choices=["l1", "l2"], default="l1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("check", help="run the oracle verification suites")
    p.add_argument("--suite", choices=["all", *SUITES], default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VLMQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ContainerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
