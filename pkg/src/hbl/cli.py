"""Single entry point `hbl` dispatching to all subcommands.

Exit codes: 0 success, 1 usage error (malformed/unknown flags), 2 runtime
error, 3 training diverged (the report is still written). Identical
invocations with the same seed write byte-identical artifacts; the only
exception is the wall-time column of `gemm-bench`, which measures the
clock by design.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, hadamard, kernels, quant, tensor, toytrain
from .errors import DivergedLossError, HblError

_THREAD_CAP: int | None = None


def effective_threads() -> int:
    """Thread cap from HBL_THREADS (0 = auto). Compute is single-threaded,
    so the cap is always honored."""
    if _THREAD_CAP is None or _THREAD_CAP == 0:
        return 1
    return min(_THREAD_CAP, 1)


class _Parser(argparse.ArgumentParser):
    """argparse with the usage-error exit code pinned to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="hbl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("hadamard", help="orthonormal transform over the last axis")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument(
        "--inverse",
        action="store_true",
        help="apply the inverse transform (identical computation; the transform is self-inverse)",
    )

    p = sub.add_parser("quantize", help="quantize a tensor file")
    p.add_argument("--mode", required=True, choices=["w1.58", "a8", "a4", "kv4", "kv3"])
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    p.add_argument("--dequant", help="also write the dequantized tensor here")
    p.add_argument("--scales", help="scale sidecar path (default: OUT.scales.bnt)")
    p.add_argument(
        "--bos-mask",
        help="real32 0/1 per-token tensor; flagged tokens keep 8 bits (kv modes)",
    )

    p = sub.add_parser("gemm-bench", help="time the packed integer GEMM")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--act-bits", type=int, required=True, choices=[4, 8])
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--csv", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("stats", help="distribution statistics of a tensor")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--json", action="store_true", help="emit JSON (the only format)")
    p.add_argument("--out", help="write the JSON here instead of stdout")

    p = sub.add_parser("hist", help="histogram of a tensor")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--bins", type=int, required=True)
    p.add_argument("--min", type=float, required=True, dest="lo")
    p.add_argument("--max", type=float, required=True, dest="hi")
    p.add_argument("--csv", required=True)

    p = sub.add_parser(
        "rotate-compare", help="quantization error with vs without the rotation"
    )
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--bits", type=int, required=True, choices=[4, 8])
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", help="write the JSON here instead of stdout")

    p = sub.add_parser("train-toy", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True, choices=["a8", "a4"])
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("ablation", help="three-way rotation ablation at a4")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--work-dir", help="where variant runs live (default: OUT_runs)")
    p.add_argument("--seed", type=int, help="override the config seed")

    return parser


def _load_train_config(path: str, seed: int | None) -> toytrain.TrainConfig:
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise HblError(f"config {path} must hold a JSON object")
    known = {f.name for f in dataclasses.fields(toytrain.TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise HblError(f"unknown config keys: {sorted(unknown)}")
    if seed is not None:
        data["seed"] = seed
    try:
        return toytrain.TrainConfig(**data)
    except (TypeError, ValueError) as e:
        raise HblError(f"bad config {path}: {e}") from e


def _stats_dict(s: diagnostics.DistStats) -> dict:
    return {
        "mean": s.mean,
        "std": s.std,
        "absmax": s.absmax,
        "absmean": s.absmean,
        "excess_kurtosis": s.excess_kurtosis,
        "outlier_ratio": {str(k): v for k, v in s.outlier_ratio.items()},
    }


def _emit_json(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _cmd_hadamard(args) -> int:
    t = tensor.load(args.infile)
    plan = hadamard.plan_for(t.shape[-1])
    tensor.save(hadamard.hadamard_forward(t, plan), args.outfile)
    return 0


def _cmd_quantize(args) -> int:
    t = tensor.load(args.infile)
    scales_path = args.scales or (args.outfile + ".scales.bnt")
    if args.mode == "w1.58":
        tw = quant.quantize_weight(t)
        tw.trits.save(args.outfile)
        tensor.save(tensor.from_values([1], [tw.alpha]), scales_path)
        if args.dequant:
            tensor.save(quant.dequantize_weight(tw), args.dequant)
        return 0
    if args.mode == "a8":
        qa = quant.quantize_act_int8(t)
        tensor.write_bnt(
            args.outfile,
            tensor.DtypeCode.INT8,
            (qa.n_tokens, qa.width),
            qa.code_matrix().astype("<i1").tobytes(),
        )
    elif args.mode == "a4":
        qa = quant.quantize_act_int4(t)
        qa.codes.save(args.outfile)
    else:
        bits = 4 if args.mode == "kv4" else 3
        bos = None
        if args.bos_mask:
            bos = tensor.load(args.bos_mask).data.reshape(-1) != 0.0
        qa = quant.quantize_kv_unsigned(t, bits, bos)
        # KV codes can span 0..255 (BOS rows), so they travel as real32
        tensor.save(
            tensor.Tensor.from_array(qa.code_matrix().astype(np.float32)), args.outfile
        )
        tensor.save(
            tensor.Tensor.from_array(qa.bits_per_token.astype(np.float32)),
            args.outfile + ".bits.bnt",
        )
    tensor.save(tensor.Tensor.from_array(qa.scale_per_token), scales_path)
    if args.dequant:
        tensor.save(quant.dequantize(qa), args.dequant)
    return 0


def _cmd_gemm_bench(args) -> int:
    res = kernels.bench_gemm(args.m, args.n, args.k, args.act_bits, args.iters, args.seed)
    with open(args.csv, "w") as f:
        f.write("iter,seconds,checksum,weight_bytes,activation_bytes,bytes_per_output\n")
        for i, sec in enumerate(res.seconds_per_iter):
            f.write(
                f"{i},{sec!r},{res.checksum!r},{res.weight_bytes},"
                f"{res.activation_bytes},{res.bytes_per_output!r}\n"
            )
    return 0


def _cmd_stats(args) -> int:
    t = tensor.load(args.infile)
    _emit_json(_stats_dict(diagnostics.dist_stats(t)), args.out)
    return 0


def _cmd_hist(args) -> int:
    t = tensor.load(args.infile)
    h = diagnostics.histogram(t, args.bins, args.lo, args.hi)
    with open(args.csv, "w") as f:
        f.write("lo,hi,count\n")
        for lo, hi, count in h.rows():
            f.write(f"{lo},{hi},{count}\n")
    return 0


def _cmd_rotate_compare(args) -> int:
    t = tensor.load(args.infile)
    rep = diagnostics.rotate_compare(t, args.bits)
    payload = {
        "bits": rep.bits,
        "mse_direct": rep.mse_direct,
        "mse_rotated": rep.mse_rotated,
        "ratio_direct_over_rotated": rep.ratio,
        "stats_direct": _stats_dict(rep.stats_direct) if rep.stats_direct else None,
        "stats_rotated": _stats_dict(rep.stats_rotated) if rep.stats_rotated else None,
    }
    _emit_json(payload, args.out)
    return 0


def _cmd_train_toy(args) -> int:
    cfg = _load_train_config(args.config, args.seed)
    out_dir = Path(args.out)
    try:
        result = toytrain.train_stage(cfg, args.stage, resume=args.resume, out_dir=out_dir)
    except DivergedLossError as e:
        out_dir.mkdir(parents=True, exist_ok=True)
        partial = toytrain.TrainResult(
            stage=args.stage,
            losses=e.losses,
            lrs=[toytrain.lr_at(cfg, args.stage, i) for i in range(len(e.losses))],
            wds=[toytrain.wd_at(cfg, args.stage)] * len(e.losses),
            checkpoint=None,
            final_loss=float("nan"),
        )
        toytrain.write_curve_csv(out_dir / f"loss_{args.stage}.csv", partial)
        _emit_json(
            {"stage": args.stage, "diverged": True, "diverged_step": e.step},
            str(out_dir / "summary.json"),
        )
        sys.stderr.write(f"training diverged at step {e.step}\n")
        return 3
    _emit_json(
        {
            "stage": result.stage,
            "diverged": False,
            "final_loss": result.final_loss,
            "steps": len(result.losses),
            "checkpoint": result.checkpoint.name,  # relative to the out dir
        },
        str(out_dir / "summary.json"),
    )
    return 0


def _cmd_ablation(args) -> int:
    cfg = _load_train_config(args.config, args.seed)
    work_dir = Path(args.work_dir) if args.work_dir else Path(str(args.out) + "_runs")
    report = toytrain.run_ablation(cfg, work_dir)
    _emit_json(report, args.out)
    return 0


_HANDLERS = {
    "hadamard": _cmd_hadamard,
    "quantize": _cmd_quantize,
    "gemm-bench": _cmd_gemm_bench,
    "stats": _cmd_stats,
    "hist": _cmd_hist,
    "rotate-compare": _cmd_rotate_compare,
    "train-toy": _cmd_train_toy,
    "ablation": _cmd_ablation,
}


def dispatch(argv: list[str]) -> int:
    global _THREAD_CAP
    raw_threads = os.environ.get("HBL_THREADS")
    if raw_threads is not None:
        try:
            cap = int(raw_threads)
            if cap < 0:
                raise ValueError
        except ValueError:
            sys.stderr.write(f"hbl: error: HBL_THREADS must be a non-negative integer, got {raw_threads!r}\n")
            return 1
        _THREAD_CAP = cap
    args = _build_parser().parse_args(argv)
    return _HANDLERS[args.command](args)


def main(argv: list[str] | None = None) -> int:
    try:
        code = dispatch(sys.argv[1:] if argv is None else argv)
    except SystemExit as e:
        code = int(e.code or 0)
    except (HblError, OSError) as e:
        sys.stderr.write(f"hbl: error: {e}\n")
        code = 2
    return code


if __name__ == "__main__":
    sys.exit(main())
