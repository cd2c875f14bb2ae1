"""Command line interface.

Commands: gradcheck, equiv, flops, scaling, train-toy, eval, bench. Every
command writes its reports (CSV/JSON, plus a PNG rendering unless
--no-figures) into --out-dir.

Exit codes: 0 = pass, 1 = a quantitative acceptance threshold was not met,
2 = usage or configuration error.

An optional JSON config file (--config) supplies defaults using the
snake_case names of the flags; explicit flags override the file. Unknown
keys are rejected by name. Randomized commands require an explicit --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .errors import ConfigError, DivergenceError, FormatError, UsageError
from . import analysis, figures, oracles, toytask
from .layer import DgmnConfig, dgmn_backward, dgmn_forward, randomize_params
from .tensor import derive_seed, rng_fill

_VARIANTS = {
    "da": (True, False, False),
    "dw": (False, True, False),
    "da-dw": (True, True, False),
    "da-ds": (True, False, True),
    "dw-ds": (False, True, True),
    "da-dw-ds": (True, True, True),
}

_DEFAULTS = {
    "gradcheck": dict(eps=1e-5, threshold=1e-5, batch=1, channels=8, height=6,
                      width=6, rates=[1, 2], groups=2, variant="da-dw-ds",
                      nonlinearity="relu", out_dir="reports", no_figures=False,
                      deterministic=False, seed=None),
    "equiv": dict(cases=100, tolerance=1e-9, out_dir="reports", no_figures=False,
                  deterministic=False, seed=None),
    "flops": dict(height=97, width=97, channels=512, rates=[1], groups=4,
                  variant="da-dw", kernel_size=3, out_dir="reports",
                  no_figures=False, deterministic=False),
    "scaling": dict(sizes=[32, 64, 128], channels=512, rates=[1], groups=4,
                    variant="da-dw", kernel_size=3, out_dir="reports",
                    no_figures=False, deterministic=False),
    "train-toy": dict(model="dgmn", steps=260, lr=1.0, momentum=0.9,
                      clip_norm=1.0, batch_size=6, train_count=240,
                      eval_count=200, channels=16, rates=[1, 16, 24], groups=4,
                      variant="da-dw-ds", check="square-acc",
                      square_acc_threshold=0.95, final_loss_threshold=0.05,
                      save_model=None, out_dir="reports", no_figures=False,
                      deterministic=False, seed=None),
    "eval": dict(model_dir=None, eval_count=200, out_dir="reports",
                 no_figures=False, deterministic=False, seed=None),
    "bench": dict(sizes=[24, 48], channels=32, rates=[1, 6], repeats=3,
                  dtype="float64", out_dir="reports", no_figures=False,
                  deterministic=False, seed=None),
}

_REQUIRED = {
    "gradcheck": ("seed",), "equiv": ("seed",), "train-toy": ("seed",),
    "eval": ("seed", "model_dir"), "bench": ("seed",), "flops": (), "scaling": (),
}


def _add_common(sp):
    sp.add_argument("--out-dir", dest="out_dir", help="directory for report files")
    sp.add_argument("--config", help="JSON file with defaults (flags override)")
    sp.add_argument("--no-figures", dest="no_figures", action="store_const",
                    const=True, help="skip PNG rendering")
    sp.add_argument("--deterministic", action="store_const", const=True,
                    help="fixed-order reductions (the only mode implemented)")


def _add_layer_flags(sp, with_spatial=True):
    sp.add_argument("--channels", type=int)
    sp.add_argument("--rates", type=int, action="append",
                    help="sampling rate; repeat for multiple rates")
    sp.add_argument("--groups", type=int)
    sp.add_argument("--variant", choices=sorted(_VARIANTS),
                    help="which dynamic properties to enable")
    if with_spatial:
        sp.add_argument("--height", type=int)
        sp.add_argument("--width", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgmn", description="dynamic sampled message passing: checks, "
        "cost reports, and the toy long-range task")
    sub = parser.add_subparsers(dest="command")

    sp = sub.add_parser("gradcheck", help="finite-difference check of the layer")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--nonlinearity", choices=("relu", "identity"))
    _add_layer_flags(sp)
    _add_common(sp)

    sp = sub.add_parser("equiv", help="vectorized vs naive message aggregation")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cases", type=int)
    sp.add_argument("--tolerance", type=float)
    _add_common(sp)

    sp = sub.add_parser("flops", help="parameter and FLOP report")
    _add_layer_flags(sp)
    sp.add_argument("--kernel-size", dest="kernel_size", type=int)
    _add_common(sp)

    sp = sub.add_parser("scaling", help="cost scaling versus image size")
    sp.add_argument("--sizes", type=int, action="append",
                    help="square side length; repeat for multiple sizes")
    _add_layer_flags(sp, with_spatial=False)
    sp.add_argument("--kernel-size", dest="kernel_size", type=int)
    _add_common(sp)

    sp = sub.add_parser("train-toy", help="train on the synthetic long-range task")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--model", choices=toytask.TrainConfig.MODELS)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--clip-norm", dest="clip_norm", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--train-count", dest="train_count", type=int)
    sp.add_argument("--eval-count", dest="eval_count", type=int)
    sp.add_argument("--check", choices=("square-acc", "final-loss"),
                    help="which threshold decides the exit code")
    sp.add_argument("--square-acc-threshold", dest="square_acc_threshold", type=float)
    sp.add_argument("--final-loss-threshold", dest="final_loss_threshold", type=float)
    sp.add_argument("--save-model", dest="save_model", help="bundle directory")
    _add_layer_flags(sp, with_spatial=False)
    _add_common(sp)

    sp = sub.add_parser("eval", help="evaluate a saved toy model")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--model-dir", dest="model_dir")
    sp.add_argument("--eval-count", dest="eval_count", type=int)
    _add_common(sp)

    sp = sub.add_parser("bench", help="timing microbenchmarks (informational)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--sizes", type=int, action="append")
    sp.add_argument("--channels", type=int)
    sp.add_argument("--rates", type=int, action="append")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--dtype", choices=("float64", "float32"))
    _add_common(sp)
    return parser


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """Layer builtin defaults, config-file values, then explicit flags."""
    opts = dict(_DEFAULTS[command])
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                file_opts = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(file_opts, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in file_opts.items():
            if key not in opts:
                raise ConfigError(f"unknown config key {key!r} for command {command}")
            opts[key] = value
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None:
            opts[key] = value
    for key in _REQUIRED[command]:
        if opts.get(key) is None:
            flag = "--" + key.replace("_", "-")
            raise ConfigError(f"{command} requires {flag}")
    return opts


def _layer_config(opts: dict) -> DgmnConfig:
    da, dw, ds = _VARIANTS[opts["variant"]]
    return DgmnConfig(channels=opts["channels"], rates=opts["rates"],
                      kernel_size=opts.get("kernel_size", 3), groups=opts["groups"],
                      enable_da=da, enable_dw=dw, enable_ds=ds,
                      nonlinearity=opts.get("nonlinearity", "relu"))


def _outdir(opts: dict) -> str:
    os.makedirs(opts["out_dir"], exist_ok=True)
    return opts["out_dir"]


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _cmd_gradcheck(opts) -> int:
    out = _outdir(opts)
    cfg = _layer_config(opts)
    report, seed_used = oracles.layer_gradcheck(
        cfg, seed=opts["seed"], batch=opts["batch"], height=opts["height"],
        width=opts["width"], eps=opts["eps"], threshold=opts["threshold"])
    d = report.to_json_dict()
    d["seed"] = opts["seed"]
    d["seed_used"] = seed_used
    d["config"] = cfg.to_dict()
    analysis.write_json(d, os.path.join(out, "gradcheck.json"))
    analysis.write_csv_text(report.to_csv_text(), os.path.join(out, "gradcheck.csv"))
    if not opts["no_figures"]:
        figures.plot_gradcheck(report, os.path.join(out, "gradcheck.png"))
    print(f"gradcheck: max rel err {report.worst:.3e} over {len(report.rows)} "
          f"tensors ({'PASS' if report.passed else 'FAIL'})")
    return 0 if report.passed else 1


def _cmd_equiv(opts) -> int:
    out = _outdir(opts)
    errors = oracles.dmc_equivalence_errors(opts["seed"], opts["cases"])
    worst = max(errors)
    passed = worst < opts["tolerance"]
    d = {"cases": opts["cases"], "seed": opts["seed"], "tolerance": opts["tolerance"],
         "max_abs_error": worst, "passed": passed, "per_case": errors}
    analysis.write_json(d, os.path.join(out, "equiv.json"))
    lines = ["case,max_abs_error"] + [f"{i},{e!r}" for i, e in enumerate(errors)]
    analysis.write_csv_text("\n".join(lines) + "\n", os.path.join(out, "equiv.csv"))
    if not opts["no_figures"]:
        figures.plot_equiv(errors, opts["tolerance"], os.path.join(out, "equiv.png"))
    print(f"equiv: max |vectorized - naive| = {worst:.3e} over {opts['cases']} "
          f"cases ({'PASS' if passed else 'FAIL'})")
    return 0 if passed else 1


def _cmd_flops(opts) -> int:
    out = _outdir(opts)
    cfg = _layer_config(opts)
    h, w = opts["height"], opts["width"]
    dg = analysis.count_flops(cfg, h, w)
    nl = analysis.nonlocal_cost(cfg.channels, h, w)
    ratios = {
        "flops_ratio": dg.total_macs / nl.total_macs,
        "params_ratio": dg.total_params / nl.total_params,
    }
    d = {"dgmn": dg.to_json_dict(), "nonlocal": nl.to_json_dict(), "ratios": ratios}
    analysis.write_json(d, os.path.join(out, "flops.json"))
    analysis.write_csv_text(dg.to_csv_text(), os.path.join(out, "flops.csv"))
    analysis.write_csv_text(nl.to_csv_text(), os.path.join(out, "nonlocal_flops.csv"))
    if not opts["no_figures"]:
        figures.plot_cost(dg, nl, os.path.join(out, "flops.png"))
    print(f"flops: layer {dg.total_macs / 1e9:.3f} GMACs / {dg.total_params / 1e6:.3f} M "
          f"params; dense reference {nl.total_macs / 1e9:.3f} GMACs / "
          f"{nl.total_params / 1e6:.3f} M params; "
          f"ratios {ratios['flops_ratio']:.3f} / {ratios['params_ratio']:.3f}")
    return 0


def _cmd_scaling(opts) -> int:
    out = _outdir(opts)
    cfg = _layer_config(opts)
    report = analysis.scaling_report(cfg, opts["sizes"])
    analysis.write_json(report, os.path.join(out, "scaling.json"))
    analysis.write_csv_text(report.to_csv_text(), os.path.join(out, "scaling.csv"))
    if not opts["no_figures"]:
        figures.plot_scaling(report, os.path.join(out, "scaling.png"))
    print(f"scaling: layer slope {report.dgmn_slope:.3f}, dense attention slope "
          f"{report.nonlocal_attention_slope:.3f}")
    return 0


def _cmd_train_toy(opts) -> int:
    out = _outdir(opts)
    cfg = toytask.TrainConfig(steps=opts["steps"], lr=opts["lr"],
                              momentum=opts["momentum"], clip_norm=opts["clip_norm"],
                              batch_size=opts["batch_size"], seed=opts["seed"],
                              model=opts["model"], dgmn=_layer_config(opts))
    train_data = toytask.make_context_dataset(derive_seed(opts["seed"], "train"),
                                              opts["train_count"])
    eval_data = toytask.make_context_dataset(derive_seed(opts["seed"], "eval"),
                                             opts["eval_count"])
    model, curve = toytask.train_loop(cfg, train_data)
    metrics = toytask.evaluate(model, eval_data)
    final_loss = curve[-1].loss
    d = metrics.to_json_dict()
    d.update(final_loss=final_loss, model=opts["model"], steps=opts["steps"],
             train_count=opts["train_count"], eval_count=opts["eval_count"],
             seed=opts["seed"])
    analysis.write_csv_text(toytask.curve_to_csv_text(curve),
                            os.path.join(out, "curve.csv"))
    toytask.write_metrics_json(d, os.path.join(out, "metrics.json"))
    if not opts["no_figures"]:
        figures.plot_curve(curve, os.path.join(out, "training.png"))
    if opts["save_model"]:
        toytask.save_model(opts["save_model"], model)
    if opts["check"] == "square-acc":
        passed = metrics.square_accuracy >= opts["square_acc_threshold"]
        verdict = (f"square accuracy {metrics.square_accuracy:.3f} "
                   f"(threshold {opts['square_acc_threshold']})")
    else:
        passed = final_loss < opts["final_loss_threshold"]
        verdict = f"final loss {final_loss:.4f} (threshold {opts['final_loss_threshold']})"
    print(f"train-toy[{opts['model']}]: {verdict} -> {'PASS' if passed else 'FAIL'}")
    return 0 if passed else 1


def _cmd_eval(opts) -> int:
    out = _outdir(opts)
    model = toytask.load_model(opts["model_dir"])
    data = toytask.make_context_dataset(derive_seed(opts["seed"], "eval"),
                                        opts["eval_count"])
    metrics = toytask.evaluate(model, data)
    d = metrics.to_json_dict()
    d.update(eval_count=opts["eval_count"], seed=opts["seed"])
    toytask.write_metrics_json(d, os.path.join(out, "metrics.json"))
    print(f"eval: square accuracy {metrics.square_accuracy:.3f}, "
          f"mean IoU {metrics.mean_iou:.3f}")
    return 0


def _cmd_bench(opts) -> int:
    out = _outdir(opts)
    dtype = np.float32 if opts["dtype"] == "float32" else np.float64
    rows = []
    for size in opts["sizes"]:
        cfg = DgmnConfig(channels=opts["channels"], rates=opts["rates"], groups=4)
        params = randomize_params(cfg, derive_seed(opts["seed"], f"bench{size}"))
        feat = rng_fill((1, cfg.channels, size, size),
                        derive_seed(opts["seed"], f"input{size}"), "normal")
        if dtype is np.float32:
            feat = feat.astype(np.float32).astype(np.float64)
        best_f = best_b = float("inf")
        for _ in range(opts["repeats"]):
            t0 = time.perf_counter()
            hidden, cache = dgmn_forward(feat, params, cfg)
            t1 = time.perf_counter()
            dgmn_backward(np.ones_like(hidden), cache)
            t2 = time.perf_counter()
            best_f = min(best_f, t1 - t0)
            best_b = min(best_b, t2 - t1)
        rows.append((f"forward_{size}x{size}", best_f))
        rows.append((f"backward_{size}x{size}", best_b))
    lines = ["label,seconds"] + [f"{label},{sec!r}" for label, sec in rows]
    analysis.write_csv_text("\n".join(lines) + "\n", os.path.join(out, "bench.csv"))
    if not opts["no_figures"]:
        figures.plot_bench(rows, os.path.join(out, "bench.png"))
    for label, sec in rows:
        print(f"bench: {label} {sec * 1e3:.1f} ms")
    return 0


_HANDLERS = {
    "gradcheck": _cmd_gradcheck, "equiv": _cmd_equiv, "flops": _cmd_flops,
    "scaling": _cmd_scaling, "train-toy": _cmd_train_toy, "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        opts = _resolve(args.command, args)
        return _HANDLERS[args.command](opts)
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
