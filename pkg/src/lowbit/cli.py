"""Command-line pipeline: score, allocate, tune, quantize, verify, report.

Every subcommand reads the same INI config (plus ``--set section.key=value``
overrides), writes fixed-name JSON outputs into the configured output
directory, and embeds the config digest in everything it writes. All
randomness flows from the single config seed, so rerunning an identical
config reproduces every output byte for byte.

Exit codes: 0 success, 1 failed check or other toolkit error, 2 config
error, 3 infeasible allocation, 4 numeric failure during tuning.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import tempfile
from pathlib import Path

from . import allocator, codecs, sensitivity, tuner
from . import config as cfglib
from .artifact import save_artifact, verify_artifact
from .errors import (ConfigError, ContractError, InfeasibleError,
                     IngestionError, LowbitError, NumericError)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4

SENSITIVITY_FILE = "sensitivity.json"
ASSIGNMENT_FILE = "assignment.json"
TUNED_FILE = "tuned.json"
ARTIFACT_FILE = "artifact.lbq"
METRICS_FILE = "metrics.json"
REPORT_FILE = "report.json"

# the no-tuning baseline: round-to-nearest, no searched scales
PLAIN = tuner.TuneConfig(steps=0, use_scale_init=False)


def _write_json(path: Path, obj: dict) -> None:
    """Atomic, deterministic JSON: sorted keys, no timestamps."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _load_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise ConfigError(f"{what} {path} does not exist")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise IngestionError(f"{what} {path}: {e}") from None


def _check_target(target, options) -> None:
    if not min(options) <= target <= max(options):
        raise ConfigError(f"target_bits {target} outside option range "
                          f"[{min(options)}, {max(options)}]")


def _load_assignment(path: Path, model):
    """(raw dict, assignment, names, target) checked against the model."""
    d = _load_json(path, "assignment file")
    asn, names, target = allocator.assignment_from_dict(d)
    want = [i.name for i in model.quantizable_layers()]
    if names != want:
        raise ContractError(
            f"assignment layers {names} do not match the model's "
            f"quantizable layers {want}")
    return d, asn, names, target


def _quantize(model, names, bits, cal, cfg, tune_cfg, ev):
    plan = tuner.plan_from_assignment(names, bits, cfg.family, cfg.group_size)
    return tuner.quantize_model(model, plan, cal, tune_cfg, eval_batches=ev)


def _tuning_summary(res) -> list:
    return [{"block": b.block, "layers": [l.name for l in b.layers],
             "initial_loss": b.initial_loss, "final_loss": b.final_loss,
             "best_step": b.best_step} for b in res.tuned]


def _tuned_arrays(res) -> dict:
    return {lay.name: {"v": lay.v, "alpha": lay.alpha, "beta": lay.beta}
            for blk in res.tuned for lay in blk.layers}


def _rtn_bits(options, target) -> int:
    """Uniform-precision baseline: widest option that fits the budget."""
    fit = [b for b in options if b <= target]
    if not fit:
        raise InfeasibleError(f"no option in {list(options)} fits "
                              f"target {target}")
    return max(fit)


# ---------------------------------------------------------------------------
# subcommands


def cmd_sensitivity(cfg, args) -> int:
    model, cal = cfglib.build_model(cfg)
    schemes = sensitivity.option_set(cfg.family, cfg.options, cfg.group_size)
    report = sensitivity.build_report(model, schemes, cal)
    d = report.to_dict()
    d["config_digest"] = cfg.digest()
    _write_json(cfg.out_dir / SENSITIVITY_FILE, d)

    labels = report.option_labels()
    width = max(len(l.name) for l in report.layers)
    print(f"{'layer':<{width}}  {'params':>8}  "
          + "  ".join(f"{lb:>12}" for lb in labels))
    for l in report.layers:
        cells = "  ".join(f"{l.scores[lb]:>12.6g}" for lb in labels)
        print(f"{l.name:<{width}}  {l.params:>8}  {cells}")
    print(f"wrote {cfg.out_dir / SENSITIVITY_FILE}")
    return EXIT_OK


def cmd_allocate(cfg, args) -> int:
    rpath = Path(args.report) if args.report else cfg.out_dir / SENSITIVITY_FILE
    report = sensitivity.SensitivityReport.from_dict(
        _load_json(rpath, "sensitivity report"))
    target = allocator.as_budget(args.target) if args.target else cfg.target_bits
    _check_target(target, [s.bits for s in report.options])
    problem = allocator.AllocationProblem.from_report(report, target)
    if args.mode == "dp":
        asn = allocator.allocate_dp(problem)
    else:
        asn = allocator.allocate_heuristic(problem, args.mode)
    allocator.validate_assignment(problem, asn)
    d = asn.to_dict(problem)
    d["config_digest"] = cfg.digest()
    _write_json(cfg.out_dir / ASSIGNMENT_FILE, d)

    for name, lbl in zip(problem.names, asn.choices):
        print(f"{name}: {lbl}")
    print(f"solver {asn.solver}: avg bits {asn.avg_bits} "
          f"(target {target}), objective {asn.objective:.6g}")
    print(f"wrote {cfg.out_dir / ASSIGNMENT_FILE}")
    return EXIT_OK


def cmd_tune(cfg, args) -> int:
    if cfg.tune.steps < 1:
        raise ConfigError("tuning.steps must be >= 1 to tune")
    model, cal = cfglib.build_model(cfg)
    apath = Path(args.assignment) if args.assignment \
        else cfg.out_dir / ASSIGNMENT_FILE
    _, asn, names, _ = _load_assignment(apath, model)
    res = _quantize(model, names, asn.bits, cal, cfg, cfg.tune, None)
    blocks = _tuning_summary(res)
    for b, full in zip(blocks, res.tuned):
        b["history"] = full.history
    d = {"schema": "lowbit/tuning-v1", "config_digest": cfg.digest(),
         "blocks": blocks}
    _write_json(cfg.out_dir / TUNED_FILE, d)

    for b in blocks:
        print(f"block {b['block']}: {b['initial_loss']:.6g} -> "
              f"{b['final_loss']:.6g} (best step {b['best_step']})")
    print(f"wrote {cfg.out_dir / TUNED_FILE}")
    return EXIT_OK


def cmd_quantize(cfg, args) -> int:
    model, cal = cfglib.build_model(cfg)
    ev = cfglib.eval_set(cfg)
    apath = Path(args.assignment) if args.assignment \
        else cfg.out_dir / ASSIGNMENT_FILE
    asn_dict, asn, names, target = _load_assignment(apath, model)
    if target is None:
        target = cfg.target_bits

    fp_loss = model.eval_loss(ev)
    rtn_bits = _rtn_bits(cfg.options, target)
    res_rtn = _quantize(model, names, [rtn_bits] * len(names), cal, cfg,
                        PLAIN, ev)
    res_dl = _quantize(model, names, asn.bits, cal, cfg, PLAIN, ev)
    # steps=0 means no tuning stage at all, searched scales included,
    # which makes the tuned variant collapse onto the dl-only baseline
    tune_cfg = cfg.tune if cfg.tune.steps >= 1 \
        else dataclasses.replace(cfg.tune, use_scale_init=False)
    res_tuned = _quantize(model, names, asn.bits, cal, cfg, tune_cfg, ev)

    losses = {"fp": fp_loss,
              "rtn": res_rtn.metrics["quantized_loss"],
              "dl_only": res_dl.metrics["quantized_loss"],
              "tuned": res_tuned.metrics["quantized_loss"]}
    budget = {"target_bits": str(target), "avg_bits": str(asn.avg_bits),
              "rtn_uniform_bits": rtn_bits}
    summary = _tuning_summary(res_tuned)
    metrics = {"format": "lowbit/metrics-v1", "config_digest": cfg.digest(),
               "budget": budget, "losses": losses, "tuning": summary}

    layers = []
    packed = dict(res_tuned.packed)
    for name, lbl, bits in zip(names, asn.choices, asn.bits):
        info = model.layer_info(name)
        layers.append({"name": name, "params": info.n_params,
                       "bits": bits, "label": lbl,
                       "shape": list(info.shape)})
        if name not in packed:  # stored untouched at 16 bits
            packed[name] = codecs.pack_layer(
                model.params[name], codecs.scheme_for_bits(cfg.family, bits,
                                                           cfg.group_size))
    save_artifact(cfg.out_dir / ARTIFACT_FILE, cfg.to_dict(), asn_dict,
                  layers, {"losses": losses, "budget": budget}, summary,
                  packed, _tuned_arrays(res_tuned))
    _write_json(cfg.out_dir / METRICS_FILE, metrics)

    for k in ("fp", "rtn", "dl_only", "tuned"):
        print(f"{k:>8} eval loss {losses[k]:.6g}")
    print(f"avg bits {asn.avg_bits} (target {target}, rtn uniform {rtn_bits})")
    print(f"wrote {cfg.out_dir / ARTIFACT_FILE}")
    print(f"wrote {cfg.out_dir / METRICS_FILE}")
    return EXIT_OK


def cmd_verify(cfg, args) -> int:
    path = Path(args.artifact) if args.artifact else cfg.out_dir / ARTIFACT_FILE
    if not path.is_file():
        raise ConfigError(f"artifact {path} does not exist")
    problems = verify_artifact(path)
    if problems:
        for p in problems:
            print(f"FAIL {p}")
        return EXIT_FAIL
    print(f"OK {path}")
    return EXIT_OK


def cmd_report(cfg, args) -> int:
    model, cal = cfglib.build_model(cfg)
    ev = cfglib.eval_set(cfg)
    schemes = sensitivity.option_set(cfg.family, cfg.options, cfg.group_size)
    report = sensitivity.build_report(model, schemes, cal)
    problem = allocator.AllocationProblem.from_report(report, cfg.target_bits)
    names = list(problem.names)

    fp_loss = model.eval_loss(ev)
    rows = {}
    solved = {}
    for mode in ("dp", "head", "tail"):
        if mode == "dp":
            asn = allocator.allocate_dp(problem)
        else:
            asn = allocator.allocate_heuristic(problem, mode)
        res = _quantize(model, names, asn.bits, cal, cfg, PLAIN, ev)
        solved[mode] = asn
        rows[mode] = {"solver": asn.solver, "avg_bits": str(asn.avg_bits),
                      "objective": asn.objective, "bits": list(asn.bits),
                      "loss": res.metrics["quantized_loss"]}
    if cfg.tune.steps >= 1:
        asn = solved["dp"]
        res = _quantize(model, names, asn.bits, cal, cfg, cfg.tune, ev)
        rows["tuned"] = {"solver": "dp+tune", "avg_bits": str(asn.avg_bits),
                         "objective": asn.objective, "bits": list(asn.bits),
                         "loss": res.metrics["quantized_loss"]}

    d = {"format": "lowbit/report-v1", "config_digest": cfg.digest(),
         "target_bits": str(cfg.target_bits), "fp_loss": fp_loss,
         "allocations": rows}
    _write_json(cfg.out_dir / REPORT_FILE, d)

    print(f"fp eval loss {fp_loss:.6g} (target {cfg.target_bits})")
    for mode, row in rows.items():
        print(f"{mode:>6}: avg bits {row['avg_bits']}, "
              f"eval loss {row['loss']:.6g}")
    print(f"wrote {cfg.out_dir / REPORT_FILE}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lowbit",
        description="mixed-precision quantization pipeline for toy models")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH",
                        help="INI config file (defaults apply without one)")
        sp.add_argument("--set", action="append", default=[], metavar="S.K=V",
                        dest="overrides", help="override a config field")

    common(sub.add_parser("sensitivity",
                          help="score every layer under every bit option"))

    a = sub.add_parser("allocate", help="solve the bit-allocation problem")
    common(a)
    a.add_argument("--report", metavar="PATH",
                   help=f"sensitivity report (default OUT/{SENSITIVITY_FILE})")
    a.add_argument("--mode", choices=("dp", "head", "tail"), default="dp")
    a.add_argument("--target", metavar="BITS",
                   help="average bits budget, e.g. 8/3 (default from config)")

    t = sub.add_parser("tune", help="tune rounding against block outputs")
    common(t)
    t.add_argument("--assignment", metavar="PATH",
                   help=f"bit assignment (default OUT/{ASSIGNMENT_FILE})")

    q = sub.add_parser("quantize",
                       help="full pipeline: pack weights, compare variants")
    common(q)
    q.add_argument("--assignment", metavar="PATH",
                   help=f"bit assignment (default OUT/{ASSIGNMENT_FILE})")

    v = sub.add_parser("verify", help="check an artifact's integrity")
    common(v)
    v.add_argument("--artifact", metavar="PATH",
                   help=f"artifact file (default OUT/{ARTIFACT_FILE})")

    common(sub.add_parser("report",
                          help="compare allocation strategies end to end"))
    return p


COMMANDS = {
    "sensitivity": cmd_sensitivity,
    "allocate": cmd_allocate,
    "tune": cmd_tune,
    "quantize": cmd_quantize,
    "verify": cmd_verify,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        cfg = cfglib.load_config(args.config, args.overrides)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, IngestionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except LowbitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
