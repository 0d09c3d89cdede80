"""Command-line entry point: ``sensorfusion {synth,run,report,gradcheck}``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 a checked
property (gradient identity or finite-difference check) was violated.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import gradcheck, harness
from .cohort import SynthConfig, generate_synthetic, save_records
from .errors import (ConfigurationError, DataFormatError, DimensionError, LabelError, ParameterError,
                     SensorFusionError)
from .sigproc import make_epochs


EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_PROPERTY = 0, 1, 2, 3
VALIDATION_ERRORS = (ConfigurationError, ParameterError, DataFormatError, LabelError, DimensionError)


def _read_json(path):
    if not path:
        return {}
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON: {e}") from None


def cmd_synth(args):
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = SynthConfig(**d)
    except TypeError as e:
        raise ConfigurationError(f"bad synth config: {e}") from None
    records = generate_synthetic(cfg)
    save_records(records, args.out, seed=cfg.seed, synth_config=cfg)
    pos = total = 0
    for r in records:
        ep = make_epochs(r)
        pos += int(ep.labels.sum())
        total += len(ep.labels)
    print(f"wrote {len(records)} patients to {args.out}")
    print(f"windows: {total}  positive: {pos}  prevalence: {pos / max(total, 1):.4f}")
    return EXIT_OK


def cmd_run(args):
    plan = harness.load_plan(args.config, full_scale=args.full_scale, seed=args.seed)
    data = args.data or os.path.join(args.out, "data")
    if not os.path.exists(os.path.join(data, "manifest.json")):
        raise ConfigurationError(f"no cohort manifest in {data}; run 'synth' first or pass --data")
    failures = harness.run_plan(plan, data, args.out, parallel=args.parallel)
    if failures:
        print(f"{len(failures)} cell(s) failed; rerun to retry them", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(args):
    tables, summary = harness.write_report(args.out)
    print(summary, end="")
    return EXIT_OK


def cmd_gradcheck(args):
    seeds = (args.seed or 0,)
    results = gradcheck.run_all(seeds=seeds, quick=args.quick)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"violation: {r.name} seed={r.seed} {r.metric}={r.max_rel_error:.3e}", file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_PROPERTY if failed else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="sensorfusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--config", help="JSON file of SynthConfig overrides")
    s.add_argument("--out", required=True, help="cohort directory")
    s.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="train and evaluate every cell of an experiment plan")
    r.add_argument("--config", help="JSON experiment plan (defaults to the desk plan)")
    r.add_argument("--out", required=True, help="results directory")
    r.add_argument("--data", help="cohort directory (default: <out>/data)")
    r.add_argument("--parallel", type=int, default=1, help="number of cells run concurrently")
    r.add_argument("--seed", type=int, help="plan seed")
    r.add_argument("--full-scale", action="store_true", help="5 groups + 4 repeats and full-size layers")

    rep = sub.add_parser("report", help="write result tables from finished cells")
    rep.add_argument("--out", required=True, help="results directory")

    g = sub.add_parser("gradcheck", help="finite-difference and shortcut-identity checks")
    g.add_argument("--seed", type=int)
    g.add_argument("--quick", action="store_true", help="fewer identity seeds, sampled graph entries")
    return p


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "report": cmd_report, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "parallel", 1) < 1:
        print("error: --parallel must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (SensorFusionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
