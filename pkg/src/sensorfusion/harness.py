"""Experiment orchestration: plans, seeded sweep cells, resumable runs and reports.

Directory layout written by :func:`run_plan`::

    out/plan.json
    out/cells/<KIND>-<CONFIG>/run<k>/run_record.json
                                    /eval_report.json
                                    /pr_curve.csv
                                    /model.zip
                                    /error.txt   (only when the cell failed)

A cell counts as complete when both JSON files exist.  Runs ``0..groups-1``
use one group each; the remaining runs repeat group 0 with fresh seeds.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import epoch_sets, load_records, make_groups
from .errors import ConfigurationError, DegenerateTestError, MetricError
from .metrics import EvalReport, evaluate, paired_ttest, welch_ttest
from .netgraph import CHANNELS, ArchParams, BaseKind, Topology, assemble
from .trainer import RunRecord, TrainConfig, train

KINDS = ("CNN", "LSTM")
TOPOLOGIES = tuple(f"SIM-{c}" for c in CHANNELS) + ("MIM", "BFM", "BFM_SC")
REFERENCE = "BFM_SC"

# desk budget: small filters and a capped balanced draw per training epoch
DESK_TRAIN = {"max_samples_per_epoch": 512}


def cell_seed(plan_seed, config_id, run_index):
    """Seed of one sweep cell: first 8 bytes of sha256("<seed>|<config>|<run>"), top bit cleared."""
    digest = hashlib.sha256(f"{int(plan_seed)}|{config_id}|{int(run_index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass(frozen=True)
class Cell:
    kind: str
    topology: str
    run: int
    group: int
    seed: int

    @property
    def config_id(self):
        return f"{self.kind}-{self.topology}"

    def path(self, out_dir):
        return os.path.join(out_dir, "cells", self.config_id, f"run{self.run}")


@dataclass
class ExperimentPlan:
    kinds: list = field(default_factory=lambda: list(KINDS))
    topologies: list = field(default_factory=lambda: list(TOPOLOGIES))
    groups: int = 3
    extra_repeats: int = 2
    seed: int = 0
    split_fracs: list = field(default_factory=lambda: [0.3, 0.2, 0.5])
    split_sizes: list | None = None
    group_size: int | None = None
    arch: dict | str = "desk"
    train: dict = field(default_factory=lambda: dict(DESK_TRAIN))

    def __post_init__(self):
        self.kinds = [str(k).upper() for k in self.kinds]
        for k in self.kinds:
            BaseKind(k)
        if not self.kinds or not self.topologies:
            raise ConfigurationError("plan needs at least one kind and one topology")
        for t in self.topologies:
            if t not in TOPOLOGIES:
                raise ConfigurationError(f"unknown topology {t!r}; expected one of {TOPOLOGIES}")
        if len(set(self.topologies)) != len(self.topologies) or len(set(self.kinds)) != len(self.kinds):
            raise ConfigurationError("duplicate kinds or topologies in plan")
        if int(self.groups) < 1 or int(self.extra_repeats) < 0:
            raise ConfigurationError("groups must be >= 1 and extra_repeats >= 0")
        if self.split_sizes is not None and len(self.split_sizes) != 3:
            raise ConfigurationError("split_sizes must list train, validation and test counts")
        self.arch_params()
        self.train_config(0)

    @classmethod
    def desk(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides):
        base = dict(groups=5, extra_repeats=4, arch="full", train={})
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d, full_scale=False):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown plan keys {sorted(unknown)}")
        return cls.full_scale(**d) if full_scale else cls.desk(**d)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @property
    def runs_per_config(self):
        return self.groups + self.extra_repeats

    def config_ids(self):
        return [f"{k}-{t}" for k in self.kinds for t in self.topologies]

    def arch_params(self):
        if self.arch == "desk":
            return ArchParams.desk()
        if self.arch == "full":
            return ArchParams()
        if isinstance(self.arch, dict):
            try:
                return ArchParams(**self.arch)
            except TypeError as e:
                raise ConfigurationError(f"bad arch overrides: {e}") from None
        raise ConfigurationError(f"arch must be 'desk', 'full' or a dict, got {self.arch!r}")

    def train_config(self, seed):
        try:
            return TrainConfig(**{**self.train, "seed": seed})
        except TypeError as e:
            raise ConfigurationError(f"bad train overrides: {e}") from None

    def cells(self):
        out = []
        for kind in self.kinds:
            for topo in self.topologies:
                cid = f"{kind}-{topo}"
                for run in range(self.runs_per_config):
                    group = run if run < self.groups else 0
                    out.append(Cell(kind, topo, run, group, cell_seed(self.seed, cid, run)))
        return out

    def make_groups(self, records):
        return make_groups(records, self.groups, tuple(self.split_fracs), self.group_size,
                           None if self.split_sizes is None else tuple(self.split_sizes))


def load_plan(path=None, full_scale=False, seed=None):
    d = {}
    if path:
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path}: invalid JSON: {e}") from None
    if seed is not None:
        d["seed"] = seed
    return ExperimentPlan.from_dict(d, full_scale=full_scale)


def _write_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cell_complete(cell, out_dir):
    d = cell.path(out_dir)
    return all(os.path.exists(os.path.join(d, f)) for f in ("run_record.json", "eval_report.json"))


def run_cell(plan, cell, records, out_dir, groups=None):
    """Train and evaluate one cell, writing its artifacts.  Returns the EvalReport."""
    d = cell.path(out_dir)
    os.makedirs(d, exist_ok=True)
    groups = groups or plan.make_groups(records)
    tr, va, te = epoch_sets(records, groups[cell.group])
    model = assemble(Topology.parse(cell.topology), cell.kind, plan.arch_params(), cell.seed)
    record = train(model, tr, va, plan.train_config(cell.seed))
    report = evaluate(model, te)
    model.save(os.path.join(d, "model.zip"))
    _write_atomic(os.path.join(d, "pr_curve.csv"), report.curve.to_csv())
    _write_atomic(os.path.join(d, "eval_report.json"), report.to_json())
    # the record goes last: its presence marks the cell as done
    _write_atomic(os.path.join(d, "run_record.json"), record.to_json())
    err = os.path.join(d, "error.txt")
    if os.path.exists(err):
        os.remove(err)
    return report


def _worker(args):
    plan_dict, cell, data_dir, out_dir = args
    plan = ExperimentPlan.from_dict(plan_dict)
    records = load_records(data_dir)
    return _guarded(plan, cell, records, out_dir)


def _guarded(plan, cell, records, out_dir, groups=None):
    t0 = time.perf_counter()
    try:
        report = run_cell(plan, cell, records, out_dir, groups)
        return cell, report.aupr, None, time.perf_counter() - t0
    except Exception as e:  # a failed cell must not stop the sweep
        d = cell.path(out_dir)
        os.makedirs(d, exist_ok=True)
        msg = f"{type(e).__name__}: {e}"
        _write_atomic(os.path.join(d, "error.txt"), msg + "\n\n" + traceback.format_exc())
        return cell, None, msg, time.perf_counter() - t0


def _log(msg):
    print(msg, flush=True)


def run_plan(plan, data_dir, out_dir, parallel=1, log=_log):
    """Execute every missing cell.  Returns the list of ``(cell, error)`` failures."""
    os.makedirs(out_dir, exist_ok=True)
    plan_path = os.path.join(out_dir, "plan.json")
    if os.path.exists(plan_path):
        with open(plan_path) as fh:
            previous = json.load(fh)
        if previous != json.loads(plan.to_json()):
            raise ConfigurationError(f"{out_dir} holds results of a different plan; use a fresh --out")
    else:
        _write_atomic(plan_path, plan.to_json())
    records = load_records(data_dir)
    groups = plan.make_groups(records)
    todo = [c for c in plan.cells() if not cell_complete(c, out_dir)]
    log(f"{len(plan.cells())} cells, {len(plan.cells()) - len(todo)} already complete, {len(todo)} to run")
    failures = []

    def note(result):
        cell, score, err, secs = result
        if err is None:
            log(f"done {cell.config_id} run{cell.run} aupr={score:.4f} ({secs:.1f} s)")
        else:
            log(f"FAILED {cell.config_id} run{cell.run}: {err}")
            failures.append((cell, err))

    if parallel > 1 and len(todo) > 1:
        jobs = [(plan.to_dict(), c, data_dir, out_dir) for c in todo]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            for result in pool.map(_worker, jobs):
                note(result)
    else:
        for c in todo:
            note(_guarded(plan, c, records, out_dir, groups))
    return failures


# --------------------------------------------------------------------------
# reporting


def _fmt(v):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return "n/a"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


@dataclass
class ReportTables:
    performance: list
    robustness: list
    significance: list
    baseline: list
    branches: list
    missing: list

    def files(self):
        return {
            "performance.csv": _csv(self.performance),
            "robustness.csv": _csv(self.robustness),
            "significance.csv": _csv(self.significance),
            "baseline.csv": _csv(self.baseline),
            "branch_aupr.csv": _csv(self.branches),
            "missing.csv": _csv([["config", "run"]] + self.missing),
        }

    def summary(self):
        lines = ["Performance (test AUPR, one run per group)"]
        lines += _text_table(self.performance)
        lines += ["", "Robustness (test AUPR, repeated runs on group 0)"]
        lines += _text_table(self.robustness)
        lines += ["", f"Significance ({REFERENCE} vs each configuration of the same kind, one-sided p)"]
        lines += _text_table(self.significance)
        lines += ["", "Baseline AUPR (test-set prevalence)"]
        lines += _text_table(self.baseline)
        if len(self.branches) > 1:
            lines += ["", f"{REFERENCE} per-branch AUPR"]
            lines += _text_table(self.branches)
        if self.missing:
            lines += ["", "Missing cells: " + ", ".join(f"{c}/run{r}" for c, r in self.missing)]
        return "\n".join(lines) + "\n"


def _text_table(rows):
    cells = [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells if i < len(r)) for i in range(max(map(len, cells)))]
    return ["  ".join(v.ljust(widths[i]) for i, v in enumerate(r)).rstrip() for r in cells]


def _load_cell(cell, out_dir):
    if not cell_complete(cell, out_dir):
        return None
    d = cell.path(out_dir)
    with open(os.path.join(d, "eval_report.json")) as fh:
        report = EvalReport.from_json(fh.read())
    with open(os.path.join(d, "run_record.json")) as fh:
        record = RunRecord.from_json(fh.read())
    return record, report


def _stats(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), (float(np.std(vals, ddof=1)) if len(vals) > 1 else None)


def _test(fn, a, b):
    if any(v is None for v in a + b):
        return None, None
    try:
        r = fn(a, b)
    except (DegenerateTestError, MetricError):
        return None, None
    return r.t, r.p_one_sided


def build_report(out_dir):
    """Assemble the report tables from on-disk cells only (no training)."""
    plan_path = os.path.join(out_dir, "plan.json")
    if not os.path.exists(plan_path):
        raise ConfigurationError(f"{out_dir} has no plan.json; run the sweep first")
    with open(plan_path) as fh:
        plan = ExperimentPlan.from_dict(json.load(fh))
    G, R = plan.groups, plan.extra_repeats
    scores, baseline, branches, missing = {}, {}, [], []
    for cell in plan.cells():
        loaded = _load_cell(cell, out_dir)
        if loaded is None:
            missing.append([cell.config_id, cell.run])
            scores[(cell.config_id, cell.run)] = None
            continue
        _, report = loaded
        scores[(cell.config_id, cell.run)] = report.aupr
        if cell.run < G:
            baseline.setdefault(cell.run, report.baseline_aupr)
        if report.branch_aupr:
            branches.append([cell.config_id, cell.run] + [report.branch_aupr.get(c) for c in CHANNELS])

    complete = [cid for cid in plan.config_ids()
                if all(scores[(cid, r)] is not None for r in range(plan.runs_per_config))]
    if len(complete) < 2:
        raise ConfigurationError(f"need at least two configurations with complete runs, have {len(complete)}")

    perf = [["config"] + [f"group{g}" for g in range(G)] + ["mean", "std"]]
    robust = [["config"] + ["run0"] + [f"run{G + r}" for r in range(R)] + ["mean", "std"]]
    for cid in plan.config_ids():
        by_group = [scores[(cid, g)] for g in range(G)]
        perf.append([cid] + by_group + list(_stats(by_group)))
        repeats = [scores[(cid, 0)]] + [scores[(cid, G + r)] for r in range(R)]
        robust.append([cid] + repeats + list(_stats(repeats)))

    sig = [["reference", "config", "paired_t", "paired_p", "welch_t", "welch_p"]]
    for kind in plan.kinds:
        ref = f"{kind}-{REFERENCE}"
        if REFERENCE not in plan.topologies:
            break
        for topo in plan.topologies:
            cid = f"{kind}-{topo}"
            if cid == ref:
                continue
            pa = _test(paired_ttest, [scores[(ref, g)] for g in range(G)], [scores[(cid, g)] for g in range(G)])
            rep = lambda c: [scores[(c, 0)]] + [scores[(c, G + r)] for r in range(R)]
            wa = _test(welch_ttest, rep(ref), rep(cid))
            sig.append([ref, cid, *pa, *wa])

    base = [["group", "baseline_aupr"]] + [[g, baseline.get(g)] for g in range(G)]
    br = [["config", "run"] + list(CHANNELS)] + branches
    return ReportTables(perf, robust, sig, base, br, missing)


def write_report(out_dir):
    tables = build_report(out_dir)
    report_dir = os.path.join(out_dir, "report")
    os.makedirs(report_dir, exist_ok=True)
    for name, text in tables.files().items():
        _write_atomic(os.path.join(report_dir, name), text)
    summary = tables.summary()
    _write_atomic(os.path.join(report_dir, "summary.txt"), summary)
    return tables, summary
