"""A two-configuration sweep through the harness, then the report tables.

Equivalent to the CLI sequence

    sensorfusion synth --out DIR/data
    sensorfusion run --config plan.json --out DIR --data DIR/data
    sensorfusion report --out DIR

but with a cohort and plan small enough to finish in about a minute.
"""
import sys
import tempfile

from sensorfusion import harness
from sensorfusion.cohort import SynthConfig, generate_synthetic, save_records

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="sweep_")
cfg = SynthConfig(patients=12, duration_s=600)
save_records(generate_synthetic(cfg), f"{out}/data", seed=cfg.seed, synth_config=cfg)

plan = harness.ExperimentPlan.from_dict({
    "kinds": ["CNN"], "topologies": ["SIM-sao2", "BFM_SC"], "groups": 2, "extra_repeats": 1,
    "split_sizes": [3, 1, 2], "train": {"max_epochs": 3, "max_samples_per_epoch": 256},
})
harness.run_plan(plan, f"{out}/data", out)
_, summary = harness.write_report(out)
print()
print(summary)
