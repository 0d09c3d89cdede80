"""Train one desk-size CNN BFM_SC model, compare it with a BFM, then deploy.

Takes a couple of minutes on one core.
"""
import numpy as np

from sensorfusion import (ArchParams, SynthConfig, TrainConfig, Topology, assemble, evaluate,
                          generate_synthetic, make_groups, strip_shortcuts, train)
from sensorfusion.cohort import epoch_sets

records = generate_synthetic(SynthConfig(patients=14, duration_s=600))
group, = make_groups(records, 1, split_sizes=(8, 2, 4))
tr, va, te = epoch_sets(records, group)
cfg = TrainConfig(seed=1, max_epochs=8, max_samples_per_epoch=512)

for topo in ("BFM", "BFM_SC"):
    model = assemble(Topology.parse(topo), "CNN", ArchParams.desk(), seed=1)
    rec = train(model, tr, va, cfg)
    rep = evaluate(model, te)
    print(f"{topo:<7} best epoch {rec.best_epoch}/{rec.epochs_run}  test AUPR {rep.aupr:.4f}  "
          f"(baseline {rep.baseline_aupr:.4f})")

for ch, score in rep.branch_aupr.items():
    print(f"  shortcut head {ch:<8} AUPR {score:.4f}")

deployed = strip_shortcuts(model)
x = te.select(model.channels)
diff = np.max(np.abs(deployed.predict(x) - model.predict(x)))
print(f"shortcuts removed: {model.params.count() - deployed.params.count()} fewer weights, "
      f"max prediction change {diff}")
