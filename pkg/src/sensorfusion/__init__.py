"""Multi-sensor fusion topologies (SIM, MIM, BFM, BFM_SC) for 1-D CNN and LSTM
classifiers, built on a small numpy reverse-mode autodiff engine."""
from .autodiff import Tensor, no_grad
from .cohort import SynthConfig, generate_synthetic, load_records, make_groups, save_records
from .metrics import aupr, baseline_aupr, evaluate, paired_ttest, welch_ttest
from .netgraph import ArchParams, ModelGraph, Topology, assemble, branch_predictions, strip_shortcuts
from .trainer import RunRecord, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "SynthConfig", "generate_synthetic", "load_records", "make_groups", "save_records",
    "aupr", "baseline_aupr", "evaluate", "paired_ttest", "welch_ttest", "ArchParams", "ModelGraph", "Topology",
    "assemble", "branch_predictions", "strip_shortcuts", "RunRecord", "TrainConfig", "train",
]
