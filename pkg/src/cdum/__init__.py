"""Multi-treatment uplift modeling for video duration exposure.

Offline preference model (CPM) with S- and T-learner baselines, an online
interest model (FIC), the decision rule that combines them, uplift metrics,
and a retention simulator for policy comparison.
"""

from .baselines import meta_learner_fit
from .cpm import CpmConfig, CpmModel, cpm_fit
from .data import OfflineDataset, SynthSpec, generate_requests, generate_synth, load_csv, split_811
from .decision import DecisionConfig, assign_treatments, decision_scores
from .fic import FicConfig, FicModel, RequestInstance, build_request_labels, fic_fit
from .metrics import ScoredEvalSet, lift_at_h, qini_auc, uplift_auc, uplift_report
from .simulator import Policy, SimLog, lt_metrics, simulate
from .training import TrainConfig
from .world import SimConfig

__version__ = "0.1.0"

__all__ = [
    "CpmConfig", "CpmModel", "cpm_fit", "OfflineDataset", "SynthSpec", "generate_requests", "generate_synth",
    "load_csv", "split_811", "DecisionConfig", "assign_treatments", "decision_scores", "FicConfig", "FicModel",
    "RequestInstance", "build_request_labels", "fic_fit", "ScoredEvalSet", "lift_at_h", "qini_auc", "uplift_auc",
    "uplift_report", "Policy", "SimLog", "lt_metrics", "simulate", "SimConfig", "TrainConfig", "meta_learner_fit",
]
