"""Boundary-ambiguity metrics and boundary-aware generation on synthetic long-tailed data."""

from blab.classifier import Classifier, TrainConfig, train
from blab.data import GroupSplit, LabeledDataset, MixtureSpec, make_longtail_mixture, split_groups
from blab.diffusion import GmmScoreModel, GuidanceConfig, NoiseSchedule, linear_schedule
from blab.dbg import DbgConfig, GenerationRecord, PrototypeBank, run_dbg
from blab.vmf import VmfModel, fit_vmf, overlap_degree, vmf_log_density

__version__ = "0.1.0"

__all__ = [
    "Classifier",
    "DbgConfig",
    "GenerationRecord",
    "GmmScoreModel",
    "GroupSplit",
    "GuidanceConfig",
    "LabeledDataset",
    "MixtureSpec",
    "NoiseSchedule",
    "PrototypeBank",
    "TrainConfig",
    "VmfModel",
    "fit_vmf",
    "linear_schedule",
    "make_longtail_mixture",
    "overlap_degree",
    "run_dbg",
    "split_groups",
    "train",
    "vmf_log_density",
]
