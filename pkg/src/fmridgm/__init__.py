"""Conditional deep generative model for diagnosing subjects from ROI-wise fMRI series."""

from .data import (
    BalancedSampler,
    ClassLabel,
    Dataset,
    SubjectRecord,
    SynthConfig,
    load_dataset,
    preprocess_dataset,
    save_dataset,
    synth_generate,
)
from .dgm import DgmHyper, DgmModel, TrainLog, contribution_weights, diagnose, posterior, train
from .evaluation import ConfusionCounts, CvConfig, CvReport, MetricReport, confusion, cross_validate, metrics
from .numerics import GaussianPair, RngStream

__version__ = "0.1.0"
