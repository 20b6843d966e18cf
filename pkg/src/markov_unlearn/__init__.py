"""Unlearning on a synthetic mixture of Markov chains.

A small numpy autodiff engine, a GPT-2 style decoder, AdamW and the GA /
GradDiff / weighted GradDiff / NPO / SimNPO objectives, with KL-based
evaluation against the generating chains.
"""
from .chains import ChainSpec, DataConfig, SequenceDataset, SequenceSample, build_benchmark, canonical_spec
from .config import ExperimentConfig
from .model import ModelConfig, ModelParams
from .objectives import UnlearnConfig

__version__ = "0.1.0"

__all__ = ["ChainSpec", "DataConfig", "SequenceDataset", "SequenceSample", "build_benchmark",
           "canonical_spec", "ExperimentConfig", "ModelConfig", "ModelParams", "UnlearnConfig"]
