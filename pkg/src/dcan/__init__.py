"""Dual causal adjustment network for debiased multimodal trait regression."""

from .data import Dataset, Demographics, Sample, ScmConfig, generate_scm, load_dataset, save_dataset, split
from .model import DictionaryBank, ModelParams, TrainConfig, build_dictionary_bank, init_params, predict, train

__all__ = [
    "Dataset",
    "Demographics",
    "DictionaryBank",
    "ModelParams",
    "Sample",
    "ScmConfig",
    "TrainConfig",
    "build_dictionary_bank",
    "generate_scm",
    "init_params",
    "load_dataset",
    "predict",
    "save_dataset",
    "split",
    "train",
]

__version__ = "0.1.0"
