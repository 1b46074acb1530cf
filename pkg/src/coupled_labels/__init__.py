"""Desk-scale laboratory for sparse label-coupling refinement in multilabel
classification: stratified folds, asymmetric losses, a trainable label graph,
and the evaluation stack around them."""

from .datamodel import (
    ConfigError,
    CoupledLabelsError,
    DataFormatError,
    Dataset,
    ExperimentConfig,
    config_from_dict,
    load_dataset,
    save_dataset,
    validate_config,
)

__all__ = [
    "ConfigError",
    "CoupledLabelsError",
    "DataFormatError",
    "Dataset",
    "ExperimentConfig",
    "config_from_dict",
    "load_dataset",
    "save_dataset",
    "validate_config",
]

__version__ = "0.1.0"
