"""Multi-property spectrum prediction from cation composition with hierarchical correlation learning."""

from .composition import Composition, ElementTrio, enumerate_simplex_grid, parse_composition, ternary_project
from .curation import DataInstance, SpectraTable, build_instance, identify_data_instances, ingest_spectra
from .model import HCLMPModel, ModelConfig, train
from .transfer import CwganConfig, TransferGenerator, train_cwgan

__all__ = [
    "Composition", "ElementTrio", "enumerate_simplex_grid", "parse_composition", "ternary_project",
    "DataInstance", "SpectraTable", "build_instance", "identify_data_instances", "ingest_spectra",
    "HCLMPModel", "ModelConfig", "train", "CwganConfig", "TransferGenerator", "train_cwgan",
]
