"""Binary morphological neural networks with certified binarization."""

from .bise import BiSEParams, binarize_bise, bise_forward, check_activation, recover_se
from .datasets import DatasetSpec, TargetOp, build_arrays, make_se
from .estimator import BiMoNN
from .lui import LUIParams, binarize_lui, check_lui, lui_forward
from .morphology import BinarySet, StructuringElement, closing, dilate, erode, opening
from .network import (
    BimonnModel,
    BiselLayer,
    NetworkCertificate,
    binarize_network,
    bimonn_forward,
    execute_binarized,
    load_model,
    save_model,
)
from .training import TrainConfig, TrainingDiverged, grad_check, init_model, train

__version__ = "0.1.0"

__all__ = [
    "BiMoNN",
    "BiSEParams",
    "BimonnModel",
    "BinarySet",
    "BiselLayer",
    "DatasetSpec",
    "LUIParams",
    "NetworkCertificate",
    "StructuringElement",
    "TargetOp",
    "TrainConfig",
    "TrainingDiverged",
    "bimonn_forward",
    "binarize_bise",
    "binarize_lui",
    "binarize_network",
    "bise_forward",
    "build_arrays",
    "check_activation",
    "check_lui",
    "closing",
    "dilate",
    "erode",
    "execute_binarized",
    "grad_check",
    "init_model",
    "load_model",
    "lui_forward",
    "make_se",
    "opening",
    "recover_se",
    "save_model",
    "train",
]
