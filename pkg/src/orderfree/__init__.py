"""Order-free multi-label sequence prediction.

A soft-attention LSTM that emits, at every step, the not-yet-predicted label
it is most confident about, trained against the full label vector so no label
order has to be fixed in advance. Inference is a candidate-pool beam search
over label sequences. Everything runs on a small numpy tape with
finite-difference verification.
"""

from .autodiff import Tape, Tensor, backward, grad_check
from .data import DatasetManifest, GeneratorConfig, Instance, generate_dataset, load_dataset, save_dataset
from .decode import BeamConfig, CandidatePool, PredictionPath, beam_search, greedy_decode
from .metrics import evaluate_sets, f1, format_report_line
from .model import FeatureMaps, ModelDims, ModelParams, init_params, load_checkpoint, save_checkpoint, unroll
from .train import AdamState, TrainConfig, train_two_phase, tune_threshold

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "DatasetManifest",
    "GeneratorConfig",
    "Instance",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "BeamConfig",
    "CandidatePool",
    "PredictionPath",
    "beam_search",
    "greedy_decode",
    "evaluate_sets",
    "f1",
    "format_report_line",
    "FeatureMaps",
    "ModelDims",
    "ModelParams",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "unroll",
    "AdamState",
    "TrainConfig",
    "train_two_phase",
    "tune_threshold",
    "__version__",
]
