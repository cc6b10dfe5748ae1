"""Transducer training and one-best-path knowledge distillation toolkit."""

from .errors import ConfigError, NumericError, StaleTapeError
from .kd import (
    KdConfig,
    KdTargetSet,
    collapse_lattice,
    collapse_node,
    combined_loss,
    fuse_targets,
    kd_collapsed,
    kd_full_lattice,
    kd_one_best,
)
from .lattice import Alignment, OutputLattice, TokenSeq, Vocab, logsumexp, validate_lattice
from .nnet import ModelConfig, TransducerModel, forward_lattice, init_model
from .transducer import transducer_nll, transducer_nll_grad, viterbi_alignment

__all__ = [
    "Alignment",
    "ConfigError",
    "KdConfig",
    "KdTargetSet",
    "ModelConfig",
    "NumericError",
    "OutputLattice",
    "StaleTapeError",
    "TokenSeq",
    "TransducerModel",
    "Vocab",
    "collapse_lattice",
    "collapse_node",
    "combined_loss",
    "forward_lattice",
    "fuse_targets",
    "init_model",
    "kd_collapsed",
    "kd_full_lattice",
    "kd_one_best",
    "logsumexp",
    "transducer_nll",
    "transducer_nll_grad",
    "validate_lattice",
    "viterbi_alignment",
]
