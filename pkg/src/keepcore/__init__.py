"""Importance-guided data augmentation for segmentation.

A frozen oracle network scores image tokens by adversarial vulnerability
(:mod:`keepcore.sage`); training-time augmentation then restores the most
important tokens and may mask unimportant context (:mod:`keepcore.keep`).
"""

from .augment import AugmentSpec
from .keep import KeepConfig, keep_augment
from .oracle import OracleNet, load_weights, save_weights
from .sage import ImportanceMap, SageConfig, anneal, run_sage, sage_step
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["AugmentSpec", "KeepConfig", "keep_augment", "OracleNet", "load_weights", "save_weights",
           "ImportanceMap", "SageConfig", "anneal", "run_sage", "sage_step", "Tape", "Tensor", "backward"]
