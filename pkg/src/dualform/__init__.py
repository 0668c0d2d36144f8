"""Dual-form sequence mixers and a multi-modal satellite time-series backbone."""

from .errors import DualFormError
from .featmaps import KINDS, RECURRENT_KINDS, TIME_KINDS
from .mixers import MixerConfig, MixerWeights, TokenSequence, mix_parallel, mix_step, state_init

__version__ = "0.1.0"

__all__ = [
    "DualFormError",
    "KINDS",
    "RECURRENT_KINDS",
    "TIME_KINDS",
    "MixerConfig",
    "MixerWeights",
    "TokenSequence",
    "mix_parallel",
    "mix_step",
    "state_init",
]
