"""Phase-aware single-channel speech enhancement with modulation-domain
Kalman filtering.

The top-level namespace re-exports the pieces most callers need; the
submodules hold the full API.
"""

from modkf.circular import (
    FirstCircularMoment,
    SigmaPointSet,
    VonMises,
    WrappedNormal,
    sigma_points,
)
from modkf.pipeline import EnhancementReport, EnhancerConfig, enhance, metrics
from modkf.priors import Gaussian2, GlobalSpeechPrior
from modkf.stft import FramingConfig, StftGrid, analyze, synthesize
from modkf.update import UpdateVariant

__all__ = [
    "EnhancementReport",
    "EnhancerConfig",
    "FirstCircularMoment",
    "FramingConfig",
    "Gaussian2",
    "GlobalSpeechPrior",
    "SigmaPointSet",
    "StftGrid",
    "UpdateVariant",
    "VonMises",
    "WrappedNormal",
    "analyze",
    "enhance",
    "metrics",
    "sigma_points",
    "synthesize",
]

__version__ = "0.1.0"
