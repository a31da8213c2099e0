"""Abnormal heart sound detection from phonocardiograms.

Pipeline pieces: data windowing and fold planning (data), synthetic corpus
generation (synth), MFCC feature maps (features), a small CNN engine (net),
the model zoo and heuristic segmenter (architectures), cross-validated
training with recording-level voting (evaluate), and Shapley/occlusion
attribution (explain).
"""

from . import (architectures, data, errors, evaluate, explain, features, net,
               synth, tensorio)
from .errors import ConfigError, DataError, PcgError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "architectures", "data", "errors", "evaluate", "explain", "features",
    "net", "synth", "tensorio",
    "ConfigError", "DataError", "PcgError", "ShapeError",
    "__version__",
]
